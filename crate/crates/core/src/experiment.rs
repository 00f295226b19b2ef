//! End-to-end runs: generate, split, train, evaluate; and the objective
//! ablation over a seed suite.

use mgca_tensor::{grad_check, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{init_params, EncoderConfig};
use crate::model::{forward, PairBatch};
use crate::params::Bound;
use crate::rng::{stream, SplitMix64};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::synth::{generate, split, Splits};
use crate::trainer::{run_epochs, EpochMetrics, TrainState};

/// Seeds of the reference suite.
pub const SEED_SUITE: [u64; 3] = [1, 2, 3];

/// Copy of `cfg` with data and training seeds set to `seed`.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.data.seed = seed;
    c.train.seed = seed;
    c
}

pub fn make_splits(cfg: &RunConfig) -> Result<Splits> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    split(&data, cfg.split, cfg.data.seed)
}

pub struct RunOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub trained: EvalReport,
    pub untrained: EvalReport,
}

/// Trains on the train split and evaluates before and after training.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    run_on(cfg, &make_splits(cfg)?)
}

/// [`run`] on given splits instead of data generated from `cfg`.
pub fn run_on(cfg: &RunConfig, splits: &Splits) -> Result<RunOutcome> {
    let mut state = TrainState::init(cfg)?;
    let untrained = evaluate(&state, &splits.train, &splits.test)?;
    let metrics = run_epochs(&mut state, &splits.train, cfg.train.epochs as u64, None)?;
    let trained = evaluate(&state, &splits.train, &splits.test)?;
    Ok(RunOutcome {
        state,
        metrics,
        trained,
        untrained,
    })
}

/// The four objective combinations, in reporting order.
pub const ABLATIONS: [(&str, [f64; 3]); 4] = [
    ("ITA", [1.0, 0.0, 0.0]),
    ("ITA+CTA", [1.0, 1.0, 0.0]),
    ("ITA+CPA", [1.0, 0.0, 1.0]),
    ("ITA+CTA+CPA", [1.0, 1.0, 1.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub recall_at_1: f64,
    pub linear_probe_accuracy: f64,
    pub nmi: f64,
    pub alignment_score: f64,
    /// Mean of the four metrics above.
    pub headline: f64,
}

impl MetricMeans {
    pub fn of(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            recall_at_1: avg(|r| r.recall_at_1),
            linear_probe_accuracy: avg(|r| r.linear_probe_accuracy),
            nmi: avg(|r| r.nmi),
            alignment_score: avg(|r| r.alignment_score),
            headline: avg(EvalReport::headline_mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambdas: [f64; 3],
    pub reports: Vec<EvalReport>,
    pub mean: MetricMeans,
}

impl AblationRow {
    pub fn to_line(&self) -> String {
        let m = &self.mean;
        format!(
            "{}\trecall_at_1={:.4}\tlinear_probe={:.4}\tnmi={:.4}\talignment={:.4}\tmean={:.4}",
            self.name, m.recall_at_1, m.linear_probe_accuracy, m.nmi, m.alignment_score, m.headline
        )
    }
}

/// Trains and evaluates one configuration on every seed.
pub fn seed_suite(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<EvalReport>> {
    seeds.iter().map(|&s| Ok(run(&with_seed(cfg, s))?.trained)).collect()
}

/// Every entry of [`ABLATIONS`] over `seeds`, each seed generating its own
/// data.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablation_rows(base, |cfg| seed_suite(cfg, seeds))
}

/// Every entry of [`ABLATIONS`] on fixed splits; only the training seed
/// varies over `seeds`.
pub fn ablate_on(base: &RunConfig, splits: &Splits, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    ablation_rows(base, |cfg| {
        seeds
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.train.seed = s;
                Ok(run_on(&c, splits)?.trained)
            })
            .collect()
    })
}

fn ablation_rows(base: &RunConfig, reports_for: impl Fn(&RunConfig) -> Result<Vec<EvalReport>>) -> Result<Vec<AblationRow>> {
    ABLATIONS
        .iter()
        .map(|&(name, [l1, l2, l3])| {
            let mut cfg = base.clone();
            cfg.loss = cfg.loss.with_weights(l1, l2, l3);
            let reports = reports_for(&cfg)?;
            Ok(AblationRow {
                name: name.to_string(),
                lambdas: [l1, l2, l3],
                mean: MetricMeans::of(&reports),
                reports,
            })
        })
        .collect()
}

/// Finite-difference check of one loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub term: String,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: String,
    pub entries: usize,
}

/// Shape of the gradient-check instance: batch, visual tokens, text
/// tokens, embedding width, prototypes.
pub const GRADCHECK_SHAPE: (usize, usize, usize, usize, usize) = (4, 6, 5, 8, 4);

/// Checks ITA, CTA, CPA and the total against central differences for every
/// parameter of a small model. The encoder takes `depth`, `heads` (when
/// they divide the width) and `mlp_ratio` from `cfg`; losses and Sinkhorn
/// settings come from `cfg` unchanged. Codes are computed once and held
/// fixed.
pub fn gradient_check(cfg: &RunConfig, seed: u64, step: f64) -> Result<Vec<GradRow>> {
    let (b, s, l, d, k) = GRADCHECK_SHAPE;
    let width = 8;
    let enc = EncoderConfig {
        depth: cfg.encoder.depth,
        heads: if width % cfg.encoder.heads == 0 { cfg.encoder.heads } else { 2 },
        width,
        visual_tokens: s,
        text_tokens: l,
        patch_dim: 3,
        vocab_size: 11,
        proj_dim: d,
        mlp_ratio: cfg.encoder.mlp_ratio,
    };
    let params = init_params(&enc, k, seed)?;
    let mut rng = SplitMix64::for_stream(seed, stream::SAMPLE, 0);
    let batch = PairBatch {
        patches: Tensor::new([b, s, enc.patch_dim], (0..b * s * enc.patch_dim).map(|_| rng.normal()).collect())?,
        tokens: (0..b * l).map(|_| rng.below(enc.vocab_size)).collect(),
        labels: vec![0; b],
    };
    let codes = {
        let tape = Tape::new();
        forward(&enc, &cfg.loss, &cfg.sinkhorn, &params.bind(&tape), &batch, None)?.codes
    };
    let names = params.names().to_vec();
    ["ita", "cta", "cpa", "total"]
        .iter()
        .enumerate()
        .map(|(pick, term)| {
            let report = grad_check(
                |_, vars| {
                    let p = Bound::new(&names, vars);
                    let out = forward(&enc, &cfg.loss, &cfg.sinkhorn, &p, &batch, Some(&codes))
                        .map_err(|e| TensorError::Contract(e.to_string()))?;
                    Ok([out.ita, out.cta.cta, out.cpa, out.total][pick])
                },
                params.tensors(),
                step,
            )?;
            Ok(GradRow {
                term: term.to_string(),
                max_rel_error: report.max_rel_error,
                worst_param: report.worst.map(|(i, _)| names[i].clone()).unwrap_or_default(),
                entries: report.entries_checked,
            })
        })
        .collect()
}
