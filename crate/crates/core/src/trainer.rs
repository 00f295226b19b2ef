//! AdamW training loop, learning-rate schedule and checkpoints.
//!
//! # Checkpoint layout (`MGCA-CK1`, little-endian)
//!
//! ```text
//! magic        8 bytes "MGCA-CK1"
//! step         u64
//! epoch        u64   completed epochs; with the seed this fixes the shuffle stream
//! seed         u64
//! config_len   u32, then that many bytes of JSON run config
//! count        u32   number of tensors
//! manifest     count × { name_len u16, name utf-8, rank u8, rank × u32 dims, offset u64 }
//! blobs        f64 values; offsets count from the first blob byte
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`
//! in parameter order.

use std::path::Path;

use mgca_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{init_params, normalize_rows, PROTOTYPES};
use crate::error::{contract, MgcaError, Result};
use crate::losses::LossBreakdown;
use crate::model::{check_compatible, forward, PairBatch};
use crate::params::ParamStore;
use crate::rng::{stream, SplitMix64};
use crate::sinkhorn::check_code_rows;
use crate::synth::{check_magic, ByteReader, Dataset};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGCA-CK1";
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from `init_lr` to `base_lr`, then cosine decay reaching 0
/// at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub init_lr: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &RunConfig, steps_per_epoch: usize) -> Self {
        Self {
            init_lr: cfg.train.init_lr,
            base_lr: cfg.train.base_lr,
            warmup_steps: cfg.train.warmup_epochs * steps_per_epoch,
            total_steps: cfg.train.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.init_lr + (self.base_lr - self.init_lr) * frac;
        }
        let last = self.total_steps.saturating_sub(1);
        if step >= last {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Steps at the start of training during which prototypes stay fixed.
    pub fn freeze_steps(&self, cfg: &RunConfig) -> usize {
        if cfg.train.freeze_prototypes {
            (cfg.train.freeze_fraction * self.warmup_steps as f64).floor() as usize
        } else {
            0
        }
    }
}

/// Learning rate at `step` for a dataset yielding `steps_per_epoch` batches.
pub fn lr_at(step: usize, cfg: &RunConfig, steps_per_epoch: usize) -> f64 {
    Schedule::new(cfg, steps_per_epoch).lr_at(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.encoder, config.train.n_prototypes, config.train.seed)?;
        Ok(Self {
            config: config.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            step: 0,
            epoch: 0,
        })
    }
}

/// Weight decay applies to matrices other than the prototype bank.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() == 2 && name != PROTOTYPES
}

/// One optimization step on `batch` at learning rate `lr`.
pub fn train_step(state: &mut TrainState, batch: &PairBatch, lr: f64, freeze_prototypes: bool) -> Result<LossBreakdown> {
    let cfg = &state.config;
    if batch.len() < 2 {
        return Err(contract(format!("batch of {} cannot provide negatives", batch.len())));
    }
    let tape = Tape::new();
    let bound = state.params.bind(&tape);
    let out = forward(&cfg.encoder, &cfg.loss, &cfg.sinkhorn, &bound, batch, None)?;
    let k = cfg.train.n_prototypes as f64;
    for q in [&out.codes.q_v, &out.codes.q_t] {
        let dev = check_code_rows(q)?;
        if dev > cfg.sinkhorn.convergence_tol * k {
            return Err(contract(format!("code rows deviate from 1 by {dev}")));
        }
    }
    if !out.total.item().is_finite() {
        let tensor = tape
            .first_non_finite()
            .map(|(i, name)| format!("{name} (node {i})"))
            .unwrap_or_else(|| "total".to_string());
        return Err(MgcaError::NonFinite { tensor });
    }
    let grads = tape.backward(out.total)?;
    let breakdown = out.breakdown;

    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    let wd = cfg.train.weight_decay;
    for (i, &var) in bound.vars().iter().enumerate() {
        let name = state.params.names()[i].clone();
        let mut g = grads.get_or_zeros(var);
        g.check_finite(&format!("gradient of {name}"))?;
        let frozen = freeze_prototypes && name == PROTOTYPES;
        if frozen {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let decay = decays(&name, &state.params.tensors()[i]);
        let m = state.adam_m.tensors_mut()[i].data_mut();
        let v = state.adam_v.tensors_mut()[i].data_mut();
        let before = state.params.tensors()[i].clone();
        let theta = state.params.tensors_mut()[i].data_mut();
        for j in 0..theta.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g.data()[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g.data()[j] * g.data()[j];
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            if decay {
                theta[j] -= lr * wd * theta[j];
            }
            theta[j] -= lr * update;
        }
        if name == PROTOTYPES {
            renormalize_changed_rows(&before, &mut state.params.tensors_mut()[i])?;
        }
    }
    state.step += 1;
    Ok(breakdown)
}

fn renormalize_changed_rows(before: &Tensor, after: &mut Tensor) -> Result<()> {
    let (rows, cols) = after.dims2()?;
    for r in 0..rows {
        if before.row(r) != after.row(r) {
            let mut row = Tensor::new([1, cols], after.row(r).to_vec())?;
            normalize_rows(&mut row)?;
            after.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(row.data());
        }
    }
    Ok(())
}

/// Per-epoch averages written as one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub step: u64,
    pub ita: f64,
    pub lia: f64,
    pub lta: f64,
    pub cta: f64,
    pub cpa: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Seeded order of sample indices for `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::for_stream(seed, stream::SHUFFLE, epoch).shuffle(&mut order);
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size
}

/// Trains until `until_epoch` epochs are complete. When `checkpoint_dir`
/// is given and `checkpoint_every` is set, writes `epoch-<n>.ckpt` there.
pub fn run_epochs(
    state: &mut TrainState,
    data: &Dataset,
    until_epoch: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    let cfg = state.config.clone();
    check_compatible(&cfg.encoder, &data.config)?;
    let b = cfg.train.batch_size;
    if data.is_empty() {
        return Err(MgcaError::Empty("training set"));
    }
    let spe = steps_per_epoch(data.len(), b);
    if spe == 0 {
        return Err(contract(format!("training set of {} is smaller than one batch of {b}", data.len())));
    }
    let schedule = Schedule::new(&cfg, spe);
    let freeze_until = schedule.freeze_steps(&cfg);
    let mut log = Vec::new();
    while state.epoch < until_epoch {
        let order = epoch_order(cfg.train.seed, state.epoch, data.len());
        let mut sums = [0.0; 6];
        let mut lr = 0.0;
        for chunk in order.chunks_exact(b) {
            let batch = PairBatch::from_dataset(data, chunk)?;
            lr = schedule.lr_at(state.step as usize);
            let frozen = (state.step as usize) < freeze_until;
            let l = train_step(state, &batch, lr, frozen)?;
            for (s, v) in sums.iter_mut().zip([l.ita, l.lia, l.lta, l.cta, l.cpa, l.total]) {
                *s += v;
            }
        }
        state.epoch += 1;
        let n = spe as f64;
        log.push(EpochMetrics {
            epoch: state.epoch,
            step: state.step,
            ita: sums[0] / n,
            lia: sums[1] / n,
            lta: sums[2] / n,
            cta: sums[3] / n,
            cpa: sums[4] / n,
            total: sums[5] / n,
            lr,
        });
        if let Some(dir) = checkpoint_dir {
            let every = cfg.train.checkpoint_every as u64;
            if every > 0 && state.epoch % every == 0 {
                save_checkpoint(state, dir.join(format!("epoch-{}.ckpt", state.epoch)))?;
            }
        }
    }
    Ok(log)
}

pub struct FitResult {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

/// Initializes from `cfg` and trains for `cfg.train.epochs` epochs.
pub fn fit(data: &Dataset, cfg: &RunConfig) -> Result<FitResult> {
    if data.is_empty() {
        return Err(MgcaError::Empty("training set"));
    }
    let mut state = TrainState::init(cfg)?;
    let metrics = run_epochs(&mut state, data, cfg.train.epochs as u64, None)?;
    Ok(FitResult { state, metrics })
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.config.train.seed.to_le_bytes());
    let cfg = state.config.to_json();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let groups = [("param", &state.params), ("adam.m", &state.adam_m), ("adam.v", &state.adam_v)];
    let count: usize = groups.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let mut offset = 0u64;
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u16).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(t.rank() as u8);
            t.shape().iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
    }
    for (_, store) in groups {
        for t in store.tensors() {
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let mut r = ByteReader::new(buf);
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let step = r.u64("step")?;
    let epoch = r.u64("epoch")?;
    let seed = r.u64("seed")?;
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.bytes(len, "config")?).map_err(|e| r.error(at, format!("config is not utf-8: {e}")))?;
    let config = RunConfig::from_json(text).map_err(|e| r.error(at, e.to_string()))?;
    if config.train.seed != seed {
        return Err(r.error(at, "seed field disagrees with config echo"));
    }

    let reference = init_params(&config.encoder, config.train.n_prototypes, 0)?;
    let at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != 3 * reference.len() {
        return Err(r.error(
            at,
            format!("checkpoint holds {count} tensors, config implies {}", 3 * reference.len()),
        ));
    }
    let mut entries = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for prefix in ["param", "adam.m", "adam.v"] {
        for (name, t) in reference.iter() {
            let at = r.offset();
            let n = r.u16("name length")? as usize;
            let got = String::from_utf8_lossy(r.bytes(n, "tensor name")?).into_owned();
            let want = format!("{prefix}/{name}");
            if got != want {
                return Err(r.error(at, format!("expected tensor {want}, found {got}")));
            }
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != t.shape() {
                return Err(r.error(at, format!("{want} has shape {dims:?}, expected {:?}", t.shape())));
            }
            let offset = r.u64("offset")?;
            if offset != expected_offset {
                return Err(r.error(at, format!("{want} offset {offset}, expected {expected_offset}")));
            }
            expected_offset += 8 * t.numel() as u64;
            entries.push((name.to_string(), dims));
        }
    }
    let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
    for (i, (name, dims)) in entries.into_iter().enumerate() {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64("tensor data")).collect::<Result<Vec<_>>>()?;
        stores[i / reference.len()].push(name, Tensor::new(dims, data)?)?;
    }
    r.finish()?;
    let [params, adam_m, adam_v] = stores;
    Ok(TrainState {
        config,
        params,
        adam_m,
        adam_v,
        step,
        epoch,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
