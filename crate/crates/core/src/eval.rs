//! Retrieval, linear probe, clustering and token-correspondence metrics on
//! a frozen model, plus tabular exports.
//!
//! # Export formats
//!
//! Both exports are UTF-8, tab-separated, with one header line.
//!
//! Attention (`attention.tsv`), one line per keyword token and grid cell:
//! `sample  keyword_pos  token  row  col  alpha  lesion`, where `alpha` is
//! the text-to-visual cross-attention of that keyword on cell `(row, col)`
//! and `lesion` is 0/1. The alphas of one keyword sum to 1.
//!
//! Embeddings (`embeddings.tsv`), one line per sample:
//! `index  label  cluster  v0 .. v{d-1}  t0 .. t{d-1}` with `cluster` the
//! argmax prototype of the image embedding.

use std::fmt::Write as _;
use std::path::Path;

use mgca_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{encode_batch, PROTOTYPES, XATTN_TEXT_TO_IMAGE};
use crate::error::{contract, MgcaError, Result};
use crate::losses::{cross_attend, CrossAttention};
use crate::model::{check_compatible, matmul_nt, PairBatch};
use crate::rng::{stream, SplitMix64};
use crate::synth::Dataset;
use crate::trainer::TrainState;

const CHUNK: usize = 64;

/// Frozen-model outputs for every sample of a dataset.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `[n, d]` unit rows.
    pub v: Tensor,
    pub t: Tensor,
    /// Per sample, text-to-visual attention `L × S`, row-major.
    pub alpha_text_to_image: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn infer(state: &TrainState, data: &Dataset) -> Result<Inference> {
    let cfg = &state.config;
    check_compatible(&cfg.encoder, &data.config)?;
    if data.is_empty() {
        return Err(MgcaError::Empty("evaluation set"));
    }
    let d = cfg.encoder.proj_dim;
    let (l, s) = (cfg.encoder.text_tokens, cfg.encoder.visual_tokens);
    let mut v = Vec::with_capacity(data.len() * d);
    let mut t = Vec::with_capacity(data.len() * d);
    let mut alpha = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let batch = PairBatch::from_dataset(data, chunk)?;
        let tape = Tape::new();
        let p = state.params.bind(&tape);
        let enc = encode_batch(&cfg.encoder, &p, tape.constant(batch.patches.clone()), &batch.tokens)?;
        let (_, a) = cross_attend(enc.z_proj, enc.r_proj, CrossAttention::from_bound(&p, XATTN_TEXT_TO_IMAGE)?)?;
        v.extend_from_slice(enc.v_proj.value().data());
        t.extend_from_slice(enc.t_proj.value().data());
        alpha.extend(a.value().data().chunks(l * s).map(<[f64]>::to_vec));
    }
    Ok(Inference {
        v: Tensor::new([data.len(), d], v)?,
        t: Tensor::new([data.len(), d], t)?,
        alpha_text_to_image: alpha,
        labels: data.labels(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub image_to_text_r1: f64,
    pub image_to_text_r5: f64,
    pub text_to_image_r1: f64,
    pub text_to_image_r5: f64,
    pub r1: f64,
    pub r5: f64,
}

/// Rank of the true partner counted pessimistically: every other candidate
/// scoring at least as high ranks ahead.
fn recall(sim: &Tensor, k: usize, transpose: bool) -> Result<f64> {
    let (n, _) = sim.dims2()?;
    let at = |i: usize, j: usize| if transpose { sim.at2(j, i) } else { sim.at2(i, j) };
    let hits = (0..n)
        .filter(|&i| {
            let truth = at(i, i);
            let ahead = (0..n).filter(|&j| j != i && at(i, j) >= truth).count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Recall@1 and @5 in both directions from a square similarity matrix
/// whose diagonal holds the true pairs.
pub fn retrieval_from_similarity(sim: &Tensor) -> Result<Retrieval> {
    let (n, m) = sim.dims2()?;
    if n == 0 {
        return Err(MgcaError::Empty("retrieval gallery"));
    }
    if n != m {
        return Err(contract(format!("retrieval needs a square similarity matrix, got {n}×{m}")));
    }
    let i1 = recall(sim, 1, false)?;
    let i5 = recall(sim, 5, false)?;
    let t1 = recall(sim, 1, true)?;
    let t5 = recall(sim, 5, true)?;
    Ok(Retrieval {
        image_to_text_r1: i1,
        image_to_text_r5: i5,
        text_to_image_r1: t1,
        text_to_image_r5: t5,
        r1: 0.5 * (i1 + t1),
        r5: 0.5 * (i5 + t5),
    })
}

pub fn retrieval(v: &Tensor, t: &Tensor) -> Result<Retrieval> {
    retrieval_from_similarity(&matmul_nt(v, t)?)
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// from a seeded initialization; returns test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_classes: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let (n, d) = train_x.dims2()?;
    let (nt, dt) = test_x.dims2()?;
    if n != train_y.len() || nt != test_y.len() || d != dt {
        return Err(contract("probe features and labels disagree in shape"));
    }
    if nt == 0 || n == 0 {
        return Err(MgcaError::Empty("probe split"));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= n_classes) {
        return Err(contract("probe label outside class range"));
    }
    let mut present = vec![false; n_classes];
    train_y.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(contract("probe training split holds fewer than two classes"));
    }
    let c = n_classes;
    let mut rng = SplitMix64::for_stream(seed, stream::PROBE, 0);
    let mut w: Vec<f64> = (0..d * c).map(|_| rng.uniform(-0.01, 0.01)).collect();
    let mut b = vec![0.0; c];
    let logits = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..c).map(|k| b[k] + (0..d).map(|j| x[j] * w[j * c + k]).sum::<f64>()).collect()
    };
    for _ in 0..steps {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for i in 0..n {
            let x = train_x.row(i);
            let z = logits(x, &w, &b);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..c {
                let g = e[k] / s - if train_y[i] == k { 1.0 } else { 0.0 };
                gb[k] += g;
                for j in 0..d {
                    gw[j * c + k] += x[j] * g;
                }
            }
        }
        let scale = lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= scale * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= scale * g);
    }
    let correct = (0..nt)
        .filter(|&i| argmax(&logits(test_x.row(i), &w, &b)) == test_y[i])
        .count();
    Ok(correct as f64 / nt as f64)
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI (arithmetic-mean normalization) and purity of hard assignments
/// against labels.
pub fn cluster_metrics(assignments: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    if assignments.len() != labels.len() {
        return Err(contract(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Err(MgcaError::Empty("cluster assignments"));
    }
    let ka = assignments.iter().max().unwrap() + 1;
    let kl = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kl];
    let mut ca = vec![0usize; ka];
    let mut cl = vec![0usize; kl];
    for (&a, &l) in assignments.iter().zip(labels) {
        joint[a * kl + l] += 1;
        ca[a] += 1;
        cl[l] += 1;
    }
    let nf = n as f64;
    let (ha, hl) = (entropy(&ca, nf), entropy(&cl, nf));
    let mut mi = 0.0;
    for a in 0..ka {
        for l in 0..kl {
            let j = joint[a * kl + l];
            if j > 0 {
                let pj = j as f64 / nf;
                mi += pj * (pj / ((ca[a] as f64 / nf) * (cl[l] as f64 / nf))).ln();
            }
        }
    }
    let nmi = if ha + hl == 0.0 {
        1.0
    } else {
        (2.0 * mi / (ha + hl)).clamp(0.0, 1.0)
    };
    let purity = (0..ka)
        .map(|a| (0..kl).map(|l| joint[a * kl + l]).max().unwrap_or(0))
        .sum::<usize>() as f64
        / nf;
    Ok((nmi, purity))
}

/// Argmax prototype of each row of `e` (equivalently of its prototype
/// softmax at any temperature).
pub fn hard_assignments(e: &Tensor, prototypes: &Tensor) -> Result<Vec<usize>> {
    let sim = matmul_nt(e, prototypes)?;
    let (n, _) = sim.dims2()?;
    Ok((0..n).map(|i| argmax(sim.row(i))).collect())
}

/// Mean attention mass that keyword tokens put on lesion cells. `alpha` is
/// `L × S` row-major for one sample.
pub fn keyword_lesion_mass(alpha: &[f64], keyword_mask: &[bool], lesion_mask: &[bool]) -> Result<Vec<f64>> {
    let (l, s) = (keyword_mask.len(), lesion_mask.len());
    if alpha.len() != l * s {
        return Err(contract(format!("attention of length {} is not {l}×{s}", alpha.len())));
    }
    let masses: Vec<f64> = (0..l)
        .filter(|&j| keyword_mask[j])
        .map(|j| (0..s).filter(|&c| lesion_mask[c]).map(|c| alpha[j * s + c]).sum())
        .collect();
    if masses.is_empty() {
        return Err(contract("sample has no keyword tokens"));
    }
    Ok(masses)
}

/// Mean over all keyword tokens of the dataset; chance is `m / S`.
pub fn alignment_score(alphas: &[Vec<f64>], data: &Dataset) -> Result<f64> {
    if alphas.len() != data.len() {
        return Err(contract("one attention map per sample is required"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, s) in alphas.iter().zip(&data.samples) {
        let masses = keyword_lesion_mass(a, &s.keyword_mask, &s.lesion_mask)?;
        count += masses.len();
        total += masses.iter().sum::<f64>();
    }
    if count == 0 {
        return Err(MgcaError::Empty("keyword tokens"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceLevels {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub linear_probe: f64,
    pub nmi: f64,
    pub purity: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: Retrieval,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub linear_probe_accuracy: f64,
    pub nmi: f64,
    pub cluster_purity: f64,
    pub alignment_score: f64,
    pub chance: ChanceLevels,
    pub test_size: usize,
}

impl EvalReport {
    /// Mean of recall@1, probe accuracy, NMI and alignment score.
    pub fn headline_mean(&self) -> f64 {
        (self.recall_at_1 + self.linear_probe_accuracy + self.nmi + self.alignment_score) / 4.0
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("recall_at_1", self.recall_at_1, self.chance.recall_at_1),
            ("recall_at_5", self.recall_at_5, self.chance.recall_at_5),
            ("linear_probe_accuracy", self.linear_probe_accuracy, self.chance.linear_probe),
            ("nmi", self.nmi, self.chance.nmi),
            ("cluster_purity", self.cluster_purity, self.chance.purity),
            ("alignment_score", self.alignment_score, self.chance.alignment),
        ];
        for (k, v, c) in rows {
            let _ = writeln!(s, "{k} = {v:.6}  chance = {c:.6}");
        }
        let r = &self.retrieval;
        let _ = writeln!(
            s,
            "image_to_text_r1 = {:.6}\ntext_to_image_r1 = {:.6}\nimage_to_text_r5 = {:.6}\ntext_to_image_r5 = {:.6}\ntest_size = {}",
            r.image_to_text_r1, r.text_to_image_r1, r.image_to_text_r5, r.text_to_image_r5, self.test_size
        );
        s
    }
}

/// Expected NMI and purity when `assignments` are shuffled against labels.
pub fn shuffled_cluster_chance(assignments: &[usize], labels: &[usize], trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut shuffled = assignments.to_vec();
    let (mut nmi, mut purity) = (0.0, 0.0);
    let trials = trials.max(1);
    for t in 0..trials {
        SplitMix64::for_stream(seed, stream::EVAL, t as u64).shuffle(&mut shuffled);
        let (a, b) = cluster_metrics(&shuffled, labels)?;
        nmi += a;
        purity += b;
    }
    Ok((nmi / trials as f64, purity / trials as f64))
}

/// Full report: retrieval and alignment on `test`, probe trained on `train`
/// and scored on `test`, clusters over `train ∪ test`.
pub fn evaluate(state: &TrainState, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
    let cfg: &RunConfig = &state.config;
    let tr = infer(state, train)?;
    let te = infer(state, test)?;
    let retrieval = retrieval(&te.v, &te.t)?;
    let n_classes = cfg.data.n_classes;
    let probe = linear_probe(
        &tr.v,
        &tr.labels,
        &te.v,
        &te.labels,
        n_classes,
        cfg.eval.probe_steps,
        cfg.eval.probe_lr,
        cfg.train.seed,
    )?;
    let protos = state.params.get(PROTOTYPES)?;
    let mut assignments = hard_assignments(&tr.v, protos)?;
    assignments.extend(hard_assignments(&te.v, protos)?);
    let mut labels = tr.labels.clone();
    labels.extend_from_slice(&te.labels);
    let (nmi, purity) = cluster_metrics(&assignments, &labels)?;
    let (nmi_chance, purity_chance) = shuffled_cluster_chance(&assignments, &labels, cfg.eval.chance_trials, cfg.train.seed)?;
    let alignment = alignment_score(&te.alpha_text_to_image, test)?;

    let n = test.len();
    let mut counts = vec![0usize; n_classes];
    te.labels.iter().for_each(|&y| counts[y] += 1);
    let majority = *counts.iter().max().unwrap() as f64 / n as f64;
    Ok(EvalReport {
        recall_at_1: retrieval.r1,
        recall_at_5: retrieval.r5,
        retrieval,
        linear_probe_accuracy: probe,
        nmi,
        cluster_purity: purity,
        alignment_score: alignment,
        chance: ChanceLevels {
            recall_at_1: 1.0 / n as f64,
            recall_at_5: 5.min(n) as f64 / n as f64,
            linear_probe: majority,
            nmi: nmi_chance,
            purity: purity_chance,
            alignment: cfg.data.lesion_patches as f64 / cfg.data.visual_tokens() as f64,
        },
        test_size: n,
    })
}

/// One attention export row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCell {
    pub sample: usize,
    pub keyword_pos: usize,
    pub token: usize,
    pub row: usize,
    pub col: usize,
    pub alpha: f64,
    pub lesion: bool,
}

pub const ATTENTION_HEADER: &str = "sample\tkeyword_pos\ttoken\trow\tcol\talpha\tlesion";

/// Attention grids of every keyword token of the chosen samples.
pub fn attention_cells(state: &TrainState, data: &Dataset, samples: &[usize]) -> Result<Vec<AttentionCell>> {
    let subset = data.subset(samples);
    let inf = infer(state, &subset)?;
    let g = data.config.grid_side;
    let s = g * g;
    let mut cells = Vec::new();
    for (k, (&idx, sample)) in samples.iter().zip(&subset.samples).enumerate() {
        let alpha = &inf.alpha_text_to_image[k];
        if !sample.keyword_mask.iter().any(|&b| b) {
            return Err(contract(format!("sample {idx} has no keyword tokens")));
        }
        for (j, _) in sample.keyword_mask.iter().enumerate().filter(|(_, &kw)| kw) {
            for c in 0..s {
                cells.push(AttentionCell {
                    sample: idx,
                    keyword_pos: j,
                    token: sample.tokens[j],
                    row: c / g,
                    col: c % g,
                    alpha: alpha[j * s + c],
                    lesion: sample.lesion_mask[c],
                });
            }
        }
    }
    Ok(cells)
}

pub fn write_attention(cells: &[AttentionCell], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from(ATTENTION_HEADER);
    s.push('\n');
    for c in cells {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:e}\t{}",
            c.sample, c.keyword_pos, c.token, c.row, c.col, c.alpha, c.lesion as u8
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| MgcaError::Parse {
            offset: line,
            detail: format!("line {line}: bad or missing {what}"),
        })
}

pub fn read_attention(path: impl AsRef<Path>) -> Result<Vec<AttentionCell>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(ATTENTION_HEADER) {
        return Err(MgcaError::Parse {
            offset: 0,
            detail: "unexpected attention header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let mut f = line.split('\t');
            Ok(AttentionCell {
                sample: parse_field(f.next(), n, "sample")?,
                keyword_pos: parse_field(f.next(), n, "keyword_pos")?,
                token: parse_field(f.next(), n, "token")?,
                row: parse_field(f.next(), n, "row")?,
                col: parse_field(f.next(), n, "col")?,
                alpha: parse_field(f.next(), n, "alpha")?,
                lesion: parse_field::<u8>(f.next(), n, "lesion")? == 1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub labels: Vec<usize>,
    pub clusters: Vec<usize>,
    pub v: Tensor,
    pub t: Tensor,
}

pub fn embedding_table(state: &TrainState, data: &Dataset) -> Result<EmbeddingTable> {
    let inf = infer(state, data)?;
    let clusters = hard_assignments(&inf.v, state.params.get(PROTOTYPES)?)?;
    Ok(EmbeddingTable {
        labels: inf.labels,
        clusters,
        v: inf.v,
        t: inf.t,
    })
}

pub fn write_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let (n, d) = table.v.dims2()?;
    let mut s = String::from("index\tlabel\tcluster");
    (0..d).for_each(|j| {
        let _ = write!(s, "\tv{j}");
    });
    (0..d).for_each(|j| {
        let _ = write!(s, "\tt{j}");
    });
    s.push('\n');
    for i in 0..n {
        let _ = write!(s, "{i}\t{}\t{}", table.labels[i], table.clusters[i]);
        for x in table.v.row(i).iter().chain(table.t.row(i)) {
            let _ = write!(s, "\t{x:e}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| MgcaError::Parse {
        offset: 0,
        detail: "empty embedding file".into(),
    })?;
    let cols = header.split('\t').count();
    if cols < 5 || (cols - 3) % 2 != 0 || !header.starts_with("index\tlabel\tcluster") {
        return Err(MgcaError::Parse {
            offset: 0,
            detail: "unexpected embedding header".into(),
        });
    }
    let d = (cols - 3) / 2;
    let (mut labels, mut clusters, mut v, mut t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let mut f = line.split('\t');
        let _: usize = parse_field(f.next(), n, "index")?;
        labels.push(parse_field(f.next(), n, "label")?);
        clusters.push(parse_field(f.next(), n, "cluster")?);
        for j in 0..2 * d {
            let x: f64 = parse_field(f.next(), n, "embedding value")?;
            if j < d { v.push(x) } else { t.push(x) }
        }
    }
    let rows = labels.len();
    Ok(EmbeddingTable {
        labels,
        clusters,
        v: Tensor::new([rows, d], v)?,
        t: Tensor::new([rows, d], t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn identical_scores_count_as_misses() {
        let sim = Tensor::zeros([3, 3]);
        let r = retrieval_from_similarity(&sim).unwrap();
        assert_eq!(r.r1, 0.0);
        assert_eq!(r.r5, 1.0);
    }

    #[test]
    fn cluster_length_mismatch() {
        assert!(cluster_metrics(&[0, 1], &[0]).is_err());
    }
}
