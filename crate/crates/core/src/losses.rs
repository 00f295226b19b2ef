//! Instance, token and prototype level contrastive objectives.
//!
//! All losses are minibatch averages. Batched inputs carry the batch on
//! axis 0: globals are `[B, d]`, token sequences `[B, n, d]`.

use mgca_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, MgcaError, Result};

/// Rows of unit-norm inputs may deviate from 1 by at most this much.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.1,
            tau2: 0.07,
            tau3: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(config(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(config(format!("{name} must be non-negative, got {l}")));
            }
        }
        Ok(())
    }

    pub fn with_weights(&self, lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ita: f64,
    pub lia: f64,
    pub lta: f64,
    pub cta: f64,
    pub cpa: f64,
    pub total: f64,
}

/// Rejects inputs whose rows along the last axis are not unit length.
pub fn check_unit_rows(x: &Tensor, what: &str) -> Result<()> {
    let d = *x.shape().last().ok_or_else(|| contract(format!("{what} is a scalar")))?;
    for (i, row) in x.data().chunks(d.max(1)).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
            return Err(contract(format!("{what} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `A · Cᵀ` for unit rows; entry `(i, k)` is the cosine of `A_i` and `C_k`.
pub fn similarity_matrix<'t>(a: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    check_unit_rows(&a.value(), "similarity lhs")?;
    check_unit_rows(&c.value(), "similarity rhs")?;
    Ok(a.matmul(c.t()?)?)
}

/// Symmetric in-batch InfoNCE over matched rows of `v` and `t`.
pub fn ita_loss<'t>(v: Var<'t>, t: Var<'t>, tau1: f64) -> Result<Var<'t>> {
    let b = v.shape()[0];
    if b == 0 {
        return Err(MgcaError::Empty("ita batch"));
    }
    let logits = similarity_matrix(v, t)?.scale(1.0 / tau1);
    let image_to_text = logits.log_softmax(1)?.diagonal()?.sum();
    let text_to_image = logits.log_softmax(0)?.diagonal()?.sum();
    Ok(image_to_text.add(text_to_image)?.scale(-1.0 / (2.0 * b as f64)).labeled("ita"))
}

/// Cross-attention matrices `Q, K, V, O`, each `d×d`, applied to column
/// vectors (so row inputs are multiplied by the transpose).
#[derive(Clone, Copy)]
pub struct CrossAttention<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub o: Var<'t>,
}

impl<'t> CrossAttention<'t> {
    pub fn from_bound(p: &crate::params::Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: p.get(&format!("{prefix}.q"))?,
            k: p.get(&format!("{prefix}.k"))?,
            v: p.get(&format!("{prefix}.v"))?,
            o: p.get(&format!("{prefix}.o"))?,
        })
    }
}

/// Applies a `d×d` matrix to every row of `[B, n, d]`.
fn apply<'t>(m: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let d = m.shape()[1];
    if s.len() != 3 || s[2] != d || m.shape()[0] != d {
        return Err(contract(format!(
            "cross-attention expects [B, n, {d}] inputs and square matrices, got {s:?} and {:?}",
            m.shape()
        )));
    }
    Ok(x.reshape(&[s[0] * s[1], d])?.matmul(m.t()?)?.reshape(&s)?)
}

/// Each query row attends over the key/value rows of the same instance.
/// Returns the cross-modal embeddings `[B, n, d]` and attention `[B, n, m]`.
pub fn cross_attend<'t>(queries: Var<'t>, keys_values: Var<'t>, p: CrossAttention<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks) = (queries.shape(), keys_values.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(contract(format!("cross-attention shapes {qs:?} and {ks:?} disagree")));
    }
    let d = qs[2];
    let q = apply(p.q, queries)?;
    let k = apply(p.k, keys_values)?;
    let v = apply(p.v, keys_values)?;
    let alpha = q.bmm(k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt()).softmax(2)?;
    let out = apply(p.o, alpha.bmm(v)?)?;
    Ok((out, alpha))
}

/// Weighted symmetric per-token InfoNCE inside each instance.
///
/// `tokens` `[B, n, d]` has unit rows, `cross` `[B, n, d]` is normalized
/// here, `weights` `[B, n]` must be non-negative with each row summing to
/// `n`.
pub fn local_alignment_loss<'t>(tokens: Var<'t>, cross: Var<'t>, weights: Var<'t>, tau2: f64) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 3 || cross.shape() != s || weights.shape() != [s[0], s[1]] {
        return Err(contract(format!(
            "local alignment shapes disagree: tokens {s:?}, cross {:?}, weights {:?}",
            cross.shape(),
            weights.shape()
        )));
    }
    let (b, n) = (s[0], s[1]);
    if b == 0 || n == 0 {
        return Err(MgcaError::Empty("local alignment tokens"));
    }
    check_unit_rows(&tokens.value(), "local tokens")?;
    let w = weights.value();
    for (i, row) in w.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&x| !(x >= 0.0)) || (sum - n as f64).abs() > 1e-8 {
            return Err(contract(format!("token weights of instance {i} sum to {sum}, expected {n}")));
        }
    }
    let c = cross.l2_normalize(2)?;
    let sim = tokens.bmm(c.transpose_last2()?)?.scale(1.0 / tau2);
    let token_to_cross = sim.log_softmax(2)?.diagonal()?;
    let cross_to_token = sim.log_softmax(1)?.diagonal()?;
    Ok(token_to_cross
        .add(cross_to_token)?
        .mul(weights)?
        .sum()
        .scale(-1.0 / (2.0 * (b * n) as f64)))
}

pub struct CtaOutput<'t> {
    pub lia: Var<'t>,
    pub lta: Var<'t>,
    pub cta: Var<'t>,
    /// Visual queries over text tokens, `[B, S, L]`.
    pub alpha_image_to_text: Var<'t>,
    /// Text queries over visual tokens, `[B, L, S]`.
    pub alpha_text_to_image: Var<'t>,
}

/// Both token-level directions and their mean.
pub fn cta_loss<'t>(
    r_proj: Var<'t>,
    z_proj: Var<'t>,
    w_visual: Var<'t>,
    w_text: Var<'t>,
    image_to_text: CrossAttention<'t>,
    text_to_image: CrossAttention<'t>,
    tau2: f64,
) -> Result<CtaOutput<'t>> {
    let (o, alpha_i2t) = cross_attend(r_proj, z_proj, image_to_text)?;
    let lia = local_alignment_loss(r_proj, o, w_visual, tau2)?.labeled("lia");
    let (o_hat, alpha_t2i) = cross_attend(z_proj, r_proj, text_to_image)?;
    let lta = local_alignment_loss(z_proj, o_hat, w_text, tau2)?.labeled("lta");
    let cta = lia.add(lta)?.scale(0.5).labeled("cta");
    Ok(CtaOutput {
        lia,
        lta,
        cta,
        alpha_image_to_text: alpha_i2t,
        alpha_text_to_image: alpha_t2i,
    })
}

/// Prototype logits `E · Cᵀ / τ3` for unit rows.
pub fn prototype_logits<'t>(e: Var<'t>, c: Var<'t>, tau3: f64) -> Result<Var<'t>> {
    Ok(similarity_matrix(e, c)?.scale(1.0 / tau3))
}

/// Row-wise softmax of the prototype logits.
pub fn prototype_probs<'t>(e: Var<'t>, c: Var<'t>, tau3: f64) -> Result<Var<'t>> {
    Ok(prototype_logits(e, c, tau3)?.softmax(1)?)
}

fn check_rows_sum_to_one(x: &Tensor, what: &str) -> Result<()> {
    let (_, k) = x.dims2()?;
    for (i, row) in x.data().chunks(k.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(contract(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Swapped prediction from log-probabilities. `q_v`, `q_t` are constants.
pub fn cpa_from_log_probs<'t>(log_p_v: Var<'t>, log_p_t: Var<'t>, q_v: &Tensor, q_t: &Tensor) -> Result<Var<'t>> {
    let shape = log_p_v.shape();
    if log_p_t.shape() != shape || q_v.shape() != shape.as_slice() || q_t.shape() != shape.as_slice() {
        return Err(contract(format!("prototype alignment shapes disagree with {shape:?}")));
    }
    let b = shape[0];
    if b == 0 {
        return Err(MgcaError::Empty("prototype alignment batch"));
    }
    check_rows_sum_to_one(q_v, "q_v")?;
    check_rows_sum_to_one(q_t, "q_t")?;
    let tape = log_p_v.tape();
    let text_supervises_image = log_p_v.dot(tape.constant(q_t.clone()))?;
    let image_supervises_text = log_p_t.dot(tape.constant(q_v.clone()))?;
    Ok(text_supervises_image
        .add(image_supervises_text)?
        .scale(-1.0 / (2.0 * b as f64))
        .labeled("cpa"))
}

/// Swapped prediction from probabilities `[B, K]` whose rows sum to one.
/// Entries whose code is zero contribute nothing, so `0 · log 0 = 0`.
pub fn cpa_loss<'t>(p_v: Var<'t>, p_t: Var<'t>, q_v: &Tensor, q_t: &Tensor) -> Result<Var<'t>> {
    check_rows_sum_to_one(&p_v.value(), "p_v")?;
    check_rows_sum_to_one(&p_t.value(), "p_t")?;
    if p_v.shape() != q_t.shape() || p_t.shape() != q_v.shape() {
        return Err(contract("prototype probabilities and codes disagree in shape"));
    }
    let tape = p_v.tape();
    let guarded = |p: Var<'t>, q: &Tensor| -> Result<Var<'t>> {
        let keep = q.map(|x| if x != 0.0 { 1.0 } else { 0.0 });
        let fill = keep.map(|k| 1.0 - k);
        Ok(p.mul(tape.constant(keep))?.add(tape.constant(fill))?.log()?)
    };
    cpa_from_log_probs(guarded(p_v, q_t)?, guarded(p_t, q_v)?, q_v, q_t)
}

/// `λ1·ita + λ2·cta + λ3·cpa` and the value breakdown.
pub fn total_loss<'t>(
    ita: Var<'t>,
    cta: &CtaOutput<'t>,
    cpa: Var<'t>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let total = ita
        .scale(cfg.lambda1)
        .add(cta.cta.scale(cfg.lambda2))?
        .add(cpa.scale(cfg.lambda3))?
        .labeled("total");
    let breakdown = LossBreakdown {
        ita: ita.item(),
        lia: cta.lia.item(),
        lta: cta.lta.item(),
        cta: cta.cta.item(),
        cpa: cpa.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}
