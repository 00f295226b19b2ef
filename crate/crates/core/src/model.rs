//! Full forward pass: encoders, projections, the three objectives and the
//! Sinkhorn codes that supervise the prototype term.

use mgca_tensor::{Tape, Tensor, Var};

use crate::encoders::{encode_batch, EncodedBatch, EncoderConfig, PROTOTYPES, XATTN_IMAGE_TO_TEXT, XATTN_TEXT_TO_IMAGE};
use crate::error::{config, contract, MgcaError, Result};
use crate::losses::{cpa_from_log_probs, cta_loss, ita_loss, prototype_logits, total_loss, CrossAttention, CtaOutput, LossBreakdown, LossConfig};
use crate::params::Bound;
use crate::sinkhorn::{sinkhorn_assign, SinkhornConfig};
use crate::synth::{Dataset, SynthConfig};

/// Model inputs for a batch of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// `[B, S, p]`
    pub patches: Tensor,
    /// `B × L` ids, row-major.
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(MgcaError::Empty("batch"));
        }
        let c = &data.config;
        let (s, p) = (c.visual_tokens(), c.patch_dim);
        let mut patches = Vec::with_capacity(indices.len() * s * p);
        let mut tokens = Vec::with_capacity(indices.len() * c.text_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = data
                .samples
                .get(i)
                .ok_or_else(|| contract(format!("sample index {i} out of range")))?;
            patches.extend_from_slice(&sample.patches);
            tokens.extend_from_slice(&sample.tokens);
            labels.push(sample.label);
        }
        Ok(Self {
            patches: Tensor::new([indices.len(), s, p], patches)?,
            tokens,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Checks that a dataset's shapes fit an encoder configuration.
pub fn check_compatible(enc: &EncoderConfig, data: &SynthConfig) -> Result<()> {
    let pairs = [
        ("visual_tokens", enc.visual_tokens, data.visual_tokens()),
        ("text_tokens", enc.text_tokens, data.text_len),
        ("patch_dim", enc.patch_dim, data.patch_dim),
        ("vocab_size", enc.vocab_size, data.vocab_size),
    ];
    for (name, e, d) in pairs {
        if e != d {
            return Err(config(format!("encoder {name} = {e} but dataset provides {d}")));
        }
    }
    Ok(())
}

/// Soft cluster codes for both modalities, `[B, K]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Codes {
    pub q_v: Tensor,
    pub q_t: Tensor,
}

pub struct ForwardOutput<'t> {
    pub encoded: EncodedBatch<'t>,
    pub cta: CtaOutput<'t>,
    pub ita: Var<'t>,
    pub cpa: Var<'t>,
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub codes: Codes,
}

/// `a · bᵀ` on plain rank-2 tensors.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(contract(format!("cannot multiply {:?} by transpose of {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::new([m, n], out)?)
}

/// Sinkhorn codes from the current projected globals and prototypes.
pub fn compute_codes(v_proj: &Tensor, t_proj: &Tensor, prototypes: &Tensor, sk: &SinkhornConfig) -> Result<Codes> {
    let q_v = sinkhorn_assign(&matmul_nt(v_proj, prototypes)?, sk)?.q;
    let q_t = sinkhorn_assign(&matmul_nt(t_proj, prototypes)?, sk)?.q;
    Ok(Codes { q_v, q_t })
}

/// Runs the whole objective. When `codes` is `None` they are computed from
/// this forward pass; either way they enter the loss as constants.
pub fn forward<'t>(
    enc: &EncoderConfig,
    losses: &LossConfig,
    sk: &SinkhornConfig,
    p: &Bound<'t>,
    batch: &PairBatch,
    codes: Option<&Codes>,
) -> Result<ForwardOutput<'t>> {
    losses.validate()?;
    let protos = p.get(PROTOTYPES)?;
    let tape: &'t Tape = protos.tape();
    let encoded = encode_batch(enc, p, tape.constant(batch.patches.clone()), &batch.tokens)?;
    let ita = ita_loss(encoded.v_proj, encoded.t_proj, losses.tau1)?;
    let cta = cta_loss(
        encoded.r_proj,
        encoded.z_proj,
        encoded.w_visual,
        encoded.w_text,
        CrossAttention::from_bound(p, XATTN_IMAGE_TO_TEXT)?,
        CrossAttention::from_bound(p, XATTN_TEXT_TO_IMAGE)?,
        losses.tau2,
    )?;
    let codes = match codes {
        Some(c) => c.clone(),
        None => compute_codes(&encoded.v_proj.value(), &encoded.t_proj.value(), &protos.value(), sk)?,
    };
    let log_p_v = prototype_logits(encoded.v_proj, protos, losses.tau3)?.log_softmax(1)?;
    let log_p_t = prototype_logits(encoded.t_proj, protos, losses.tau3)?.log_softmax(1)?;
    let cpa = cpa_from_log_probs(log_p_v, log_p_t, &codes.q_v, &codes.q_t)?;
    let (total, breakdown) = total_loss(ita, &cta, cpa, losses)?;
    Ok(ForwardOutput {
        encoded,
        cta,
        ita,
        cpa,
        total,
        breakdown,
        codes,
    })
}
