//! Two small pre-norm transformer towers and their projection heads.
//!
//! Both towers prepend a learned CLS token, add learned position
//! embeddings and run `depth` layers of
//! `h += attn(ln1(h)); h += mlp(ln2(h))`. The CLS state after the last
//! layer is the global embedding, the remaining states are the token
//! embeddings. Token weights come from the last layer's attention: for each
//! token row, the probability it assigns to the CLS column, averaged over
//! heads and rescaled per sample to sum to the token count. Linear weights
//! are stored `[in, out]` and applied as `x · W + b`.

use mgca_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::rng::{stream, SplitMix64};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            width: 64,
            visual_tokens: 16,
            text_tokens: 12,
            patch_dim: 16,
            vocab_size: 64,
            proj_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.visual_tokens == 0 || self.text_tokens == 0 {
            return Err(config("visual_tokens and text_tokens must be at least 1"));
        }
        if self.proj_dim < 2 {
            return Err(config("proj_dim must be at least 2"));
        }
        if self.patch_dim == 0 || self.vocab_size == 0 || self.mlp_ratio == 0 {
            return Err(config("patch_dim, vocab_size and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Which tower a name or input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Image,
    Text,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Text => "text",
        }
    }
}

/// Output of one tower for a batch.
#[derive(Clone, Copy)]
pub struct TowerOutput<'t> {
    /// `[B, width]`
    pub global: Var<'t>,
    /// `[B, T, width]`
    pub tokens: Var<'t>,
    /// `[B, T]`, non-negative, each row sums to `T`.
    pub weights: Var<'t>,
}

/// Everything the losses consume, for a batch of pairs.
#[derive(Clone, Copy)]
pub struct EncodedBatch<'t> {
    pub v_global: Var<'t>,
    pub t_global: Var<'t>,
    /// `[B, S, width]`
    pub r: Var<'t>,
    /// `[B, L, width]`
    pub z: Var<'t>,
    pub w_visual: Var<'t>,
    pub w_text: Var<'t>,
    /// `[B, d]`, unit rows.
    pub v_proj: Var<'t>,
    pub t_proj: Var<'t>,
    /// `[B, S, d]`, unit rows.
    pub r_proj: Var<'t>,
    /// `[B, L, d]`, unit rows.
    pub z_proj: Var<'t>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<()> {
        self.store.push(name, t)
    }

    fn rng(&self) -> SplitMix64 {
        SplitMix64::for_stream(self.seed, stream::INIT, self.store.len() as u64)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let b = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(&mut self.rng(), &[fan_in, fan_out], b);
        self.add(format!("{name}.w"), w)?;
        let bias = uniform(&mut self.rng(), &[fan_out], b);
        self.add(format!("{name}.b"), bias)
    }

    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = uniform(&mut self.rng(), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        self.add(format!("{name}.w"), w)
    }

    fn square(&mut self, name: &str, d: usize) -> Result<()> {
        let w = uniform(&mut self.rng(), &[d, d], 1.0 / (d as f64).sqrt());
        self.add(name.to_string(), w)
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.add(format!("{name}.g"), Tensor::ones([width]))?;
        self.add(format!("{name}.b"), Tensor::zeros([width]))
    }
}

fn tower_params(b: &mut Builder<'_>, cfg: &EncoderConfig, tower: Tower) -> Result<()> {
    let pre = tower.prefix();
    let w = cfg.width;
    let tokens = match tower {
        Tower::Image => {
            b.linear(&format!("{pre}.patch"), cfg.patch_dim, w)?;
            cfg.visual_tokens
        }
        Tower::Text => {
            let table = uniform(&mut b.rng(), &[cfg.vocab_size, w], 1.0);
            b.add(format!("{pre}.embed"), table)?;
            cfg.text_tokens
        }
    };
    let s = 1.0 / (w as f64).sqrt();
    let cls = uniform(&mut b.rng(), &[w], s);
    b.add(format!("{pre}.cls"), cls)?;
    let pos = uniform(&mut b.rng(), &[tokens + 1, w], s);
    b.add(format!("{pre}.pos"), pos)?;
    for l in 0..cfg.depth {
        let lp = format!("{pre}.layer{l}");
        b.layer_norm(&format!("{lp}.ln1"), w)?;
        b.linear(&format!("{lp}.attn.q"), w, w)?;
        b.weight(&format!("{lp}.attn.k"), w, w)?;
        b.linear(&format!("{lp}.attn.v"), w, w)?;
        b.linear(&format!("{lp}.attn.o"), w, w)?;
        b.layer_norm(&format!("{lp}.ln2"), w)?;
        b.linear(&format!("{lp}.mlp.fc1"), w, w * cfg.mlp_ratio)?;
        b.linear(&format!("{lp}.mlp.fc2"), w * cfg.mlp_ratio, w)?;
    }
    Ok(())
}

/// Names of the four projection heads.
pub const HEADS: [&str; 4] = ["image_global", "text_global", "image_tokens", "text_tokens"];

/// Cross-attention parameter prefixes: visual queries over text tokens, and
/// text queries over visual tokens.
pub const XATTN_IMAGE_TO_TEXT: &str = "xattn.image_to_text";
pub const XATTN_TEXT_TO_IMAGE: &str = "xattn.text_to_image";

pub const PROTOTYPES: &str = "prototypes";

/// Seeded parameters for both towers, the projection heads, both
/// cross-attention blocks and `n_prototypes` unit-norm prototypes.
pub fn init_params(cfg: &EncoderConfig, n_prototypes: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    if n_prototypes == 0 {
        return Err(config("need at least one prototype"));
    }
    let mut store = ParamStore::new();
    let mut b = Builder { store: &mut store, seed };
    tower_params(&mut b, cfg, Tower::Image)?;
    tower_params(&mut b, cfg, Tower::Text)?;
    for h in HEADS {
        b.linear(&format!("head.{h}.fc1"), cfg.width, cfg.width)?;
        b.linear(&format!("head.{h}.fc2"), cfg.width, cfg.proj_dim)?;
    }
    for x in [XATTN_IMAGE_TO_TEXT, XATTN_TEXT_TO_IMAGE] {
        for m in ["q", "k", "v", "o"] {
            b.square(&format!("{x}.{m}"), cfg.proj_dim)?;
        }
    }
    let mut protos = uniform(&mut b.rng(), &[n_prototypes, cfg.proj_dim], 1.0);
    normalize_rows(&mut protos)?;
    b.add(PROTOTYPES.to_string(), protos)?;
    Ok(store)
}

/// Rescales each row of a rank-2 tensor to unit length.
pub fn normalize_rows(t: &mut Tensor) -> Result<()> {
    let (_, cols) = t.dims2()?;
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= mgca_tensor::NORM_EPS {
            return Err(contract("cannot normalize a zero row"));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// `x · W + b` on the last axis of an arbitrary-rank input.
pub fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    affine(p, name, x, true)
}

fn affine<'t>(p: &Bound<'t>, name: &str, x: Var<'t>, bias: bool) -> Result<Var<'t>> {
    let w = p.get(&format!("{name}.w"))?;
    let shape = x.shape();
    let (fan_in, fan_out) = w.value().dims2()?;
    if shape.last() != Some(&fan_in) {
        return Err(contract(format!("{name} expects last axis {fan_in}, got shape {shape:?}")));
    }
    let rows = x.value().numel() / fan_in;
    let mut y = x.reshape(&[rows, fan_in])?.matmul(w)?;
    if bias {
        y = y.add_bias(p.get(&format!("{name}.b"))?)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    Ok(y.reshape(&out_shape)?)
}

fn layer_norm<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = p.get(&format!("{name}.g"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(x.layer_norm(LN_EPS)?.mul_bias(g)?.add_bias(b)?)
}

/// Splits `[B, T, W]` into `[B·H, T, W/H]`.
fn split_heads<'t>(x: Var<'t>, b: usize, t: usize, heads: usize) -> Result<Var<'t>> {
    let w = x.shape()[2];
    let dh = w / heads;
    Ok(x.reshape(&[b, t, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, t, dh])?)
}

fn merge_heads<'t>(x: Var<'t>, b: usize, t: usize, heads: usize) -> Result<Var<'t>> {
    let dh = x.shape()[2];
    Ok(x.reshape(&[b, heads, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, heads * dh])?)
}

/// Multi-head self-attention. Returns the output and the attention
/// probabilities `[B, H, T, T]`.
fn self_attention<'t>(cfg: &EncoderConfig, p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (b, t) = (x.shape()[0], x.shape()[1]);
    let h = cfg.heads;
    let q = split_heads(linear(p, &format!("{name}.q"), x)?, b, t, h)?;
    let k = split_heads(affine(p, &format!("{name}.k"), x, false)?, b, t, h)?;
    let v = split_heads(linear(p, &format!("{name}.v"), x)?, b, t, h)?;
    let scores = q.bmm(k.transpose_last2()?)?.scale(1.0 / (cfg.head_dim() as f64).sqrt());
    let probs = scores.softmax(2)?;
    let mixed = merge_heads(probs.bmm(v)?, b, t, h)?;
    let out = linear(p, &format!("{name}.o"), mixed)?;
    Ok((out, probs.reshape(&[b, h, t, t])?))
}

/// Runs a tower on already embedded tokens `[B, T, W]` (no CLS yet).
pub fn tower_forward<'t>(cfg: &EncoderConfig, p: &Bound<'t>, tower: Tower, embedded: Var<'t>) -> Result<TowerOutput<'t>> {
    let pre = tower.prefix();
    let shape = embedded.shape();
    let (b, n, w) = (shape[0], shape[1], shape[2]);
    let tape = embedded.tape();
    let cls = p.get(&format!("{pre}.cls"))?.reshape(&[1, 1, w])?;
    let cls_rows = tape.concat(&vec![cls; b], 0)?;
    let seq = tape.concat(&[cls_rows, embedded], 1)?;
    let pos = p.get(&format!("{pre}.pos"))?;
    if pos.shape() != [n + 1, w] {
        return Err(contract(format!(
            "{pre} expects {} tokens, got {n}",
            pos.shape()[0] - 1
        )));
    }
    let mut h = seq
        .reshape(&[b, (n + 1) * w])?
        .add_bias(pos.reshape(&[(n + 1) * w])?)?
        .reshape(&[b, n + 1, w])?;

    let mut last_probs = None;
    for l in 0..cfg.depth {
        let lp = format!("{pre}.layer{l}");
        let normed = layer_norm(p, &format!("{lp}.ln1"), h)?;
        let (attn, probs) = self_attention(cfg, p, &format!("{lp}.attn"), normed)?;
        h = h.add(attn)?;
        let normed = layer_norm(p, &format!("{lp}.ln2"), h)?;
        let hidden = linear(p, &format!("{lp}.mlp.fc1"), normed)?.silu();
        h = h.add(linear(p, &format!("{lp}.mlp.fc2"), hidden)?)?;
        last_probs = Some(probs);
    }

    let weights = match last_probs {
        Some(probs) => probs
            .narrow(3, 0, 1)?
            .narrow(2, 1, n)?
            .mean_axis(1)?
            .reshape(&[b, n])?
            .rescale_to_length(1)?,
        None => tape.constant(Tensor::ones([b, n])),
    };
    Ok(TowerOutput {
        global: h.narrow(1, 0, 1)?.reshape(&[b, w])?,
        tokens: h.narrow(1, 1, n)?,
        weights,
    })
}

/// `patches` is `[B, S, p]`.
pub fn encode_image<'t>(cfg: &EncoderConfig, p: &Bound<'t>, patches: Var<'t>) -> Result<TowerOutput<'t>> {
    let shape = patches.shape();
    if shape.len() != 3 || shape[1] != cfg.visual_tokens || shape[2] != cfg.patch_dim {
        return Err(contract(format!(
            "patch batch must be [B, {}, {}], got {shape:?}",
            cfg.visual_tokens, cfg.patch_dim
        )));
    }
    let embedded = linear(p, "image.patch", patches)?;
    tower_forward(cfg, p, Tower::Image, embedded)
}

/// `ids` holds `batch` sequences of `text_tokens` ids back to back.
pub fn encode_text<'t>(cfg: &EncoderConfig, p: &Bound<'t>, ids: &[usize], batch: usize) -> Result<TowerOutput<'t>> {
    let l = cfg.text_tokens;
    if ids.len() != batch * l {
        return Err(contract(format!("expected {batch}×{l} token ids, got {}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let table = p.get("text.embed")?;
    let embedded = table.tape().embedding(table, ids)?.reshape(&[batch, l, cfg.width])?;
    tower_forward(cfg, p, Tower::Text, embedded)
}

/// Two-layer perceptron with SiLU, then unit-normalized on the last axis.
pub fn project<'t>(p: &Bound<'t>, head: &str, x: Var<'t>) -> Result<Var<'t>> {
    let hidden = linear(p, &format!("head.{head}.fc1"), x)?.silu();
    let out = linear(p, &format!("head.{head}.fc2"), hidden)?;
    let axis = out.shape().len() - 1;
    Ok(out.l2_normalize(axis)?)
}

/// Encodes and projects a batch. `patches` is `[B, S, p]`.
pub fn encode_batch<'t>(cfg: &EncoderConfig, p: &Bound<'t>, patches: Var<'t>, ids: &[usize]) -> Result<EncodedBatch<'t>> {
    let b = patches.shape()[0];
    let image = encode_image(cfg, p, patches)?;
    let text = encode_text(cfg, p, ids, b)?;
    Ok(EncodedBatch {
        v_global: image.global,
        t_global: text.global,
        r: image.tokens,
        z: text.tokens,
        w_visual: image.weights,
        w_text: text.weights,
        v_proj: project(p, "image_global", image.global)?.labeled("v_proj"),
        t_proj: project(p, "text_global", text.global)?.labeled("t_proj"),
        r_proj: project(p, "image_tokens", image.tokens)?.labeled("r_proj"),
        z_proj: project(p, "text_tokens", text.tokens)?.labeled("z_proj"),
    })
}
