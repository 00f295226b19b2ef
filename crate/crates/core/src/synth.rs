//! Seeded generator of paired patch-grid / token-sequence samples.
//!
//! Each class owns `keywords_per_class` lesion types. A lesion type is a
//! fixed patch vector together with one keyword id. A sample of class `c`
//! shows `m` distinct lesion types of `c`: their patch vectors are placed at
//! `m` random grid cells over Gaussian background noise, and their keyword
//! ids at `m` random text positions among filler tokens shared by every
//! class. The drawn subset of lesion types is what ties an image to its own
//! report rather than to any same-class report.
//!
//! # File layout (`MGCA-DS1`, little-endian)
//!
//! ```text
//! magic            8 bytes  "MGCA-DS1"
//! n_classes        u32
//! n_pairs          u32
//! grid_side        u32
//! patch_dim        u32
//! lesion_patches   u32
//! text_len         u32
//! vocab_size       u32
//! keywords/class   u32
//! noise_std        f64
//! seed             u64
//! signatures       n_classes × keywords/class × { keyword u32, patch_dim × f64 }
//! samples          n_pairs × {
//!                    class u32,
//!                    patches S × patch_dim × f64 (row-major, S = grid_side²),
//!                    tokens text_len × u32,
//!                    lesion_mask S × u8,
//!                    keyword_mask text_len × u8 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, MgcaError, Result};
use crate::rng::{stream, SplitMix64};

pub const DATASET_MAGIC: &[u8; 8] = b"MGCA-DS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_pairs: usize,
    pub grid_side: usize,
    pub patch_dim: usize,
    pub lesion_patches: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_pairs: 512,
            grid_side: 4,
            patch_dim: 16,
            lesion_patches: 3,
            text_len: 12,
            vocab_size: 64,
            keywords_per_class: 6,
            noise_std: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn visual_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.visual_tokens();
        if self.n_classes == 0 || self.n_pairs == 0 {
            return Err(config("n_classes and n_pairs must be positive"));
        }
        if self.grid_side == 0 || self.patch_dim == 0 || self.text_len == 0 {
            return Err(config("grid_side, patch_dim and text_len must be positive"));
        }
        if self.lesion_patches == 0 || self.lesion_patches >= s {
            return Err(config(format!(
                "lesion_patches must be in 1..{s} (grid has {s} cells), got {}",
                self.lesion_patches
            )));
        }
        if self.lesion_patches > self.keywords_per_class {
            return Err(config("lesion_patches cannot exceed keywords_per_class"));
        }
        if self.lesion_patches > self.text_len {
            return Err(config("lesion_patches cannot exceed text_len"));
        }
        if self.keywords_per_class * self.n_classes >= self.vocab_size {
            return Err(config(format!(
                "keywords_per_class * n_classes = {} must be below vocab_size {}",
                self.keywords_per_class * self.n_classes,
                self.vocab_size
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(config("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Lesion patch vectors and keyword ids of every class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignatures {
    /// `[class][type]` patch vector of length `patch_dim`.
    pub lesions: Vec<Vec<Vec<f64>>>,
    /// `[class][type]` keyword id.
    pub keywords: Vec<Vec<usize>>,
    /// Token ids not used as keywords.
    pub fillers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// `S × patch_dim`, row-major by grid cell.
    pub patches: Vec<f64>,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub lesion_mask: Vec<bool>,
    pub keyword_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub signatures: ClassSignatures,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Same config and signatures, selected samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            config: self.config.clone(),
            signatures: self.signatures.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn signatures(cfg: &SynthConfig) -> ClassSignatures {
    let mut vocab: Vec<usize> = (0..cfg.vocab_size).collect();
    SplitMix64::for_stream(cfg.seed, stream::VOCABULARY, 0).shuffle(&mut vocab);
    let n_keywords = cfg.n_classes * cfg.keywords_per_class;
    let keywords = (0..cfg.n_classes)
        .map(|c| vocab[c * cfg.keywords_per_class..(c + 1) * cfg.keywords_per_class].to_vec())
        .collect();
    let mut fillers = vocab[n_keywords..].to_vec();
    fillers.sort_unstable();

    let mut rng = SplitMix64::for_stream(cfg.seed, stream::SIGNATURES, 0);
    let lesions = (0..cfg.n_classes)
        .map(|_| {
            (0..cfg.keywords_per_class)
                .map(|_| (0..cfg.patch_dim).map(|_| rng.normal()).collect())
                .collect()
        })
        .collect();
    ClassSignatures {
        lesions,
        keywords,
        fillers,
    }
}

fn sample(cfg: &SynthConfig, sig: &ClassSignatures, index: usize) -> PairedSample {
    let s = cfg.visual_tokens();
    let p = cfg.patch_dim;
    let label = index % cfg.n_classes;
    let mut rng = SplitMix64::for_stream(cfg.seed, stream::SAMPLE, index as u64);

    let types = rng.choose_distinct(cfg.keywords_per_class, cfg.lesion_patches);
    let cells = rng.choose_distinct(s, cfg.lesion_patches);
    let mut patches: Vec<f64> = (0..s * p).map(|_| cfg.noise_std * rng.normal()).collect();
    let mut lesion_mask = vec![false; s];
    for (&t, &cell) in types.iter().zip(&cells) {
        for (dst, src) in patches[cell * p..(cell + 1) * p].iter_mut().zip(&sig.lesions[label][t]) {
            *dst += src;
        }
        lesion_mask[cell] = true;
    }

    let positions = rng.choose_distinct(cfg.text_len, cfg.lesion_patches);
    let mut tokens: Vec<usize> = (0..cfg.text_len)
        .map(|_| sig.fillers[rng.below(sig.fillers.len())])
        .collect();
    let mut keyword_mask = vec![false; cfg.text_len];
    for (&t, &pos) in types.iter().zip(&positions) {
        tokens[pos] = sig.keywords[label][t];
        keyword_mask[pos] = true;
    }

    PairedSample {
        patches,
        tokens,
        label,
        lesion_mask,
        keyword_mask,
    }
}

/// Builds the dataset. Sample `i` depends only on `(seed, i)`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let signatures = signatures(cfg);
    let samples = (0..cfg.n_pairs).map(|i| sample(cfg, &signatures, i)).collect();
    Ok(Dataset {
        config: cfg.clone(),
        signatures,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.0,
            test: 0.25,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let Self { train, val, test } = *self;
        if [train, val, test].iter().any(|f| !(*f >= 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(config(format!(
                "split fractions must be non-negative and sum to 1, got {train}/{val}/{test}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Class-stratified disjoint split.
///
/// Within each class the samples are shuffled and given evenly spaced keys
/// `(r + 0.5) / n_class`; sorting all samples by key and cutting at the
/// global sizes keeps every class within one sample of its proportional
/// share.
pub fn split(data: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let SplitFractions { train, val, .. } = fractions;
    let n = data.len();
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_train.min(n));

    let n_classes = data.samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| data.samples[i].label == c).collect();
        SplitMix64::for_stream(seed, stream::SPLIT, c as u64).shuffle(&mut members);
        let nc = members.len() as f64;
        for (r, &i) in members.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / nc, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();
    let n_train = n_train.min(n);
    Ok(Splits {
        train: data.subset(&order[..n_train]),
        val: data.subset(&order[n_train..n_train + n_val]),
        test: data.subset(&order[n_train + n_val..]),
    })
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let c = &data.config;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    for v in [
        c.n_classes,
        data.samples.len(),
        c.grid_side,
        c.patch_dim,
        c.lesion_patches,
        c.text_len,
        c.vocab_size,
        c.keywords_per_class,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.noise_std.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    for (lesions, keywords) in data.signatures.lesions.iter().zip(&data.signatures.keywords) {
        for (vec, &kw) in lesions.iter().zip(keywords) {
            out.extend_from_slice(&(kw as u32).to_le_bytes());
            vec.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    for s in &data.samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        s.patches.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        s.tokens.iter().for_each(|&t| out.extend_from_slice(&(t as u32).to_le_bytes()));
        out.extend(s.lesion_mask.iter().map(|&b| b as u8));
        out.extend(s.keyword_mask.iter().map(|&b| b as u8));
    }
    out
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MgcaError::Parse {
                offset: self.pos,
                detail: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn error(&self, at: usize, detail: impl Into<String>) -> MgcaError {
        MgcaError::Parse {
            offset: at,
            detail: detail.into(),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Checks an 8-byte magic whose last byte is the format version.
pub(crate) fn check_magic(r: &mut ByteReader<'_>, expected: &[u8; 8]) -> Result<()> {
    let got = r.bytes(8, "magic")?;
    if got[..7] != expected[..7] {
        return Err(r.error(0, format!("bad magic {:?}", String::from_utf8_lossy(got))));
    }
    if got[7] != expected[7] {
        return Err(MgcaError::Version {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(got).into_owned(),
        });
    }
    Ok(())
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(buf);
    check_magic(&mut r, DATASET_MAGIC)?;
    let mut header = [0usize; 8];
    for (slot, name) in header.iter_mut().zip([
        "n_classes",
        "n_pairs",
        "grid_side",
        "patch_dim",
        "lesion_patches",
        "text_len",
        "vocab_size",
        "keywords_per_class",
    ]) {
        *slot = r.u32(name)? as usize;
    }
    let [n_classes, n_pairs, grid_side, patch_dim, lesion_patches, text_len, vocab_size, keywords_per_class] = header;
    let noise_std = r.f64("noise_std")?;
    let seed = r.u64("seed")?;
    let config = SynthConfig {
        n_classes,
        n_pairs,
        grid_side,
        patch_dim,
        lesion_patches,
        text_len,
        vocab_size,
        keywords_per_class,
        noise_std,
        seed,
    };
    config.validate().map_err(|e| r.error(8, format!("invalid header: {e}")))?;
    let s = config.visual_tokens();

    let mut lesions = Vec::with_capacity(n_classes);
    let mut keywords = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut ls = Vec::with_capacity(keywords_per_class);
        let mut ks = Vec::with_capacity(keywords_per_class);
        for _ in 0..keywords_per_class {
            let at = r.offset();
            let kw = r.u32("keyword id")? as usize;
            if kw >= vocab_size {
                return Err(r.error(at, format!("keyword id {kw} outside vocabulary")));
            }
            ks.push(kw);
            ls.push((0..patch_dim).map(|_| r.f64("lesion vector")).collect::<Result<Vec<_>>>()?);
        }
        lesions.push(ls);
        keywords.push(ks);
    }
    let mut used = vec![false; vocab_size];
    keywords.iter().flatten().for_each(|&k| used[k] = true);
    let fillers = (0..vocab_size).filter(|&k| !used[k]).collect();

    let mut samples = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let at = r.offset();
        let label = r.u32("class label")? as usize;
        if label >= n_classes {
            return Err(r.error(at, format!("class label {label} out of range")));
        }
        let patches = (0..s * patch_dim).map(|_| r.f64("patch value")).collect::<Result<Vec<_>>>()?;
        let mut tokens = Vec::with_capacity(text_len);
        for _ in 0..text_len {
            let at = r.offset();
            let t = r.u32("token id")? as usize;
            if t >= vocab_size {
                return Err(r.error(at, format!("token id {t} outside vocabulary")));
            }
            tokens.push(t);
        }
        let mut mask = |n: usize, what: &str| -> Result<Vec<bool>> {
            (0..n)
                .map(|_| {
                    let at = r.offset();
                    match r.u8(what)? {
                        0 => Ok(false),
                        1 => Ok(true),
                        v => Err(r.error(at, format!("{what} byte {v} is not 0/1"))),
                    }
                })
                .collect()
        };
        let lesion_mask = mask(s, "lesion mask")?;
        let keyword_mask = mask(text_len, "keyword mask")?;
        samples.push(PairedSample {
            patches,
            tokens,
            label,
            lesion_mask,
            keyword_mask,
        });
    }
    r.finish()?;
    Ok(Dataset {
        config,
        signatures: ClassSignatures {
            lesions,
            keywords,
            fillers,
        },
        samples,
    })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
