#![allow(dead_code)]

pub mod oracle;

use mgca_core::{EncoderConfig, RunConfig, SynthConfig};
use mgca_tensor::Tensor;

/// Test-local generator, independent of the crate's own PRNG.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (((self.next() + 1.0) / 2.0) * n as f64).floor().min((n - 1) as f64) as usize
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.next()).collect()).unwrap()
    }

    /// Rows along the last axis scaled to unit length.
    pub fn unit(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.tensor(shape);
        let d = *shape.last().unwrap();
        for row in t.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    /// Positive rows rescaled to sum to their length.
    pub fn weights(&mut self, rows: usize, n: usize) -> Tensor {
        let mut t = self.tensor(&[rows, n]).map(|v| v.abs() + 0.1);
        for row in t.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v *= n as f64 / s);
        }
        t
    }

    /// Rows that are probability distributions.
    pub fn simplex(&mut self, rows: usize, k: usize) -> Tensor {
        let mut t = self.tensor(&[rows, k]).map(|v| v.exp());
        for row in t.data_mut().chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    }
}

/// Small encoder used where a full-size model would only cost time.
pub fn tiny_encoder(s: usize, l: usize) -> EncoderConfig {
    EncoderConfig {
        depth: 1,
        heads: 2,
        width: 8,
        visual_tokens: s,
        text_tokens: l,
        patch_dim: 4,
        vocab_size: 16,
        proj_dim: 8,
        mlp_ratio: 2,
    }
}

/// A run small enough to train in well under a second.
pub fn tiny_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = SynthConfig {
        n_classes: 2,
        n_pairs: 48,
        grid_side: 2,
        patch_dim: 4,
        lesion_patches: 1,
        text_len: 4,
        vocab_size: 16,
        keywords_per_class: 3,
        noise_std: 0.3,
        seed: 5,
    };
    cfg.encoder = tiny_encoder(4, 4);
    cfg.train.batch_size = 8;
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    cfg.train.n_prototypes = 4;
    cfg.train.seed = 5;
    cfg.eval.probe_steps = 50;
    cfg.eval.chance_trials = 5;
    cfg
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tensor_err(e: mgca_core::MgcaError) -> mgca_tensor::TensorError {
    mgca_tensor::TensorError::Contract(e.to_string())
}
