//! Class-conditional generation of imageome sequences.
//!
//! A first-order autoregressive model per class: position 0 has a marginal
//! distribution, every later position a conditional table over the previous
//! code, both with additive (Laplace) smoothing. Sequences are flattened in
//! canonical order (phylo level 1..n_l, then the non-phylo segment).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Imageome;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("no training sequences for class {0:?}")]
    EmptyClass(String),
    #[error("training sequences have inconsistent layouts")]
    InconsistentLayout,
    #[error("json: {0}")]
    Json(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSampler {
    pub schema: u32,
    pub class: String,
    pub alpha: f64,
    pub n_q: usize,
    pub n_l: usize,
    pub n_p: usize,
    pub n_np: usize,
    /// Marginal over codes at position 0.
    pub initial: Vec<f64>,
    /// `transitions[t-1][prev][next]` for positions t >= 1.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

fn normalize_counts(counts: &[f64], alpha: f64, n_q: usize) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total + alpha * n_q as f64 == 0.0 {
        // unreachable row with no smoothing; uniform keeps it well-formed
        return vec![1.0 / n_q as f64; n_q];
    }
    counts
        .iter()
        .map(|&c| (c + alpha) / (total + alpha * n_q as f64))
        .collect()
}

/// Fit one class's conditional tables from its training imageomes.
pub fn fit_sampler(
    class: &str,
    imageomes: &[Imageome],
    n_q: usize,
    alpha: f64,
) -> Result<ClassSampler, SamplerError> {
    let Some(first) = imageomes.first() else {
        return Err(SamplerError::EmptyClass(class.to_string()));
    };
    let n_l = first.phylo.len();
    let n_p = first.phylo[0].len();
    let n_np = first.nonphylo.len();
    let seq_len = n_l * n_p + n_np;
    let mut init_counts = vec![0.0; n_q];
    let mut trans_counts = vec![vec![vec![0.0; n_q]; n_q]; seq_len - 1];
    for im in imageomes {
        let flat = im.flat();
        if flat.len() != seq_len {
            return Err(SamplerError::InconsistentLayout);
        }
        init_counts[flat[0]] += 1.0;
        for t in 1..seq_len {
            trans_counts[t - 1][flat[t - 1]][flat[t]] += 1.0;
        }
    }
    Ok(ClassSampler {
        schema: 1,
        class: class.to_string(),
        alpha,
        n_q,
        n_l,
        n_p,
        n_np,
        initial: normalize_counts(&init_counts, alpha, n_q),
        transitions: trans_counts
            .iter()
            .map(|pos| {
                pos.iter()
                    .map(|row| normalize_counts(row, alpha, n_q))
                    .collect()
            })
            .collect(),
    })
}

fn draw(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

impl ClassSampler {
    pub fn seq_len(&self) -> usize {
        self.n_l * self.n_p + self.n_np
    }

    /// Ancestral sampling, deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Imageome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut flat = Vec::with_capacity(self.seq_len());
                flat.push(draw(&mut rng, &self.initial));
                for t in 1..self.seq_len() {
                    let prev = flat[t - 1];
                    flat.push(draw(&mut rng, &self.transitions[t - 1][prev]));
                }
                Imageome::from_flat(&flat, self.n_l, self.n_p, self.n_np)
                    .expect("sampler layout is consistent")
            })
            .collect()
    }

    /// Per-position marginals implied by the fitted tables (matrix-propagated
    /// from the initial distribution).
    pub fn implied_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.seq_len());
        out.push(self.initial.clone());
        for t in 1..self.seq_len() {
            let prev = &out[t - 1];
            let mut next = vec![0.0; self.n_q];
            for (p, row) in prev.iter().zip(&self.transitions[t - 1]) {
                for (n, &tr) in next.iter_mut().zip(row) {
                    *n += p * tr;
                }
            }
            out.push(next);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SamplerError> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).map_err(|e| SamplerError::Json(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SamplerError> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| SamplerError::Json(e.to_string()))
    }
}
