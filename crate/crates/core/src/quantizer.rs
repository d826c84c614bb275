//! Learnable codebook and nearest-neighbor vector quantization.
//!
//! Nearest-neighbor search uses squared Euclidean distance with ties broken
//! toward the lowest index; the training loss follows the split form: a
//! codebook term (gradient to the codes only) plus a weighted commitment
//! term (gradient to the encoder only), 0.25 by default. Forward values pass
//! through the straight-through estimator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_COMMIT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Codebook {
    pub n_q: usize,
    pub d: usize,
    pub seed: u64,
    /// `[n_q, d]` learnable codes.
    pub codes: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookSidecar {
    n_q: usize,
    d: usize,
    seed: u64,
}

impl Codebook {
    /// Entries uniform in `[-1/n_q, 1/n_q]`, deterministic per seed.
    pub fn init(n_q: usize, d: usize, seed: u64) -> Self {
        assert!(n_q >= 1 && d >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / n_q as f64;
        let data = (0..n_q * d)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Codebook {
            n_q,
            d,
            seed,
            codes: Tensor::new(vec![n_q, d], data).unwrap(),
        }
    }

    /// Index of the nearest code by Euclidean distance, lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> usize {
        debug_assert_eq!(v.len(), self.d);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.n_q {
            let row = self.codes.row(i);
            let d2: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best_d {
                best_d = d2;
                best = i;
            }
        }
        best
    }

    pub fn assign(&self, z: &Tensor) -> Result<Vec<usize>, TensorError> {
        if z.shape().len() != 2 || z.shape()[1] != self.d {
            return Err(TensorError::shape(
                "quantize",
                format!("z {:?} vs codebook d={}", z.shape(), self.d),
            ));
        }
        Ok((0..z.shape()[0]).map(|r| self.nearest(z.row(r))).collect())
    }

    /// Assemble `zq` rows from code rows (bitwise copies of the codebook).
    pub fn lookup(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.codes.row(i));
        }
        Tensor::new(vec![indices.len(), self.d], data).unwrap()
    }

    /// How many inputs map to each code; used for dead-code logging.
    pub fn usage_counts<'a>(&self, indices: impl IntoIterator<Item = &'a usize>) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_q];
        for &i in indices {
            counts[i] += 1;
        }
        counts
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TensorError> {
        let dir = dir.as_ref();
        self.codes.save(dir.join("codebook.ptn"))?;
        let sidecar = CodebookSidecar {
            n_q: self.n_q,
            d: self.d,
            seed: self.seed,
        };
        std::fs::write(
            dir.join("codebook.json"),
            serde_json::to_string_pretty(&sidecar).expect("serializable"),
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TensorError> {
        let dir = dir.as_ref();
        let codes = Tensor::load(dir.join("codebook.ptn"))?;
        let raw = std::fs::read_to_string(dir.join("codebook.json"))?;
        let sidecar: CodebookSidecar = serde_json::from_str(&raw)
            .map_err(|e| TensorError::Format(format!("codebook.json: {e}")))?;
        if codes.shape() != [sidecar.n_q, sidecar.d] {
            return Err(TensorError::Format(format!(
                "codebook shape {:?} disagrees with sidecar ({}, {})",
                codes.shape(),
                sidecar.n_q,
                sidecar.d
            )));
        }
        Ok(Codebook {
            n_q: sidecar.n_q,
            d: sidecar.d,
            seed: sidecar.seed,
            codes,
        })
    }
}

/// Quantization outside a graph: values and the scalar loss, no gradients.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub zq: Tensor,
    pub indices: Vec<usize>,
    pub loss_q: f64,
}

pub fn quantize(
    z: &Tensor,
    cb: &Codebook,
    commit_weight: f64,
) -> Result<QuantizeResult, TensorError> {
    let indices = cb.assign(z)?;
    let zq = cb.lookup(&indices);
    let n = z.len().max(1) as f64;
    let l1 = z
        .data()
        .iter()
        .zip(zq.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Ok(QuantizeResult {
        zq,
        indices,
        loss_q: (1.0 + commit_weight) * l1,
    })
}

/// In-graph quantization for training.
pub struct QuantizeVars {
    /// Straight-through node: forward is `zq`, gradient flows to `z`.
    pub zq: Var,
    pub indices: Vec<usize>,
    /// Codebook term + `commit_weight` * commitment term.
    pub loss_q: Var,
    /// Everything needed to re-evaluate the surrogate objective the
    /// straight-through gradient differentiates (see `quantize_in_graph_frozen`).
    pub snapshot: QuantSnapshot,
}

/// Frozen state of one quantization: the code assignment plus the pre- and
/// post-quantization values it was taken at.
#[derive(Debug, Clone)]
pub struct QuantSnapshot {
    pub indices: Vec<usize>,
    pub z0: Tensor,
    pub zq0: Tensor,
}

pub fn quantize_in_graph(
    g: &mut Graph,
    z: Var,
    codebook_param: Var,
    cb: &Codebook,
    commit_weight: f64,
) -> Result<QuantizeVars, TensorError> {
    let indices = cb.assign(g.value(z))?;
    let zq_value = cb.lookup(&indices);
    let snapshot = QuantSnapshot {
        indices: indices.clone(),
        z0: g.value(z).clone(),
        zq0: zq_value.clone(),
    };

    // codebook term: pull the selected codes toward a frozen copy of z
    let z_frozen = g.input(g.value(z).clone());
    let gathered = g.gather_rows(codebook_param, &indices)?;
    let l_codes = g.mae(gathered, z_frozen)?;

    // commitment term: pull z toward the frozen codes
    let zq_frozen = g.input(zq_value.clone());
    let l_commit = g.mae(z, zq_frozen)?;
    let l_commit = g.scale(l_commit, commit_weight);
    let loss_q = g.add(l_codes, l_commit)?;

    let zq = g.straight_through(z, zq_value)?;
    Ok(QuantizeVars {
        zq,
        indices,
        loss_q,
        snapshot,
    })
}

/// The surrogate objective the straight-through convention differentiates:
/// downstream consumers see `z + (zq0 - z0)` with the residual frozen at
/// `snap`, the codebook term gathers the frozen indices against the frozen
/// `z0`, and the commitment term pulls `z` toward the frozen `zq0`. At the
/// snapshot point this evaluates identically to `quantize_in_graph`, and its
/// true derivatives equal the straight-through gradients, which makes it the
/// finite-difference oracle for the full training objective.
pub fn quantize_in_graph_frozen(
    g: &mut Graph,
    z: Var,
    codebook_param: Var,
    snap: &QuantSnapshot,
    commit_weight: f64,
) -> Result<QuantizeVars, TensorError> {
    let z0 = g.input(snap.z0.clone());
    let gathered = g.gather_rows(codebook_param, &snap.indices)?;
    let l_codes = g.mae(gathered, z0)?;

    let zq0 = g.input(snap.zq0.clone());
    let l_commit = g.mae(z, zq0)?;
    let l_commit = g.scale(l_commit, commit_weight);
    let loss_q = g.add(l_codes, l_commit)?;

    let residual = Tensor::new(
        snap.zq0.shape().to_vec(),
        snap.zq0
            .data()
            .iter()
            .zip(snap.z0.data())
            .map(|(&q, &z)| q - z)
            .collect(),
    )?;
    let residual = g.input(residual);
    let zq = g.add(z, residual)?;
    Ok(QuantizeVars {
        zq,
        indices: snap.indices.clone(),
        loss_q,
        snapshot: snap.clone(),
    })
}
