//! Optimization loop: adaptive-moment updates with adversarial alternation.
//!
//! Each step first descends the adversary's loss on the probe parameters
//! alone, then descends the main objective (which carries the negated
//! adversarial term) on every other parameter. Seeded shuffling keeps runs
//! bitwise reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{LossBreakdown, PhyloCodec};
use crate::synthdata::Sample;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {breakdown:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adversary_learning_rate: f64,
    pub adversary_steps_per_main_step: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many epochs; 0 = final only.
    pub checkpoint_interval: usize,
    /// Evaluate held-out accuracy every this many epochs (and at the end).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            adversary_learning_rate: 1e-3,
            adversary_steps_per_main_step: 1,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 10,
        }
    }
}

/// Adam with bias correction; state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update to every `(name, grad)` pair in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("grad for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Held-out per-level descriptor classification accuracy, when evaluated.
    pub holdout_accuracy: Option<Vec<f64>>,
    pub dead_codes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    opt_main: Adam,
    opt_adv: Adam,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let opt_main = Adam::new(cfg.learning_rate);
        let opt_adv = Adam::new(cfg.adversary_learning_rate);
        Trainer {
            cfg,
            opt_main,
            opt_adv,
        }
    }

    /// One adversary-then-main update on a batch.
    pub fn train_step(
        &mut self,
        model: &mut PhyloCodec,
        xs: &[Tensor],
        labels: &[Vec<usize>],
    ) -> Result<LossBreakdown, TrainError> {
        for _ in 0..self.cfg.adversary_steps_per_main_step {
            let (g, out, vars) = model.forward_batch(xs, labels, true)?;
            if !out.breakdown.all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: 0,
                    step: 0,
                    breakdown: out.breakdown,
                });
            }
            let grads = g.backward(out.loss_adv)?;
            let mut adv_grads = BTreeMap::new();
            for (name, var) in &vars {
                if model.is_adversary_param(name) {
                    if let Some(gr) = grads.get(*var) {
                        adv_grads.insert(name.clone(), gr.clone());
                    }
                }
            }
            let mut params = std::mem::take(&mut model.params);
            self.opt_adv.step(&mut params, &adv_grads);
            model.params = params;
        }

        let (g, out, vars) = model.forward_batch(xs, labels, true)?;
        if !out.breakdown.all_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: 0,
                step: 0,
                breakdown: out.breakdown,
            });
        }
        let grads = g.backward(out.loss_main)?;
        let mut main_grads = BTreeMap::new();
        for (name, var) in &vars {
            if name == "codebook" || !model.is_adversary_param(name) {
                if let Some(gr) = grads.get(*var) {
                    main_grads.insert(name.clone(), gr.clone());
                }
            }
        }
        // the codebook tensor lives outside model.params; splice it in
        let mut params = std::mem::take(&mut model.params);
        params.insert("codebook".into(), model.codebook.codes.clone());
        self.opt_main.step(&mut params, &main_grads);
        model.codebook.codes = params.remove("codebook").expect("codebook present");
        model.params = params;
        Ok(out.breakdown)
    }

    /// Full training run over `train`, with periodic held-out evaluation on
    /// `test`. Checkpoints and the JSONL log land under `out_dir` when given.
    pub fn fit(
        &mut self,
        model: &mut PhyloCodec,
        train: &[Sample],
        test: &[Sample],
        out_dir: Option<&Path>,
    ) -> Result<TrainLog, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            let mut sum = LossBreakdown::default();
            let mut steps = 0usize;
            let mut code_usage = vec![0usize; model.codebook.n_q];
            for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let xs: Vec<Tensor> = chunk.iter().map(|&i| train[i].x.clone()).collect();
                let labels: Vec<Vec<usize>> =
                    chunk.iter().map(|&i| train[i].labels.clone()).collect();
                let b = self.train_step(model, &xs, &labels).map_err(|e| match e {
                    TrainError::NonFiniteLoss { breakdown, .. } => TrainError::NonFiniteLoss {
                        epoch,
                        step,
                        breakdown,
                    },
                    other => other,
                })?;
                sum.rec += b.rec;
                sum.q += b.q;
                sum.p += b.p;
                sum.adv += b.adv;
                sum.ortho += b.ortho;
                sum.total += b.total;
                steps += 1;
            }
            let inv = 1.0 / steps.max(1) as f64;
            let mean = LossBreakdown {
                rec: sum.rec * inv,
                q: sum.q * inv,
                p: sum.p * inv,
                adv: sum.adv * inv,
                ortho: sum.ortho * inv,
                total: sum.total * inv,
            };
            // dead-code count over the training set at the current codebook
            for s in train.iter().take(32) {
                let (im, _) = model.encode(&s.x)?;
                for &i in &im.flat() {
                    code_usage[i] += 1;
                }
            }
            let dead_codes = code_usage.iter().filter(|&&c| c == 0).count();

            let evaluate = self.cfg.eval_interval > 0
                && (epoch % self.cfg.eval_interval == 0 || epoch == self.cfg.epochs);
            let holdout_accuracy = if evaluate && !test.is_empty() {
                Some(evaluate_levels(model, test)?)
            } else {
                None
            };
            log.epochs.push(EpochRecord {
                epoch,
                loss: mean,
                holdout_accuracy,
                dead_codes,
            });
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_interval > 0 && epoch % self.cfg.checkpoint_interval == 0 {
                    model.save(dir.join(format!("checkpoint-{epoch:04}")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            model.save(dir.join("model"))?;
            std::fs::write(dir.join("train_log.jsonl"), log.to_jsonl())?;
        }
        Ok(log)
    }
}

/// Per-level descriptor classification accuracy over `samples`.
pub fn evaluate_levels(model: &PhyloCodec, samples: &[Sample]) -> Result<Vec<f64>, TrainError> {
    let n_l = model.cfg.n_l;
    let mut correct = vec![0usize; n_l];
    for s in samples {
        let pred = model.predict_levels(&s.x)?;
        for i in 0..n_l {
            if pred[i] == s.labels[i] {
                correct[i] += 1;
            }
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(correct.iter().map(|&c| c as f64 / n).collect())
}
