//! Run configuration: one JSON file drives every subcommand, individual
//! flags override single fields. The file round-trips losslessly through
//! serde, so the effective config can be archived next to the artifacts.

use std::path::PathBuf;

use anyhow::{Context, Result};
use imageome_core::trainer::TrainConfig;
use imageome_core::CodecConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthParams,
    pub codec: CodecParams,
    pub train: TrainConfig,
    pub sample: SampleParams,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthParams::default(),
            codec: CodecParams::default(),
            train: default_train(),
            sample: SampleParams::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Training defaults for the validated recipe: the adversary takes several
/// steps per main step at a higher learning rate so its cross-entropy stays
/// near chance instead of saturating. Note: these apply when the config file
/// omits `train` entirely; a partial `train` object falls back to the
/// library defaults for its missing fields.
fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 135,
        adversary_learning_rate: 1e-2,
        adversary_steps_per_main_step: 5,
        ..TrainConfig::default()
    }
}

/// Synthetic dataset shape and nuisance model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_l: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub trait_scale: f64,
    pub brightness_amplitude: f64,
    pub noise_amplitude: f64,
    pub specimens_per_species: usize,
    /// Species kept out of train/test entirely (the unseen split).
    pub holdout: Vec<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_l: 3,
            h: 8,
            w: 8,
            c: 4,
            trait_scale: 1.0,
            brightness_amplitude: 0.1,
            noise_amplitude: 0.05,
            specimens_per_species: 50,
            holdout: Vec::new(),
        }
    }
}

/// Model shape; image dimensions and class counts come from the dataset and
/// tree at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecParams {
    pub c_p: usize,
    pub n_p: usize,
    pub n_np: usize,
    pub d: usize,
    pub n_q: usize,
    pub w_rec: f64,
    pub w_q: f64,
    pub w_p: f64,
    pub w_adv: f64,
    pub w_o: f64,
    /// Per-level loss weights; empty means all 1.
    pub betas: Vec<f64>,
    pub commit_weight: f64,
    pub kernel_size: usize,
    pub leaky_alpha: f64,
    pub shared_heads: bool,
}

impl Default for CodecParams {
    fn default() -> Self {
        // Defaults follow the validated recipe: a scarce codebook keeps
        // quantization cells class-pure, a small non-phylo segment plus a
        // dedicated adversary head keeps species identity out of it.
        CodecParams {
            c_p: 2,
            n_p: 4,
            n_np: 1,
            d: 8,
            n_q: 6,
            w_rec: 1.0,
            w_q: 1.0,
            w_p: 1.0,
            w_adv: 1.0,
            w_o: 0.5,
            betas: Vec::new(),
            commit_weight: 1.0,
            kernel_size: 3,
            leaky_alpha: 0.1,
            shared_heads: false,
        }
    }
}

impl CodecParams {
    pub fn build(
        &self,
        h: usize,
        w: usize,
        c: usize,
        n_l: usize,
        class_counts: Vec<usize>,
    ) -> Result<CodecConfig> {
        let mut cfg = CodecConfig::new(
            h,
            w,
            c,
            self.c_p,
            n_l,
            self.n_p,
            self.n_np,
            self.d,
            self.n_q,
            class_counts,
        );
        cfg.w_rec = self.w_rec;
        cfg.w_q = self.w_q;
        cfg.w_p = self.w_p;
        cfg.w_adv = self.w_adv;
        cfg.w_o = self.w_o;
        if !self.betas.is_empty() {
            anyhow::ensure!(
                self.betas.len() == n_l,
                "betas has {} entries but the tree discretizes to {} levels",
                self.betas.len(),
                n_l
            );
            cfg.betas = self.betas.clone();
        }
        cfg.commit_weight = self.commit_weight;
        cfg.kernel_size = self.kernel_size;
        cfg.leaky_alpha = self.leaky_alpha;
        cfg.shared_heads = self.shared_heads;
        cfg.validate().context("invalid codec configuration")?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleParams {
    /// Additive smoothing for the per-class sequence sampler.
    pub alpha: f64,
    pub count: usize,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            alpha: 0.5,
            count: 100,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub tree: Option<PathBuf>,
    /// Dataset directory (or its manifest.csv).
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Canonical serialized form; hashed into the run manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
