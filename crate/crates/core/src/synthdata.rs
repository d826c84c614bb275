//! Synthetic specimens with planted, phylogeny-aligned structure.
//!
//! Traits accumulate along the tree Brownian-style (variance proportional to
//! branch length), so species that diverged recently share most of their
//! signal. Each ancestry level's trait vector is painted into its own
//! disjoint spatial region of the feature map; nuisance variation is a
//! per-specimen global brightness offset plus seeded pixel noise.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::phylogeny::{LevelMap, PhyloError, PhyloTree};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown species {0:?}")]
    UnknownSpecies(String),
    #[error("holdout covers all {0} species; nothing left to train on")]
    HoldoutCoversAll(usize),
    #[error(transparent)]
    Phylo(#[from] PhyloError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// One labeled specimen.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub species: String,
    /// `[C, H, W]` feature map.
    pub x: Tensor,
    /// Per-level ancestor class indices, level 1 first.
    pub labels: Vec<usize>,
}

/// Generator spec: the tree, its discretization, planted trait vectors, and
/// the nuisance model.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub tree: PhyloTree,
    pub levels: LevelMap,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub trait_scale: f64,
    pub brightness_amplitude: f64,
    pub noise_amplitude: f64,
    pub specimens_per_species: usize,
    pub seed: u64,
    /// trait vector per (level, class); length = region pixels * channels
    traits: HashMap<(usize, usize), Vec<f64>>,
}

impl SynthSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: PhyloTree,
        n_l: usize,
        h: usize,
        w: usize,
        c: usize,
        trait_scale: f64,
        brightness_amplitude: f64,
        noise_amplitude: f64,
        specimens_per_species: usize,
        seed: u64,
    ) -> Result<Self, SynthError> {
        let levels = tree.discretize(n_l)?;
        let mut spec = SynthSpec {
            tree,
            levels,
            h,
            w,
            c,
            trait_scale,
            brightness_amplitude,
            noise_amplitude,
            specimens_per_species,
            seed,
            traits: HashMap::new(),
        };
        spec.plant_traits();
        Ok(spec)
    }

    /// Column range of the region assigned to `level` (1-based).
    fn region(&self, level: usize) -> (usize, usize) {
        let n_l = self.levels.n_l();
        let base = self.w / n_l;
        let start = (level - 1) * base;
        let end = if level == n_l { self.w } else { level * base };
        (start, end)
    }

    fn region_len(&self, level: usize) -> usize {
        let (s, e) = self.region(level);
        (e - s) * self.h * self.c
    }

    /// Brownian accumulation: every tree node gets a deterministic trait
    /// vector equal to its parent's plus a branch-length-scaled increment.
    fn plant_traits(&mut self) {
        let max_len = (1..=self.levels.n_l())
            .map(|l| self.region_len(l))
            .max()
            .unwrap_or(0);
        // node trait vectors, root = 0
        let mut node_traits: HashMap<usize, Vec<f64>> = HashMap::new();
        node_traits.insert(self.tree.root(), vec![0.0; max_len]);
        let mut stack = vec![self.tree.root()];
        while let Some(n) = stack.pop() {
            let parent_trait = node_traits[&n].clone();
            for &child in &self.tree.node(n).children {
                let bl = self.tree.node(child).branch_length;
                let sd = self.trait_scale * bl.sqrt();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(self.seed ^ (child as u64).wrapping_mul(0x9e3779b97f4a7c15));
                let t: Vec<f64> = parent_trait
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p + sd * z
                    })
                    .collect();
                node_traits.insert(child, t);
                stack.push(child);
            }
        }
        // per (level, class): the trait of the class's representative node
        for level in 1..=self.levels.n_l() {
            let len = self.region_len(level);
            for s in self.levels.species() {
                let class = self.levels.class_of(level, s).expect("species in map");
                if self.traits.contains_key(&(level, class)) {
                    continue;
                }
                let node = self.class_node(level, s);
                let t = node_traits[&node][..len].to_vec();
                self.traits.insert((level, class), t);
            }
        }
    }

    fn class_node(&self, level: usize, species: &str) -> usize {
        // re-derive the representative node the same way discretize does:
        // walk up from the leaf to the first node above the cut depth
        let leaf = self.tree.leaf_id(species).expect("species is a leaf");
        if level == self.levels.n_l() {
            return leaf;
        }
        let height = self.tree.height();
        let cut = height * level as f64 / self.levels.n_l() as f64;
        let eps = 1e-9 * height.max(1.0);
        let mut cur = leaf;
        let mut best = leaf;
        while let Some(p) = self.tree.node(cur).parent {
            if self.tree.depth(cur) >= cut - eps {
                best = cur;
            }
            cur = p;
        }
        best
    }

    /// Noiseless class signal for a species; the specimen before nuisance.
    pub fn clean_signal(&self, species: &str) -> Result<Tensor, SynthError> {
        self.levels
            .species_index(species)
            .ok_or_else(|| SynthError::UnknownSpecies(species.to_string()))?;
        let mut x = Tensor::zeros(&[self.c, self.h, self.w]);
        for level in 1..=self.levels.n_l() {
            let class = self.levels.class_of(level, species)?;
            let t = &self.traits[&(level, class)];
            let (cs, ce) = self.region(level);
            let mut k = 0;
            for ch in 0..self.c {
                for row in 0..self.h {
                    for col in cs..ce {
                        x.data_mut()[(ch * self.h + row) * self.w + col] = t[k];
                        k += 1;
                    }
                }
            }
        }
        Ok(x)
    }

    pub fn render_specimen(
        &self,
        species: &str,
        instance_seed: u64,
    ) -> Result<Sample, SynthError> {
        let mut x = self.clean_signal(species)?;
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let offset = self.brightness_amplitude * rng.gen_range(-1.0..=1.0);
        for v in x.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += offset + self.noise_amplitude * z;
        }
        let labels = self.levels.labels_for(species)?;
        Ok(Sample {
            id: format!("{species}-{instance_seed}"),
            species: species.to_string(),
            x,
            labels,
        })
    }
}

/// Train/test/unseen specimen sets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub unseen: Vec<Sample>,
}

/// Render all specimens and split 80/20 per non-holdout species; holdout
/// species land exclusively in the unseen set.
pub fn make_dataset(
    spec: &SynthSpec,
    split_seed: u64,
    holdout_species: &[String],
) -> Result<Dataset, SynthError> {
    let species = spec.levels.species().to_vec();
    for h in holdout_species {
        if !species.contains(h) {
            return Err(SynthError::UnknownSpecies(h.clone()));
        }
    }
    let seen: Vec<&String> = species
        .iter()
        .filter(|s| !holdout_species.contains(s))
        .collect();
    if seen.is_empty() {
        return Err(SynthError::HoldoutCoversAll(species.len()));
    }
    let mut ds = Dataset::default();
    for (si, sp) in species.iter().enumerate() {
        let samples: Vec<Sample> = (0..spec.specimens_per_species)
            .map(|k| {
                let instance_seed = split_seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((si * spec.specimens_per_species + k) as u64);
                spec.render_specimen(sp, instance_seed)
            })
            .collect::<Result<_, _>>()?;
        if holdout_species.contains(sp) {
            ds.unseen.extend(samples);
            continue;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ si as u64);
        order.shuffle(&mut rng);
        let n_train = (samples.len() * 4) / 5;
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_train {
                ds.train.push(samples[i].clone());
            } else {
                ds.test.push(samples[i].clone());
            }
        }
    }
    Ok(ds)
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train
            .iter()
            .chain(self.test.iter())
            .chain(self.unseen.iter())
    }

    /// Write tensors as PTN1 files plus a CSV manifest
    /// (`id,species,tensor_path,split`).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("tensors"))?;
        let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.csv"))?);
        writeln!(manifest, "id,species,tensor_path,split")?;
        for (split, samples) in [
            ("train", &self.train),
            ("test", &self.test),
            ("unseen", &self.unseen),
        ] {
            for s in samples {
                let rel = format!("tensors/{}.ptn", s.id);
                s.x.save(dir.join(&rel))?;
                writeln!(manifest, "{},{},{},{}", s.id, s.species, rel, split)?;
            }
        }
        Ok(())
    }

    /// Load a dataset written by [`Dataset::save`]. Labels are re-derived
    /// from the level map.
    pub fn load(dir: impl AsRef<Path>, levels: &LevelMap) -> Result<Dataset, SynthError> {
        let dir = dir.as_ref();
        let raw = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut ds = Dataset::default();
        for (lineno, line) in raw.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(SynthError::Manifest(format!(
                    "line {}: expected 4 columns, got {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let sample = Sample {
                id: parts[0].to_string(),
                species: parts[1].to_string(),
                x: Tensor::load(dir.join(parts[2]))?,
                labels: levels.labels_for(parts[1])?,
            };
            match parts[3] {
                "train" => ds.train.push(sample),
                "test" => ds.test.push(sample),
                "unseen" => ds.unseen.push(sample),
                other => {
                    return Err(SynthError::Manifest(format!(
                        "line {}: unknown split {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(ds)
    }
}
