//! Subcommand implementations. Each one loads what it needs, runs the core
//! pipeline, writes its artifacts under --out-dir, and records them in the
//! run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imageome_core::analysis::{
    class_histograms, embedding_distance_matrix, location_entropy, place_unseen, spearman,
    translate, CodeHistograms, Segment,
};
use imageome_core::sampler::fit_sampler;
use imageome_core::synthdata::{make_dataset, Dataset, Sample, SynthSpec};
use imageome_core::trainer::Trainer;
use imageome_core::{analysis, Imageome, LevelMap, PhyloCodec, PhyloTree};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunRecorder;

pub struct Ctx {
    pub cfg: RunConfig,
    pub command: &'static str,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        self.cfg
            .paths
            .out_dir
            .as_deref()
            .context("--out-dir (or paths.out_dir in the config) is required")
    }

    fn recorder(&self) -> Result<RunRecorder> {
        // the output directory names the run, it doesn't configure it; keep
        // it out of the hash so reruns into fresh dirs stay comparable
        let mut hashed = self.cfg.clone();
        hashed.paths.out_dir = None;
        RunRecorder::new(
            self.out_dir()?,
            self.command,
            self.cfg.seed,
            &hashed.canonical_json(),
        )
    }

    fn tree(&self) -> Result<PhyloTree> {
        let path = self
            .cfg
            .paths
            .tree
            .as_deref()
            .context("--tree (or paths.tree in the config) is required")?;
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading tree {}", path.display()))?;
        PhyloTree::parse_newick(&raw).with_context(|| format!("parsing {}", path.display()))
    }

    fn dataset_dir(&self) -> Result<PathBuf> {
        let path = self
            .cfg
            .paths
            .manifest
            .as_deref()
            .context("--manifest (or paths.manifest in the config) is required")?;
        // accept either the dataset directory or its manifest.csv
        if path.is_file() {
            Ok(path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")))
        } else {
            Ok(path.to_path_buf())
        }
    }

    fn dataset(&self, levels: &LevelMap) -> Result<Dataset> {
        let dir = self.dataset_dir()?;
        Dataset::load(&dir, levels).with_context(|| format!("loading dataset {}", dir.display()))
    }

    fn checkpoint(&self) -> Result<PhyloCodec> {
        let path = self
            .cfg
            .paths
            .checkpoint
            .as_deref()
            .context("--checkpoint (or paths.checkpoint in the config) is required")?;
        // accept either the model directory or a train out-dir containing model/
        let dir = if path.join("model.json").is_file() {
            path.to_path_buf()
        } else {
            path.join("model")
        };
        PhyloCodec::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
    }
}

pub fn synth(ctx: &Ctx) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let tree = ctx.tree()?;
    let s = &ctx.cfg.synth;
    let spec = SynthSpec::new(
        tree,
        s.n_l,
        s.h,
        s.w,
        s.c,
        s.trait_scale,
        s.brightness_amplitude,
        s.noise_amplitude,
        s.specimens_per_species,
        ctx.cfg.seed,
    )?;
    let ds = make_dataset(&spec, ctx.cfg.seed, &s.holdout)?;
    ds.save(rec.out_dir())?;
    rec.record_existing("manifest.csv")?;
    rec.record_existing("tensors")?;
    rec.finish()
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(ctx.cfg.synth.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let first = ds
        .train
        .first()
        .context("training split is empty; run synth first")?;
    let shape = first.x.shape();
    let codec_cfg = ctx.cfg.codec.build(
        shape[1],
        shape[2],
        shape[0],
        levels.n_l(),
        levels.class_counts(),
    )?;
    let mut model = PhyloCodec::init(codec_cfg, ctx.cfg.seed)?;
    let mut tc = ctx.cfg.train.clone();
    tc.seed = ctx.cfg.seed;
    let mut trainer = Trainer::new(tc);
    trainer.fit(&mut model, &ds.train, &ds.test, Some(rec.out_dir()))?;
    rec.record_existing("model")?;
    rec.record_existing("train_log.jsonl")?;
    for entry in std::fs::read_dir(rec.out_dir())? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("checkpoint-") {
            rec.record_existing(&name)?;
        }
    }
    rec.finish()
}

#[derive(Serialize)]
struct EncodedLine<'a> {
    id: &'a str,
    species: &'a str,
    phylo: &'a Vec<Vec<usize>>,
    nonphylo: &'a Vec<usize>,
}

fn encode_samples<'a>(
    model: &PhyloCodec,
    samples: impl Iterator<Item = &'a Sample>,
) -> Result<Vec<(&'a Sample, Imageome)>> {
    samples
        .map(|s| Ok((s, model.encode(&s.x)?.0)))
        .collect::<Result<_>>()
}

pub fn encode(ctx: &Ctx) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let encoded = encode_samples(&model, ds.all())?;
    let mut out = String::new();
    for (s, im) in &encoded {
        let line = serde_json::to_string(&EncodedLine {
            id: &s.id,
            species: &s.species,
            phylo: &im.phylo,
            nonphylo: &im.nonphylo,
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    rec.write("imageomes.jsonl", out.as_bytes())?;
    rec.finish()
}

/// Species-keyed histograms over the seen (train + test) specimens, in the
/// level map's species order.
fn seen_histograms(
    model: &PhyloCodec,
    levels: &LevelMap,
    ds: &Dataset,
) -> Result<Vec<CodeHistograms>> {
    let mut hists = Vec::new();
    for sp in levels.species() {
        let ims: Vec<Imageome> = ds
            .train
            .iter()
            .chain(&ds.test)
            .filter(|s| &s.species == sp)
            .map(|s| Ok(model.encode(&s.x)?.0))
            .collect::<Result<_>>()?;
        if !ims.is_empty() {
            hists.push(class_histograms(sp, &ims, model.cfg.n_q)?);
        }
    }
    Ok(hists)
}

fn segments(n_l: usize) -> Vec<Segment> {
    let mut out = vec![Segment::PhyloFull];
    out.extend((1..=n_l).map(Segment::DescriptorLevel));
    out.push(Segment::NonPhylo);
    out
}

fn segment_file_stem(seg: Segment) -> String {
    match seg {
        Segment::PhyloFull => "phylo".into(),
        Segment::DescriptorLevel(i) => format!("level_{i}"),
        Segment::NonPhylo => "nonphylo".into(),
    }
}

pub fn analyze(ctx: &Ctx) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let hists = seen_histograms(&model, &levels, &ds)?;
    if hists.len() < 3 {
        bail!("need at least 3 seen species to analyze, found {}", hists.len());
    }
    rec.write("histograms.json", serde_json::to_string_pretty(&hists)?.as_bytes())?;

    let entropies: Vec<_> = hists
        .iter()
        .map(|h| (h.class.clone(), location_entropy(h)))
        .collect();
    rec.write(
        "entropies.json",
        serde_json::to_string_pretty(&entropies)?.as_bytes(),
    )?;

    let present: Vec<String> = hists.iter().map(|h| h.class.clone()).collect();
    let n_l = model.cfg.n_l;
    let gt_matrices: Vec<_> = (1..=n_l)
        .map(|lvl| tree.species_ancestor_distance_matrix(&levels, &present, lvl))
        .collect::<Result<_, _>>()?;
    for (lvl, m) in gt_matrices.iter().enumerate() {
        rec.write(&format!("gt_level_{}.csv", lvl + 1), m.to_csv().as_bytes())?;
    }

    let mut report = String::from("segment,gt_level,spearman\n");
    for seg in segments(n_l) {
        let emb = embedding_distance_matrix(&hists, seg)?;
        rec.write(
            &format!("distances_{}.csv", segment_file_stem(seg)),
            emb.to_csv().as_bytes(),
        )?;
        for (lvl, gt) in gt_matrices.iter().enumerate() {
            let rho = spearman(&emb, gt)?;
            let _ = writeln!(report, "{seg},{},{rho}", lvl + 1);
        }
    }
    rec.write("correlations.csv", report.as_bytes())?;
    rec.finish()
}

pub fn translate_cmd(ctx: &Ctx, src_id: &str, tgt_id: &str) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let find = |id: &str| -> Result<&Sample> {
        ds.all()
            .find(|s| s.id == id)
            .with_context(|| format!("specimen id {id:?} not in the dataset"))
    };
    let (src, _) = model.encode(&find(src_id)?.x)?;
    let (tgt, _) = model.encode(&find(tgt_id)?.x)?;
    let trace = translate(&src, &tgt)?;
    let mut out = String::new();
    for snap in &trace.snapshots {
        out.push_str(&serde_json::to_string(snap)?);
        out.push('\n');
    }
    rec.write("trace.jsonl", out.as_bytes())?;
    rec.finish()
}

pub fn place_unseen_cmd(ctx: &Ctx, segment: Segment) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    if ds.unseen.is_empty() {
        bail!("dataset has no unseen split; synth with a non-empty holdout list");
    }
    let seen = seen_histograms(&model, &levels, &ds)?;
    let mut unseen_species: Vec<String> = ds.unseen.iter().map(|s| s.species.clone()).collect();
    unseen_species.sort();
    unseen_species.dedup();

    let mut out = String::from("unseen,rank,seen,distance\n");
    for sp in &unseen_species {
        let ims: Vec<Imageome> = ds
            .unseen
            .iter()
            .filter(|s| &s.species == sp)
            .map(|s| Ok(model.encode(&s.x)?.0))
            .collect::<Result<_>>()?;
        let h = class_histograms(sp, &ims, model.cfg.n_q)?;
        for (rank, (seen_sp, dist)) in place_unseen(&h, &seen, segment)?.iter().enumerate() {
            let _ = writeln!(out, "{sp},{},{seen_sp},{dist}", rank + 1);
        }
    }
    rec.write("placement.csv", out.as_bytes())?;
    rec.finish()
}

pub fn sample_cmd(ctx: &Ctx, class: &str, count: usize, alpha: f64) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let ims: Vec<Imageome> = ds
        .train
        .iter()
        .filter(|s| s.species == class)
        .map(|s| Ok(model.encode(&s.x)?.0))
        .collect::<Result<_>>()?;
    let sampler = fit_sampler(class, &ims, model.cfg.n_q, alpha)?;
    rec.write(
        "sampler.json",
        serde_json::to_string_pretty(&sampler)?.as_bytes(),
    )?;
    let mut out = String::new();
    for im in sampler.sample(count, ctx.cfg.seed) {
        out.push_str(&serde_json::to_string(&im)?);
        out.push('\n');
    }
    rec.write("samples.jsonl", out.as_bytes())?;
    rec.finish()
}

pub fn export_embeddings_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = ctx.recorder()?;
    let model = ctx.checkpoint()?;
    let tree = ctx.tree()?;
    let levels = tree.discretize(model.cfg.n_l)?;
    let ds = ctx.dataset(&levels)?;
    let mut rows = Vec::new();
    for s in ds.all() {
        let (zp, znp) = model.embed(&s.x)?;
        let mut emb = zp.data().to_vec();
        emb.extend_from_slice(znp.data());
        rows.push((s.id.clone(), s.species.clone(), s.labels.clone(), emb));
    }
    let csv = analysis::export_embeddings(&rows)?;
    rec.write("embeddings.csv", csv.as_bytes())?;
    rec.finish()
}
