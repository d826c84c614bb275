//! Evaluation machinery: per-location code histograms, entropies,
//! Jensen-Shannon distance matrices, rank correlations, code translation
//! traces, unseen-species placement, and embedding export.
//!
//! All entropies and divergences use base-2 logarithms, so JS divergence is
//! bounded by 1 and the entropy of a uniform 64-code histogram is 6 bits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Imageome;
use crate::phylogeny::DistanceMatrix;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty group for class {0:?}")]
    EmptyGroup(String),
    #[error("distribution not normalized: sums to {0}")]
    NotNormalized(f64),
    #[error("support sizes differ: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("histogram layouts differ: {0}")]
    ConfigMismatch(String),
    #[error("need at least 3 pairs for a rank correlation, got {0}")]
    TooFewPairs(usize),
    #[error("zero vector has no cosine distance")]
    ZeroVector,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("descriptor level {level} out of range 1..={n_l}")]
    LevelOutOfRange { level: usize, n_l: usize },
    #[error("empty seen set")]
    EmptySeenSet,
}

/// Which imageome locations a distance is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// All n_l * n_p phylo locations.
    PhyloFull,
    /// Phylo segments 1..=level.
    DescriptorLevel(usize),
    NonPhylo,
}

impl Segment {
    pub fn parse(s: &str) -> Option<Segment> {
        match s {
            "phylo" => Some(Segment::PhyloFull),
            "nonphylo" => Some(Segment::NonPhylo),
            _ => s
                .strip_prefix("level:")
                .and_then(|v| v.parse().ok())
                .map(Segment::DescriptorLevel),
        }
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Segment::PhyloFull => write!(f, "phylo"),
            Segment::DescriptorLevel(i) => write!(f, "level:{i}"),
            Segment::NonPhylo => write!(f, "nonphylo"),
        }
    }
}

/// Per-location relative code frequencies for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeHistograms {
    pub schema: u32,
    pub class: String,
    /// `[n_l][n_p][n_q]`
    pub h_p: Vec<Vec<Vec<f64>>>,
    /// `[n_np][n_q]`
    pub h_np: Vec<Vec<f64>>,
    pub specimen_count: usize,
}

impl CodeHistograms {
    fn locations(&self, segment: Segment) -> Result<Vec<&[f64]>, AnalysisError> {
        let n_l = self.h_p.len();
        match segment {
            Segment::PhyloFull => Ok(self
                .h_p
                .iter()
                .flat_map(|lvl| lvl.iter().map(|h| h.as_slice()))
                .collect()),
            Segment::DescriptorLevel(i) => {
                if i == 0 || i > n_l {
                    return Err(AnalysisError::LevelOutOfRange { level: i, n_l });
                }
                Ok(self.h_p[..i]
                    .iter()
                    .flat_map(|lvl| lvl.iter().map(|h| h.as_slice()))
                    .collect())
            }
            Segment::NonPhylo => Ok(self.h_np.iter().map(|h| h.as_slice()).collect()),
        }
    }
}

/// Empirical per-location code frequencies over a non-empty group of
/// imageomes that share one class.
pub fn class_histograms(
    class: &str,
    imageomes: &[Imageome],
    n_q: usize,
) -> Result<CodeHistograms, AnalysisError> {
    let Some(first) = imageomes.first() else {
        return Err(AnalysisError::EmptyGroup(class.to_string()));
    };
    let n_l = first.phylo.len();
    let n_p = first.phylo[0].len();
    let n_np = first.nonphylo.len();
    let mut h_p = vec![vec![vec![0.0; n_q]; n_p]; n_l];
    let mut h_np = vec![vec![0.0; n_q]; n_np];
    let inc = 1.0 / imageomes.len() as f64;
    for im in imageomes {
        if im.phylo.len() != n_l || im.nonphylo.len() != n_np {
            return Err(AnalysisError::ConfigMismatch(format!(
                "imageome layout differs within class {class:?}"
            )));
        }
        for (i, seg) in im.phylo.iter().enumerate() {
            for (j, &code) in seg.iter().enumerate() {
                h_p[i][j][code] += inc;
            }
        }
        for (k, &code) in im.nonphylo.iter().enumerate() {
            h_np[k][code] += inc;
        }
    }
    Ok(CodeHistograms {
        schema: 1,
        class: class.to_string(),
        h_p,
        h_np,
        specimen_count: imageomes.len(),
    })
}

/// Shannon entropy in bits; `0 log 0 := 0`.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.log2())
        .sum()
}

/// Entropy per sequence location, same layout as the histograms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationEntropies {
    /// `[n_l][n_p]`
    pub phylo: Vec<Vec<f64>>,
    /// `[n_np]`
    pub nonphylo: Vec<f64>,
}

pub fn location_entropy(h: &CodeHistograms) -> LocationEntropies {
    LocationEntropies {
        phylo: h
            .h_p
            .iter()
            .map(|lvl| lvl.iter().map(|loc| entropy_bits(loc)).collect())
            .collect(),
        nonphylo: h.h_np.iter().map(|loc| entropy_bits(loc)).collect(),
    }
}

/// Jensen-Shannon divergence, base 2, in [0, 1].
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, AnalysisError> {
    if p.len() != q.len() {
        return Err(AnalysisError::SupportMismatch(p.len(), q.len()));
    }
    for dist in [p, q] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(AnalysisError::NotNormalized(s));
        }
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = entropy_bits(&m) - 0.5 * (entropy_bits(p) + entropy_bits(q));
    // clamp tiny negative rounding away
    Ok(js.clamp(0.0, 1.0))
}

/// Mean per-location JS divergence over a segment; the species-pair distance.
pub fn histogram_distance(
    a: &CodeHistograms,
    b: &CodeHistograms,
    segment: Segment,
) -> Result<f64, AnalysisError> {
    let la = a.locations(segment)?;
    let lb = b.locations(segment)?;
    if la.len() != lb.len() {
        return Err(AnalysisError::ConfigMismatch(format!(
            "{} vs {} locations",
            la.len(),
            lb.len()
        )));
    }
    let mut sum = 0.0;
    for (pa, pb) in la.iter().zip(&lb) {
        sum += js_divergence(pa, pb)?;
    }
    Ok(sum / la.len().max(1) as f64)
}

/// Symmetric zero-diagonal matrix of mean-JS distances between per-species
/// histograms, ordered as given.
pub fn embedding_distance_matrix(
    histograms: &[CodeHistograms],
    segment: Segment,
) -> Result<DistanceMatrix, AnalysisError> {
    let n = histograms.len();
    let labels: Vec<String> = histograms.iter().map(|h| h.class.clone()).collect();
    let mut m = DistanceMatrix::new(labels, vec![0.0; n * n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = histogram_distance(&histograms[i], &histograms[j], segment)?;
            m.set_sym(i, j, d);
        }
    }
    Ok(m)
}

/// `1 - cosine similarity` between per-species mean embedding vectors.
pub fn cosine_distance_matrix(
    means: &[(String, Vec<f64>)],
) -> Result<DistanceMatrix, AnalysisError> {
    let n = means.len();
    let norms: Vec<f64> = means
        .iter()
        .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(AnalysisError::ZeroVector);
    }
    let labels = means.iter().map(|(l, _)| l.clone()).collect();
    let mut m = DistanceMatrix::new(labels, vec![0.0; n * n]);
    for i in 0..n {
        for j in (i + 1)..n {
            if means[i].1.len() != means[j].1.len() {
                return Err(AnalysisError::LengthMismatch(format!(
                    "embedding dims {} vs {}",
                    means[i].1.len(),
                    means[j].1.len()
                )));
            }
            let dot: f64 = means[i].1.iter().zip(&means[j].1).map(|(a, b)| a * b).sum();
            m.set_sym(i, j, 1.0 - dot / (norms[i] * norms[j]));
        }
    }
    Ok(m)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties over two equal-length
/// slices.
pub fn spearman_slices(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(AnalysisError::TooFewPairs(a.len()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (da * db).sqrt())
}

/// Spearman correlation between the strictly-upper-triangle entries of two
/// distance matrices over the same species order.
pub fn spearman(a: &DistanceMatrix, b: &DistanceMatrix) -> Result<f64, AnalysisError> {
    if a.labels() != b.labels() {
        return Err(AnalysisError::LengthMismatch(
            "distance matrices have different species orders".into(),
        ));
    }
    spearman_slices(&a.upper_triangle(), &b.upper_triangle())
}

/// Snapshots of a source-to-target code translation: source, then the
/// non-phylo segment replaced, then phylo levels root-most to species.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationTrace {
    pub schema: u32,
    pub snapshots: Vec<Imageome>,
}

pub fn translate(src: &Imageome, tgt: &Imageome) -> Result<TranslationTrace, AnalysisError> {
    if src.phylo.len() != tgt.phylo.len()
        || src.nonphylo.len() != tgt.nonphylo.len()
        || src
            .phylo
            .iter()
            .zip(&tgt.phylo)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(AnalysisError::ConfigMismatch(
            "source and target imageomes have different layouts".into(),
        ));
    }
    let mut snapshots = Vec::with_capacity(src.phylo.len() + 2);
    snapshots.push(src.clone());
    let mut cur = src.clone();
    cur.nonphylo = tgt.nonphylo.clone();
    snapshots.push(cur.clone());
    for level in 0..src.phylo.len() {
        cur.phylo[level] = tgt.phylo[level].clone();
        snapshots.push(cur.clone());
    }
    Ok(TranslationTrace {
        schema: 1,
        snapshots,
    })
}

/// Seen species ranked ascending by segment distance to the unseen class.
pub fn place_unseen(
    unseen: &CodeHistograms,
    seen: &[CodeHistograms],
    segment: Segment,
) -> Result<Vec<(String, f64)>, AnalysisError> {
    if seen.is_empty() {
        return Err(AnalysisError::EmptySeenSet);
    }
    let mut ranked: Vec<(String, f64)> = seen
        .iter()
        .map(|s| Ok((s.class.clone(), histogram_distance(unseen, s, segment)?)))
        .collect::<Result<_, AnalysisError>>()?;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// One CSV row per specimen: id, species, per-level ancestor classes, then
/// the flattened embedding.
pub fn export_embeddings(
    rows: &[(String, String, Vec<usize>, Vec<f64>)],
) -> Result<String, AnalysisError> {
    let n_l = rows.first().map(|r| r.2.len()).unwrap_or(0);
    let dim = rows.first().map(|r| r.3.len()).unwrap_or(0);
    let mut out = String::from("id,species");
    for i in 1..=n_l {
        let _ = write!(out, ",level_{i}");
    }
    for i in 0..dim {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    for (id, species, levels, emb) in rows {
        if levels.len() != n_l || emb.len() != dim {
            return Err(AnalysisError::LengthMismatch(format!(
                "row {id}: {} levels / {} dims, expected {n_l} / {dim}",
                levels.len(),
                emb.len()
            )));
        }
        let _ = write!(out, "{id},{species}");
        for l in levels {
            let _ = write!(out, ",{l}");
        }
        for v in emb {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
