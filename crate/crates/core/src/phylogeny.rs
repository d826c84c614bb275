//! Newick phylogeny parsing, discretization into ancestry levels, and
//! ground-truth evolutionary distance matrices.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhyloError {
    #[error("newick parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("duplicate leaf label {0:?}")]
    DuplicateLeaf(String),
    #[error("tree is not ultrametric: leaf depths range over [{min}, {max}]; normalize depths first")]
    NotUltrametric { min: f64, max: f64 },
    #[error("need at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("level {level} out of range 1..={n_l}")]
    LevelOutOfRange { level: usize, n_l: usize },
    #[error("unknown species {0:?}")]
    UnknownSpecies(String),
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub label: Option<String>,
    /// Length of the edge above this node; 0 for the root if unspecified.
    pub branch_length: f64,
}

/// Rooted phylogeny with branch lengths in time units.
#[derive(Debug, Clone)]
pub struct PhyloTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl PhyloTree {
    pub fn parse_newick(text: &str) -> Result<PhyloTree, PhyloError> {
        Parser::new(text).parse()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty())
            .collect()
    }

    /// Leaf labels in sorted order; the canonical species ordering.
    pub fn species(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .leaves()
            .iter()
            .filter_map(|&i| self.nodes[i].label.clone())
            .collect();
        s.sort();
        s
    }

    pub fn leaf_id(&self, label: &str) -> Option<usize> {
        self.leaves()
            .into_iter()
            .find(|&i| self.nodes[i].label.as_deref() == Some(label))
    }

    /// Sum of branch lengths from the root to `id`.
    pub fn depth(&self, id: usize) -> f64 {
        let mut d = 0.0;
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            d += self.nodes[cur].branch_length;
            cur = p;
        }
        d
    }

    fn path_to_root(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn lca(&self, a: usize, b: usize) -> usize {
        let pa = self.path_to_root(a);
        let pb = self.path_to_root(b);
        let set: std::collections::HashSet<usize> = pa.into_iter().collect();
        for n in pb {
            if set.contains(&n) {
                return n;
            }
        }
        self.root
    }

    /// Total branch length along the path between two nodes.
    pub fn path_length(&self, a: usize, b: usize) -> f64 {
        let l = self.lca(a, b);
        self.depth(a) + self.depth(b) - 2.0 * self.depth(l)
    }

    /// Max leaf depth; the tree height.
    pub fn height(&self) -> f64 {
        self.leaves()
            .iter()
            .map(|&l| self.depth(l))
            .fold(0.0, f64::max)
    }

    pub fn is_ultrametric(&self, rel_tol: f64) -> bool {
        let depths: Vec<f64> = self.leaves().iter().map(|&l| self.depth(l)).collect();
        let max = depths.iter().cloned().fold(0.0, f64::max);
        let min = depths.iter().cloned().fold(f64::INFINITY, f64::min);
        max == 0.0 || (max - min) / max <= rel_tol
    }

    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_node(&self, id: usize, out: &mut String) {
        let n = &self.nodes[id];
        if !n.children.is_empty() {
            out.push('(');
            for (i, &c) in n.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_node(c, out);
            }
            out.push(')');
        }
        if let Some(l) = &n.label {
            out.push_str(l);
        }
        let _ = write!(out, ":{}", n.branch_length);
    }

    /// Cut the tree at `n_l - 1` evenly spaced depths strictly between root
    /// and leaf depth; level `n_l` is the species itself. Requires an
    /// ultrametric tree (tolerance 1e-6 relative).
    pub fn discretize(&self, n_l: usize) -> Result<LevelMap, PhyloError> {
        if n_l < 2 {
            return Err(PhyloError::TooFewLevels(n_l));
        }
        let depths: Vec<f64> = self.leaves().iter().map(|&l| self.depth(l)).collect();
        let max = depths.iter().cloned().fold(0.0, f64::max);
        let min = depths.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > 0.0 && (max - min) / max > 1e-6 {
            return Err(PhyloError::NotUltrametric { min, max });
        }
        let height = max;
        let eps = 1e-9 * height.max(1.0);

        let species = self.species();
        let leaf_ids: Vec<usize> = species
            .iter()
            .map(|s| self.leaf_id(s).expect("species come from leaves"))
            .collect();

        let mut classes = Vec::with_capacity(n_l);
        let mut class_nodes = Vec::with_capacity(n_l);
        for level in 1..=n_l {
            let mut node_for_species = Vec::with_capacity(species.len());
            if level == n_l {
                node_for_species.extend_from_slice(&leaf_ids);
            } else {
                let cut = height * level as f64 / n_l as f64;
                for &leaf in &leaf_ids {
                    // first node on the root->leaf path at or below the cut
                    let mut path = self.path_to_root(leaf);
                    path.reverse();
                    let hit = path
                        .into_iter()
                        .find(|&n| self.depth(n) >= cut - eps)
                        .unwrap_or(leaf);
                    node_for_species.push(hit);
                }
            }
            let mut index_of: HashMap<usize, usize> = HashMap::new();
            let mut nodes_in_order = Vec::new();
            let mut cls = Vec::with_capacity(species.len());
            for &n in &node_for_species {
                let next = index_of.len();
                let idx = *index_of.entry(n).or_insert_with(|| {
                    nodes_in_order.push(n);
                    next
                });
                cls.push(idx);
            }
            classes.push(cls);
            class_nodes.push(nodes_in_order);
        }
        Ok(LevelMap {
            n_l,
            species,
            classes,
            class_nodes,
        })
    }

    /// Leaf path distances, min-max scaled over off-diagonal entries.
    pub fn gt_distance_matrix(&self, species: &[String]) -> Result<DistanceMatrix, PhyloError> {
        let ids: Vec<usize> = species
            .iter()
            .map(|s| {
                self.leaf_id(s)
                    .ok_or_else(|| PhyloError::UnknownSpecies(s.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(self.node_distance_matrix(species, &ids))
    }

    /// Path distances between the level-`level` class nodes, min-max scaled.
    /// `level == n_l` reduces to `gt_distance_matrix` over the map's species.
    pub fn ancestor_distance_matrix(
        &self,
        map: &LevelMap,
        level: usize,
    ) -> Result<DistanceMatrix, PhyloError> {
        if level == 0 || level > map.n_l {
            return Err(PhyloError::LevelOutOfRange {
                level,
                n_l: map.n_l,
            });
        }
        let nodes = &map.class_nodes[level - 1];
        let labels: Vec<String> = if level == map.n_l {
            map.species.clone()
        } else {
            nodes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    self.nodes[n]
                        .label
                        .clone()
                        .unwrap_or_else(|| format!("L{level}C{i}"))
                })
                .collect()
        };
        Ok(self.node_distance_matrix(&labels, nodes))
    }

    /// Level-`level` ancestor distances laid out per species: entry (a, b) is
    /// the path distance between the two species' level-`level` ancestor
    /// classes, min-max scaled. Species sharing an ancestor sit at 0. Useful
    /// for correlating against per-species embedding distance matrices.
    pub fn species_ancestor_distance_matrix(
        &self,
        map: &LevelMap,
        species: &[String],
        level: usize,
    ) -> Result<DistanceMatrix, PhyloError> {
        if level == 0 || level > map.n_l {
            return Err(PhyloError::LevelOutOfRange {
                level,
                n_l: map.n_l,
            });
        }
        let nodes = &map.class_nodes[level - 1];
        let ids: Vec<usize> = species
            .iter()
            .map(|s| Ok(nodes[map.class_of(level, s)?]))
            .collect::<Result<_, PhyloError>>()?;
        Ok(self.node_distance_matrix(species, &ids))
    }

    fn node_distance_matrix(&self, labels: &[String], ids: &[usize]) -> DistanceMatrix {
        let n = ids.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.path_length(ids[i], ids[j]);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        let mut m = DistanceMatrix {
            labels: labels.to_vec(),
            values,
        };
        m.min_max_scale();
        m
    }
}

/// Per-level species-to-ancestor-class assignments.
#[derive(Debug, Clone)]
pub struct LevelMap {
    n_l: usize,
    species: Vec<String>,
    /// classes[level-1][species_index] in 0..K_level
    classes: Vec<Vec<usize>>,
    /// class_nodes[level-1][class] = representative tree node
    class_nodes: Vec<Vec<usize>>,
}

impl LevelMap {
    pub fn n_l(&self) -> usize {
        self.n_l
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn species_index(&self, species: &str) -> Option<usize> {
        self.species.iter().position(|s| s == species)
    }

    /// Number of classes at each level, root-most first.
    pub fn class_counts(&self) -> Vec<usize> {
        self.class_nodes.iter().map(|c| c.len()).collect()
    }

    /// Class index of `species` at `level` (1-based, level n_l = species).
    pub fn class_of(&self, level: usize, species: &str) -> Result<usize, PhyloError> {
        if level == 0 || level > self.n_l {
            return Err(PhyloError::LevelOutOfRange {
                level,
                n_l: self.n_l,
            });
        }
        let si = self
            .species_index(species)
            .ok_or_else(|| PhyloError::UnknownSpecies(species.to_string()))?;
        Ok(self.classes[level - 1][si])
    }

    /// All per-level class labels for `species`, level 1..=n_l.
    pub fn labels_for(&self, species: &str) -> Result<Vec<usize>, PhyloError> {
        (1..=self.n_l)
            .map(|l| self.class_of(l, species))
            .collect()
    }
}

/// Symmetric species-pair distances with a fixed label order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(labels: Vec<String>, values: Vec<f64>) -> Self {
        assert_eq!(labels.len() * labels.len(), values.len());
        DistanceMatrix { labels, values }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        let n = self.n();
        self.values[i * n + j] = v;
        self.values[j * n + i] = v;
    }

    /// Strictly-upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Min-max scale off-diagonal entries to [0,1]; an all-equal off-diagonal
    /// maps to all zeros and the diagonal stays 0.
    pub fn min_max_scale(&mut self) {
        let tri = self.upper_triangle();
        let Some(&max) = tri.iter().max_by(|a, b| a.total_cmp(b)) else {
            return;
        };
        let min = *tri.iter().min_by(|a, b| a.total_cmp(b)).unwrap();
        let n = self.n();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = self.values[i * n + j];
                self.values[i * n + j] = if max > min { (v - min) / (max - min) } else { 0.0 };
            }
        }
    }

    /// CSV with a header row of labels; rows carry a leading label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("species");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for i in 0..self.n() {
            out.push_str(&self.labels[i]);
            for j in 0..self.n() {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    nodes: Vec<TreeNode>,
    seen_leaves: HashMap<String, ()>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            bytes: text.as_bytes(),
            pos: 0,
            nodes: Vec::new(),
            seen_leaves: HashMap::new(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> PhyloError {
        PhyloError::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn parse(mut self) -> Result<PhyloTree, PhyloError> {
        self.skip_ws();
        let root = self.parse_subtree(true)?;
        self.skip_ws();
        match self.peek() {
            Some(b';') => self.pos += 1,
            _ => return Err(self.err("expected ';'")),
        }
        self.skip_ws();
        if self.pos != self.bytes.len() {
            return Err(self.err("trailing content after ';'"));
        }
        Ok(PhyloTree {
            nodes: self.nodes,
            root,
        })
    }

    fn parse_subtree(&mut self, is_root: bool) -> Result<usize, PhyloError> {
        self.skip_ws();
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            parent: None,
            children: Vec::new(),
            label: None,
            branch_length: 0.0,
        });
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.parse_subtree(false)?;
                self.nodes[child].parent = Some(id);
                self.nodes[id].children.push(child);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.err("expected ',' or ')'")),
                }
            }
            // optional internal label
            let label = self.parse_label();
            if !label.is_empty() {
                self.nodes[id].label = Some(label);
            }
        } else {
            let label = self.parse_label();
            if label.is_empty() {
                return Err(self.err("expected leaf label or '('"));
            }
            if self.seen_leaves.insert(label.clone(), ()).is_some() {
                return Err(PhyloError::DuplicateLeaf(label));
            }
            self.nodes[id].label = Some(label);
        }
        self.skip_ws();
        if self.peek() == Some(b':') {
            self.pos += 1;
            let v = self.parse_number()?;
            if v < 0.0 {
                return Err(self.err("negative branch length"));
            }
            self.nodes[id].branch_length = v;
        } else if !is_root {
            return Err(self.err("missing branch length"));
        }
        Ok(id)
    }

    fn parse_label(&mut self) -> String {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if matches!(b, b'(' | b')' | b',' | b':' | b';') || b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned()
    }

    fn parse_number(&mut self) -> Result<f64, PhyloError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected a number"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_leaf_tree() {
        let t = PhyloTree::parse_newick("(A:1,B:1):0;").unwrap();
        let leaves = t.leaves();
        assert_eq!(leaves.len(), 2);
        for l in leaves {
            assert_eq!(t.depth(l), 1.0);
        }
    }

    #[test]
    fn path_sum_across_root() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let a = t.leaf_id("A").unwrap();
        let c = t.leaf_id("C").unwrap();
        assert_eq!(t.path_length(a, c), 4.0);
    }

    #[test]
    fn duplicate_leaf_rejected() {
        let err = PhyloTree::parse_newick("(A:1,A:2):0;").unwrap_err();
        assert!(matches!(err, PhyloError::DuplicateLeaf(_)));
    }

    #[test]
    fn unbalanced_and_missing_length_report_position() {
        assert!(matches!(
            PhyloTree::parse_newick("((A:1,B:1):0;"),
            Err(PhyloError::Parse { .. })
        ));
        assert!(matches!(
            PhyloTree::parse_newick("(A:1,B):0;"),
            Err(PhyloError::Parse { .. })
        ));
    }

    #[test]
    fn newick_round_trip_is_isomorphic() {
        let src = "((A:1,B:1):1,(C:1,D:1):1):0;";
        let t = PhyloTree::parse_newick(src).unwrap();
        let t2 = PhyloTree::parse_newick(&t.to_newick()).unwrap();
        assert_eq!(t.species(), t2.species());
        for a in t.species() {
            for b in t.species() {
                let d1 = t.path_length(t.leaf_id(&a).unwrap(), t.leaf_id(&b).unwrap());
                let d2 = t2.path_length(t2.leaf_id(&a).unwrap(), t2.leaf_id(&b).unwrap());
                assert!((d1 - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discretize_balanced_two_levels() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,(C:1,D:1):1):0;").unwrap();
        let m = t.discretize(2).unwrap();
        assert_eq!(m.class_counts(), vec![2, 4]);
        assert_eq!(m.class_of(1, "A").unwrap(), m.class_of(1, "B").unwrap());
        assert_eq!(m.class_of(1, "C").unwrap(), m.class_of(1, "D").unwrap());
        assert_ne!(m.class_of(1, "A").unwrap(), m.class_of(1, "C").unwrap());
        // species level is a bijection
        let mut seen: Vec<usize> = t
            .species()
            .iter()
            .map(|s| m.class_of(2, s).unwrap())
            .collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn discretize_star_tree_every_species_own_class() {
        let t = PhyloTree::parse_newick("(A:1,B:1,C:1):0;").unwrap();
        let m = t.discretize(3).unwrap();
        assert_eq!(m.class_counts(), vec![3, 3, 3]);
    }

    #[test]
    fn discretize_rejects_non_ultrametric_and_small_n_l() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,C:1):0;").unwrap();
        assert!(matches!(
            t.discretize(2),
            Err(PhyloError::NotUltrametric { .. })
        ));
        let u = PhyloTree::parse_newick("(A:1,B:1):0;").unwrap();
        assert!(matches!(u.discretize(1), Err(PhyloError::TooFewLevels(1))));
    }

    #[test]
    fn discretize_invariant_to_uniform_scaling() {
        let t1 = PhyloTree::parse_newick("((A:1,B:1):1,(C:1,D:1):1):0;").unwrap();
        let t2 = PhyloTree::parse_newick("((A:1000,B:1000):1000,(C:1000,D:1000):1000):0;").unwrap();
        let m1 = t1.discretize(2).unwrap();
        let m2 = t2.discretize(2).unwrap();
        for s in t1.species() {
            assert_eq!(m1.class_of(1, &s).unwrap(), m2.class_of(1, &s).unwrap());
        }
    }

    #[test]
    fn gt_distances_scaled() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,C:2):0;").unwrap();
        let species = t.species();
        let m = t.gt_distance_matrix(&species).unwrap();
        // raw: d(A,B)=2, d(A,C)=d(B,C)=4 -> scaled 0 and 1
        let ia = m.labels().iter().position(|l| l == "A").unwrap();
        let ib = m.labels().iter().position(|l| l == "B").unwrap();
        let ic = m.labels().iter().position(|l| l == "C").unwrap();
        assert_eq!(m.get(ia, ib), 0.0);
        assert_eq!(m.get(ia, ic), 1.0);
        assert_eq!(m.get(ib, ic), 1.0);
        assert_eq!(m.get(ia, ia), 0.0);
    }

    #[test]
    fn gt_distances_degenerate_all_equal() {
        let t = PhyloTree::parse_newick("(A:1,B:1):0;").unwrap();
        let m = t.gt_distance_matrix(&t.species()).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn gt_unknown_species_errors() {
        let t = PhyloTree::parse_newick("(A:1,B:1):0;").unwrap();
        assert!(t.gt_distance_matrix(&["A".into(), "Z".into()]).is_err());
    }

    #[test]
    fn ancestor_matrix_at_species_level_matches_gt() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,(C:1,D:1):1):0;").unwrap();
        let m = t.discretize(2).unwrap();
        let gt = t.gt_distance_matrix(&t.species()).unwrap();
        let anc = t.ancestor_distance_matrix(&m, 2).unwrap();
        assert_eq!(gt.labels(), anc.labels());
        for i in 0..gt.n() {
            for j in 0..gt.n() {
                assert!((gt.get(i, j) - anc.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ancestor_matrix_level_one() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,(C:1,D:1):1):0;").unwrap();
        let m = t.discretize(2).unwrap();
        let anc = t.ancestor_distance_matrix(&m, 1).unwrap();
        assert_eq!(anc.n(), 2);
        // single off-diagonal pair; degenerate scaling maps it to 0
        assert_eq!(anc.get(0, 1), anc.get(1, 0));
        assert!(t.ancestor_distance_matrix(&m, 3).is_err());
    }

    #[test]
    fn nesting_invariant() {
        let t =
            PhyloTree::parse_newick("(((A:1,B:1):1,(C:1,D:1):1):1,((E:1,F:1):1,(G:1,H:1):1):1):0;")
                .unwrap();
        let m = t.discretize(3).unwrap();
        let species = t.species();
        for s in &species {
            for u in &species {
                for j in 2..=3usize {
                    if m.class_of(j, s).unwrap() == m.class_of(j, u).unwrap() {
                        for i in 1..j {
                            assert_eq!(m.class_of(i, s).unwrap(), m.class_of(i, u).unwrap());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn leaf_metric_triangle_inequality() {
        let t =
            PhyloTree::parse_newick("(((A:1,B:1):1,(C:1,D:1):1):1,((E:1,F:1):1,(G:1,H:1):1):1):0;")
                .unwrap();
        let leaves = t.leaves();
        for &a in &leaves {
            for &b in &leaves {
                for &c in &leaves {
                    let dab = t.path_length(a, b);
                    let dbc = t.path_length(b, c);
                    let dac = t.path_length(a, c);
                    assert!(dac <= dab + dbc + 1e-12);
                }
                assert_eq!(t.path_length(a, b), t.path_length(b, a));
            }
            assert_eq!(t.path_length(a, a), 0.0);
        }
    }

    #[test]
    fn species_ancestor_matrix_by_hand() {
        let t = PhyloTree::parse_newick("((A:1,B:1):1,(C:1,D:1):1):0;").unwrap();
        let map = t.discretize(2).unwrap();
        let species: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let m = t.species_ancestor_distance_matrix(&map, &species, 1).unwrap();
        // siblings share their level-1 ancestor (distance 0); the two clades
        // sit at the max distance, which min-max scales to 1
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(2, 3), 0.0);
        assert_eq!(m.get(0, 2), 1.0);
        assert_eq!(m.get(1, 3), 1.0);
        // species level reduces to the scaled leaf metric
        let full = t.species_ancestor_distance_matrix(&map, &species, 2).unwrap();
        let gt = t.gt_distance_matrix(&species).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((full.get(i, j) - gt.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
