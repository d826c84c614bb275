//! Phylo-encoder and phylo-decoder blocks with their training losses.
//!
//! The encoder maps a feature map to an imageome: `n_l` phylo segments of
//! `n_p` codes each (level 1 = root-most) plus `n_np` non-phylo codes, all
//! drawn from one shared codebook. Five losses drive training:
//! reconstruction, quantization, the per-level descriptor classification
//! loss, an adversarial probe loss on the non-phylo segment, and a kernel
//! orthogonality penalty on the encoder convolution.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::quantizer::{quantize_in_graph, quantize_in_graph_frozen, Codebook, QuantSnapshot};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecConfig {
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    /// Channels routed to the phylo branch; the rest feed the non-phylo one.
    pub c_p: usize,
    pub n_l: usize,
    pub n_p: usize,
    pub n_np: usize,
    pub d: usize,
    pub n_q: usize,
    /// Classes per level, root-most first (K_1..K_{n_l}).
    pub class_counts: Vec<usize>,
    pub w_rec: f64,
    pub w_q: f64,
    pub w_p: f64,
    pub w_adv: f64,
    pub w_o: f64,
    /// Per-level weights for the classification and adversarial losses.
    pub betas: Vec<f64>,
    pub commit_weight: f64,
    pub kernel_size: usize,
    pub leaky_alpha: f64,
    /// Share the per-level heads between the phylo and adversarial losses.
    pub shared_heads: bool,
}

impl CodecConfig {
    pub fn new(
        h_in: usize,
        w_in: usize,
        c_in: usize,
        c_p: usize,
        n_l: usize,
        n_p: usize,
        n_np: usize,
        d: usize,
        n_q: usize,
        class_counts: Vec<usize>,
    ) -> Self {
        CodecConfig {
            h_in,
            w_in,
            c_in,
            c_p,
            n_l,
            n_p,
            n_np,
            d,
            n_q,
            class_counts,
            w_rec: 1.0,
            w_q: 1.0,
            w_p: 1.0,
            w_adv: 0.1,
            w_o: 0.01,
            betas: vec![1.0; n_l],
            commit_weight: 0.25,
            kernel_size: 3,
            leaky_alpha: 0.1,
            shared_heads: true,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.c_p >= 1
            && self.c_p < self.c_in
            && self.n_l * self.n_p >= 1
            && self.n_np >= 1
            && self.d >= 1
            && self.n_q >= 1
            && self.class_counts.len() == self.n_l
            && self.betas.len() == self.n_l
            && self.kernel_size % 2 == 1
            && [self.w_rec, self.w_q, self.w_p, self.w_adv, self.w_o]
                .iter()
                .all(|w| *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(TensorError::shape("codec_config", format!("{:?}", self)))
        }
    }

    pub fn phylo_rows(&self) -> usize {
        self.n_l * self.n_p
    }

    fn hidden(&self) -> usize {
        4 * self.d
    }
}

/// Quantized sequence for one specimen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Imageome {
    /// `[n_l][n_p]` code indices, level 1 (root-most) first.
    pub phylo: Vec<Vec<usize>>,
    /// `[n_np]` code indices.
    pub nonphylo: Vec<usize>,
}

impl Imageome {
    /// Canonical flattening: phylo level 1..n_l, then the non-phylo segment.
    pub fn flat(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.phylo.iter().flatten().copied().collect();
        out.extend_from_slice(&self.nonphylo);
        out
    }

    pub fn from_flat(flat: &[usize], n_l: usize, n_p: usize, n_np: usize) -> Option<Imageome> {
        if flat.len() != n_l * n_p + n_np {
            return None;
        }
        let phylo = (0..n_l)
            .map(|i| flat[i * n_p..(i + 1) * n_p].to_vec())
            .collect();
        Some(Imageome {
            phylo,
            nonphylo: flat[n_l * n_p..].to_vec(),
        })
    }

    pub fn matches(&self, cfg: &CodecConfig) -> bool {
        self.phylo.len() == cfg.n_l
            && self.phylo.iter().all(|s| s.len() == cfg.n_p)
            && self.nonphylo.len() == cfg.n_np
            && self.flat().iter().all(|&i| i < cfg.n_q)
    }
}

/// Concatenated quantized vectors of phylo segments 1..i.
#[derive(Debug, Clone)]
pub struct Descriptor {
    pub level: usize,
    /// `[i * n_p, d]`
    pub values: Tensor,
}

/// Level-`level` descriptor from an imageome's code indices.
pub fn build_descriptor(
    im: &Imageome,
    cb: &Codebook,
    level: usize,
) -> Result<Descriptor, TensorError> {
    if level == 0 || level > im.phylo.len() {
        return Err(TensorError::shape(
            "build_descriptor",
            format!("level {} of {}", level, im.phylo.len()),
        ));
    }
    let indices: Vec<usize> = im.phylo[..level].iter().flatten().copied().collect();
    Ok(Descriptor {
        level,
        values: cb.lookup(&indices),
    })
}

/// Encoder/decoder parameters plus the shared codebook.
#[derive(Debug, Clone)]
pub struct PhyloCodec {
    pub cfg: CodecConfig,
    pub params: BTreeMap<String, Tensor>,
    pub codebook: Codebook,
}

/// Everything the trainer needs from one batched forward pass.
pub struct BatchOutput {
    pub imageomes: Vec<Imageome>,
    /// Main objective: w_rec L_rec + w_q L_q + w_p L_p + w_o L_o - w_adv L_adv.
    pub loss_main: Var,
    /// Adversary objective: L_adv alone.
    pub loss_adv: Var,
    pub breakdown: LossBreakdown,
    /// Quantization state for `forward_batch_frozen`.
    pub quant: QuantSnapshot,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub q: f64,
    pub p: f64,
    pub adv: f64,
    pub ortho: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &CodecConfig) -> f64 {
        cfg.w_rec * self.rec + cfg.w_q * self.q + cfg.w_p * self.p + cfg.w_o * self.ortho
            - cfg.w_adv * self.adv
    }

    pub fn all_finite(&self) -> bool {
        [self.rec, self.q, self.p, self.adv, self.ortho, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn mlp_param_shapes(cfg: &CodecConfig) -> Vec<(String, Vec<usize>)> {
    let feat_p = cfg.c_p * cfg.h_in * cfg.w_in;
    let feat_np = (cfg.c_in - cfg.c_p) * cfg.h_in * cfg.w_in;
    let zp_len = cfg.phylo_rows() * cfg.d;
    let znp_len = cfg.n_np * cfg.d;
    let hid = cfg.hidden();
    let k = cfg.kernel_size;

    let mut shapes = vec![
        ("enc.conv.k".into(), vec![cfg.c_in, cfg.c_in, k, k]),
        ("enc.conv.b".into(), vec![cfg.c_in]),
        ("dec.conv.k".into(), vec![cfg.c_in, cfg.c_in, k, k]),
        ("dec.conv.b".into(), vec![cfg.c_in]),
    ];
    let mut mlp = |name: &str, input: usize, output: usize| {
        shapes.push((format!("{name}.w1"), vec![input, hid]));
        shapes.push((format!("{name}.b1"), vec![hid]));
        shapes.push((format!("{name}.w2"), vec![hid, output]));
        shapes.push((format!("{name}.b2"), vec![output]));
    };
    mlp("enc.mlp_p", feat_p, zp_len);
    mlp("enc.mlp_np", feat_np, znp_len);
    mlp("dec.mlp_p", zp_len, feat_p);
    mlp("dec.mlp_np", znp_len, feat_np);
    for i in 1..=cfg.n_l {
        mlp(
            &format!("head{i}"),
            i * cfg.n_p * cfg.d,
            cfg.class_counts[i - 1],
        );
    }
    mlp("adv.mlp", znp_len, zp_len);
    if !cfg.shared_heads {
        for i in 1..=cfg.n_l {
            mlp(
                &format!("adv.head{i}"),
                i * cfg.n_p * cfg.d,
                cfg.class_counts[i - 1],
            );
        }
    }
    shapes
}

impl PhyloCodec {
    /// Fresh codec with seeded parameters and codebook.
    pub fn init(cfg: CodecConfig, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in mlp_param_shapes(&cfg) {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else {
                // fan-in scaled uniform
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                Tensor::new(
                    shape.clone(),
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
                )?
            };
            params.insert(name, t);
        }
        let codebook = Codebook::init(cfg.n_q, cfg.d, seed ^ 0x9e37_79b9);
        Ok(PhyloCodec {
            cfg,
            params,
            codebook,
        })
    }

    /// Parameter names updated by the adversary step; everything else belongs
    /// to the main step.
    pub fn is_adversary_param(&self, name: &str) -> bool {
        name.starts_with("adv.")
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    fn insert_params(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.input(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    fn mlp(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        name: &str,
        x: Var,
    ) -> Result<Var, TensorError> {
        let h = g.matmul(x, vars[&format!("{name}.w1")])?;
        let h = g.add_bias_rows(h, vars[&format!("{name}.b1")])?;
        let h = g.leaky_relu(h, self.cfg.leaky_alpha);
        let o = g.matmul(h, vars[&format!("{name}.w2")])?;
        g.add_bias_rows(o, vars[&format!("{name}.b2")])
    }

    /// Conv + channel split + branch MLPs for a batch; returns pre-quantization
    /// `z_p` `[B*n_l*n_p, d]` and `z_np` `[B*n_np, d]`.
    fn encode_pre(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        xs: &[Var],
    ) -> Result<(Var, Var), TensorError> {
        let cfg = &self.cfg;
        let feat_p = cfg.c_p * cfg.h_in * cfg.w_in;
        let feat_np = (cfg.c_in - cfg.c_p) * cfg.h_in * cfg.w_in;
        let mut p_rows = Vec::with_capacity(xs.len());
        let mut np_rows = Vec::with_capacity(xs.len());
        for &x in xs {
            let c = g.conv2d(x, vars["enc.conv.k"])?;
            let c = g.add_bias_channels(c, vars["enc.conv.b"])?;
            let c = g.leaky_relu(c, cfg.leaky_alpha);
            let p = g.slice_rows(c, 0, cfg.c_p)?;
            let np = g.slice_rows(c, cfg.c_p, cfg.c_in)?;
            p_rows.push(g.reshape(p, vec![1, feat_p])?);
            np_rows.push(g.reshape(np, vec![1, feat_np])?);
        }
        let p_batch = g.concat(&p_rows)?;
        let np_batch = g.concat(&np_rows)?;
        let zp_flat = self.mlp(g, vars, "enc.mlp_p", p_batch)?;
        let znp_flat = self.mlp(g, vars, "enc.mlp_np", np_batch)?;
        let zp = g.reshape(zp_flat, vec![xs.len() * cfg.phylo_rows(), cfg.d])?;
        let znp = g.reshape(znp_flat, vec![xs.len() * cfg.n_np, cfg.d])?;
        Ok((zp, znp))
    }

    /// Per-level descriptor batch `[B, i*n_p*d]` from a `[B*rows_per, d]`
    /// layout where each sample owns `rows_per` consecutive rows.
    fn descriptor_batch(
        &self,
        g: &mut Graph,
        flat: Var,
        batch: usize,
        rows_per: usize,
        level: usize,
    ) -> Result<Var, TensorError> {
        let take = level * self.cfg.n_p;
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let s = g.slice_rows(flat, b * rows_per, b * rows_per + take)?;
            rows.push(g.reshape(s, vec![1, take * self.cfg.d])?);
        }
        g.concat(&rows)
    }

    /// Kernel orthogonality: ||G - I||^2 over row-normalized flattened kernels.
    fn ortho_loss(&self, g: &mut Graph, kernel: Var) -> Result<Var, TensorError> {
        let s = g.value(kernel).shape().to_vec();
        let rows = s[0];
        let cols: usize = s[1..].iter().product();
        let flat = g.reshape(kernel, vec![rows, cols])?;
        let yn = g.normalize_rows(flat)?;
        let ynt = g.transpose2(yn)?;
        let gram = g.matmul(yn, ynt)?;
        let mut eye = Tensor::zeros(&[rows, rows]);
        for i in 0..rows {
            eye.set2(i, i, 1.0);
        }
        let eye = g.input(eye);
        let diff = g.sub(gram, eye)?;
        let sq = g.mul(diff, diff)?;
        Ok(g.sum_all(sq))
    }

    /// Full training forward pass for a batch: encoder, quantization, decoder,
    /// all five losses, with the adversary's objective exposed separately.
    pub fn forward_batch(
        &self,
        xs: &[Tensor],
        labels: &[Vec<usize>],
        trainable: bool,
    ) -> Result<(Graph, BatchOutput, BTreeMap<String, Var>), TensorError> {
        self.forward_batch_impl(xs, labels, trainable, None)
    }

    /// Forward pass with the quantization frozen at `snap`: quantized values
    /// become `z + (zq0 - z0)` and the code assignment is held fixed. This is
    /// the surrogate objective whose true derivatives equal the
    /// straight-through gradients of `forward_batch`, so perturbing parameters
    /// here gives a valid finite-difference oracle for the whole loss.
    pub fn forward_batch_frozen(
        &self,
        xs: &[Tensor],
        labels: &[Vec<usize>],
        snap: &QuantSnapshot,
    ) -> Result<(Graph, BatchOutput, BTreeMap<String, Var>), TensorError> {
        self.forward_batch_impl(xs, labels, false, Some(snap))
    }

    fn forward_batch_impl(
        &self,
        xs: &[Tensor],
        labels: &[Vec<usize>],
        trainable: bool,
        frozen: Option<&QuantSnapshot>,
    ) -> Result<(Graph, BatchOutput, BTreeMap<String, Var>), TensorError> {
        let cfg = &self.cfg;
        if xs.is_empty() || labels.len() != xs.len() {
            return Err(TensorError::shape(
                "forward_batch",
                format!("{} inputs, {} label rows", xs.len(), labels.len()),
            ));
        }
        for x in xs {
            if x.shape() != [cfg.c_in, cfg.h_in, cfg.w_in] {
                return Err(TensorError::shape(
                    "forward_batch",
                    format!(
                        "input {:?}, expected [{}, {}, {}]",
                        x.shape(),
                        cfg.c_in,
                        cfg.h_in,
                        cfg.w_in
                    ),
                ));
            }
        }
        for lab in labels {
            if lab.len() != cfg.n_l {
                return Err(TensorError::shape(
                    "forward_batch",
                    format!("{} label levels, expected {}", lab.len(), cfg.n_l),
                ));
            }
            for (i, &c) in lab.iter().enumerate() {
                if c >= cfg.class_counts[i] {
                    return Err(TensorError::shape(
                        "forward_batch",
                        format!("class {} out of range at level {}", c, i + 1),
                    ));
                }
            }
        }
        let batch = xs.len();
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, trainable);
        let cb_param = if trainable {
            g.param(self.codebook.codes.clone())
        } else {
            g.input(self.codebook.codes.clone())
        };
        let x_vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();

        let (zp, znp) = self.encode_pre(&mut g, &vars, &x_vars)?;

        // one quantization over both segments keeps a single L_q
        let z_all = g.concat(&[zp, znp])?;
        let q = match frozen {
            Some(snap) => {
                quantize_in_graph_frozen(&mut g, z_all, cb_param, snap, cfg.commit_weight)?
            }
            None => quantize_in_graph(&mut g, z_all, cb_param, &self.codebook, cfg.commit_weight)?,
        };
        let zp_rows = batch * cfg.phylo_rows();
        let zp_q = g.slice_rows(q.zq, 0, zp_rows)?;
        let znp_q = g.slice_rows(q.zq, zp_rows, zp_rows + batch * cfg.n_np)?;

        let imageomes = (0..batch)
            .map(|b| {
                let p = &q.indices[b * cfg.phylo_rows()..(b + 1) * cfg.phylo_rows()];
                let np_base = zp_rows + b * cfg.n_np;
                Imageome {
                    phylo: (0..cfg.n_l)
                        .map(|i| p[i * cfg.n_p..(i + 1) * cfg.n_p].to_vec())
                        .collect(),
                    nonphylo: q.indices[np_base..np_base + cfg.n_np].to_vec(),
                }
            })
            .collect();

        // phylogeny-guided loss over descriptors
        let mut l_p: Option<Var> = None;
        for level in 1..=cfg.n_l {
            if cfg.betas[level - 1] == 0.0 {
                continue;
            }
            let desc = self.descriptor_batch(&mut g, zp_q, batch, cfg.phylo_rows(), level)?;
            let logits = self.mlp(&mut g, &vars, &format!("head{level}"), desc)?;
            let lab: Vec<usize> = labels.iter().map(|l| l[level - 1]).collect();
            let ce = g.cross_entropy_logits(logits, &lab)?;
            let ce = g.scale(ce, cfg.betas[level - 1]);
            l_p = Some(match l_p {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let l_p = l_p.unwrap_or_else(|| g.input(Tensor::scalar(0.0)));

        // adversarial probe on the non-phylo segment
        let znp_batch = g.reshape(znp_q, vec![batch, cfg.n_np * cfg.d])?;
        let adv_out = self.mlp(&mut g, &vars, "adv.mlp", znp_batch)?;
        let adv_flat = g.reshape(adv_out, vec![batch * cfg.phylo_rows(), cfg.d])?;
        let mut l_adv: Option<Var> = None;
        for level in 1..=cfg.n_l {
            if cfg.betas[level - 1] == 0.0 {
                continue;
            }
            let desc = self.descriptor_batch(&mut g, adv_flat, batch, cfg.phylo_rows(), level)?;
            let head = if cfg.shared_heads {
                format!("head{level}")
            } else {
                format!("adv.head{level}")
            };
            let logits = self.mlp(&mut g, &vars, &head, desc)?;
            let lab: Vec<usize> = labels.iter().map(|l| l[level - 1]).collect();
            let ce = g.cross_entropy_logits(logits, &lab)?;
            let ce = g.scale(ce, cfg.betas[level - 1]);
            l_adv = Some(match l_adv {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let l_adv = l_adv.unwrap_or_else(|| g.input(Tensor::scalar(0.0)));

        // decoder + reconstruction
        let xhat_rows = self.decode_vars(&mut g, &vars, zp_q, znp_q, batch)?;
        let xs_flat: Vec<Var> = x_vars
            .iter()
            .map(|&x| g.reshape(x, vec![1, cfg.c_in * cfg.h_in * cfg.w_in]))
            .collect::<Result<_, _>>()?;
        let xcat = g.concat(&xhat_rows)?;
        let xs_cat = g.concat(&xs_flat)?;
        let l_rec = g.mae(xcat, xs_cat)?;

        let l_o = self.ortho_loss(&mut g, vars["enc.conv.k"])?;

        let rec_w = g.scale(l_rec, cfg.w_rec);
        let q_w = g.scale(q.loss_q, cfg.w_q);
        let p_w = g.scale(l_p, cfg.w_p);
        let o_w = g.scale(l_o, cfg.w_o);
        let adv_w = g.scale(l_adv, -cfg.w_adv);
        let mut total = g.add(rec_w, q_w)?;
        total = g.add(total, p_w)?;
        total = g.add(total, o_w)?;
        total = g.add(total, adv_w)?;

        let breakdown = LossBreakdown {
            rec: g.value(l_rec).scalar_value()?,
            q: g.value(q.loss_q).scalar_value()?,
            p: g.value(l_p).scalar_value()?,
            adv: g.value(l_adv).scalar_value()?,
            ortho: g.value(l_o).scalar_value()?,
            total: g.value(total).scalar_value()?,
        };

        let out = BatchOutput {
            imageomes,
            loss_main: total,
            loss_adv: l_adv,
            breakdown,
            quant: q.snapshot,
        };
        Ok((g, out, vars_with_codebook(vars, cb_param)))
    }

    fn decode_vars(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        zp_q: Var,
        znp_q: Var,
        batch: usize,
    ) -> Result<Vec<Var>, TensorError> {
        let cfg = &self.cfg;
        let zp_batch = g.reshape(zp_q, vec![batch, cfg.phylo_rows() * cfg.d])?;
        let znp_batch = g.reshape(znp_q, vec![batch, cfg.n_np * cfg.d])?;
        let p_maps = self.mlp(g, vars, "dec.mlp_p", zp_batch)?;
        let np_maps = self.mlp(g, vars, "dec.mlp_np", znp_batch)?;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let pr = g.slice_rows(p_maps, b, b + 1)?;
            let pr = g.reshape(pr, vec![cfg.c_p, cfg.h_in, cfg.w_in])?;
            let nr = g.slice_rows(np_maps, b, b + 1)?;
            let nr = g.reshape(nr, vec![cfg.c_in - cfg.c_p, cfg.h_in, cfg.w_in])?;
            let maps = g.concat(&[pr, nr])?;
            let xhat = g.conv2d(maps, vars["dec.conv.k"])?;
            let xhat = g.add_bias_channels(xhat, vars["dec.conv.b"])?;
            out.push(g.reshape(xhat, vec![1, cfg.c_in * cfg.h_in * cfg.w_in])?);
        }
        Ok(out)
    }

    /// Encode one feature map to an imageome (frozen parameters).
    pub fn encode(&self, x: &Tensor) -> Result<(Imageome, f64), TensorError> {
        let labels = vec![vec![0; self.cfg.n_l]];
        let (_, out, _) = self.forward_batch(std::slice::from_ref(x), &labels, false)?;
        Ok((out.imageomes.into_iter().next().unwrap(), out.breakdown.q))
    }

    /// Continuous pre-quantization embeddings `(z_p, z_np)` for one input.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let xv = g.input(x.clone());
        let (zp, znp) = self.encode_pre(&mut g, &vars, &[xv])?;
        Ok((g.value(zp).clone(), g.value(znp).clone()))
    }

    /// Argmax class per level from the quantized descriptor heads (frozen
    /// parameters).
    pub fn predict_levels(&self, x: &Tensor) -> Result<Vec<usize>, TensorError> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let xv = g.input(x.clone());
        let (zp, _) = self.encode_pre(&mut g, &vars, &[xv])?;
        let indices = self.codebook.assign(g.value(zp))?;
        let zp_q = g.input(self.codebook.lookup(&indices));
        let mut preds = Vec::with_capacity(cfg.n_l);
        for level in 1..=cfg.n_l {
            let desc = self.descriptor_batch(&mut g, zp_q, 1, cfg.phylo_rows(), level)?;
            let logits = self.mlp(&mut g, &vars, &format!("head{level}"), desc)?;
            let row = g.value(logits).data();
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            preds.push(best);
        }
        Ok(preds)
    }

    /// Decode an imageome back to a feature map (frozen parameters).
    pub fn decode(&self, im: &Imageome) -> Result<Tensor, TensorError> {
        let cfg = &self.cfg;
        if !im.matches(cfg) {
            return Err(TensorError::shape(
                "decode",
                "imageome inconsistent with config",
            ));
        }
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let phylo_idx: Vec<usize> = im.phylo.iter().flatten().copied().collect();
        let zp = g.input(self.codebook.lookup(&phylo_idx));
        let znp = g.input(self.codebook.lookup(&im.nonphylo));
        let rows = self.decode_vars(&mut g, &vars, zp, znp, 1)?;
        g.value(rows[0])
            .reshape(vec![cfg.c_in, cfg.h_in, cfg.w_in])
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TensorError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, t) in &self.params {
            t.save(dir.join(format!("{name}.ptn")))?;
        }
        self.codebook.save(dir)?;
        let manifest = serde_json::json!({
            "schema": 1,
            "config": self.cfg,
            "params": self.param_names(),
        });
        std::fs::write(
            dir.join("model.json"),
            serde_json::to_string_pretty(&manifest).expect("serializable"),
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TensorError> {
        let dir = dir.as_ref();
        let raw = std::fs::read_to_string(dir.join("model.json"))?;
        let manifest: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| TensorError::Format(format!("model.json: {e}")))?;
        let cfg: CodecConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| TensorError::Format(format!("model.json config: {e}")))?;
        let names: Vec<String> = serde_json::from_value(manifest["params"].clone())
            .map_err(|e| TensorError::Format(format!("model.json params: {e}")))?;
        let mut params = BTreeMap::new();
        for name in names {
            let t = Tensor::load(dir.join(format!("{name}.ptn")))?;
            params.insert(name, t);
        }
        let codebook = Codebook::load(dir)?;
        Ok(PhyloCodec {
            cfg,
            params,
            codebook,
        })
    }
}

fn vars_with_codebook(mut vars: BTreeMap<String, Var>, cb: Var) -> BTreeMap<String, Var> {
    vars.insert("codebook".into(), cb);
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig::new(4, 4, 4, 2, 2, 2, 2, 3, 5, vec![2, 4])
    }

    fn tiny_codec() -> PhyloCodec {
        PhyloCodec::init(tiny_cfg(), 11).unwrap()
    }

    fn rand_x(cfg: &CodecConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![cfg.c_in, cfg.h_in, cfg.w_in],
            (0..cfg.c_in * cfg.h_in * cfg.w_in)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn shape_contract() {
        let codec = tiny_codec();
        let x = rand_x(&codec.cfg, 1);
        let (zp, znp) = codec.embed(&x).unwrap();
        assert_eq!(zp.shape(), &[4, 3]); // n_l*n_p x d
        assert_eq!(znp.shape(), &[2, 3]); // n_np x d
        let (im, _) = codec.encode(&x).unwrap();
        assert!(im.matches(&codec.cfg));
    }

    #[test]
    fn large_config_zp_shape() {
        let cfg = CodecConfig::new(4, 4, 4, 2, 4, 8, 32, 16, 64, vec![2, 3, 4, 4]);
        let codec = PhyloCodec::init(cfg, 3).unwrap();
        let x = rand_x(&codec.cfg, 2);
        let (zp, _) = codec.embed(&x).unwrap();
        assert_eq!(zp.shape(), &[32, 16]);
    }

    #[test]
    fn zero_network_gives_origin_codes() {
        let mut codec = tiny_codec();
        for t in codec.params.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let x = rand_x(&codec.cfg, 3);
        let (zp, znp) = codec.embed(&x).unwrap();
        assert!(zp.data().iter().all(|&v| v == 0.0));
        assert!(znp.data().iter().all(|&v| v == 0.0));
        let (im, _) = codec.encode(&x).unwrap();
        let origin = codec.codebook.nearest(&vec![0.0; codec.cfg.d]);
        assert!(im.flat().iter().all(|&i| i == origin));
    }

    #[test]
    fn encode_is_deterministic() {
        let codec = tiny_codec();
        let x = rand_x(&codec.cfg, 4);
        let (a, _) = codec.encode(&x).unwrap();
        let (b, _) = codec.encode(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descriptor_prefix_property() {
        let codec = tiny_codec();
        let x = rand_x(&codec.cfg, 5);
        let (im, _) = codec.encode(&x).unwrap();
        let d1 = build_descriptor(&im, &codec.codebook, 1).unwrap();
        let d2 = build_descriptor(&im, &codec.codebook, 2).unwrap();
        assert_eq!(d1.values.shape(), &[2, 3]); // n_p x d
        assert_eq!(d2.values.shape(), &[4, 3]); // full z_p^Q
        assert_eq!(&d2.values.data()[..d1.values.len()], d1.values.data());
        assert!(build_descriptor(&im, &codec.codebook, 3).is_err());
    }

    #[test]
    fn decode_shape_and_determinism() {
        let codec = tiny_codec();
        let x = rand_x(&codec.cfg, 6);
        let (im, _) = codec.encode(&x).unwrap();
        let xhat = codec.decode(&im).unwrap();
        assert_eq!(xhat.shape(), x.shape());
        assert_eq!(codec.decode(&im).unwrap(), xhat);
    }

    #[test]
    fn zero_decoder_gives_per_channel_bias_pattern() {
        let mut codec = tiny_codec();
        for (name, t) in codec.params.iter_mut() {
            if name.starts_with("dec.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        // nonzero decoder conv bias to make the pattern visible
        let b = codec.params.get_mut("dec.conv.b").unwrap();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let x = rand_x(&codec.cfg, 7);
        let (im, _) = codec.encode(&x).unwrap();
        let xhat = codec.decode(&im).unwrap();
        let plane = codec.cfg.h_in * codec.cfg.w_in;
        for c in 0..codec.cfg.c_in {
            let ch = &xhat.data()[c * plane..(c + 1) * plane];
            assert!(ch.iter().all(|&v| v == c as f64));
        }
    }

    #[test]
    fn loss_breakdown_sums_to_total() {
        let codec = tiny_codec();
        let xs = vec![rand_x(&codec.cfg, 8), rand_x(&codec.cfg, 9)];
        let labels = vec![vec![0, 1], vec![1, 3]];
        let (_, out, _) = codec.forward_batch(&xs, &labels, true).unwrap();
        let b = &out.breakdown;
        assert!((b.weighted_total(&codec.cfg) - b.total).abs() < 1e-12);
    }

    #[test]
    fn all_zero_weights_give_zero_total() {
        let mut cfg = tiny_cfg();
        cfg.w_rec = 0.0;
        cfg.w_q = 0.0;
        cfg.w_p = 0.0;
        cfg.w_adv = 0.0;
        cfg.w_o = 0.0;
        let codec = PhyloCodec::init(cfg, 11).unwrap();
        let xs = vec![rand_x(&codec.cfg, 10)];
        let (_, out, _) = codec.forward_batch(&xs, &[vec![0, 0]], true).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
    }

    #[test]
    fn zero_betas_give_zero_adv_and_p() {
        let mut cfg = tiny_cfg();
        cfg.betas = vec![0.0, 0.0];
        let codec = PhyloCodec::init(cfg, 11).unwrap();
        let xs = vec![rand_x(&codec.cfg, 10)];
        let (_, out, _) = codec.forward_batch(&xs, &[vec![0, 0]], true).unwrap();
        assert_eq!(out.breakdown.p, 0.0);
        assert_eq!(out.breakdown.adv, 0.0);
    }

    #[test]
    fn label_out_of_range_errors() {
        let codec = tiny_codec();
        let xs = vec![rand_x(&codec.cfg, 12)];
        assert!(codec.forward_batch(&xs, &[vec![0, 4]], true).is_err());
        assert!(codec.forward_batch(&xs, &[vec![2, 0]], true).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy_bound() {
        // zero heads -> uniform logits -> L_p = sum ln K_i
        let mut codec = tiny_codec();
        for (name, t) in codec.params.iter_mut() {
            if name.starts_with("head") || name.starts_with("adv.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let xs = vec![rand_x(&codec.cfg, 13)];
        let (_, out, _) = codec.forward_batch(&xs, &[vec![1, 2]], true).unwrap();
        let expect = (2.0f64).ln() + (4.0f64).ln();
        assert!((out.breakdown.p - expect).abs() < 1e-12);
        assert!((out.breakdown.adv - expect).abs() < 1e-12);
    }

    #[test]
    fn ortho_loss_hand_cases() {
        let cfg = tiny_cfg();
        let codec = PhyloCodec::init(cfg, 1).unwrap();
        let mut g = Graph::new();
        // orthonormal rows -> 0
        let k = g.param(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = codec.ortho_loss(&mut g, k).unwrap();
        assert!(g.value(l).scalar_value().unwrap() < 1e-12);
        // two identical rows -> off-diagonal Gram entries are 1, loss >= 2
        let k2 = g.param(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let l2 = codec.ortho_loss(&mut g, k2).unwrap();
        assert!(g.value(l2).scalar_value().unwrap() >= 2.0 - 1e-12);
        // invariant to positive per-row scaling
        let k3 = g.param(Tensor::new(vec![2, 1, 1, 2], vec![3.0, 3.0, 0.5, 0.5]).unwrap());
        let l3 = codec.ortho_loss(&mut g, k3).unwrap();
        assert!(
            (g.value(l3).scalar_value().unwrap() - g.value(l2).scalar_value().unwrap()).abs()
                < 1e-9
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codec = tiny_codec();
        codec.save(dir.path()).unwrap();
        let back = PhyloCodec::load(dir.path()).unwrap();
        assert_eq!(back.param_names(), codec.param_names());
        let x = rand_x(&codec.cfg, 14);
        // f32 storage keeps the quantization decisions stable on this scale
        let (a, _) = codec.encode(&x).unwrap();
        let (b, _) = back.encode(&x).unwrap();
        assert_eq!(a, b);
    }
}
