//! Reverse-mode automatic differentiation over an eagerly-evaluated tape.
//!
//! Every op computes its value when recorded; `backward` walks the tape in
//! reverse and accumulates gradients into nodes created via [`Graph::param`].
//! Forward passes are deterministic and single-threaded, so a fixed seed
//! yields bitwise-identical results.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    /// [m,n] + [n], bias broadcast over rows
    AddBiasRows(Var, Var),
    /// [C,H,W] + [C], bias broadcast over each channel plane
    AddBiasChannels(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
    },
    LeakyRelu(Var, f64),
    Softmax(Var),
    /// mean |a - b| over all elements; subgradient at 0 residual is 0
    Mae(Var, Var),
    /// mean over rows of (logsumexp(row) - row[label])
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
    },
    /// concat along axis 0; trailing dims must agree
    Concat(Vec<Var>),
    /// rows [start, end) along axis 0
    SliceRows {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Transpose2(Var),
    /// rows scaled to unit L2 norm (epsilon-guarded)
    NormalizeRows(Var),
    /// forward = quantized constant, backward passes gradient to `z` unchanged
    StraightThrough {
        z: Var,
    },
    /// out[i, :] = table[indices[i], :]; backward scatter-adds into the table
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients per variable after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if it participated in the loss and needed one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled with `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable leaf (data, targets, constants).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Differentiable leaf; `backward` will produce a gradient for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "sub",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, ng))
    }

    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::shape(
                "add_bias_rows",
                format!("{:?} + {:?}", sx, sb),
            ));
        }
        let n = sx[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBiasRows(x, bias), out, ng))
    }

    pub fn add_bias_channels(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(TensorError::shape(
                "add_bias_channels",
                format!("{:?} + {:?}", sx, sb),
            ));
        }
        let plane = sx[1] * sx[2];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i / plane])
            .collect();
        let out = Tensor::new(sx.to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBiasChannels(x, bias), out, ng))
    }

    /// 2-D convolution, stride 1, symmetric zero padding ("same" output size).
    /// `x` is `[C_in, H, W]`, `k` is `[C_out, C_in, kh, kw]` with odd kh, kw.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("x {:?}, kernel {:?} (kernel dims must be odd)", sx, sk),
            ));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![0.0; c_out * h * w];
        let xd = tx.data();
        let kd = tk.data();
        for co in 0..c_out {
            for ci in 0..c_in {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let kv = kd[((co * c_in + ci) * kh + dy) * kw + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + dy as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for xo in 0..w {
                                let ix = xo as isize + dx as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[(co * h + y) * w + xo] +=
                                    kv * xd[(ci * h as usize + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c_out, h, w], out)?;
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(Op::Conv2d { x, k }, out, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let ng = self.needs(x);
        self.push(Op::LeakyRelu(x, alpha), out, ng)
    }

    /// Softmax over the last axis (rank 1 or 2).
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.is_empty() || s.len() > 2 {
            return Err(TensorError::shape("softmax", format!("rank {:?}", s)));
        }
        let n = *s.last().unwrap();
        let rows = tx.len() / n;
        let mut data = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * n + j] = e;
                z += e;
            }
            for j in 0..n {
                data[r * n + j] /= z;
            }
        }
        let out = Tensor::new(s.to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax(x), out, ng))
    }

    /// Mean absolute error over all elements; scalar output.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mae",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = ta.len().max(1) as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mae(a, b), Tensor::scalar(v), ng))
    }

    /// Mean cross-entropy with logits; `logits` is `[B, K]` (or `[K]` with one
    /// label), labels index into K.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let tl = &self.nodes[logits.0].value;
        let s = tl.shape();
        let (rows, k) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(TensorError::shape(
                    "cross_entropy_logits",
                    format!("rank {:?}", s),
                ))
            }
        };
        if labels.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                format!("{} labels for {} rows", labels.len(), rows),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let mut total = 0.0;
        for r in 0..rows {
            let row = &tl.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let v = total / rows as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(v),
            ng,
        ))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::shape("concat", "no inputs"));
        }
        let tail: Vec<usize> = self.nodes[parts[0].0].value.shape()[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::shape(
                    "concat",
                    format!("trailing dims differ: {:?} vs {:?}", &s, tail),
                ));
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::new(shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec()), out, ng))
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.is_empty() || start > end || end > s[0] {
            return Err(TensorError::shape(
                "slice_rows",
                format!("[{start}, {end}) of {:?}", s),
            ));
        }
        let row_len: usize = s[1..].iter().product();
        let mut shape = vec![end - start];
        shape.extend_from_slice(&s[1..]);
        let data = tx.data()[start * row_len..end * row_len].to_vec();
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, end }, out, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.nodes[x.0].value.reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), out, ng))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose2", format!("rank {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Transpose2(x), out, ng))
    }

    /// Scale each row of a rank-2 tensor to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("normalize_rows", format!("rank {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let out = Tensor::new(s.to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::NormalizeRows(x), out, ng))
    }

    /// Forward value is `quantized`; backward routes the gradient to `z`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Result<Var, TensorError> {
        let tz = &self.nodes[z.0].value;
        if tz.shape() != quantized.shape() {
            return Err(TensorError::shape(
                "straight_through",
                format!("{:?} vs {:?}", tz.shape(), quantized.shape()),
            ));
        }
        let ng = self.needs(z);
        Ok(self.push(Op::StraightThrough { z }, quantized, ng))
    }

    /// `out[i, :] = table[indices[i], :]`. Gradient scatter-adds into `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let tt = &self.nodes[table.0].value;
        let s = tt.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("gather_rows", format!("table {:?}", s)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::shape(
                "gather_rows",
                format!("index {} out of {} rows", bad, s[0]),
            ));
        }
        let d = s[1];
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            out,
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.data().iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll(x), Tensor::scalar(v), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let v = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.needs(x);
        self.push(Op::MeanAll(x), Tensor::scalar(v), ng)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// transitively required one.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward".into(),
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg =
                    Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())
                        .unwrap();
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| v * c).collect(),
                )
                .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[i * n + j] * tb.data()[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
            }
            Op::AddBiasRows(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let n = self.nodes[bias.0].value.len();
                let mut gb = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % n] += v;
                }
                self.accumulate(grads, *bias, Tensor::from_vec(gb));
            }
            Op::AddBiasChannels(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let c = self.nodes[bias.0].value.len();
                let plane = g.len() / c;
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i / plane] += v;
                }
                self.accumulate(grads, *bias, Tensor::from_vec(gb));
            }
            Op::Conv2d { x, k } => {
                let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
                let (c_in, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let mut gx = vec![0.0; c_in * h * w];
                let mut gk = vec![0.0; c_out * c_in * kh * kw];
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let kidx = ((co * c_in + ci) * kh + dy) * kw + dx;
                                let kv = tk.data()[kidx];
                                let mut ks = 0.0;
                                for y in 0..h {
                                    let iy = y as isize + dy as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for xo in 0..w {
                                        let ix = xo as isize + dx as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let go = g.data()[(co * h + y) * w + xo];
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        gx[xi] += kv * go;
                                        ks += go * tx.data()[xi];
                                    }
                                }
                                gk[kidx] += ks;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c_in, h, w], gx).unwrap());
                self.accumulate(
                    grads,
                    *k,
                    Tensor::new(vec![c_out, c_in, kh, kw], gk).unwrap(),
                );
            }
            Op::LeakyRelu(x, alpha) => {
                let tx = &self.nodes[x.0].value;
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { alpha * gv })
                        .collect(),
                )
                .unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[id].value;
                let n = *y.shape().last().unwrap();
                let rows = y.len() / n;
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::Mae(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = ta.len().max(1) as f64;
                let gs = g.data()[0];
                let mut ga = vec![0.0; ta.len()];
                for (i, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
                    let r = x - y;
                    // sign(0) = 0 by convention
                    ga[i] = gs * r.signum() * if r == 0.0 { 0.0 } else { 1.0 } / n;
                }
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let tl = &self.nodes[logits.0].value;
                let s = tl.shape();
                let (rows, k) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let gs = g.data()[0] / rows as f64;
                let mut gl = vec![0.0; tl.len()];
                for r in 0..rows {
                    let row = &tl.data()[r * k..(r + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / z;
                        gl[r * k + j] =
                            gs * (p - if j == labels[r] { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(s.to_vec(), gl).unwrap());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = &self.nodes[p.0].value;
                    let n = tp.len();
                    let gp = Tensor::new(
                        tp.shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .unwrap();
                    offset += n;
                    self.accumulate(grads, p, gp);
                }
            }
            Op::SliceRows { x, start, end } => {
                let tx = &self.nodes[x.0].value;
                let row_len: usize = tx.shape()[1..].iter().product();
                let mut gx = vec![0.0; tx.len()];
                gx[start * row_len..end * row_len].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                let tx = &self.nodes[x.0].value;
                let gx = Tensor::new(tx.shape().to_vec(), g.data().to_vec()).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Transpose2(x) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], gx).unwrap());
            }
            Op::NormalizeRows(x) => {
                let tx = &self.nodes[x.0].value;
                let y = &self.nodes[id].value;
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let row = tx.row(i);
                    let yr = y.row(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = (gr[j] - dot * yr[j]) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, n], gx).unwrap());
            }
            Op::StraightThrough { z } => {
                self.accumulate(grads, *z, g.clone());
            }
            Op::GatherRows { table, indices } => {
                let tt = &self.nodes[table.0].value;
                let d = tt.shape()[1];
                let mut gt = vec![0.0; tt.len()];
                for (i, &row) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[row * d + j] += g.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tt.shape().to_vec(), gt).unwrap());
            }
            Op::SumAll(x) => {
                let tx = &self.nodes[x.0].value;
                let gx = Tensor::full(tx.shape(), g.data()[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let tx = &self.nodes[x.0].value;
                let gx = Tensor::full(tx.shape(), g.data()[0] / tx.len().max(1) as f64);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
