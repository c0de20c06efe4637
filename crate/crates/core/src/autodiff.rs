//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] is an append-only list of nodes. Each op appends one node
//! holding its forward value plus whatever the backward rule needs; inputs
//! always precede the node that consumes them, so the reverse of append
//! order is a valid topological order for [`Graph::backward`].
//!
//! Forward values are checked for NaN/Inf after every op.

use crate::error::{Error, Result};
use crate::rng::RandomState;
use crate::tensor::{gemm, matmul_dims, suffix_len, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Concat(Vec<Var>, usize),
    Softmax(Var),
    MaskedSoftmax(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Below this norm a vector's cosine similarity is defined as zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_cdf(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], keep: Option<&[f64]>, width: usize, out: &mut [f64]) -> Result<()> {
    let keep_len = keep.map_or(0, |k| k.len());
    for (r, (row, orow)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let kept = |j: usize| keep.map_or(true, |k| k[(r * width + j) % keep_len] != 0.0);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if kept(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(format!(
                "softmax row {r} is fully masked and cannot be renormalised"
            )));
        }
        let mut z = 0.0;
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            *o = if kept(j) { (v - max).exp() } else { 0.0 };
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Ok(())
}

/// Sums `g` (shaped like `big`) down onto a suffix-shaped operand of length `n`.
fn reduce_to_suffix(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], g: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the graph can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Allows another `backward` over the same nodes.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf outside gradient flow.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = suffix_len(ta.shape(), tb.shape(), name)?;
        let bd = tb.data();
        let data = ta
            .data()
            .chunks(n.max(1))
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let out = self.value(a).swap_axes(i, j)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SwapAxes(a, i, j), rg, "swap_axes")
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got shape {:?}",
                self.shape(a)
            )));
        }
        self.swap_axes(a, r - 2, r - 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let run = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if w == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = vec![0.0; t.len()];
        softmax_rows(t.data(), None, w, &mut out)?;
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Softmax restricted to entries where `keep` is nonzero; masked entries
    /// come out as exact zeros. Equals softmax, then masking, then
    /// renormalising the surviving entries. `keep`'s shape must be a suffix
    /// of `a`'s. A row with nothing kept is a contract error.
    pub fn masked_softmax(&mut self, a: Var, keep: &Tensor) -> Result<Var> {
        let t = self.value(a);
        suffix_len(t.shape(), keep.shape(), "masked_softmax")?;
        let w = t.last_dim();
        let mut out = vec![0.0; t.len()];
        softmax_rows(t.data(), Some(keep.data()), w, &mut out)?;
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MaskedSoftmax(a), rg, "masked_softmax")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}] for input {:?}",
                self.shape(gamma),
                self.shape(beta),
                t.shape()
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / d.max(1);
        let mut xhat = vec![0.0; t.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// Layer normalisation without an affine part.
    pub fn layer_norm_plain(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        let g = self.constant(Tensor::ones([d]));
        let b = self.constant(Tensor::zeros([d]));
        self.layer_norm(x, g, b, eps)
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors scaled by `1/(1-rate)`. Identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut RandomState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.bernoulli(rate) { 0.0 } else { scale });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Cosine similarity along the last axis: `[.., d] x [.., d] -> [..]`.
    /// Zero when either norm is below [`COSINE_NORM_FLOOR`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() == 0 {
            return Err(Error::Dimension(format!(
                "cosine_similarity: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let d = ta.last_dim();
        let rows = ta.len() / d.max(1);
        let mut na = vec![0.0; rows];
        let mut nb = vec![0.0; rows];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let (x, y) = (&ta.data()[r * d..(r + 1) * d], &tb.data()[r * d..(r + 1) * d]);
            let (mut dot, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for j in 0..d {
                dot += x[j] * y[j];
                xx += x[j] * x[j];
                yy += y[j] * y[j];
            }
            na[r] = xx.sqrt();
            nb[r] = yy.sqrt();
            out[r] = if na[r] < COSINE_NORM_FLOOR || nb[r] < COSINE_NORM_FLOOR {
                0.0
            } else {
                (dot / (na[r] * nb[r])).clamp(-1.0, 1.0)
            };
        }
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Cosine { a, b, na, nb }, rg, "cosine_similarity")
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph until
    /// [`Graph::reset_backward`] or [`Graph::clear`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; reset it first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Vec<f64>) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], self.shape(to), g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = matmul_dims(ta.shape(), tb.shape())?;
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; ta.len()];
                    if d.a_batched && !d.b_batched {
                        gemm(d.batch * d.m, d.n, d.k, gd, false, tb.data(), true, &mut ga, false);
                    } else {
                        for bi in 0..d.batch {
                            let ao = if d.a_batched { bi * sa } else { 0 };
                            let bo = if d.b_batched { bi * sb } else { 0 };
                            gemm(
                                d.m,
                                d.n,
                                d.k,
                                &gd[bi * sc..(bi + 1) * sc],
                                false,
                                &tb.data()[bo..bo + sb],
                                true,
                                &mut ga[ao..ao + sa],
                                true,
                            );
                        }
                    }
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; tb.len()];
                    if d.a_batched && !d.b_batched {
                        gemm(d.k, d.batch * d.m, d.n, ta.data(), true, gd, false, &mut gb, false);
                    } else {
                        for bi in 0..d.batch {
                            let ao = if d.a_batched { bi * sa } else { 0 };
                            let bo = if d.b_batched { bi * sb } else { 0 };
                            gemm(
                                d.k,
                                d.m,
                                d.n,
                                &ta.data()[ao..ao + sa],
                                true,
                                &gd[bi * sc..(bi + 1) * sc],
                                false,
                                &mut gb[bo..bo + sb],
                                true,
                            );
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    self.send(grads, *a, gd.to_vec());
                }
                if self.requires_grad(*b) {
                    let n = self.value(*b).len();
                    let mut gb = reduce_to_suffix(gd, n.max(1));
                    gb.truncate(n);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.len().max(1);
                if self.requires_grad(*a) {
                    let ga = gd
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(tb.data()).map(|(x, y)| x * y))
                        .collect();
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let prod: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    let mut gb = reduce_to_suffix(&prod, n);
                    gb.truncate(tb.len());
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, gd.iter().map(|x| c * x).collect());
            }
            Op::SwapAxes(a, i, j) => {
                let back = g.swap_axes(*i, *j)?;
                self.send(grads, *a, back.into_data());
            }
            Op::Reshape(a) => {
                self.send(grads, *a, gd.to_vec());
            }
            Op::Sum(a) => {
                self.send(grads, *a, vec![gd[0]; self.value(*a).len()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = x
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        g * (gelu_cdf(x) + x * pdf)
                    })
                    .collect();
                self.send(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let run = self.shape(*p)[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * run);
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[o * total + offset..o * total + offset + run]);
                        }
                        self.send(grads, *p, gp);
                    }
                    offset += run;
                }
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(w).zip(gd.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = y.iter().zip(gd).map(|(y, g)| g * y * (1.0 - y)).collect();
                self.send(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rstd.len() {
                        let span = r * d..(r + 1) * d;
                        let (h, gr) = (&xhat[span.clone()], &gd[span.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * h[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - h[j] * m2);
                        }
                    }
                    self.send(grads, *x, gx);
                }
                if self.requires_grad(*gamma) {
                    let prod: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    self.send(grads, *gamma, reduce_to_suffix(&prod, d));
                }
                if self.requires_grad(*beta) {
                    self.send(grads, *beta, reduce_to_suffix(gd, d));
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.last_dim();
                let cs = node.value.data();
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for r in 0..cs.len() {
                    if na[r] < COSINE_NORM_FLOOR || nb[r] < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let inv = 1.0 / (na[r] * nb[r]);
                    let (ia, ib) = (1.0 / (na[r] * na[r]), 1.0 / (nb[r] * nb[r]));
                    for j in 0..d {
                        let (x, y) = (ta.data()[r * d + j], tb.data()[r * d + j]);
                        ga[r * d + j] = gd[r] * (y * inv - cs[r] * x * ia);
                        gb[r * d + j] = gd[r] * (x * inv - cs[r] * y * ib);
                    }
                }
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
        }
        Ok(())
    }
}
