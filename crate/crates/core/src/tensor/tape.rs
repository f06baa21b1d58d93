use super::kernels::{self, AttnDims};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    AddConst(Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    FocalLoss {
        probs: Var,
        targets: Tensor<T>,
        class_weights: Vec<T>,
        gamma: T,
        clamp: T,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of primitive operations for reverse-mode
/// differentiation. Nodes are appended after their inputs, so walking the
/// node list backwards is a reverse topological order.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape(format!(
                "bias {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with a fixed tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(c, |a, b| a + b)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax over the trailing extent.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.shape().len() - 1;
        let out = kernels::softmax(xv, axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} vs input {:?}",
                g.shape(),
                b.shape(),
                xv.shape()
            )));
        }
        let cache = kernels::layer_norm_rows(xv.data(), d, g.data(), b.data(), T::from_f64(eps));
        let out = Tensor::from_parts(xv.shape().to_vec(), cache.out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, rstd) = if rg {
            (cache.xhat, cache.rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over projected inputs. `q` holds
    /// `groups·lq` rows and `k`/`v` hold `groups·lk` rows; groups never
    /// attend to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "token width {d} is not divisible by {heads} heads"
            )));
        }
        if kv.cols() != d
            || vv.cols() != d
            || kv.rows() != vv.rows()
            || groups == 0
            || qv.rows() % groups != 0
            || kv.rows() % groups != 0
        {
            return Err(Error::shape(format!(
                "attention operands q {:?}, k {:?}, v {:?} do not split into {groups} groups",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let dims = AttnDims {
            groups,
            lq: qv.rows() / groups,
            lk: kv.rows() / groups,
            d,
            heads,
        };
        let (out, probs) = kernels::attention_core(qv.data(), kv.data(), vv.data(), dims);
        let out = Tensor::from_parts(vec![groups * dims.lq, d], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols operands have different row counts"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows operands have different widths"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row `i` of the output is row `index[i]` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if index.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_parts(vec![index.len(), cols], out);
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, index), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / T::from_f64(xv.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Class-weighted binary focal loss of a `batch×C` probability matrix,
    /// summed over classes and averaged over the batch. Probabilities are
    /// clamped to `[clamp, 1 - clamp]`; clamped entries pass no gradient.
    pub fn focal_loss(
        &mut self,
        probs: Var,
        targets: Tensor<T>,
        class_weights: Vec<T>,
        gamma: T,
        clamp: T,
    ) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != targets.shape() || class_weights.len() != pv.cols() {
            return Err(Error::shape(format!(
                "focal loss: probs {:?}, targets {:?}, {} class weights",
                pv.shape(),
                targets.shape(),
                class_weights.len()
            )));
        }
        let c = pv.cols();
        let batch = T::from_f64(pv.rows() as f64);
        let hi = T::one() - clamp;
        let mut total = T::zero();
        for (i, (&p, &y)) in pv.data().iter().zip(targets.data()).enumerate() {
            let p = p.max(clamp).min(hi);
            let w = class_weights[i % c];
            let pos = y * (T::one() - p).powf(gamma) * (-p.ln());
            let neg = (T::one() - y) * p.powf(gamma) * (-(T::one() - p).ln());
            total = total + w * (pos + neg);
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(total / batch),
            Op::FocalLoss {
                probs,
                targets,
                class_weights,
                gamma,
                clamp,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        // Gradient buffers for inputs are accumulated additively.
        fn acc<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e = *e + x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match (&node.op, grads[idx].as_ref()) {
                (Op::Leaf, _) | (_, None) => continue,
                (_, Some(_)) => grads[idx].take().expect("checked"),
            };
            let want = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if want(*a) {
                        // dA = dC·Bᵀ
                        let da = kernels::gemm_strided(m, n, k, &g, n, 1, bv.data(), 1, n);
                        acc(&mut grads, *a, da);
                    }
                    if want(*b) {
                        // dB = Aᵀ·dC
                        let db = kernels::gemm_strided(k, m, n, av.data(), 1, k, &g, n, 1);
                        acc(&mut grads, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if want(*b) {
                        let n = val(*b).len();
                        let mut db = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d = *d + r;
                            }
                        }
                        acc(&mut grads, *b, db);
                    }
                    if want(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if want(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        let d = g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *a, d);
                    }
                    if want(*b) {
                        let d = g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *b, d);
                    }
                }
                Op::MulConst(x, c) => {
                    let d = g.iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
                    acc(&mut grads, *x, d);
                }
                Op::AddConst(x) => acc(&mut grads, *x, g),
                Op::Scale(x, s) => {
                    let d = g.iter().map(|&v| v * *s).collect();
                    acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let d = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect();
                    acc(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let n = node.value.cols();
                    let mut d = vec![T::zero(); g.len()];
                    for ((dr, gr), sr) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(node.value.data().chunks(n))
                    {
                        let dot: T = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &s) in dr.iter_mut().zip(gr).zip(sr) {
                            *o = s * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gain).data();
                    let d = gv.len();
                    if want(*gain) {
                        let mut dg = vec![T::zero(); d];
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] = dg[j] + gr[j] * hr[j];
                            }
                        }
                        acc(&mut grads, *gain, dg);
                    }
                    if want(*bias) {
                        let mut db = vec![T::zero(); d];
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                db[j] = db[j] + gr[j];
                            }
                        }
                        acc(&mut grads, *bias, db);
                    }
                    if want(*x) {
                        let w = T::from_f64(d as f64);
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let dh: Vec<T> = (0..d).map(|j| gr[j] * gv[j]).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() / w;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / w;
                            for j in 0..d {
                                dx[r * d + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, dims, probs } => {
                    let (dq, dk, dv) = kernels::attention_core_backward(
                        val(*q).data(),
                        val(*k).data(),
                        val(*v).data(),
                        probs,
                        &g,
                        *dims,
                    );
                    if want(*q) {
                        acc(&mut grads, *q, dq);
                    }
                    if want(*k) {
                        acc(&mut grads, *k, dk);
                    }
                    if want(*v) {
                        acc(&mut grads, *v, dv);
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if want(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            acc(&mut grads, p, d);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if want(p) {
                            acc(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::GatherRows(x, index) => {
                    let xv = val(*x);
                    let cols = xv.cols();
                    let mut d = vec![T::zero(); xv.len()];
                    for (o, &i) in index.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] = d[i * cols + j] + g[o * cols + j];
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    acc(&mut grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
                }
                Op::FocalLoss {
                    probs,
                    targets,
                    class_weights,
                    gamma,
                    clamp,
                } => {
                    let pv = val(*probs);
                    let c = pv.cols();
                    let batch = T::from_f64(pv.rows() as f64);
                    let hi = T::one() - *clamp;
                    let gm1 = *gamma - T::one();
                    let d = pv
                        .data()
                        .iter()
                        .zip(targets.data())
                        .enumerate()
                        .map(|(i, (&p, &y))| {
                            if p <= *clamp || p >= hi {
                                return T::zero();
                            }
                            let w = class_weights[i % c];
                            let q = T::one() - p;
                            let mut dpos = -(q.powf(*gamma) / p);
                            let mut dneg = p.powf(*gamma) / q;
                            if *gamma != T::zero() {
                                dpos = dpos + *gamma * q.powf(gm1) * p.ln();
                                dneg = dneg - *gamma * p.powf(gm1) * q.ln();
                            }
                            g[0] * w * (y * dpos + (T::one() - y) * dneg) / batch
                        })
                        .collect();
                    acc(&mut grads, *probs, d);
                }
            }
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
                .collect(),
        })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or is not trainable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when it received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
