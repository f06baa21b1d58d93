use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Rows of C computed per parallel task.
const GEMM_ROW_BLOCK: usize = 64;

/// Row-major `m×n` product of strided operands. Each output row depends only
/// on the matching row of `a`, so splitting rows across tasks does not change
/// any result bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
) -> Vec<T> {
    assert!(m == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    let mut c = vec![T::zero(); m * n];
    let block = if par::current_num_threads() > 1 { GEMM_ROW_BLOCK } else { m.max(1) };
    par::for_each_chunk_mut(&mut c, block * n, m * k * n, |ci, chunk| {
        let r0 = ci * block;
        let rows = chunk.len() / n;
        // SAFETY: bounds checked above; chunk is an exclusive rows×n slice.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                a.as_ptr().add(r0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                T::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    });
    c
}

/// Strided product accumulated into an existing strided destination.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: all three operands were bounds checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

fn as_matrix<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// `a·b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        gemm_strided(m, k, n, a.data(), k, 1, b.data(), n, 1),
    ))
}

/// `a·bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (n, k2) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner extents differ: {:?} × {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        gemm_strided(m, k, n, a.data(), k, 1, b.data(), 1, k),
    ))
}

/// `aᵀ·b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn inner extents differ: {:?}ᵀ × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor::from_parts(
        vec![m, n],
        gemm_strided(m, k, n, a.data(), 1, m, b.data(), n, 1),
    ))
}

/// In-place softmax of one contiguous row.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.to_vec();
    let mut buf = vec![T::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, b) in buf.iter_mut().enumerate() {
                *b = out[base + e * inner];
            }
            softmax_row(&mut buf);
            for (e, b) in buf.iter().enumerate() {
                out[base + e * inner] = *b;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Per-row normalisation intermediates kept for the backward pass.
pub(crate) struct LayerNormCache<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Element>(
    x: &[T],
    width: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> LayerNormCache<T> {
    let rows = x.len() / width;
    let w = T::from_f64(width as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            out[r * width + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormCache { out, xhat, rstd }
}

/// Layer normalisation over the trailing extent.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm affine width {} / {} does not match trailing extent {d}",
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let cache = layer_norm_rows(x.data(), d, gain.data(), bias.data(), T::from_f64(eps));
    Ok(Tensor::from_parts(x.shape().to_vec(), cache.out))
}

/// Mean pooling with stride equal to the kernel.
pub fn avg_pool2d<T: Element>(x: &Tensor<T>, kernel: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = as_matrix(x, "avg_pool2d input")?;
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
        return Err(Error::shape(format!(
            "avg_pool2d kernel {kernel:?} does not tile a {h}×{w} input"
        )));
    }
    let (oh, ow) = (h / kh, w / kw);
    let norm = T::from_f64((kh * kw) as f64);
    let mut out = vec![T::zero(); oh * ow];
    for i in 0..h {
        for j in 0..w {
            let o = (i / kh) * ow + j / kw;
            out[o] = out[o] + x.at(i, j);
        }
    }
    for v in out.iter_mut() {
        *v = *v / norm;
    }
    Ok(Tensor::from_parts(vec![oh, ow], out))
}

/// Geometry of a batched attention call: `groups` independent sequences,
/// `lq` query rows and `lk` key rows each, width `d` split over `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub groups: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn probs_per_group(&self) -> usize {
        self.heads * self.lq * self.lk
    }
}

/// Scaled dot-product attention over already-projected q/k/v.
///
/// Returns the concatenated head outputs and the attention probabilities
/// laid out as `[group][head][lq][lk]`.
pub(crate) fn attention_core<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>) {
    let AttnDims { groups, lq, lk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let work = groups * heads * lq * lk * dh;
    let per_group: Vec<(Vec<T>, Vec<T>)> = if work >= par::PARALLEL_WORK_THRESHOLD {
        par::map_range(groups, |g| attention_group(q, k, v, dims, g, scale))
    } else {
        (0..groups)
            .map(|g| attention_group(q, k, v, dims, g, scale))
            .collect()
    };
    let mut out = Vec::with_capacity(groups * lq * d);
    let mut probs = Vec::with_capacity(groups * dims.probs_per_group());
    for (o, p) in per_group {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

fn attention_group<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttnDims,
    g: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    let AttnDims { lq, lk, d, heads, .. } = dims;
    let dh = dims.head_dim();
    let qg = &q[g * lq * d..(g + 1) * lq * d];
    let kg = &k[g * lk * d..(g + 1) * lk * d];
    let vg = &v[g * lk * d..(g + 1) * lk * d];
    let mut out = vec![T::zero(); lq * d];
    let mut probs = vec![T::zero(); heads * lq * lk];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm_acc(lq, dh, lk, &qg[h * dh..], (d, 1), &kg[h * dh..], (1, d), T::zero(), p, (lk, 1));
        for row in p.chunks_mut(lk) {
            for x in row.iter_mut() {
                *x = *x * scale;
            }
            softmax_row(row);
        }
        gemm_acc(lq, lk, dh, p, (lk, 1), &vg[h * dh..], (d, 1), T::zero(), &mut out[h * dh..], (d, 1));
    }
    (out, probs)
}

/// Gradients of [`attention_core`] with respect to q, k and v.
pub(crate) fn attention_core_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims { groups, lq, lk, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let per_group: Vec<_> = par::map_range(groups, |g| {
        let qg = &q[g * lq * d..(g + 1) * lq * d];
        let kg = &k[g * lk * d..(g + 1) * lk * d];
        let vg = &v[g * lk * d..(g + 1) * lk * d];
        let go = &grad_out[g * lq * d..(g + 1) * lq * d];
        let pg = &probs[g * dims.probs_per_group()..(g + 1) * dims.probs_per_group()];
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let p = &pg[h * lq * lk..(h + 1) * lq * lk];
            // dV = Pᵀ·dO
            gemm_acc(lk, lq, dh, p, (1, lk), &go[h * dh..], (d, 1), T::zero(), &mut dv[h * dh..], (d, 1));
            // dP = dO·Vᵀ
            gemm_acc(lq, dh, lk, &go[h * dh..], (d, 1), &vg[h * dh..], (1, d), T::zero(), &mut dp, (lk, 1));
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let drow = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (ds, &pv) in drow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm_acc(lq, lk, dh, &dp, (lk, 1), &kg[h * dh..], (d, 1), T::zero(), &mut dq[h * dh..], (d, 1));
            gemm_acc(lk, lq, dh, &dp, (1, lk), &qg[h * dh..], (d, 1), T::zero(), &mut dk[h * dh..], (d, 1));
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(groups * lq * d);
    let mut dk = Vec::with_capacity(groups * lk * d);
    let mut dv = Vec::with_capacity(groups * lk * d);
    for (a, b, c) in per_group {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

/// Projection parameters of one attention layer; matrices are `D×D` and
/// applied as `x·W + b`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T: Element> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

fn affine<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let y = matmul(x, w)?;
    let n = y.cols();
    if b.len() != n {
        return Err(Error::shape(format!("bias width {} vs output width {n}", b.len())));
    }
    let bias = b.data();
    let mut out = y.to_vec();
    for row in out.chunks_mut(n) {
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o = *o + bv;
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

/// Multi-head scaled dot-product attention without masking.
pub fn multi_head_attention<T: Element>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    weights: &AttentionWeights<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let d = q_in.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "token width {d} is not divisible by {heads} heads"
        )));
    }
    if k_in.cols() != d || v_in.cols() != d || k_in.rows() != v_in.rows() {
        return Err(Error::shape(format!(
            "attention inputs disagree: q {:?}, k {:?}, v {:?}",
            q_in.shape(),
            k_in.shape(),
            v_in.shape()
        )));
    }
    let q = affine(q_in, &weights.wq, &weights.bq)?;
    let k = affine(k_in, &weights.wk, &weights.bk)?;
    let v = affine(v_in, &weights.wv, &weights.bv)?;
    let dims = AttnDims {
        groups: 1,
        lq: q_in.rows(),
        lk: k_in.rows(),
        d,
        heads,
    };
    let (o, _) = attention_core(q.data(), k.data(), v.data(), dims);
    affine(&Tensor::from_parts(vec![dims.lq, d], o), &weights.wo, &weights.bo)
}
