//! Forward and backward numeric kernels.
//!
//! Matrix products use an `i-p-j` loop order so the innermost loop runs over
//! contiguous output columns; the reduction order is fixed, which makes every
//! kernel bit-reproducible for a given input.

use crate::diff::tensor::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn expect_flat<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.c != 1 || s.h != 1 {
        return Err(Error::dim(op, format!("expected [N, 1, 1, D], got {s}")));
    }
    Ok((s.n, s.w))
}

/// Weight tensors of dense layers are stored as `[1, 1, Din, Dout]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = expect_flat("dense", x)?;
    let ws = w.shape();
    if ws.n != 1 || ws.c != 1 || ws.h != din {
        return Err(Error::dim("dense", format!("input {} against weights {ws}", x.shape())));
    }
    let dout = ws.w;
    if b.shape() != Shape::flat(1, dout) {
        return Err(Error::dim("dense", format!("bias {} for {dout} outputs", b.shape())));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm_nn(x.data(), w.data(), &mut out, n, din, dout);
    Tensor::from_vec(Shape::flat(n, dout), out)
}

pub(crate) struct DenseGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> DenseGrads<T> {
    let n = x.shape().n;
    let din = w.shape().h;
    let dk = w.shape().w;
    let dx = want[0].then(|| {
        let wt = transpose(w.data(), din, dk);
        let mut dx = vec![T::zero(); n * din];
        gemm_nn(dout.data(), &wt, &mut dx, n, dk, din);
        Tensor::from_vec(x.shape(), dx).expect("shape preserved")
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); din * dk];
        gemm_tn(x.data(), dout.data(), &mut dw, din, n, dk);
        Tensor::from_vec(w.shape(), dw).expect("shape preserved")
    });
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); dk];
        for row in dout.data().chunks_exact(dk) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::from_vec(Shape::flat(1, dk), db).expect("shape preserved")
    });
    DenseGrads { dx, dw, db }
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, kernels: Shape, stride: usize, pad: usize) -> Result<Self> {
        if kernels.c != x.c {
            return Err(Error::dim("conv2d", format!("kernels {kernels} against input {x}")));
        }
        if kernels.h != kernels.w || kernels.h % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel must be square and odd, got {kernels}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let k = kernels.h;
        if k > x.h + 2 * pad || k > x.w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} exceeds padded extent {}x{}", x.h + 2 * pad, x.w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            k_out: kernels.n,
            ksize: k,
            stride,
            pad,
            ho: (x.h + 2 * pad - k) / stride + 1,
            wo: (x.w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.ksize * self.ksize
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.k_out, self.ho, self.wo)
    }
}

/// Unfolds one example into a `[C·k·k, Ho·Wo]` column matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let k = g.ksize;
    for c in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    let k = g.ksize;
    for c in 0..g.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass returning the output and the per-example column matrices
/// needed by the backward pass.
pub(crate) fn conv2d_forward_saving<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom, Vec<T>)> {
    let g = ConvGeom::new(x.shape(), kernels.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != Shape::flat(1, g.k_out) {
            return Err(Error::dim("conv2d", format!("bias {} for {} kernels", b.shape(), g.k_out)));
        }
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let in_ex = g.c * g.h * g.w;
    let mut cols = vec![T::zero(); g.n * patch * plane];
    let mut out = vec![T::zero(); g.n * g.k_out * plane];
    for n in 0..g.n {
        let col = &mut cols[n * patch * plane..(n + 1) * patch * plane];
        im2col(&g, &x.data()[n * in_ex..(n + 1) * in_ex], col);
        let o = &mut out[n * g.k_out * plane..(n + 1) * g.k_out * plane];
        if let Some(b) = bias {
            for (kk, chunk) in o.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[kk]);
            }
        }
        gemm_nn(kernels.data(), col, o, g.k_out, patch, plane);
    }
    Ok((Tensor::from_vec(g.out_shape(), out)?, g, cols))
}

/// Zero-padded cross-correlation. `kernels` is `[K, C, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_saving(x, kernels, None, stride, pad).map(|(out, _, _)| out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    kernels: &Tensor<T>,
    dout: &Tensor<T>,
    want: [bool; 3],
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let in_ex = g.c * g.h * g.w;
    let dx = want[0].then(|| {
        let mut dx = vec![T::zero(); g.n * in_ex];
        let mut dcols = vec![T::zero(); patch * plane];
        for n in 0..g.n {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            let d = &dout.data()[n * g.k_out * plane..(n + 1) * g.k_out * plane];
            gemm_tn(kernels.data(), d, &mut dcols, patch, g.k_out, plane);
            col2im(g, &dcols, &mut dx[n * in_ex..(n + 1) * in_ex]);
        }
        Tensor::from_vec(Shape::new(g.n, g.c, g.h, g.w), dx).expect("shape preserved")
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); g.k_out * patch];
        for n in 0..g.n {
            let col_t = transpose(&cols[n * patch * plane..(n + 1) * patch * plane], patch, plane);
            let d = &dout.data()[n * g.k_out * plane..(n + 1) * g.k_out * plane];
            gemm_nn(d, &col_t, &mut dw, g.k_out, plane, patch);
        }
        Tensor::from_vec(kernels.shape(), dw).expect("shape preserved")
    });
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); g.k_out];
        for n in 0..g.n {
            for (kk, chunk) in dout.data()[n * g.k_out * plane..(n + 1) * g.k_out * plane]
                .chunks_exact(plane)
                .enumerate()
            {
                db[kk] += chunk.iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(Shape::flat(1, g.k_out), db).expect("shape preserved")
    });
    ConvGrads { dx, dw, db }
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dout, |v, g| if v > T::zero() { g } else { T::zero() }).expect("shape preserved")
}

/// 2×2 average pooling with stride 2.
pub(crate) fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::dim("avg_pool2", format!("spatial extent of {s} is not even")));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks_exact(s.h * s.w) {
        for oy in 0..ho {
            let r0 = &plane[2 * oy * s.w..(2 * oy + 1) * s.w];
            let r1 = &plane[(2 * oy + 1) * s.w..(2 * oy + 2) * s.w];
            for ox in 0..wo {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(in_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let (ho, wo) = (in_shape.h / 2, in_shape.w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); in_shape.numel()];
    for (plane_in, plane_out) in dx
        .chunks_exact_mut(in_shape.h * in_shape.w)
        .zip(dout.data().chunks_exact(ho * wo))
    {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = plane_out[oy * wo + ox] * quarter;
                plane_in[2 * oy * in_shape.w + 2 * ox] = g;
                plane_in[2 * oy * in_shape.w + 2 * ox + 1] = g;
                plane_in[(2 * oy + 1) * in_shape.w + 2 * ox] = g;
                plane_in[(2 * oy + 1) * in_shape.w + 2 * ox + 1] = g;
            }
        }
    }
    Tensor::from_vec(in_shape, dx).expect("shape preserved")
}

/// Mean softmax cross-entropy with its gradient.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// Mean over the batch, accumulated in `f64`.
    pub loss: f64,
    pub per_example: Vec<f64>,
    /// `(softmax − onehot) / N`.
    pub grad: Tensor<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let (n, k) = expect_flat("softmax_cross_entropy", logits)?;
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::Domain("cross-entropy of an empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut per_example = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::Domain(format!("label {y} outside [0, {k})")));
        }
        let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.widen() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        per_example.push(z.ln() - (row[y].widen() - max));
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.push(T::of((e / z - onehot) * inv_n));
        }
    }
    let loss = per_example.iter().sum::<f64>() * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric { step: 0, detail: format!("cross-entropy evaluated to {loss}") });
    }
    Ok(CrossEntropy { loss, per_example, grad: Tensor::from_vec(logits.shape(), grad)? })
}
