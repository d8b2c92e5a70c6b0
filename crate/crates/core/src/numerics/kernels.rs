//! Forward and backward kernels behind the graph ops.

use crate::error::{Error, Result};
use crate::parallel;

use super::tensor::{numel, Tensor};

/// `c = beta * c + op(a) * op(b)` for row-major matrices, where `op` is an
/// optional transpose. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut ga = vec![0.0; m * k];
    gemm(m, n, k, grad.data(), false, b.data(), true, 0.0, &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, grad.data(), false, 0.0, &mut gb);
    (
        Tensor::new(vec![m, k], ga).unwrap(),
        Tensor::new(vec![k, n], gb).unwrap(),
    )
}

// ---------------------------------------------------------------- broadcast

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when viewed as `out` under broadcasting (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element as `(out_index, a_index, b_index)` in row-major
/// order of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let rows = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for row in 0..rows {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        let base = row * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(out, data)
}

/// Sums `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = broadcast_strides(target, out);
    let mut acc = vec![0.0; numel(target)];
    let g = grad.data();
    for_each_broadcast(out, &st, &st, |o, i, _| acc[i] += g[o]);
    Tensor::new(target.to_vec(), acc).unwrap()
}

/// Multiplies `grad` by the (broadcast) `other` operand, then reduces to `target`.
pub(crate) fn mul_backward(grad: &Tensor, other: &Tensor, target: &[usize]) -> Tensor {
    let out = grad.shape();
    let so = broadcast_strides(other.shape(), out);
    let st = broadcast_strides(target, out);
    let mut acc = vec![0.0; numel(target)];
    let (g, od) = (grad.data(), other.data());
    for_each_broadcast(out, &st, &so, |o, i, j| acc[i] += g[o] * od[j]);
    Tensor::new(target.to_vec(), acc).unwrap()
}

// ------------------------------------------------------------------- conv2d

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be (C,H,W) or (N,C,H,W), got {input:?}"),
                ))
            }
        };
        let [c_out, kc, k, k2] = *kernel else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be (C_out,C_in,k,k), got {kernel:?}"),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("channel mismatch: input {input:?} vs kernel {kernel:?}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::contract(format!(
                "conv2d kernel must be square with odd size, got {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {input:?}"),
            ));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let npos = self.ho * self.wo;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let npos = self.ho * self.wo;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(input: &Tensor, kernel: &Tensor, g: &ConvGeom, rank3: bool) -> Tensor {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let npos = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * out_len];
    parallel::for_each_chunk_mut(&mut out, out_len, |n, dst| {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.c_out, g.c_in, npos, kernel.data(), false, x, false, 0.0, dst);
        } else {
            let mut cols = vec![0.0; g.cols_rows() * npos];
            g.im2col(x, &mut cols);
            gemm(g.c_out, g.cols_rows(), npos, kernel.data(), false, &cols, false, 0.0, dst);
        }
    });
    let shape = if rank3 {
        vec![g.c_out, g.ho, g.wo]
    } else {
        vec![g.batch, g.c_out, g.ho, g.wo]
    };
    Tensor::new(shape, out).unwrap()
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let npos = g.ho * g.wo;
    let ckk = g.cols_rows();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = parallel::map_range(g.batch, |n| {
        let x = &input.data()[n * in_len..(n + 1) * in_len];
        let dy = &grad.data()[n * out_len..(n + 1) * out_len];
        let mut dx = Vec::new();
        let mut dw = Vec::new();
        if g.is_pointwise() {
            if need_kernel {
                dw = vec![0.0; g.c_out * ckk];
                gemm(g.c_out, npos, ckk, dy, false, x, true, 0.0, &mut dw);
            }
            if need_input {
                dx = vec![0.0; in_len];
                gemm(ckk, g.c_out, npos, kernel.data(), true, dy, false, 0.0, &mut dx);
            }
        } else {
            if need_kernel {
                let mut cols = vec![0.0; ckk * npos];
                g.im2col(x, &mut cols);
                dw = vec![0.0; g.c_out * ckk];
                gemm(g.c_out, npos, ckk, dy, false, &cols, true, 0.0, &mut dw);
            }
            if need_input {
                let mut dcols = vec![0.0; ckk * npos];
                gemm(ckk, g.c_out, npos, kernel.data(), true, dy, false, 0.0, &mut dcols);
                dx = vec![0.0; in_len];
                g.col2im(&dcols, &mut dx);
            }
        }
        (dx, dw)
    });
    let d_input = need_input.then(|| {
        let mut data = Vec::with_capacity(g.batch * in_len);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx);
        }
        Tensor::new(input.shape().to_vec(), data).unwrap()
    });
    let d_kernel = need_kernel.then(|| {
        let mut acc = vec![0.0; g.c_out * ckk];
        for (_, dw) in &per_sample {
            for (a, b) in acc.iter_mut().zip(dw) {
                *a += b;
            }
        }
        Tensor::new(kernel.shape().to_vec(), acc).unwrap()
    });
    (d_input, d_kernel)
}

// --------------------------------------------------------------- group norm

/// Splits a `(C,H,W)` or `(N,C,H,W)` shape into `(batch, channels, spatial)`.
pub(crate) fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(
            op,
            format!("expected (C,H,W) or (N,C,H,W), got {shape:?}"),
        )),
    }
}

pub(crate) struct GroupNormOut {
    pub y: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<GroupNormOut> {
    let (n, c, hw) = nchw(x.shape(), "group_norm")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    let glen = (c / groups) * hw;
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n * groups];
    for (gi, (src, dst)) in x.data().chunks(glen).zip(y.chunks_mut(glen)).enumerate() {
        let mean = src.iter().sum::<f64>() / glen as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd[gi] = r;
    }
    Ok(GroupNormOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        rstd,
    })
}

pub(crate) fn group_norm_backward(y: &Tensor, rstd: &[f64], grad: &Tensor) -> Tensor {
    let glen = y.len() / rstd.len();
    let mut dx = vec![0.0; y.len()];
    for (gi, ((yy, gg), dd)) in y
        .data()
        .chunks(glen)
        .zip(grad.data().chunks(glen))
        .zip(dx.chunks_mut(glen))
        .enumerate()
    {
        let mean_g = gg.iter().sum::<f64>() / glen as f64;
        let mean_gy = gg.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / glen as f64;
        for ((d, &gv), &yv) in dd.iter_mut().zip(gg).zip(yy) {
            *d = rstd[gi] * (gv - mean_g - yv * mean_gy);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

// ---------------------------------------------------------- spatial resample

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial(x.shape(), "upsample2")?;
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] *= 2;
    shape[r - 1] *= 2;
    Tensor::new(shape, out)
}

pub(crate) fn upsample2_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let (planes, h, w) = spatial(in_shape, "upsample2").unwrap();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = spatial(x.shape(), "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2",
            format!("spatial extents must be even, got {:?}", x.shape()),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                out[p * ho * wo + y * wo + xx] = 0.25 * s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

pub(crate) fn avg_pool2_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let (planes, h, w) = spatial(in_shape, "avg_pool2").unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[p * h * w + y * w + xx] = 0.25 * grad.data()[p * ho * wo + (y / 2) * wo + xx / 2];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

// ------------------------------------------------------------------- concat

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s[..axis] != first[..axis]
            || s[axis + 1..] != first[axis + 1..]
        {
            return Err(Error::shape(
                "concat",
                format!("{first:?} vs {s:?} along axis {axis}"),
            ));
        }
        total += s[axis];
    }
    let outer = numel(&first[..axis]);
    let mut out = Vec::with_capacity(outer * total * numel(&first[axis + 1..]));
    for o in 0..outer {
        for p in parts {
            let block = numel(&p.shape()[axis..]);
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub(crate) fn concat_backward(grad: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let outer = numel(&shapes[0][..axis]);
    let mut outs: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut offset = 0;
    for _ in 0..outer {
        for (s, o) in shapes.iter().zip(outs.iter_mut()) {
            let block = numel(&s[axis..]);
            o.extend_from_slice(&grad.data()[offset..offset + block]);
            offset += block;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::new(s.clone(), d).unwrap())
        .collect()
}

// ------------------------------------------------------- timestep embedding

/// Sinusoidal embedding of each timestep, shape `(len(ts), dim)`.
///
/// Entries alternate `sin(t * f_i), cos(t * f_i)` with
/// `f_i = 10000^(-2i/dim)`, so `t = 0` yields `[0, 1, 0, 1, ...]`.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!(
            "timestep embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            data.push((t * freq).sin());
            data.push((t * freq).cos());
        }
    }
    Tensor::new(vec![ts.len(), dim], data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2]), Some(vec![2]));
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::ones(&[2, 3, 2, 2]);
        let r = reduce_to_shape(&g, &[3, 1, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        // a^T b = [[1,3],[2,4]] [[5,6],[7,8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn timestep_embedding_at_zero_alternates() {
        let e = timestep_embedding(&[0.0], 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(timestep_embedding(&[0.0], 7).is_err());
    }
}
