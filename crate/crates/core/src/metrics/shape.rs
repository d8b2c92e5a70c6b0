use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;

use super::edges::gaussian_taps;

fn same_size(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `(IoU, Dice)` of two binary maps; both are 1 when both maps are empty.
pub fn edge_overlap(a: &Mask, b: &Mask) -> Result<(f64, f64)> {
    same_size("edge_overlap", a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_bytes().iter().zip(b.as_bytes()) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (na + nb) as f64))
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so k never underflows.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `m`, row-major. `m` must be nonempty.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (w, h) = (m.width(), m.height());
    let mut grid: Vec<f64> = m.as_bytes().iter().map(|&b| if b != 0 { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt1d(&col, &mut res);
        for y in 0..h {
            grid[y * w + x] = res[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        dt1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Distances from each set pixel of `from` to the nearest set pixel of `to`.
fn directed(from: &Mask, to: &Mask) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.as_bytes()
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b != 0)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn nonempty(a: &Mask, b: &Mask) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyEdgeSet);
    }
    Ok(())
}

/// Symmetric average Chamfer distance.
pub fn chamfer(a: &Mask, b: &Mask) -> Result<f64> {
    same_size("chamfer", a, b)?;
    nonempty(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(directed(a, b)) + mean(directed(b, a))))
}

pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    same_size("hausdorff", a, b)?;
    nonempty(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
    Ok(max(directed(a, b)).max(max(directed(b, a))))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            tmp[y * w + x] = (0..k).map(|i| taps[i] * img[(y + i) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * tmp[y * w + x + i]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(a, a), w, h, &taps);
    let bb = filter_valid(&prod(b, b), w, h, &taps);
    let ab = filter_valid(&prod(a, b), w, h, &taps);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM of `(H, W)` or `(C, H, W)` images in `[0, 1]`, averaged
/// over valid 11x11 Gaussian windows (and channels).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("ssim", format!("expected (H, W) or (C, H, W), got {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|k| ssim_plane(&a.data()[k * plane..(k + 1) * plane], &b.data()[k * plane..(k + 1) * plane], w, h))
        .sum();
    Ok(total / c as f64)
}

/// SSIM of two binary maps treated as `{0, 1}` images.
pub fn ssim_masks(a: &Mask, b: &Mask) -> Result<f64> {
    same_size("ssim_masks", a, b)?;
    let t = |m: &Mask| m.to_tensor().reshape(&[m.height(), m.width()]);
    ssim(&t(a)?, &t(b)?)
}
