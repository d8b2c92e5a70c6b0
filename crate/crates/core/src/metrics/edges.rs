use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;

use super::features::luminance;

/// Binary edge raster.
pub type EdgeMap = Mask;

pub const CANNY_LOW: f64 = 100.0;
pub const CANNY_HIGH: f64 = 200.0;

/// Normalized 1-D Gaussian taps of odd length `size`.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn at(img: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let x = x.clamp(0, w as isize - 1) as usize;
    let y = y.clamp(0, h as isize - 1) as usize;
    img[y * w + x]
}

/// Separable 5x5 Gaussian blur (sigma 1.4) with replicated borders.
fn blur(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps(5, 1.4);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|k| taps[k] * at(img, w, h, x as isize + k as isize - 2, y as isize))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|k| taps[k] * at(&tmp, w, h, x as isize, y as isize + k as isize - 2))
                .sum();
        }
    }
    out
}

/// Canny edges of a `(1|3, H, W)` patch in `[0, 1]`; thresholds are on the
/// 8-bit scale.
pub fn canny_edges(patch: &Tensor, low: f64, high: f64) -> Result<EdgeMap> {
    if !(0.0 <= low && low < high && high <= 255.0) {
        return Err(Error::contract(format!("canny thresholds need 0 <= low < high <= 255, got {low}, {high}")));
    }
    let gray: Vec<f64> = luminance(patch)?.into_iter().map(|v| v * 255.0).collect();
    let (h, w) = (patch.shape()[1], patch.shape()[2]);
    let b = blur(&gray, w, h);

    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| at(&b, w, h, x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&deg) {
                0
            } else if deg < 67.5 {
                1
            } else if deg < 112.5 {
                2
            } else {
                3
            };
        }
    }

    // Non-maximum suppression; ties go to the pixel further along the
    // gradient so that a symmetric ridge keeps exactly one side.
    let m = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let v = mag[i];
            if v == 0.0 {
                continue;
            }
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            if v >= m(x - dx, y - dy) && v > m(x + dx, y + dy) {
                thin[i] = v;
            }
        }
    }

    let mut edges = Mask::new(w, h);
    let mut queue = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            edges.set(i % w, i / w, true);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges.get(nx as usize, ny as usize) && thin[j] > 0.0 && thin[j] >= low {
                    edges.set(nx as usize, ny as usize, true);
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(edges)
}
