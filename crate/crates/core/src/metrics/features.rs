use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side of the pooled grayscale grid used as a cheap image descriptor.
pub const FEATURE_GRID: usize = 8;
pub const FEATURE_DIM: usize = FEATURE_GRID * FEATURE_GRID;

/// Luminance of a `(3, H, W)` or `(1, H, W)` image as a `H x W` row-major buffer.
pub fn luminance(image: &Tensor) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape("luminance", format!("expected (1|3, H, W), got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    if s[0] == 1 {
        return Ok(d.to_vec());
    }
    Ok((0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect())
}

/// 64-dim descriptor: luminance averaged over an 8x8 grid of blocks.
///
/// Block `i` covers rows `[i*H/8, (i+1)*H/8)` (same for columns), so any
/// image at least 8 pixels on a side is accepted.
pub fn image_features(image: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = (image.shape().get(1).copied().unwrap_or(0), image.shape().get(2).copied().unwrap_or(0));
    let gray = luminance(image)?;
    if h < FEATURE_GRID || w < FEATURE_GRID {
        return Err(Error::shape("image_features", format!("image {h}x{w} is smaller than the feature grid")));
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for by in 0..FEATURE_GRID {
        let (y0, y1) = (by * h / FEATURE_GRID, (by + 1) * h / FEATURE_GRID);
        for bx in 0..FEATURE_GRID {
            let (x0, x1) = (bx * w / FEATURE_GRID, (bx + 1) * w / FEATURE_GRID);
            let mut acc = 0.0;
            for y in y0..y1 {
                acc += gray[y * w + x0..y * w + x1].iter().sum::<f64>();
            }
            out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    Ok(out)
}
