use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scene::OrientedBox;

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl HorizontalBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Axis-aligned bounds of the four rotated corners.
pub fn rbox_to_hbox(b: &OrientedBox) -> HorizontalBox {
    let c = b.corners();
    let xs = c.map(|p| p.0);
    let ys = c.map(|p| p.1);
    HorizontalBox {
        x_min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        y_min: ys.iter().copied().fold(f64::INFINITY, f64::min),
        x_max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        y_max: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Integer pixel window `(x0, y0, x1, y1)` (exclusive ends) after padding
/// each side by `padding_frac` of its extent and clamping to the image.
pub fn padded_window(hbox: &HorizontalBox, padding_frac: f64, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let (px, py) = (padding_frac * hbox.width(), padding_frac * hbox.height());
    let x0 = (hbox.x_min - px).floor().max(0.0);
    let y0 = (hbox.y_min - py).floor().max(0.0);
    let x1 = (hbox.x_max + px).ceil().min(width as f64);
    let y1 = (hbox.y_max + py).ceil().min(height as f64);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::BoxOutsideImage);
    }
    Ok((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Bilinear resize of a `(C, H, W)` image with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected (C, H, W), got {:?}", image.shape())));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "empty image"));
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Padded crop around `hbox`, resized to `out_size x out_size`.
pub fn crop_and_resize(image: &Tensor, hbox: &HorizontalBox, padding_frac: f64, out_size: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("crop_and_resize", format!("expected (C, H, W), got {:?}", image.shape())));
    };
    let (x0, y0, x1, y1) = padded_window(hbox, padding_frac, w, h)?;
    let (cw, chh) = (x1 - x0, y1 - y0);
    let d = image.data();
    let mut crop = Vec::with_capacity(c * cw * chh);
    for ch in 0..c {
        for y in y0..y1 {
            let row = ch * h * w + y * w;
            crop.extend_from_slice(&d[row + x0..row + x1]);
        }
    }
    resize_bilinear(&Tensor::new(vec![c, chh, cw], crop)?, out_size, out_size)
}
