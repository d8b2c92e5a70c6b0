use rand::Rng as _;

use super::geometry::{glyph_covers, OrientedBox};
use super::layout::{BackgroundKind, Glyph, Layout, SceneSpec};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;
use crate::rng::{standard_normal, stream, Rng};

const RENDER_STREAM: u64 = 0x5245_4e44;

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.35, 0.25],
    [0.30, 0.75, 0.40],
    [0.92, 0.92, 0.96],
    [0.95, 0.80, 0.25],
    [0.35, 0.55, 0.90],
    [0.80, 0.40, 0.80],
];
const OBJECT_JITTER: f64 = 0.06;
const OBJECT_NOISE: f64 = 0.03;
const SPECKLE_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `(3, S, S)`, values in `[0, 1]` on the 1/255 grid.
    pub image: Tensor,
    pub layout: Layout,
    pub instance_masks: Vec<Mask>,
    pub composite_mask: Mask,
}

fn for_box_pixels(b: &OrientedBox, size: usize, mut f: impl FnMut(usize, usize)) {
    let (x0, y0, w, h) = b.pixel_bounds();
    let xs = x0.max(0) as usize..((x0 + w as isize).min(size as isize)).max(0) as usize;
    let ys = y0.max(0) as usize..((y0 + h as isize).min(size as isize)).max(0) as usize;
    for y in ys {
        for x in xs.clone() {
            f(x, y);
        }
    }
}

/// Pixels whose centers the glyph covers.
pub fn rasterize_glyph(glyph: Glyph, b: &OrientedBox, size: usize) -> Mask {
    let mut m = Mask::new(size, size);
    for_box_pixels(b, size, |x, y| {
        if glyph_covers(glyph, b, x as f64 + 0.5, y as f64 + 0.5) {
            m.set(x, y, true);
        }
    });
    m
}

/// Filled oriented box.
pub fn box_mask(b: &OrientedBox, size: usize) -> Mask {
    rasterize_glyph(Glyph::Rectangle, b, size)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn background(kind: BackgroundKind, size: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    let mut base = || [0; 3].map(|_| rng.random_range(0.12..0.42));
    let c0 = base();
    match kind {
        BackgroundKind::Flat => vec![c0; size * size],
        BackgroundKind::Gradient => {
            let c1 = base();
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = theta.sin_cos();
            let half = size as f64 / 2.0;
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64 + 0.5 - half, (i / size) as f64 + 0.5 - half);
                    let t = ((x * c + y * s) / size as f64 + 0.5).clamp(0.0, 1.0);
                    [0, 1, 2].map(|k| c0[k] + t * (c1[k] - c0[k]))
                })
                .collect()
        }
        BackgroundKind::Speckle => (0..size * size)
            .map(|_| c0.map(|v| v + SPECKLE_NOISE * standard_normal(rng)))
            .collect(),
    }
}

/// Draws every glyph of `layout` in order over a background. Instance masks
/// are the rasterizer's coverage sets, independent of draw order.
pub fn render_scene(layout: &Layout, spec: &SceneSpec, seed: u64) -> Result<SceneSample> {
    let size = spec.canvas_size;
    layout.validate(size)?;
    let mut rng = stream(seed, &[RENDER_STREAM]);
    let mut pixels = background(spec.background_kind, size, &mut rng);
    let mut instance_masks = Vec::with_capacity(layout.len());
    let mut composite = Mask::new(size, size);
    for (b, &cid) in layout.boxes.iter().zip(&layout.category_ids) {
        let (slot, cat) = spec
            .categories
            .iter()
            .enumerate()
            .find(|(_, c)| c.id == cid)
            .ok_or_else(|| Error::contract(format!("layout {}: unknown category id {cid}", layout.scene_id)))?;
        let mask = rasterize_glyph(cat.glyph, b, size);
        let color = PALETTE[slot % PALETTE.len()].map(|v| v + rng.random_range(-OBJECT_JITTER..OBJECT_JITTER));
        for (x, y) in mask.points() {
            pixels[y * size + x] = color.map(|v| v + OBJECT_NOISE * standard_normal(&mut rng));
        }
        composite.or_assign(&mask);
        instance_masks.push(mask);
    }
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in pixels.iter().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = quantize(p[k]);
        }
    }
    Ok(SceneSample {
        image: Tensor::new(vec![3, size, size], data)?,
        layout: layout.clone(),
        instance_masks,
        composite_mask: composite,
    })
}
