use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::geometry::OrientedBox;
use super::render::{render_scene, SceneSample};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{derive_seed, stream};

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const LAYOUT_STREAM: u64 = 0x4c41_594f;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Rectangle,
    Circle,
    Airplane,
}

impl Glyph {
    /// Smallest box side at which the glyph still rasterizes as a single
    /// 8-connected region at every angle.
    pub fn min_size(self) -> f64 {
        match self {
            Glyph::Rectangle | Glyph::Circle => 3.0,
            Glyph::Airplane => 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: u32,
    pub glyph: Glyph,
    /// Inclusive range for the longer box side, in pixels.
    pub size_range: [f64; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    #[default]
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub num_objects_range: [usize; 2],
    pub categories: Vec<Category>,
    pub background_kind: BackgroundKind,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas_size: 32,
            num_objects_range: [1, 3],
            categories: vec![
                Category {
                    id: 0,
                    glyph: Glyph::Rectangle,
                    size_range: [7.0, 12.0],
                },
                Category {
                    id: 1,
                    glyph: Glyph::Circle,
                    size_range: [6.0, 11.0],
                },
                Category {
                    id: 2,
                    glyph: Glyph::Airplane,
                    size_range: [10.0, 14.0],
                },
            ],
            background_kind: BackgroundKind::Speckle,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.canvas_size < 16 || self.canvas_size % 4 != 0 {
            return bad(format!(
                "canvas_size must be >= 16 and a multiple of 4, got {}",
                self.canvas_size
            ));
        }
        let [lo, hi] = self.num_objects_range;
        if lo < 1 || hi > 32 || lo > hi {
            return bad(format!("num_objects_range must satisfy 1 <= lo <= hi <= 32, got [{lo}, {hi}]"));
        }
        if self.categories.is_empty() {
            return bad("categories must be non-empty".into());
        }
        let mut ids: Vec<u32> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("duplicate category id in {ids:?}"));
        }
        for c in &self.categories {
            let [a, b] = c.size_range;
            if !(a.is_finite() && b.is_finite()) || a > b || a < c.glyph.min_size() {
                return bad(format!(
                    "category {}: size_range [{a}, {b}] invalid (minimum {} for {:?})",
                    c.id,
                    c.glyph.min_size(),
                    c.glyph
                ));
            }
            // A box must fit inside the canvas at any angle.
            if b * std::f64::consts::SQRT_2 >= self.canvas_size as f64 {
                return bad(format!(
                    "category {}: size {b} does not fit canvas {} when rotated",
                    c.id, self.canvas_size
                ));
            }
        }
        Ok(())
    }

    pub fn category(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn category_ids(&self) -> Vec<u32> {
        self.categories.iter().map(|c| c.id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub scene_id: String,
    pub boxes: Vec<OrientedBox>,
    pub category_ids: Vec<u32>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, canvas_size: usize) -> Result<()> {
        if self.boxes.len() != self.category_ids.len() {
            return Err(Error::contract(format!(
                "layout {}: {} boxes but {} category ids",
                self.scene_id,
                self.boxes.len(),
                self.category_ids.len()
            )));
        }
        let s = canvas_size as f64;
        for (i, b) in self.boxes.iter().enumerate() {
            let inside = b.corners().iter().all(|&(x, y)| (0.0..s).contains(&x) && (0.0..s).contains(&y));
            if !(b.width > 0.0 && b.height > 0.0) || !inside {
                return Err(Error::contract(format!(
                    "layout {}: box {i} {:?} is degenerate or leaves the {canvas_size}px canvas",
                    self.scene_id, b
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn scene_id_for(seed: u64) -> String {
    format!("{seed:016x}")
}

fn draw_box(spec: &SceneSpec, cat: &Category, rng: &mut crate::rng::Rng) -> OrientedBox {
    let [a, b] = cat.size_range;
    let size = if a < b { rng.random_range(a..=b) } else { a };
    let (width, height) = match cat.glyph {
        super::Glyph::Rectangle => (size, size * rng.random_range(0.45..0.9)),
        _ => (size, size),
    };
    let angle = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    let mut bx = OrientedBox::new(0.0, 0.0, width, height, angle);
    let (ex, ey) = bx.half_extents();
    let s = spec.canvas_size as f64;
    // Strict interior margin keeps corners inside [0, S) under rounding.
    let m = 1e-9;
    bx.cx = rng.random_range(ex + m..s - ex - m);
    bx.cy = rng.random_range(ey + m..s - ey - m);
    bx
}

/// Samples a layout. The object count is uniform over `num_objects_range`;
/// each object is rejection-sampled until its center is at least half the
/// larger box's longest side away from every placed center.
pub fn generate_layout(spec: &SceneSpec, seed: u64) -> Result<Layout> {
    spec.validate()?;
    let mut rng = stream(seed, &[LAYOUT_STREAM]);
    let [lo, hi] = spec.num_objects_range;
    let count = rng.random_range(lo..=hi);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(count);
    let mut category_ids = Vec::with_capacity(count);
    for placed_index in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cat = &spec.categories[rng.random_range(0..spec.categories.len())];
            let b = draw_box(spec, cat, &mut rng);
            let clear = boxes.iter().all(|o| {
                let need = 0.5 * b.width.max(b.height).max(o.width.max(o.height));
                (b.cx - o.cx).hypot(b.cy - o.cy) >= need
            });
            if clear {
                accepted = Some((b, cat.id));
                break;
            }
        }
        let Some((b, id)) = accepted else {
            return Err(Error::LayoutSaturation {
                canvas_size: spec.canvas_size,
                num_objects: count,
                categories: spec.categories.len(),
                placed_index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        };
        boxes.push(b);
        category_ids.push(id);
    }
    Ok(Layout {
        scene_id: scene_id_for(seed),
        boxes,
        category_ids,
    })
}

/// Generates `count` scenes; scene `i` uses seed `derive_seed(seed, [i])` for
/// both its layout and its rendering.
pub fn generate_dataset(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    parallel::try_map_range(count, |i| {
        let s = derive_seed(seed, &[i as u64]);
        let layout = generate_layout(spec, s)?;
        render_scene(&layout, spec, s)
    })
}
