//! Shape-condition generation: per-instance mask patches, rotation and
//! re-placement onto a blank canvas, and a category-indexed mask pool.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pnm;
use crate::rng::{stream, Rng};
use crate::scene::{read_dataset, DatasetManifest, Layout, OrientedBox, SceneSample};

const SHAPE_STREAM: u64 = 0x5348_4150;
const INDEX_FILE: &str = "index.json";
/// Slack for points landing exactly on a box edge after rotation round-off.
const EDGE_EPS: f64 = 1e-9;

/// An instance mask cropped to the pixel bounds of its box.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePatchMask {
    pub pixels: Mask,
    /// Canvas coordinates of the patch's top-left pixel.
    pub origin: (isize, isize),
    pub source_box: OrientedBox,
    pub category_id: u32,
}

impl InstancePatchMask {
    /// Mean canvas position of the set pixel centers.
    pub fn centroid(&self) -> (f64, f64) {
        let pts = self.pixels.points();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
        (self.origin.0 as f64 + sx / n + 0.5, self.origin.1 as f64 + sy / n + 0.5)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let i = (x - self.origin.0 as f64).floor() as isize;
        let j = (y - self.origin.1 as f64).floor() as isize;
        self.pixels.get_signed(i, j)
    }
}

pub fn extract_instance_mask(sample: &SceneSample, index: usize) -> Result<InstancePatchMask> {
    let n = sample.layout.len();
    if index >= n || sample.instance_masks.len() != n {
        return Err(Error::contract(format!(
            "instance index {index} out of range for scene {} with {n} boxes",
            sample.layout.scene_id
        )));
    }
    let b = sample.layout.boxes[index];
    let (x0, y0, w, h) = b.pixel_bounds();
    let pixels = sample.instance_masks[index].crop(x0, y0, w, h);
    if pixels.is_empty() {
        return Err(Error::DegenerateInstance {
            scene_id: sample.layout.scene_id.clone(),
            index,
        });
    }
    Ok(InstancePatchMask {
        pixels,
        origin: (x0, y0),
        source_box: b,
        category_id: sample.layout.category_ids[index],
    })
}

/// Isotropic factor that fits the source box, turned by `angle`, inside `target`.
pub fn fit_scale(source: &OrientedBox, angle: f64, target: &OrientedBox) -> f64 {
    let phi = source.angle + angle - target.angle;
    let (s, c) = phi.sin_cos();
    let eu = source.width * c.abs() + source.height * s.abs();
    let ev = source.width * s.abs() + source.height * c.abs();
    (target.width / eu).min(target.height / ev)
}

fn paint(patch: &InstancePatchMask, angle: f64, target: &OrientedBox, out: &mut Mask) {
    let size = out.width();
    let scale = fit_scale(&patch.source_box, angle, target);
    let (sn, cs) = angle.sin_cos();
    let src = &patch.source_box;
    let (hw, hh) = (src.width / 2.0 + EDGE_EPS, src.height / 2.0 + EDGE_EPS);
    let (x0, y0, w, h) = target.pixel_bounds();
    for y in y0.max(0)..(y0 + h as isize).min(size as isize) {
        for x in x0.max(0)..(x0 + w as isize).min(size as isize) {
            let dx = (x as f64 + 0.5 - target.cx) / scale;
            let dy = (y as f64 + 0.5 - target.cy) / scale;
            // Pull back through the inverse rotation, anchored at the source box center.
            let qx = src.cx + cs * dx + sn * dy;
            let qy = src.cy - sn * dx + cs * dy;
            let (u, v) = src.to_local(qx, qy);
            if u.abs() <= hw && v.abs() <= hh && patch.covers(qx, qy) {
                out.set(x as usize, y as usize, true);
            }
        }
    }
}

/// Rotates `patch` by `angle`, rescales it isotropically so its source box
/// fits `target_box`, and pastes it centered on `target_box` over a blank
/// `canvas_size` canvas, using nearest-neighbor lookup.
///
/// A shape shrunk below the pixel grid keeps a single pixel at its mapped
/// centroid rather than vanishing.
pub fn augment_shape(patch: &InstancePatchMask, angle: f64, target_box: &OrientedBox, canvas_size: usize) -> Result<Mask> {
    if patch.pixels.is_empty() {
        return Err(Error::Internal("augment_shape called with an empty patch".into()));
    }
    let mut out = Mask::new(canvas_size, canvas_size);
    paint(patch, angle, target_box, &mut out);
    if out.is_empty() {
        let (gx, gy) = patch.centroid();
        let scale = fit_scale(&patch.source_box, angle, target_box);
        let (sn, cs) = angle.sin_cos();
        let (dx, dy) = (gx - patch.source_box.cx, gy - patch.source_box.cy);
        let x = target_box.cx + scale * (cs * dx - sn * dy);
        let y = target_box.cy + scale * (sn * dx + cs * dy);
        let clamp = |v: f64| (v.floor().max(0.0) as usize).min(canvas_size - 1);
        out.set(clamp(x), clamp(y), true);
    }
    Ok(out)
}

/// ORs one augmented patch per `(patch, angle, target)` triple.
pub fn compose_shapes<'a>(
    items: impl IntoIterator<Item = (&'a InstancePatchMask, f64, OrientedBox)>,
    canvas_size: usize,
) -> Result<Mask> {
    let mut out = Mask::new(canvas_size, canvas_size);
    for (patch, angle, target) in items {
        out.or_assign(&augment_shape(patch, angle, &target, canvas_size)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPool {
    pub entries: BTreeMap<u32, Vec<InstancePatchMask>>,
    /// Digest of the dataset the pool was extracted from.
    pub provenance: String,
}

impl MaskPool {
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        self.entries.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    fn pick(&self, category: u32, rng: &mut Rng) -> Result<&InstancePatchMask> {
        let list = self.entries.get(&category).filter(|l| !l.is_empty()).ok_or(Error::PoolMiss(category))?;
        Ok(&list[rng.random_range(0..list.len())])
    }
}

/// Extracts every instance of an already verified dataset.
pub fn build_mask_pool(manifest: &DatasetManifest, samples: &[SceneSample]) -> Result<MaskPool> {
    let mut entries: BTreeMap<u32, Vec<InstancePatchMask>> =
        manifest.spec.categories.iter().map(|c| (c.id, Vec::new())).collect();
    for s in samples {
        for k in 0..s.layout.len() {
            let p = extract_instance_mask(s, k)?;
            entries.entry(p.category_id).or_default().push(p);
        }
    }
    let empty: Vec<u32> = entries.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| *k).collect();
    if !empty.is_empty() {
        return Err(Error::EmptyCategory(empty));
    }
    Ok(MaskPool {
        entries,
        provenance: manifest.digest.clone(),
    })
}

/// Reads and digest-checks a dataset directory, then builds its pool.
pub fn build_mask_pool_from_dir(dir: &Path) -> Result<MaskPool> {
    let (manifest, samples) = read_dataset(dir)?;
    build_mask_pool(&manifest, &samples)
}

/// Composes a shape condition for `layout`: one pool entry of the matching
/// category per box, turned by an angle uniform in `[0, 2pi)`.
pub fn sample_shape_condition(layout: &Layout, pool: &MaskPool, seed: u64, canvas_size: usize) -> Result<Mask> {
    let mut rng = stream(seed, &[SHAPE_STREAM]);
    let mut out = Mask::new(canvas_size, canvas_size);
    for (b, &cid) in layout.boxes.iter().zip(&layout.category_ids) {
        let patch = pool.pick(cid, &mut rng)?;
        let angle = rng.random_range(0.0..TAU);
        out.or_assign(&augment_shape(patch, angle, b, canvas_size)?);
    }
    Ok(out)
}

/// The training-time condition: every instance at its own box, unrotated.
pub fn identity_condition(sample: &SceneSample) -> Result<Mask> {
    let size = sample.composite_mask.width();
    let patches = (0..sample.layout.len())
        .map(|k| extract_instance_mask(sample, k))
        .collect::<Result<Vec<_>>>()?;
    compose_shapes(patches.iter().map(|p| (p, 0.0, p.source_box)), size)
}

#[derive(Serialize, Deserialize)]
struct PoolEntryRecord {
    file: String,
    origin: [isize; 2],
    source_box: [f64; 5],
}

#[derive(Serialize, Deserialize)]
struct PoolIndex {
    provenance: String,
    entries: BTreeMap<u32, Vec<PoolEntryRecord>>,
}

/// Writes the pool as PGM patches plus `index.json`.
pub fn save_mask_pool(pool: &MaskPool, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = PoolIndex {
        provenance: pool.provenance.clone(),
        entries: BTreeMap::new(),
    };
    for (cid, list) in &pool.entries {
        let mut records = Vec::with_capacity(list.len());
        for (k, p) in list.iter().enumerate() {
            let file = format!("c{cid}_{k:05}.pgm");
            let bytes: Vec<u8> = p.pixels.as_bytes().iter().map(|&b| b * 255).collect();
            pnm::write(&dir.join(&file), &pnm::encode_pgm(p.pixels.width(), p.pixels.height(), &bytes))?;
            records.push(PoolEntryRecord {
                file,
                origin: [p.origin.0, p.origin.1],
                source_box: p.source_box.to_array(),
            });
        }
        index.entries.insert(*cid, records);
    }
    pnm::write(&dir.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)
}

/// Loads a persisted pool; with `expected_digest`, refuses a pool extracted
/// from a different dataset.
pub fn load_mask_pool(dir: &Path, expected_digest: Option<&str>) -> Result<MaskPool> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: PoolIndex = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if let Some(want) = expected_digest {
        if want != index.provenance {
            return Err(Error::CorruptDataset {
                path: dir.to_path_buf(),
                detail: format!("pool provenance {} does not match dataset digest {want}", index.provenance),
            });
        }
    }
    let mut entries = BTreeMap::new();
    for (cid, records) in index.entries {
        let list = records
            .into_iter()
            .map(|r| {
                let p = dir.join(&r.file);
                let raster = pnm::read(&p)?;
                Ok(InstancePatchMask {
                    pixels: Mask::from_bytes(raster.width, raster.height, &raster.data)?,
                    origin: (r.origin[0], r.origin[1]),
                    source_box: OrientedBox::from_array(r.source_box),
                    category_id: cid,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.insert(cid, list);
    }
    Ok(MaskPool {
        entries,
        provenance: index.provenance,
    })
}
