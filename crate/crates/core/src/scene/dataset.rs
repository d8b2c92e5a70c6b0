use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::geometry::OrientedBox;
use super::layout::{Layout, SceneSpec};
use super::render::SceneSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;
use crate::pnm;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYOUTS_FILE: &str = "layouts.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    /// Hex SHA-256 over the concatenated per-file SHA-256 digests of every
    /// data file, in lexicographic filename order.
    pub digest: String,
    pub spec: SceneSpec,
    pub scene_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LayoutRecord {
    scene_id: String,
    boxes: Vec<[f64; 5]>,
    category_ids: Vec<u32>,
}

impl From<&Layout> for LayoutRecord {
    fn from(l: &Layout) -> Self {
        LayoutRecord {
            scene_id: l.scene_id.clone(),
            boxes: l.boxes.iter().map(OrientedBox::to_array).collect(),
            category_ids: l.category_ids.clone(),
        }
    }
}

impl From<LayoutRecord> for Layout {
    fn from(r: LayoutRecord) -> Self {
        Layout {
            scene_id: r.scene_id,
            boxes: r.boxes.into_iter().map(OrientedBox::from_array).collect(),
            category_ids: r.category_ids,
        }
    }
}

/// File name of a scene image inside a dataset or sample directory.
pub fn image_file(id: &str) -> String {
    format!("{id}.ppm")
}

fn composite_file(id: &str) -> String {
    format!("{id}_mask.pgm")
}

fn instance_file(id: &str, k: usize) -> String {
    format!("{id}_m{k:02}.pgm")
}

pub(crate) fn image_to_rgb(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("image_to_rgb", format!("expected (3, H, W), got {:?}", image.shape())));
    };
    let plane = h * w;
    let d = image.data();
    Ok((0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect())
}

pub(crate) fn rgb_to_image(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor> {
    let plane = width * height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = rgb[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Writes a `(3, H, W)` image in `[0, 1]` as an 8-bit PPM.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape().get(1).copied().unwrap_or(0), image.shape().get(2).copied().unwrap_or(0));
    pnm::write(path, &pnm::encode_ppm(w, h, &image_to_rgb(image)?))
}

/// Reads an 8-bit PPM as a `(3, H, W)` image in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let r = pnm::read(path)?;
    if r.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a P6 image".into(),
        });
    }
    rgb_to_image(r.width, r.height, &r.data)
}

/// Writes a binary mask as a 0/255 PGM.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    pnm::write(path, &mask_to_pgm(mask))
}

fn mask_to_pgm(m: &Mask) -> Vec<u8> {
    let bytes: Vec<u8> = m.as_bytes().iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    pnm::encode_pgm(m.width(), m.height(), &bytes)
}

fn read_mask(path: &Path) -> Result<Mask> {
    let r = pnm::read(path)?;
    if r.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a P5 mask".into(),
        });
    }
    Mask::from_bytes(r.width, r.height, &r.data)
}

/// Digest of every file in `dir` except the manifest.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST_FILE && entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            names.push(name);
        }
    }
    names.sort();
    let mut outer = Sha256::new();
    for name in &names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        outer.update(Sha256::digest(&bytes));
    }
    Ok(hex(&outer.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn ensure_empty_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut it = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    if it.next().is_some() {
        return Err(Error::contract(format!("output directory {} is not empty", dir.display())));
    }
    Ok(())
}

pub fn write_layouts(path: &Path, layouts: &[Layout]) -> Result<()> {
    let mut out = Vec::new();
    for l in layouts {
        serde_json::to_writer(&mut out, &LayoutRecord::from(l))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_layouts(path: &Path) -> Result<Vec<Layout>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<LayoutRecord>(line)
                .map(Layout::from)
                .map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", i + 1),
                })
        })
        .collect()
}

/// Persists `samples` into an empty (or new) directory.
pub fn write_dataset(samples: &[SceneSample], spec: &SceneSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    ensure_empty_dir(dir)?;
    for s in samples {
        let id = &s.layout.scene_id;
        let &[_, h, w] = s.image.shape() else {
            return Err(Error::shape("write_dataset", "image must be (3, H, W)"));
        };
        pnm::write(&dir.join(image_file(id)), &pnm::encode_ppm(w, h, &image_to_rgb(&s.image)?))?;
        pnm::write(&dir.join(composite_file(id)), &mask_to_pgm(&s.composite_mask))?;
        for (k, m) in s.instance_masks.iter().enumerate() {
            pnm::write(&dir.join(instance_file(id, k)), &mask_to_pgm(m))?;
        }
    }
    let layouts: Vec<Layout> = samples.iter().map(|s| s.layout.clone()).collect();
    write_layouts(&dir.join(LAYOUTS_FILE), &layouts)?;
    let manifest = DatasetManifest {
        count: samples.len(),
        seed,
        digest: directory_digest(dir)?,
        spec: spec.clone(),
        scene_ids: layouts.into_iter().map(|l| l.scene_id).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    pnm::write(&path, &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path,
        detail: e.to_string(),
    })
}

/// Loads a dataset, refusing it if the recomputed digest disagrees with the
/// manifest.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    let actual = directory_digest(dir)?;
    if actual != manifest.digest {
        return Err(Error::CorruptDataset {
            path: dir.to_path_buf(),
            detail: format!("digest mismatch: manifest {} vs files {actual}", manifest.digest),
        });
    }
    let layouts = read_layouts(&dir.join(LAYOUTS_FILE))?;
    if layouts.len() != manifest.count {
        return Err(Error::CorruptDataset {
            path: dir.to_path_buf(),
            detail: format!("manifest count {} but {} layouts", manifest.count, layouts.len()),
        });
    }
    let samples = layouts
        .into_iter()
        .map(|layout| {
            let id = layout.scene_id.clone();
            let image = read_image(&dir.join(image_file(&id)))?;
            let composite_mask = read_mask(&dir.join(composite_file(&id)))?;
            let instance_masks = (0..layout.len())
                .map(|k| read_mask(&dir.join(instance_file(&id, k))))
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneSample {
                image,
                layout,
                instance_masks,
                composite_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
