use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::parallel;
use crate::scene::{image_file, read_image, Layout, OrientedBox};

use super::crop::{crop_and_resize, rbox_to_hbox};
use super::edges::{canny_edges, CANNY_HIGH, CANNY_LOW};
use super::shape::{chamfer, edge_overlap, hausdorff, ssim_masks};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub padding_frac: f64,
    pub out_size: usize,
    pub low_thresh: f64,
    pub high_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            padding_frac: 0.2,
            out_size: 64,
            low_thresh: CANNY_LOW,
            high_thresh: CANNY_HIGH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub scene_id: String,
    pub index: usize,
    pub category_id: u32,
    pub iou: f64,
    pub dice: f64,
    pub ssim: f64,
    /// `None` when either edge map is empty.
    pub chamfer: Option<f64>,
    pub hausdorff: Option<f64>,
    /// Edge pixel counts `(generated, reference)`.
    pub edge_pixels: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    pub iou: f64,
    pub dice: f64,
    pub ssim: f64,
    /// Number of instances with both edge maps nonempty.
    pub distance_count: usize,
    pub chamfer: Option<f64>,
    pub hausdorff: Option<f64>,
}

impl MetricMeans {
    fn of(rows: &[&InstanceMetrics]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&InstanceMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let with: Vec<&&InstanceMetrics> = rows.iter().filter(|r| r.chamfer.is_some()).collect();
        let dmean = |f: &dyn Fn(&InstanceMetrics) -> Option<f64>| {
            (!with.is_empty()).then(|| with.iter().filter_map(|r| f(r)).sum::<f64>() / with.len() as f64)
        };
        Some(MetricMeans {
            count: rows.len(),
            iou: mean(&|r| r.iou),
            dice: mean(&|r| r.dice),
            ssim: mean(&|r| r.ssim),
            distance_count: with.len(),
            chamfer: dmean(&|r| r.chamfer),
            hausdorff: dmean(&|r| r.hausdorff),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub scene_id: String,
    pub index: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeFidelityReport {
    pub instance_count: usize,
    pub overall: Option<MetricMeans>,
    pub per_category: BTreeMap<u32, MetricMeans>,
    /// Instances excluded from CD/HD because an edge map was empty.
    pub empty_edge: usize,
    pub skipped: Vec<SkippedInstance>,
    pub instances: Vec<InstanceMetrics>,
}

impl ShapeFidelityReport {
    fn from_rows(mut instances: Vec<InstanceMetrics>, mut skipped: Vec<SkippedInstance>) -> Self {
        instances.sort_by(|a, b| (&a.scene_id, a.index).cmp(&(&b.scene_id, b.index)));
        skipped.sort_by(|a, b| (&a.scene_id, a.index).cmp(&(&b.scene_id, b.index)));
        let all: Vec<&InstanceMetrics> = instances.iter().collect();
        let mut by_cat: BTreeMap<u32, Vec<&InstanceMetrics>> = BTreeMap::new();
        for r in &instances {
            by_cat.entry(r.category_id).or_default().push(r);
        }
        ShapeFidelityReport {
            instance_count: instances.len(),
            overall: MetricMeans::of(&all),
            per_category: by_cat
                .into_iter()
                .filter_map(|(c, rows)| MetricMeans::of(&rows).map(|m| (c, m)))
                .collect(),
            empty_edge: instances.iter().filter(|r| r.chamfer.is_none()).count(),
            skipped,
            instances,
        }
    }

    /// Aligned text table: one row overall plus one per category.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "subset", "n", "IoU", "Dice", "CD", "HD", "SSIM"
        );
        let mut row = |name: String, m: &MetricMeans| {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
                name,
                m.count,
                fmt(Some(m.iou)),
                fmt(Some(m.dice)),
                fmt(m.chamfer),
                fmt(m.hausdorff),
                fmt(Some(m.ssim))
            );
        };
        if let Some(m) = &self.overall {
            row("all".into(), m);
        }
        for (c, m) in &self.per_category {
            row(format!("cat {c}"), m);
        }
        let _ = writeln!(out, "instances: {}, empty-edge: {}, skipped: {}", self.instance_count, self.empty_edge, self.skipped.len());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub iou: f64,
    pub dice: f64,
    pub ssim: f64,
    pub chamfer: Option<f64>,
    pub hausdorff: Option<f64>,
    pub edge_pixels: (usize, usize),
}

/// All five metrics for one object: crop both images around the box, take
/// edges, compare.
pub fn evaluate_instance(generated: &Tensor, reference: &Tensor, rbox: &OrientedBox, cfg: &EvalConfig) -> Result<PairMetrics> {
    let hbox = rbox_to_hbox(rbox);
    let edges = |img: &Tensor| -> Result<_> {
        let patch = crop_and_resize(img, &hbox, cfg.padding_frac, cfg.out_size)?;
        canny_edges(&patch, cfg.low_thresh, cfg.high_thresh)
    };
    let (a, b) = (edges(generated)?, edges(reference)?);
    let (iou, dice) = edge_overlap(&a, &b)?;
    let (chamfer, hausdorff) = if a.is_empty() || b.is_empty() {
        (None, None)
    } else {
        (Some(chamfer(&a, &b)?), Some(hausdorff(&a, &b)?))
    };
    Ok(PairMetrics {
        iou,
        dice,
        ssim: ssim_masks(&a, &b)?,
        chamfer,
        hausdorff,
        edge_pixels: (a.count(), b.count()),
    })
}

/// One scene to compare: a generated image, its reference (a real image or
/// a mask rendered as an image) and the layout whose boxes are evaluated.
pub struct EvalItem<'a> {
    pub generated: &'a Tensor,
    pub reference: &'a Tensor,
    pub layout: &'a Layout,
}

/// Evaluates every instance of every item; instances parallelize, and rows
/// are ordered by `(scene id, instance index)`.
pub fn evaluate_images(items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<ShapeFidelityReport> {
    let jobs: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| (0..it.layout.len()).map(move |k| (i, k)))
        .collect();
    let results = parallel::map_slice(&jobs, |&(i, k)| {
        let it = &items[i];
        let id = it.layout.scene_id.clone();
        match evaluate_instance(it.generated, it.reference, &it.layout.boxes[k], cfg) {
            Ok(p) => Ok(Ok(InstanceMetrics {
                scene_id: id,
                index: k,
                category_id: it.layout.category_ids[k],
                iou: p.iou,
                dice: p.dice,
                ssim: p.ssim,
                chamfer: p.chamfer,
                hausdorff: p.hausdorff,
                edge_pixels: p.edge_pixels,
            })),
            Err(Error::BoxOutsideImage) => Ok(Err(SkippedInstance {
                scene_id: id,
                index: Some(k),
                reason: Error::BoxOutsideImage.to_string(),
            })),
            Err(e) => Err(e),
        }
    });
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Ok(m) => rows.push(m),
            Err(s) => skipped.push(s),
        }
    }
    Ok(ShapeFidelityReport::from_rows(rows, skipped))
}

/// Compares `{scene_id}.ppm` in two directories for every layout. Scenes
/// missing from either directory are listed as skipped.
pub fn evaluate_pairs(generated_dir: &Path, reference_dir: &Path, layouts: &[Layout], cfg: &EvalConfig) -> Result<ShapeFidelityReport> {
    let mut loaded = Vec::new();
    let mut skipped = Vec::new();
    for layout in layouts {
        let name = image_file(&layout.scene_id);
        let (g, r) = (generated_dir.join(&name), reference_dir.join(&name));
        if !g.exists() || !r.exists() {
            let side = if !g.exists() { "generated" } else { "reference" };
            skipped.push(SkippedInstance {
                scene_id: layout.scene_id.clone(),
                index: None,
                reason: format!("no {side} image for scene"),
            });
            continue;
        }
        loaded.push((read_image(&g)?, read_image(&r)?, layout));
    }
    let items: Vec<EvalItem<'_>> = loaded
        .iter()
        .map(|(g, r, l)| EvalItem {
            generated: g,
            reference: r,
            layout: l,
        })
        .collect();
    let mut report = evaluate_images(&items, cfg)?;
    report.skipped.extend(skipped);
    report.skipped.sort_by(|a, b| (&a.scene_id, a.index).cmp(&(&b.scene_id, b.index)));
    Ok(report)
}
