//! Shape-fidelity metrics on edge maps of padded object crops, and a kernel
//! MMD between feature sets.
//!
//! Per object: oriented box to axis-aligned box, crop with per-side padding,
//! bilinear resize to a fixed square, Canny edges, then IoU, Dice, Chamfer,
//! Hausdorff and SSIM between the generated and reference edge maps.

mod crop;
mod edges;
mod evaluate;
mod features;
mod mmd;
mod shape;

pub use crop::{crop_and_resize, padded_window, rbox_to_hbox, resize_bilinear, HorizontalBox};
pub use edges::{canny_edges, EdgeMap, CANNY_HIGH, CANNY_LOW};
pub use evaluate::{
    evaluate_images, evaluate_instance, evaluate_pairs, EvalConfig, EvalItem, InstanceMetrics, MetricMeans, PairMetrics,
    ShapeFidelityReport, SkippedInstance,
};
pub use features::{image_features, luminance, FEATURE_DIM, FEATURE_GRID};
pub use mmd::{median_bandwidth, mmd_permutation_test, mmd_rbf, MmdTest};
pub use shape::{chamfer, edge_overlap, hausdorff, squared_distance_transform, ssim, ssim_masks, SSIM_SIGMA, SSIM_WINDOW};
