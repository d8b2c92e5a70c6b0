//! Procedural layout-to-image toy dataset.
//!
//! Scenes are oriented boxes of three glyph families (rectangles, disks and a
//! bilaterally symmetric airplane polygon) rendered over a textured
//! background. Instance masks come straight from the rasterizer, so they are
//! exact rather than thresholded.

mod dataset;
mod geometry;
mod layout;
mod render;

pub use dataset::{
    directory_digest, image_file, read_dataset, read_image, read_layouts, read_manifest, write_dataset, write_image,
    write_layouts, write_mask, DatasetManifest, LAYOUTS_FILE, MANIFEST_FILE,
};
#[allow(unused_imports)]
pub(crate) use dataset::{hex, image_to_rgb, rgb_to_image};
pub use geometry::{glyph_covers, point_in_polygon, OrientedBox, AIRPLANE_OUTLINE};
pub use layout::{generate_dataset, generate_layout, BackgroundKind, Category, Glyph, Layout, SceneSpec};
pub use render::{box_mask, rasterize_glyph, render_scene, SceneSample};
