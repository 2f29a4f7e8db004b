//! RGBN rasters, polygon annotations, dataset manifests and splitting.

mod manifest;
mod raster;
mod rgbn;
mod split;

pub use manifest::{Annotation, Condition, DatasetManifest, Record, Split};
pub use raster::{
    bounding_box, clip_to_rect, connected_components, perimeter, polygon_area, rasterize,
    signed_area, Mask, Point,
};
pub use rgbn::{
    load_rgb, load_rgbn, resize, resize_plane, save_rgb, save_rgbn, ImageMeta, Plane, ResizeMode, RgbnImage,
    DEFAULT_NIR_BAND_NM,
};
pub use split::{partition_sizes, split_manifest, stratified_split, DEFAULT_SPLIT_RATIOS};
