mod dataset;
mod image;
mod manifest;
mod synth;
mod transforms;

pub use dataset::{SplitData, TaskDataset};
pub use image::{decode_raw, encode_png, load_image, load_image_bytes, normalize, resize_bilinear, Decoded, ImageSpec};
pub use manifest::{apportion, DatasetManifest, Record, Source, Split, Target, DEFAULT_SPLIT_RATIOS};
pub use synth::{
    dissimilar_pair, generate_synthetic, render_sample, similar_pair, splat_points, Family, SyntheticSpec,
    FREQUENCY_PERIODS, GRATING_DIRECTIONS, GRATING_PERIOD, LANDMARK_POINTS,
};
pub use transforms::{
    bin_age, bin_age_manifest, downsample_balanced, drop_class, remap_fire_risk, remap_fire_risk_manifest,
    AGE_BINS, FIRE_RISK_CLASSES, FIRE_RISK_SOURCE_CLASSES,
};
