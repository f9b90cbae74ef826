//! Image I/O, synthetic underwater degradation and dataset manifests.

mod image;
mod manifest;
mod synth;

pub use image::{dequantize, is_image_path, load_image, quantize, save_image, stack_images, ImageBuffer};
pub use manifest::{DatasetManifest, ImagePair, Pair};
pub use synth::{
    attenuate, generate_scene, list_images, make_synthetic_dataset, synth_degrade, write_scenes, WaterType, DEPTH_RANGE,
};
