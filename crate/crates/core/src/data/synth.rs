use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{is_image_path, load_image, save_image, ImageBuffer};
use super::manifest::{DatasetManifest, Pair};
use crate::error::{Error, Result};
use crate::exec;

/// Scene depth range for synthetic degradation, in the units of `beta`.
pub const DEPTH_RANGE: (f64, f64) = (0.5, 3.0);

/// Optical conditions of one water body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterType {
    pub name: String,
    /// Attenuation per unit depth, RGB.
    pub beta: [f64; 3],
    /// Ambient (veiling) light, RGB.
    pub ambient: [f64; 3],
    /// Range the per-image haze strength is drawn from.
    pub haze: (f64, f64),
}

impl WaterType {
    pub fn coastal_green() -> Self {
        WaterType {
            name: "coastal-green".into(),
            beta: [0.80, 0.25, 0.35],
            ambient: [0.10, 0.55, 0.45],
            haze: (0.01, 0.03),
        }
    }

    pub fn oceanic_blue() -> Self {
        WaterType {
            name: "oceanic-blue".into(),
            beta: [0.70, 0.30, 0.15],
            ambient: [0.05, 0.35, 0.60],
            haze: (0.01, 0.03),
        }
    }

    pub fn turbid_yellow() -> Self {
        WaterType {
            name: "turbid-yellow".into(),
            beta: [0.95, 0.45, 0.75],
            ambient: [0.12, 0.50, 0.25],
            haze: (0.02, 0.04),
        }
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::coastal_green(), Self::oceanic_blue(), Self::turbid_yellow()]
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::presets().into_iter().find(|w| w.name == name).ok_or_else(|| {
            Error::config(format!(
                "unknown water type {name:?} (expected coastal-green, oceanic-blue or turbid-yellow)"
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let [r, g, b] = self.beta;
        if !(r >= g && r >= b) {
            return Err(Error::config(format!(
                "{}: red attenuation must dominate, got {:?}",
                self.name, self.beta
            )));
        }
        if self.beta.iter().any(|&v| !(v >= 0.0)) || self.ambient.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!(
                "{}: beta must be >= 0 and ambient within [0, 1]",
                self.name
            )));
        }
        if !(0.0 <= self.haze.0 && self.haze.0 <= self.haze.1) {
            return Err(Error::config(format!("{}: bad haze range {:?}", self.name, self.haze)));
        }
        Ok(())
    }

    /// Transmission `exp(-beta_c · depth)` per channel.
    pub fn transmission(&self, depth: f64) -> [f64; 3] {
        self.beta.map(|b| (-b * depth).exp())
    }
}

/// Applies the formation model `I = J·t + A·(1 − t)` with a known
/// transmission and no noise.
pub fn attenuate(clean: &ImageBuffer, t: [f64; 3], ambient: [f64; 3]) -> ImageBuffer {
    ImageBuffer::from_fn(clean.height(), clean.width(), |y, x, c| {
        (clean.get(y, x, c) as f64 * t[c] + ambient[c] * (1.0 - t[c])) as f32
    })
    .expect("same extents as a valid image")
}

/// Degrades `clean` as if seen through `depth` units of `water`, then adds
/// seeded Gaussian noise with `σ = haze · (1 − mean t)` and clamps.
pub fn synth_degrade(clean: &ImageBuffer, water: &WaterType, depth: f64, seed: u64) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    degrade_with(clean, water, depth, &mut rng)
}

fn degrade_with(clean: &ImageBuffer, water: &WaterType, depth: f64, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    water.validate()?;
    let t = water.transmission(depth);
    let haze = if water.haze.1 > water.haze.0 {
        rng.gen_range(water.haze.0..water.haze.1)
    } else {
        water.haze.0
    };
    let sigma = haze * (1.0 - (t[0] + t[1] + t[2]) / 3.0);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    let clear = attenuate(clean, t, water.ambient);
    let data = clear
        .data()
        .iter()
        .map(|&v| (v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageBuffer::new(clean.height(), clean.width(), data)
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Degrades every image in `clean_dir` under every water type at a seeded
/// depth drawn from [`DEPTH_RANGE`]. Outputs go to
/// `out_dir/raw/<stem>_<water>.png`; the manifest lists them image-major
/// with absolute paths.
pub fn make_synthetic_dataset(
    clean_dir: &Path,
    water_types: &[WaterType],
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    if water_types.is_empty() {
        return Err(Error::config("at least one water type is required"));
    }
    for w in water_types {
        w.validate()?;
    }
    let sources = list_images(clean_dir)?;
    if sources.is_empty() {
        return Err(Error::config(format!(
            "no .png or .ppm images in {}",
            clean_dir.display()
        )));
    }
    let raw_dir = out_dir.join("raw");
    fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    let raw_dir = raw_dir.canonicalize().map_err(|e| Error::io(&raw_dir, e))?;
    let sources = sources
        .into_iter()
        .map(|p| p.canonicalize().map_err(|e| Error::io(&p, e)))
        .collect::<Result<Vec<_>>>()?;

    let nw = water_types.len();
    let jobs = sources.len() * nw;
    let pairs = exec::try_map_indexed(jobs, |job| -> Result<Pair> {
        let (i, j) = (job / nw, job % nw);
        let clean = load_image(&sources[i])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(job as u64);
        let depth = rng.gen_range(DEPTH_RANGE.0..DEPTH_RANGE.1);
        let raw = degrade_with(&clean, &water_types[j], depth, &mut rng)?;
        let stem = sources[i].file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let path = raw_dir.join(format!("{stem}_{}.png", water_types[j].name));
        save_image(&raw, &path)?;
        Ok(Pair {
            raw: path,
            reference: sources[i].clone(),
        })
    })?;
    Ok(DatasetManifest { pairs, split: None })
}

/// A procedural clean scene: a two-colour gradient, textured bands and a
/// handful of discs and boxes. Red never drops below 0.25.
pub fn generate_scene(height: usize, width: usize, seed: u64) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let freq = (rng.gen_range(1.0..6.0), rng.gen_range(1.0..6.0));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let texture = rng.gen_range(0.02..0.12);

    enum Shape {
        Disc { cy: f64, cx: f64, r: f64 },
        Box { y0: f64, x0: f64, y1: f64, x1: f64 },
    }
    let count = rng.gen_range(3..9);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cy: rng.gen(),
                    cx: rng.gen(),
                    r: rng.gen_range(0.05..0.3),
                }
            } else {
                let (y0, x0) = (rng.gen::<f64>(), rng.gen::<f64>());
                Shape::Box {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.05..0.4),
                    x1: x0 + rng.gen_range(0.05..0.4),
                }
            };
            (shape, color(&mut rng))
        })
        .collect();

    ImageBuffer::from_fn(height, width, |y, x, c| {
        let (v, u) = ((y as f64 + 0.5) / height as f64, (x as f64 + 0.5) / width as f64);
        let mut px = top[c] * (1.0 - v) + bottom[c] * v;
        for (shape, col) in &shapes {
            let inside = match *shape {
                Shape::Disc { cy, cx, r } => (v - cy).powi(2) + (u - cx).powi(2) <= r * r,
                Shape::Box { y0, x0, y1, x1 } => (y0..y1).contains(&v) && (x0..x1).contains(&u),
            };
            if inside {
                px = col[c];
            }
        }
        let wave = (std::f64::consts::TAU * (freq.0 * u + freq.1 * v) + phase + c as f64).sin();
        px = (px + texture * wave).clamp(0.0, 1.0);
        let px = if c == 0 { 0.25 + 0.75 * px } else { px };
        px as f32
    })
}

/// Writes `count` scenes as `scene_000.png`, … into `dir`.
pub fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    exec::try_map_indexed(count, |i| {
        let img = generate_scene(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        let path = dir.join(format!("scene_{i:03}.png"));
        save_image(&img, &path)?;
        Ok(path)
    })
}
