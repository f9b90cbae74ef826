//! Full-reference image quality: PSNR and single-scale SSIM.

use std::fmt::Write as _;

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::exec;

/// Aggregates replace an infinite PSNR with this value.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::config(format!(
            "image extents differ: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)` for `[0, 1]` data; `+∞` for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM over valid window positions, averaged over the three channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let plane = |img: &ImageBuffer, c: usize| {
        img.data()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|&v| v as f64)
            .collect::<Vec<_>>()
    };
    let per_channel: f64 = (0..3).map(|c| ssim_channel(&plane(a, c), &plane(b, c), h, w)).sum();
    Ok(per_channel / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    /// Scores `(path, enhanced, reference)` triples, in order.
    pub fn evaluate(items: &[(String, &ImageBuffer, &ImageBuffer)]) -> Result<Self> {
        let entries = exec::try_map_indexed(items.len(), |i| {
            let (path, a, b) = &items[i];
            Ok(MetricEntry {
                path: path.clone(),
                psnr: psnr(a, b)?,
                ssim: ssim(a, b)?,
            })
        })?;
        Ok(MetricReport { entries })
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.psnr.min(PSNR_CAP)))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.ssim))
    }

    /// One `path,psnr,ssim` line per image.
    pub fn lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.path, e.psnr, e.ssim);
        }
        s
    }

    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|e| e.path.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>7}", "path", "PSNR(dB)", "SSIM");
        for e in &self.entries {
            let _ = writeln!(s, "{:<width$}  {:>9.3}  {:>7.4}", e.path, e.psnr, e.ssim);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.3}  {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
