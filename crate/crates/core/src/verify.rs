//! Invariant suites run by `scnet verify`.
//!
//! Each suite draws its own seeded random inputs, checks one family of
//! invariants and reports the worst deviation it saw.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBuffer;
use crate::error::{Error, Result};
use crate::loss::{mse_loss, perceptual_loss, FeatureExtractor};
use crate::metrics::{gaussian_window, psnr, ssim, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::model::{Model, ModelConfig};
use crate::normalization::{
    channel_norm, instance_whiten, inv_sqrt_newton_schulz, reinject_moments, se_block, InvSqrtMethod, ReinjectionMode,
    WhiteningConfig,
};
use crate::params::Bindings;
use crate::tensor::{grad_check_report, sym_eig, sym_matrix_function, Graph, Real, Tensor, Var};
use crate::trainer::{AdamConfig, AdamState, Checkpoint, TrainConfig};

/// Arithmetic the suites run in. Gradient checks always use finite
/// differences in 64-bit; with `F32` they additionally compare the 32-bit
/// backward pass against the 64-bit one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::config(format!("precision must be 32 or 64, got {other}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// Deliberate breakage used to confirm that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Whitening with `α = 0` on an input with linearly dependent channels.
    RankDeficientNoAlpha,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub precision: Precision,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            precision: Precision::F64,
            seed: 42,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<26} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

pub const SUITES: [&str; 6] = [
    "whitening_covariance",
    "channel_moments",
    "newton_schulz_vs_eigen",
    "grad_check",
    "metric_oracles",
    "checkpoint_round_trip",
];

/// Runs every suite in [`SUITES`] order.
pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteOutcome> {
    SUITES.iter().map(|name| run_suite(name, opts)).collect()
}

pub fn run_suite(name: &'static str, opts: &VerifyOptions) -> SuiteOutcome {
    let start = Instant::now();
    let result = match (name, opts.precision) {
        ("whitening_covariance", Precision::F64) => whitening_covariance::<f64>(opts),
        ("whitening_covariance", Precision::F32) => whitening_covariance::<f32>(opts),
        ("channel_moments", Precision::F64) => channel_moments::<f64>(opts),
        ("channel_moments", Precision::F32) => channel_moments::<f32>(opts),
        ("newton_schulz_vs_eigen", Precision::F64) => newton_schulz_vs_eigen::<f64>(opts),
        ("newton_schulz_vs_eigen", Precision::F32) => newton_schulz_vs_eigen::<f32>(opts),
        ("grad_check", _) => grad_check_suite(opts),
        ("metric_oracles", _) => metric_oracles(opts),
        ("checkpoint_round_trip", _) => checkpoint_round_trip(opts),
        _ => Err(Error::config(format!("unknown suite {name}"))),
    };
    let (passed, detail) = match result {
        Ok(Check { passed, detail }) => (passed, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

struct Check {
    passed: bool,
    detail: String,
}

fn tol<R: Real>(f64_tol: f64, f32_tol: f64) -> f64 {
    if R::BITS == 64 {
        f64_tol
    } else {
        f32_tol
    }
}

fn rng_for(opts: &VerifyOptions, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(stream);
    rng
}

/// Haar-ish random orthogonal matrix: eigenvectors of a random symmetric one.
pub fn random_orthogonal(c: usize, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let a = Tensor::<f64>::normal(&[c, c], 1.0, rng)?;
    let sym = Tensor::from_fn(&[c, c], |i| {
        let (r, col) = (i / c, i % c);
        a.at(&[r, col]) + a.at(&[col, r])
    })?;
    Ok(sym_eig(&sym)?.vectors)
}

/// `Q diag(λ) Qᵀ` with eigenvalues log-uniform in `[1, kappa]`; the extremes
/// are pinned to 1 and `kappa` when `c ≥ 2`.
pub fn random_spd(c: usize, kappa: f64, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let q = random_orthogonal(c, rng)?;
    let mut lambda: Vec<f64> = (0..c).map(|_| kappa.powf(rng.gen::<f64>())).collect();
    if c >= 2 {
        lambda[0] = 1.0;
        lambda[c - 1] = kappa;
    }
    let scaled = Tensor::from_fn(&[c, c], |i| q.data()[i] * lambda[i % c])?;
    scaled.matmul(&q.transpose2()?)
}

/// Sample covariance (population normalization) of a `[C, M]` matrix.
fn covariance(x: &[f64], c: usize, m: usize) -> Vec<f64> {
    let means: Vec<f64> = (0..c)
        .map(|i| x[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..=i {
            let s: f64 = (0..m)
                .map(|k| (x[i * m + k] - means[i]) * (x[j * m + k] - means[j]))
                .sum::<f64>()
                / m as f64;
            cov[i * c + j] = s;
            cov[j * c + i] = s;
        }
    }
    cov
}

/// Correlated test input: `Q diag(s) Z + offset` per instance, with scales
/// spread over three decades.
fn correlated_instance(c: usize, hw: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let q = random_orthogonal(c, rng)?;
    let s: Vec<f64> = (0..c).map(|_| 10f64.powf(rng.gen_range(-1.5..0.5))).collect();
    let z = Tensor::<f64>::normal(&[c, hw], 1.0, rng)?;
    let mut out = vec![0.0; c * hw];
    for i in 0..c {
        let offset = rng.gen_range(-1.0..1.0);
        for k in 0..hw {
            out[i * hw + k] = offset
                + (0..c)
                    .map(|j| q.data()[i * c + j] * s[j] * z.data()[j * hw + k])
                    .sum::<f64>();
        }
    }
    Ok(out)
}

fn whiten_once<R: Real>(x: &[f64], c: usize, h: usize, w: usize, config: &WhiteningConfig) -> Result<Vec<f64>> {
    let g = Graph::<R>::new();
    let xv = g.constant(Tensor::<f64>::new(&[1, c, h, w], x.to_vec())?.cast());
    let gamma = g.constant(Tensor::ones(&[c])?);
    let beta = g.constant(Tensor::zeros(&[c])?);
    let out = instance_whiten(&g, xv, gamma, beta, config)?;
    let v = g.value(out).data().iter().map(|v| v.as_f64()).collect();
    Ok(v)
}

/// Output covariance of eigen-method whitening, expressed in the eigenbasis
/// of the input covariance, is `diag(λ / (λ + α))`.
fn whitening_covariance<R: Real>(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = rng_for(opts, 1);
    let (h, w) = (16, 16);
    let hw = h * w;
    let config = WhiteningConfig::default().with_method(InvSqrtMethod::Eigen);
    if let Some(Fault::RankDeficientNoAlpha) = opts.fault {
        let c = 4;
        let mut x = correlated_instance(c, hw, &mut rng)?;
        let (first, rest) = x.split_at_mut(hw);
        rest[..hw].copy_from_slice(first);
        let broken = config.with_alpha(0.0);
        return Ok(match whiten_once::<R>(&x, c, h, w, &broken) {
            Err(e) => Check {
                passed: false,
                detail: format!("rank-deficient input with alpha = 0: {e}"),
            },
            Ok(y) => {
                let cov = covariance(&y, c, hw);
                let worst = (0..c * c)
                    .map(|i| (cov[i] - if i % (c + 1) == 0 { 1.0 } else { 0.0 }).abs())
                    .fold(0.0, f64::max);
                Check {
                    passed: worst < 1e-4,
                    detail: format!("rank-deficient input with alpha = 0: max |cov - I| = {worst:.3e}"),
                }
            }
        });
    }
    let (off_tol, diag_slack) = (tol::<R>(1e-4, 1e-3), tol::<R>(1e-9, 1e-3));
    let (mut worst_off, mut diag_lo, mut diag_hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    let (mut checked, mut skipped) = (0, 0);
    while checked < 100 {
        let c = [4, 8, 16][rng.gen_range(0..3)];
        let x = correlated_instance(c, hw, &mut rng)?;
        let cov_in = Tensor::new(&[c, c], covariance(&x, c, hw))?;
        let eig = sym_eig(&cov_in)?;
        if eig.values.data().iter().any(|&l| l < 1e-3) {
            skipped += 1;
            continue;
        }
        let y = whiten_once::<R>(&x, c, h, w, &config)?;
        let cov_out = Tensor::new(&[c, c], covariance(&y, c, hw))?;
        let v = &eig.vectors;
        let rotated = v.transpose2()?.matmul(&cov_out)?.matmul(v)?;
        for i in 0..c {
            for j in 0..c {
                let e = rotated.at(&[i, j]);
                if i == j {
                    diag_lo = diag_lo.min(e);
                    diag_hi = diag_hi.max(e);
                } else {
                    worst_off = worst_off.max(e.abs());
                }
            }
        }
        checked += 1;
    }
    let passed = worst_off < off_tol && diag_lo >= 0.99 && diag_hi <= 1.0 + diag_slack;
    Ok(Check {
        passed,
        detail: format!(
            "{checked} instances ({skipped} skipped): max |off-diag| {worst_off:.2e}, diag in [{diag_lo:.6}, {diag_hi:.6}]"
        ),
    })
}

/// Per-position channel mean is zero and the standard deviation is
/// `v / (v + α)` where `v` is the input's channel standard deviation.
/// In 32-bit the error is measured relative to `1 + max|x| / v`, the
/// cancellation factor of the centering step.
fn channel_moments<R: Real>(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = rng_for(opts, 2);
    let alpha = crate::normalization::DEFAULT_ALPHA;
    let (mean_tol, std_tol) = (tol::<R>(1e-6, 1e-5), tol::<R>(1e-5, 1e-4));
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(2..17),
            rng.gen_range(2..9),
            rng.gen_range(2..9),
        );
        let scale = 10f64.powf(rng.gen_range(-2.0..1.0));
        let shift = rng.gen_range(-2.0..2.0);
        let x = Tensor::<f64>::from_fn(&[n, c, h, w], |_| shift + scale * rng.gen_range(-1.0..1.0))?;
        let g = Graph::<R>::new();
        let xv = g.constant(x.cast());
        let (out, _) = channel_norm(&g, xv, alpha)?;
        let y = g.value(out).cast::<f64>();
        let plane = h * w;
        for b in 0..n {
            for p in 0..plane {
                let at = |t: &Tensor<f64>, ch: usize| t.data()[(b * c + ch) * plane + p];
                let mean_in = (0..c).map(|ch| at(&x, ch)).sum::<f64>() / c as f64;
                let v = ((0..c).map(|ch| (at(&x, ch) - mean_in).powi(2)).sum::<f64>() / c as f64).sqrt();
                let m = (0..c).map(|ch| at(&y, ch)).sum::<f64>() / c as f64;
                let s = ((0..c).map(|ch| (at(&y, ch) - m).powi(2)).sum::<f64>() / c as f64).sqrt();
                let cond = if R::BITS == 64 {
                    1.0
                } else {
                    1.0 + (0..c).map(|ch| at(&x, ch).abs()).fold(0.0, f64::max) / v
                };
                worst_mean = worst_mean.max(m.abs() / cond);
                worst_std = worst_std.max((s - v / (v + alpha)).abs() / cond);
            }
        }
    }
    Ok(Check {
        passed: worst_mean < mean_tol && worst_std < std_tol,
        detail: format!("100 tensors: max |mean| {worst_mean:.2e}, max |std - v/(v+a)| {worst_std:.2e}"),
    })
}

/// The Newton–Schulz iteration converges to the eigen-based inverse square
/// root. Convergence is checked at 30 iterations; the error of the 5-step
/// truncation used in training is reported alongside.
fn newton_schulz_vs_eigen<R: Real>(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = rng_for(opts, 3);
    let limit = tol::<R>(1e-8, 1e-3);
    let (mut worst_converged, mut worst_five) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let c = rng.gen_range(2..=16);
        let kappa = 10f64.powf(rng.gen_range(0.0..3.0));
        let sigma = random_spd(c, kappa, &mut rng)?;
        let exact = sym_matrix_function(&sigma, |l| 1.0 / l.sqrt())?;
        let ns = |iterations: usize| -> Result<Tensor<f64>> {
            let g = Graph::<R>::new();
            let s = g.constant(sigma.cast());
            let out = inv_sqrt_newton_schulz(&g, s, iterations)?;
            let v = g.value(out).cast::<f64>();
            Ok(v)
        };
        worst_converged = worst_converged.max(ns(30)?.max_abs_diff(&exact));
        worst_five = worst_five.max(ns(5)?.max_abs_diff(&exact));
    }
    Ok(Check {
        passed: worst_converged < limit,
        detail: format!(
            "100 SPD (C<=16, cond<=1e3): 30-step max err {worst_converged:.2e}; 5-step max err {worst_five:.2e}"
        ),
    })
}

/// One differentiable function under test: inputs plus fixed constants.
struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    consts: Vec<Tensor<f64>>,
    eval: fn(&GradCase, &Graph<f64>, &[Var]) -> Result<Var>,
    eval32: fn(&GradCase, &Graph<f32>, &[Var]) -> Result<Var>,
}

/// `Σ r ⊙ y` for a fixed random `r`, making every output coordinate matter.
fn project<R: Real>(g: &Graph<R>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.reshape(&g.shape(y))?.cast());
    let prod = g.mul(y, rv)?;
    g.sum(prod)
}

macro_rules! grad_case {
    ($name:expr, $inputs:expr, $consts:expr, |$case:ident, $g:ident, $v:ident| $body:expr) => {{
        fn run<R: Real>($case: &GradCase, $g: &Graph<R>, $v: &[Var]) -> Result<Var> {
            $body
        }
        GradCase {
            name: $name,
            inputs: $inputs,
            consts: $consts,
            eval: run::<f64>,
            eval32: run::<f32>,
        }
    }};
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng).expect("positive extents")
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        scales: 2,
        base_channels: 4,
        ..ModelConfig::default()
    }
}

/// Every case, drawn from stream `attempt` of `seed`.
fn grad_cases(seed: u64, attempt: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let r = &mut rng;
    let mut cases = vec![
        grad_case!(
            "conv2d",
            vec![rand_t(&[2, 3, 5, 5], r), rand_t(&[4, 3, 3, 3], r), rand_t(&[4], r)],
            vec![rand_t(&[2 * 4 * 5 * 5], r)],
            |case, g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(g, y, &case.consts[0])
            }
        ),
        grad_case!(
            "conv2d_stride2",
            vec![rand_t(&[1, 2, 6, 6], r), rand_t(&[3, 2, 3, 3], r), rand_t(&[3], r)],
            vec![rand_t(&[3 * 3 * 3], r)],
            |case, g, v| {
                let y = g.conv2d_padded(v[0], v[1], Some(v[2]), 2, 1, 0)?;
                project(g, y, &case.consts[0])
            }
        ),
    ];
    for (name, method) in [
        ("whitening_newton_schulz", InvSqrtMethod::NewtonSchulz),
        ("whitening_eigen", InvSqrtMethod::Eigen),
    ] {
        let mut case = grad_case!(
            name,
            vec![rand_t(&[1, 4, 8, 8], r), rand_t(&[4], r), rand_t(&[4], r)],
            vec![rand_t(&[4 * 8 * 8], r), Tensor::scalar(0.0)],
            |case, g, v| {
                let method = if case.consts[1].item() == 0.0 {
                    InvSqrtMethod::NewtonSchulz
                } else {
                    InvSqrtMethod::Eigen
                };
                let y = instance_whiten(g, v[0], v[1], v[2], &WhiteningConfig::default().with_method(method))?;
                project(g, y, &case.consts[0])
            }
        );
        case.consts[1] = Tensor::scalar(if method == InvSqrtMethod::Eigen { 1.0 } else { 0.0 });
        cases.push(case);
    }
    cases.push(grad_case!(
        "channel_norm",
        vec![rand_t(&[2, 5, 4, 4], r)],
        vec![rand_t(&[2 * 5 * 16], r), rand_t(&[2 * 16], r), rand_t(&[2 * 16], r)],
        |case, g, v| {
            let (y, m) = channel_norm(g, v[0], crate::normalization::DEFAULT_ALPHA)?;
            let a = project(g, y, &case.consts[0])?;
            let b = project(g, m.mu, &case.consts[1])?;
            let c = project(g, m.sigma, &case.consts[2])?;
            g.add(g.add(a, b)?, c)
        }
    ));
    for (name, mode) in [("reinjection_text_form", 0.0), ("reinjection_eq8_form", 1.0)] {
        cases.push(grad_case!(
            name,
            vec![
                rand_t(&[1, 4, 4, 4], r),
                rand_t(&[1, 3, 2, 2], r),
                rand_t(&[4, 1, 1, 1], r),
                rand_t(&[4], r),
                rand_t(&[4, 1, 1, 1], r),
                rand_t(&[4], r),
            ],
            vec![rand_t(&[4 * 4 * 4], r), Tensor::scalar(mode)],
            |case, g, v| {
                let (_, m) = channel_norm(g, v[1], crate::normalization::DEFAULT_ALPHA)?;
                let mode = if case.consts[1].item() == 0.0 {
                    ReinjectionMode::TextForm
                } else {
                    ReinjectionMode::Eq8Form
                };
                let y = reinject_moments(g, v[0], &m, (v[2], v[3]), (v[4], v[5]), mode)?;
                project(g, y, &case.consts[0])
            }
        ));
    }
    cases.push(grad_case!(
        "se_block",
        vec![rand_t(&[2, 8, 3, 3], r), rand_t(&[2, 8], r), rand_t(&[8, 2], r)],
        vec![rand_t(&[2 * 8 * 9], r)],
        |case, g, v| {
            let y = se_block(g, v[0], v[1], v[2])?;
            project(g, y, &case.consts[0])
        }
    ));
    let target = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, r)?;
    cases.push(grad_case!(
        "mse_loss",
        vec![Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, r)?],
        vec![target.clone()],
        |case, g, v| {
            let t = g.constant(case.consts[0].cast());
            mse_loss(g, v[0], t)
        }
    ));
    cases.push(grad_case!(
        "perceptual_loss",
        vec![Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, r)?],
        vec![target],
        |case, g, v| {
            let fx = FeatureExtractor::<f64>::new(5).cast::<R>();
            let t = g.constant(case.consts[0].cast());
            perceptual_loss(g, v[0], t, &fx)
        }
    ));
    let model = Model::<f64>::build(tiny_model_config(), r.gen())?;
    let mut inputs = vec![Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, r)?];
    inputs.extend(model.params.tensors().iter().cloned());
    cases.push(grad_case!(
        "model_scales2",
        inputs,
        vec![rand_t(&[3 * 16 * 16], r)],
        |case, g, v| {
            let model = Model::<R>::build(tiny_model_config(), 0)?;
            let p = Bindings::from_vars(v[1..].to_vec());
            let y = model.forward(g, &p, v[0])?;
            project(g, y, &case.consts[0])
        }
    ));
    Ok(cases)
}

fn analytic<R: Real>(
    case: &GradCase,
    eval: fn(&GradCase, &Graph<R>, &[Var]) -> Result<Var>,
) -> Result<Vec<Tensor<f64>>> {
    let g = Graph::<R>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.cast())).collect();
    let out = eval(case, &g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map(|gr| gr.cast()).unwrap_or_else(|| t.map(|_| 0.0)))
        .collect())
}

/// Finite-difference step for every gradient check.
pub const GRAD_EPS: f64 = 1e-3;

/// Redraws allowed per case when a finite-difference stencil crosses a kink.
const MAX_REDRAWS: u64 = 20;

/// Finite-difference agreement, always judged in f64.
const GRAD_TOL: f64 = 1e-4;
/// Relative gap between f32 and f64 reverse-mode gradients.
const GRAD_TOL_32: f64 = 1e-3;

fn grad_check_suite(opts: &VerifyOptions) -> Result<Check> {
    let count = grad_cases(opts.seed, 0)?.len();
    let mut worst = (0.0f64, "");
    let mut worst32 = (0.0f64, "");
    let mut redraws = 0;
    for index in 0..count {
        let mut attempt = 0;
        let (case, report) = loop {
            let case = grad_cases(opts.seed, attempt)?.swap_remove(index);
            let report = grad_check_report(|g, v| (case.eval)(&case, g, v), &case.inputs, GRAD_EPS)?;
            if report.kink_crossings == 0 {
                break (case, report);
            }
            attempt += 1;
            if attempt > MAX_REDRAWS {
                return Err(Error::numerical(
                    "grad_check",
                    format!("{}: every draw put a stencil across a kink", case.name),
                ));
            }
        };
        redraws += attempt;
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, case.name);
        }
        if opts.precision == Precision::F32 {
            let a64 = analytic::<f64>(&case, case.eval)?;
            let a32 = analytic::<f32>(&case, case.eval32)?;
            let scale = a64.iter().map(|t| t.max_abs()).fold(0.0, f64::max).max(1e-12);
            let diff = a64.iter().zip(&a32).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max) / scale;
            if diff > worst32.0 {
                worst32 = (diff, case.name);
            }
        }
    }
    let mut detail = format!(
        "{count} cases: max rel err {:.2e} ({}) < {GRAD_TOL:e}, {redraws} kink redraws",
        worst.0, worst.1
    );
    let mut passed = worst.0 < GRAD_TOL;
    if opts.precision == Precision::F32 {
        detail.push_str(&format!(
            "; f32 vs f64 backward {:.2e} ({}) < {GRAD_TOL_32:e}",
            worst32.0, worst32.1
        ));
        passed &= worst32.0 < GRAD_TOL_32;
    }
    Ok(Check { passed, detail })
}

/// SSIM computed straight from the definition: every window evaluated with
/// the full 2-D Gaussian, no separable filtering.
pub fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let k = gaussian_window();
    let (h, w) = (a.height(), a.width());
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = k[i] * k[j];
                        let (pa, pb) = (a.get(y + i, x + j, ch) as f64, b.get(y + i, x + j, ch) as f64);
                        ma += wt * pa;
                        mb += wt * pb;
                        saa += wt * pa * pa;
                        sbb += wt * pb * pb;
                        sab += wt * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / 3.0
}

fn metric_oracles(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = rng_for(opts, 6);
    let (mut worst_psnr, mut worst_ssim) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(11..24), rng.gen_range(11..24));
        let a = ImageBuffer::from_fn(h, w, |_, _, _| rng.gen())?;
        let noise = rng.gen_range(0.01..0.3);
        let b = ImageBuffer::from_fn(h, w, |y, x, c| a.get(y, x, c) + noise * rng.gen_range(-1.0f32..1.0))?;
        let n = (h * w * 3) as f64;
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
            .sum::<f64>()
            / n;
        worst_psnr = worst_psnr.max((psnr(&a, &b)? - (-10.0 * mse.log10())).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b)? - ssim_direct(&a, &b)).abs());
    }
    Ok(Check {
        passed: worst_psnr < 1e-9 && worst_ssim < 1e-6,
        detail: format!("20 pairs: psnr err {worst_psnr:.2e}, ssim err {worst_ssim:.2e}"),
    })
}

fn checkpoint_round_trip(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = rng_for(opts, 7);
    let model = Model::<f32>::build(tiny_model_config(), opts.seed)?;
    let mut adam = AdamState::new(AdamConfig::default(), model.params.tensors());
    adam.t = rng.gen_range(1..1000);
    for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen());
    }
    let ck = Checkpoint {
        model,
        train: TrainConfig::default(),
        adam,
    };
    let first = ck.to_bytes()?;
    let loaded = Checkpoint::from_bytes(&first)?;
    let second = loaded.to_bytes()?;
    let x = Tensor::<f32>::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng)?;
    let same_forward = ck.model.predict(&x)? == loaded.model.predict(&x)?;
    let mut flipped = first.clone();
    let at = flipped.len() / 2;
    flipped[at] ^= 0x10;
    let crc_caught = matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Corrupt { field: "crc", .. })
    );
    Ok(Check {
        passed: first == second && same_forward && crc_caught,
        detail: format!(
            "{} bytes: byte-exact {}, forward-equal {}, flipped byte rejected {}",
            first.len(),
            first == second,
            same_forward,
            crc_caught
        ),
    })
}
