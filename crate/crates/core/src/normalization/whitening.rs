use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::DEFAULT_ALPHA;

/// How `Σ^{-1/2}` is computed inside the whitening layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvSqrtMethod {
    /// Unrolled coupled Newton–Schulz iteration (matmuls only).
    NewtonSchulz,
    /// Symmetric eigendecomposition.
    Eigen,
}

/// Channels whitened jointly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    Full,
    Channels(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningConfig {
    /// Added to the covariance diagonal.
    pub alpha: f64,
    pub method: InvSqrtMethod,
    /// Newton–Schulz steps.
    pub iterations: usize,
    pub group_size: GroupSize,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        WhiteningConfig {
            alpha: DEFAULT_ALPHA,
            method: InvSqrtMethod::NewtonSchulz,
            iterations: 5,
            group_size: GroupSize::Full,
        }
    }
}

impl WhiteningConfig {
    pub fn with_method(mut self, method: InvSqrtMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Checks the configuration against a channel count and returns the
    /// resolved group size.
    pub fn validate(&self, channels: usize) -> Result<usize> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!(
                "whitening alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("whitening needs at least one Newton–Schulz iteration"));
        }
        match self.group_size {
            GroupSize::Full => Ok(channels),
            GroupSize::Channels(g) if g > 0 && channels % g == 0 => Ok(g),
            GroupSize::Channels(g) => Err(Error::config(format!(
                "group size {g} does not divide {channels} channels"
            ))),
        }
    }
}

/// `Σ^{-1/2}` by the coupled Newton–Schulz iteration on `Σ / tr(Σ)`.
///
/// `Y₀ = Σ/tr Σ, Z₀ = I`, then `T = 3I − Z Y`, `Y ← ½ Y T`, `Z ← ½ T Z`;
/// the result is `Z / sqrt(tr Σ)`. Built from graph ops, so it is
/// differentiable end to end.
pub fn inv_sqrt_newton_schulz<R: Real>(g: &Graph<R>, sigma: Var, iterations: usize) -> Result<Var> {
    if iterations == 0 {
        return Err(Error::config("Newton–Schulz needs at least one iteration"));
    }
    let n = match g.shape(sigma)[..] {
        [a, b] if a == b => a,
        ref s => return Err(Error::config(format!("Newton–Schulz needs a square matrix, got {s:?}"))),
    };
    let tr = g.trace(sigma)?;
    let trace_value = g.value(tr).item();
    if !(trace_value > R::zero()) {
        return Err(Error::Domain(format!(
            "trace of covariance must be positive, got {trace_value}"
        )));
    }
    let eye = g.constant(Tensor::eye(n)?);
    let three_eye = g.constant(Tensor::eye(n)?.map(|v| v * R::lit(3.0)));
    let inv_tr = g.pow(tr, -R::one())?;
    let mut y = g.scale_by(sigma, inv_tr)?;
    let mut z = eye;
    let half = R::lit(0.5);
    for _ in 0..iterations {
        let zy = g.matmul(z, y)?;
        let t = g.sub(three_eye, zy)?;
        let yt = g.matmul(y, t)?;
        let tz = g.matmul(t, z)?;
        y = g.scale(yt, half)?;
        z = g.scale(tz, half)?;
    }
    let inv_sqrt_tr = g.pow(tr, R::lit(-0.5))?;
    g.scale_by(z, inv_sqrt_tr)
}

/// Per-instance whitening with per-channel scale and shift.
///
/// For each instance `X` (C × HW): `μ` is the spatial mean per channel,
/// `Σ = (X−μ)(X−μ)ᵀ/HW + αI`, and the output is `Σ^{-1/2}(X−μ)·γ + β`.
/// No statistics are shared between instances.
pub fn instance_whiten<R: Real>(g: &Graph<R>, x: Var, gamma: Var, beta: Var, config: &WhiteningConfig) -> Result<Var> {
    let shape = g.shape(x);
    let [n, c, h, w] = match shape[..] {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::config(format!("instance_whiten expects N×C×H×W, got {shape:?}"))),
    };
    let hw = h * w;
    if hw < 2 {
        return Err(Error::config("instance_whiten needs at least two spatial positions"));
    }
    let group = config.validate(c)?;
    let groups = c / group;
    let alpha_eye = g.constant(Tensor::eye(group)?.map(|v| v * R::lit(config.alpha)));
    let inv_hw = R::one() / R::lit(hw as f64);

    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let xi = g.select(x, i)?;
        let xi = g.reshape(xi, &[c, hw])?;
        let blocks: Vec<Var> = if groups == 1 {
            vec![xi]
        } else {
            let grouped = g.reshape(xi, &[groups, group, hw])?;
            (0..groups).map(|j| g.select(grouped, j)).collect::<Result<_>>()?
        };
        let mut whitened = Vec::with_capacity(groups);
        for block in blocks {
            let mu = g.mean_axis(block, 1)?;
            let mu = g.broadcast_axis(mu, 1, hw)?;
            let centered = g.sub(block, mu)?;
            let centered_t = g.transpose(centered)?;
            let outer = g.matmul(centered, centered_t)?;
            let cov = g.scale(outer, inv_hw)?;
            let cov = g.add(cov, alpha_eye)?;
            g.label(cov, "whiten_cov");
            let inv_sqrt = match config.method {
                InvSqrtMethod::NewtonSchulz => inv_sqrt_newton_schulz(g, cov, config.iterations)?,
                InvSqrtMethod::Eigen => g.inv_sqrt_eig(cov)?,
            };
            whitened.push(g.matmul(inv_sqrt, centered)?);
        }
        let joined = if groups == 1 {
            whitened[0]
        } else {
            let stacked = g.stack(&whitened)?;
            g.reshape(stacked, &[c, hw])?
        };
        instances.push(g.reshape(joined, &[c, h, w])?);
    }
    let stacked = g.stack(&instances)?;
    let out = g.channel_affine(stacked, gamma, beta)?;
    Ok(g.label(out, "instance_whiten"))
}

/// Whitening layer with learnable per-channel `γ` (init 1) and `β` (init 0).
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningLayer {
    pub config: WhiteningConfig,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl WhiteningLayer {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        config: WhiteningConfig,
    ) -> Result<Self> {
        config.validate(channels)?;
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels])?);
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])?);
        Ok(WhiteningLayer {
            config,
            gamma,
            beta,
            channels,
        })
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, params: &Bindings, x: Var) -> Result<Var> {
        instance_whiten(g, x, params[self.gamma], params[self.beta], &self.config)
    }
}
