use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Per-position channel statistics removed by [`channel_norm`].
///
/// Both maps are `[N, 1, H, W]`; every `sigma` entry is at least `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomentMaps {
    pub mu: Var,
    pub sigma: Var,
}

/// Standardizes every spatial position across channels.
///
/// `μ = mean_c x`, `σ = sqrt(mean_c (x − μ)²) + α`, output `(x − μ) / σ`.
pub fn channel_norm<R: Real>(g: &Graph<R>, x: Var, alpha: f64) -> Result<(Var, MomentMaps)> {
    let c = match g.shape(x)[..] {
        [_, c, _, _] => c,
        ref s => return Err(Error::config(format!("channel_norm expects N×C×H×W, got {s:?}"))),
    };
    let mu = g.mean_axis(x, 1)?;
    g.label(mu, "cn_mu");
    let mu_b = g.broadcast_axis(mu, 1, c)?;
    let centered = g.sub(x, mu_b)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axis(sq, 1)?;
    let std = g.sqrt(var)?;
    let sigma = g.add_scalar(std, R::lit(alpha))?;
    g.label(sigma, "cn_sigma");
    let sigma_b = g.broadcast_axis(sigma, 1, c)?;
    let out = g.div(centered, sigma_b)?;
    Ok((g.label(out, "channel_norm"), MomentMaps { mu, sigma }))
}

/// Which re-injection formula the decoder uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinjectionMode {
    /// `y = σ′ ⊙ x + μ′`: the mean is added back, the deviation multiplied.
    #[default]
    TextForm,
    /// `y = μ′ ⊙ x + σ′`, the literal equation form.
    Eq8Form,
}

/// Learned 1×1 projections turning single-channel moment maps into
/// decoder-width statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ReinjectionHead {
    pub mu_weight: ParamId,
    pub mu_bias: ParamId,
    pub sigma_weight: ParamId,
    pub sigma_bias: ParamId,
    pub channels: usize,
    pub mode: ReinjectionMode,
}

impl ReinjectionHead {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        mode: ReinjectionMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mu_weight = store.add_he_uniform(format!("{prefix}.mu_proj.weight"), &[channels, 1, 1, 1], rng)?;
        let mu_bias = store.add(format!("{prefix}.mu_proj.bias"), crate::Tensor::zeros(&[channels])?);
        let sigma_weight = store.add_he_uniform(format!("{prefix}.sigma_proj.weight"), &[channels, 1, 1, 1], rng)?;
        let sigma_bias = store.add(format!("{prefix}.sigma_proj.bias"), crate::Tensor::zeros(&[channels])?);
        Ok(ReinjectionHead {
            mu_weight,
            mu_bias,
            sigma_weight,
            sigma_bias,
            channels,
            mode,
        })
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, params: &Bindings, x: Var, moments: &MomentMaps) -> Result<Var> {
        reinject_moments(
            g,
            x,
            moments,
            (params[self.mu_weight], params[self.mu_bias]),
            (params[self.sigma_weight], params[self.sigma_bias]),
            self.mode,
        )
    }
}

/// Projects the moment maps with 1×1 convolutions and re-applies them to `x`.
///
/// Maps whose spatial extents differ from `x` are nearest-neighbour
/// resampled before projection.
pub fn reinject_moments<R: Real>(
    g: &Graph<R>,
    x: Var,
    moments: &MomentMaps,
    mu_proj: (Var, Var),
    sigma_proj: (Var, Var),
    mode: ReinjectionMode,
) -> Result<Var> {
    let xs = g.shape(x);
    let [n, _, h, w] = match xs[..] {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::config(format!("reinject_moments expects N×C×H×W, got {xs:?}"))),
    };
    let fit = |m: Var| -> Result<Var> {
        match g.shape(m)[..] {
            [mn, 1, mh, mw] if mn == n => {
                if (mh, mw) == (h, w) {
                    Ok(m)
                } else {
                    g.resize_nearest(m, h, w)
                }
            }
            ref s => Err(Error::config(format!(
                "moment map shape {s:?} incompatible with features {xs:?}"
            ))),
        }
    };
    let mu = fit(moments.mu)?;
    let sigma = fit(moments.sigma)?;
    let mu_p = g.conv2d(mu, mu_proj.0, Some(mu_proj.1), 1, 0)?;
    let sigma_p = g.conv2d(sigma, sigma_proj.0, Some(sigma_proj.1), 1, 0)?;
    if g.shape(mu_p) != xs || g.shape(sigma_p) != xs {
        return Err(Error::config(format!(
            "projected moments {:?} do not match features {xs:?}",
            g.shape(mu_p)
        )));
    }
    let (scale, shift) = match mode {
        ReinjectionMode::TextForm => (sigma_p, mu_p),
        ReinjectionMode::Eq8Form => (mu_p, sigma_p),
    };
    let scaled = g.mul(scale, x)?;
    let out = g.add(scaled, shift)?;
    Ok(g.label(out, "reinject"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn norm_value(x: &Tensor<f64>, alpha: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, m) = channel_norm(&g, xv, alpha).unwrap();
        let r = (g.value(out).clone(), g.value(m.mu).clone(), g.value(m.sigma).clone());
        r
    }

    #[test]
    fn constant_across_channels_gives_zero() {
        let x = Tensor::full(&[1, 5, 2, 2], 3.0).unwrap();
        let (out, mu, sigma) = norm_value(&x, 1e-5);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(mu.data().iter().all(|&v| v == 3.0));
        assert!(sigma.data().iter().all(|&v| v == 1e-5));
    }

    #[test]
    fn two_point_case() {
        let x = Tensor::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let alpha = 1e-5;
        let (out, mu, sigma) = norm_value(&x, alpha);
        assert_eq!(mu.data(), &[2.0]);
        assert!((sigma.data()[0] - (1.0 + alpha)).abs() < 1e-15);
        assert!((out.data()[0] + 1.0 / (1.0 + alpha)).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / (1.0 + alpha)).abs() < 1e-15);
    }

    fn reinject_value(x: f64, sigma_p: f64, mu_p: f64, mode: ReinjectionMode) -> Tensor<f64> {
        let g = Graph::new();
        let xv = g.constant(Tensor::full(&[1, 3, 2, 2], x).unwrap());
        let moments = MomentMaps {
            mu: g.constant(Tensor::full(&[1, 1, 2, 2], 0.4).unwrap()),
            sigma: g.constant(Tensor::full(&[1, 1, 2, 2], 0.9).unwrap()),
        };
        // Zero kernels + bias produce constant projected maps.
        let zero_w = g.constant(Tensor::zeros(&[3, 1, 1, 1]).unwrap());
        let mu_b = g.constant(Tensor::full(&[3], mu_p).unwrap());
        let sigma_b = g.constant(Tensor::full(&[3], sigma_p).unwrap());
        let out = reinject_moments(&g, xv, &moments, (zero_w, mu_b), (zero_w, sigma_b), mode).unwrap();
        let v = g.value(out).clone();
        v
    }

    #[test]
    fn identity_reinjection() {
        let out = reinject_value(0.37, 1.0, 0.0, ReinjectionMode::TextForm);
        assert!(out.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn affine_on_constants() {
        let out = reinject_value(1.0, 2.0, 3.0, ReinjectionMode::TextForm);
        assert!(out.data().iter().all(|&v| v == 5.0));
        let out = reinject_value(1.0, 2.0, 3.0, ReinjectionMode::Eq8Form);
        assert!(out.data().iter().all(|&v| v == 5.0));
        let out = reinject_value(2.0, 2.0, 3.0, ReinjectionMode::Eq8Form);
        assert!(out.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 2, 2]).unwrap());
        let m = g.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let w = g.constant(Tensor::zeros(&[3, 1, 1, 1]).unwrap());
        let b = g.constant(Tensor::zeros(&[3]).unwrap());
        let moments = MomentMaps { mu: m, sigma: m };
        assert!(reinject_moments(&g, x, &moments, (w, b), (w, b), ReinjectionMode::TextForm).is_err());
    }

    #[test]
    fn coarser_moments_are_resampled() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]).unwrap());
        let mu = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let sigma = g.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let w = g.constant(Tensor::ones(&[2, 1, 1, 1]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]).unwrap());
        let out = reinject_moments(
            &g,
            x,
            &MomentMaps { mu, sigma },
            (w, b),
            (w, b),
            ReinjectionMode::TextForm,
        )
        .unwrap();
        let out = g.value(out);
        assert_eq!(out.at(&[0, 1, 0, 0]), 2.0);
        assert_eq!(out.at(&[0, 0, 3, 3]), 5.0);
    }
}
