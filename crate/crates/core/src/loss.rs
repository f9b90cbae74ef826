//! Pixel and feature-space reconstruction losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Output width of each conv in the default extractor.
const WIDTHS: [usize; 8] = [16, 16, 32, 32, 64, 64, 64, 64];
/// A 2×2 max pool follows these (1-based) convs.
const POOL_AFTER: [usize; 2] = [2, 4];

/// Anything that maps an image batch to a list of feature maps.
pub trait FeatureMap<R: Real> {
    /// Records the extractor on `g` and returns the tapped maps.
    fn features(&self, g: &Graph<R>, x: Var) -> Result<Vec<Var>>;
}

/// Frozen random conv stack: 3×3 convs with ReLU, max pools after conv 2 and
/// conv 4. Taps name convs by their 1-based index and read the activation.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<R> {
    seed: u64,
    taps: Vec<usize>,
    params: ParamStore<R>,
    kernels: Vec<ParamId>,
}

impl<R: Real> FeatureExtractor<R> {
    /// Taps after conv 2 and conv 4.
    pub fn new(seed: u64) -> Self {
        Self::with_taps(seed, &[2, 4]).expect("default taps are valid")
    }

    pub fn with_taps(seed: u64, taps: &[usize]) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::config("feature extractor needs at least one tap"));
        }
        let mut taps = taps.to_vec();
        taps.sort_unstable();
        taps.dedup();
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > WIDTHS.len()) {
            return Err(Error::config(format!("tap {bad} outside 1..={}", WIDTHS.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut kernels = Vec::with_capacity(WIDTHS.len());
        let mut cin = 3;
        for (i, &cout) in WIDTHS.iter().enumerate() {
            kernels.push(params.add_he_uniform(format!("fx.conv{}", i + 1), &[cout, cin, 3, 3], &mut rng)?);
            cin = cout;
        }
        Ok(FeatureExtractor {
            seed,
            taps,
            params,
            kernels,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    fn depth(&self) -> usize {
        *self.taps.last().expect("at least one tap")
    }

    /// Smallest spatial extent the taps accept; extents must be multiples of it.
    pub fn min_extent(&self) -> usize {
        1 << POOL_AFTER.iter().filter(|&&p| p < self.depth()).count()
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let m = self.min_extent();
        if height < m || width < m || height % m != 0 || width % m != 0 {
            return Err(Error::config(format!(
                "feature taps up to conv {} need extents that are positive multiples of {m}, got {height}×{width}",
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> FeatureExtractor<S> {
        FeatureExtractor {
            seed: self.seed,
            taps: self.taps.clone(),
            params: self.params.cast(),
            kernels: self.kernels.clone(),
        }
    }
}

impl<R: Real> FeatureMap<R> for FeatureExtractor<R> {
    fn features(&self, g: &Graph<R>, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::config(format!("extractor input must be N×3×H×W, got {shape:?}")));
        }
        self.check_extents(shape[2], shape[3])?;
        let p = self.params.bind_frozen(g);
        let mut out = Vec::with_capacity(self.taps.len());
        let mut h = x;
        for i in 1..=self.depth() {
            h = g.conv2d(h, p[self.kernels[i - 1]], None, 1, 1)?;
            h = g.relu(h)?;
            if self.taps.contains(&i) {
                out.push(h);
            }
            if POOL_AFTER.contains(&i) && i < self.depth() {
                h = g.max_pool2(h)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ps: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ps >= 0.0 && self.lambda_ps.is_finite()) {
            return Err(Error::config(format!(
                "lambda_ps must be finite and >= 0, got {}",
                self.lambda_ps
            )));
        }
        Ok(())
    }
}

fn check_same_shape<R: Real>(g: &Graph<R>, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::config(format!("{what}: shape mismatch {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse_loss<R: Real>(g: &Graph<R>, pred: Var, target: Var) -> Result<Var> {
    check_same_shape(g, pred, target, "mse_loss")?;
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Mean squared feature difference over every tapped element. The target
/// branch is evaluated on a detached copy so gradients reach `pred` only.
pub fn perceptual_loss<R, F>(g: &Graph<R>, pred: Var, target: Var, fx: &F) -> Result<Var>
where
    R: Real,
    F: FeatureMap<R> + ?Sized,
{
    check_same_shape(g, pred, target, "perceptual_loss")?;
    let target_value = g.value(target).clone();
    let detached = g.constant(target_value);
    let fp = fx.features(g, pred)?;
    let ft = fx.features(g, detached)?;
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (a, b) in fp.into_iter().zip(ft) {
        count += g.value(a).len();
        let d = g.sub(a, b)?;
        let s = g.sum(g.mul(d, d)?)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::config("feature map returned no taps"))?;
    g.scale(total, R::lit(1.0 / count as f64))
}

/// The three scalars of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mse: Var,
    pub ps: Var,
    pub total: Var,
}

/// `mse + lambda_ps · perceptual`.
pub fn total_loss<R, F>(g: &Graph<R>, pred: Var, target: Var, fx: &F, w: LossWeights) -> Result<LossTerms>
where
    R: Real,
    F: FeatureMap<R> + ?Sized,
{
    w.validate()?;
    let mse = mse_loss(g, pred, target)?;
    let ps = perceptual_loss(g, pred, target, fx)?;
    let weighted = g.scale(ps, R::lit(w.lambda_ps))?;
    let total = g.add(mse, weighted)?;
    Ok(LossTerms { mse, ps, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng).unwrap()
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn mse_zero_and_constant_offset() {
        let g = Graph::new();
        let a = random_image(1, 8, 8);
        let b = a.map(|v| v + 0.1);
        let (va, vb) = (g.input(a.clone()), g.constant(b));
        assert_eq!(scalar(&g, mse_loss(&g, va, va).unwrap()), 0.0);
        assert!((scalar(&g, mse_loss(&g, va, vb).unwrap()) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_direct_sum() {
        let (a, b) = (random_image(2, 8, 6), random_image(3, 8, 6));
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
        let g = Graph::new();
        let l = mse_loss(&g, g.input(a), g.input(b)).unwrap();
        assert!((scalar(&g, l) - oracle).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let g = Graph::new();
        let a = g.input(random_image(1, 8, 8));
        let b = g.input(random_image(1, 8, 4));
        assert!(matches!(mse_loss(&g, a, b), Err(Error::Config(_))));
        let fx = FeatureExtractor::new(0);
        assert!(matches!(perceptual_loss(&g, a, b, &fx), Err(Error::Config(_))));
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let fx = FeatureExtractor::new(7);
        let (a, b) = (random_image(4, 8, 8), random_image(5, 8, 8));
        let g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        assert_eq!(scalar(&g, perceptual_loss(&g, va, va, &fx).unwrap()), 0.0);
        let ab = scalar(&g, perceptual_loss(&g, va, vb, &fx).unwrap());
        let ba = scalar(&g, perceptual_loss(&g, vb, va, &fx).unwrap());
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-15 * ab.abs().max(1.0));
    }

    #[test]
    fn extents_too_small_for_taps() {
        let fx = FeatureExtractor::<f64>::new(0);
        assert_eq!(fx.min_extent(), 2);
        let g = Graph::new();
        let a = g.input(random_image(1, 3, 4));
        assert!(matches!(fx.features(&g, a), Err(Error::Config(_))));
        let deep = FeatureExtractor::<f64>::with_taps(0, &[8]).unwrap();
        assert_eq!(deep.min_extent(), 4);
        assert!(FeatureExtractor::<f64>::with_taps(0, &[]).is_err());
        assert!(FeatureExtractor::<f64>::with_taps(0, &[9]).is_err());
    }

    #[test]
    fn extractor_is_deterministic() {
        let x = random_image(9, 8, 8);
        let run = || {
            let fx = FeatureExtractor::<f64>::new(11);
            let g = Graph::new();
            let xs = g.input(x.clone());
            fx.features(&g, xs)
                .unwrap()
                .into_iter()
                .map(|v| g.value(v).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_receives_no_gradient() {
        let fx = FeatureExtractor::new(3);
        let g = Graph::new();
        let p = g.input(random_image(1, 8, 8));
        let t = g.input(random_image(2, 8, 8));
        let l = perceptual_loss(&g, p, t, &fx).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(p).is_some());
        assert!(g.grad(t).is_none());
    }

    #[test]
    fn total_composition() {
        let fx = FeatureExtractor::new(5);
        let (a, b) = (random_image(6, 8, 8), random_image(7, 8, 8));
        let g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        let t = total_loss(&g, va, vb, &fx, LossWeights::default()).unwrap();
        let (m, p, all) = (scalar(&g, t.mse), scalar(&g, t.ps), scalar(&g, t.total));
        assert!((all - (m + 0.1 * p)).abs() < 1e-12);
        let t0 = total_loss(&g, va, vb, &fx, LossWeights { lambda_ps: 0.0 }).unwrap();
        assert_eq!(scalar(&g, t0.total), scalar(&g, t0.mse));
        let same = total_loss(&g, va, va, &fx, LossWeights::default()).unwrap();
        assert_eq!(scalar(&g, same.total), 0.0);
        assert!(total_loss(&g, va, vb, &fx, LossWeights { lambda_ps: -1.0 }).is_err());
    }

    #[test]
    fn weighted_sum_worked_example() {
        let g = Graph::<f64>::new();
        let m = g.input(Tensor::scalar(0.04));
        let p = g.input(Tensor::scalar(0.2));
        let t = g.add(m, g.scale(p, 0.1).unwrap()).unwrap();
        assert!((scalar(&g, t) - 0.06).abs() < 1e-15);
    }

    #[test]
    fn f32_extractor_runs() {
        let fx = FeatureExtractor::<f64>::new(1).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Tensor<f32> = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen::<f32>()).unwrap();
        let g = Graph::new();
        let xs = g.input(x);
        assert_eq!(fx.features(&g, xs).unwrap().len(), 2);
    }
}
