use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec;

/// Outcome of [`grad_check_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every coordinate of every input.
    pub max_rel_err: f64,
    /// Coordinates where no admissible step kept the stencil on the smooth
    /// piece of the function at the unperturbed point (a ReLU changed sign
    /// or a max-pool winner moved). Central differences are not a derivative
    /// oracle there.
    pub kink_crossings: usize,
}

/// Ridders' step ratio and tableau depth.
const STEP_RATIO: f64 = 1.4;
const TABLEAU: usize = 10;
/// Times the starting step may shrink while looking for a kink-free stencil.
const MAX_SHRINK: usize = 20;

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central finite differences, over every coordinate of every input.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `numeric` is the Richardson-extrapolated central difference of Ridders'
/// method, starting from step `eps`. Evaluations run through
/// [`exec::map_indexed`], so they fan out across threads when the
/// `parallel` feature is on.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    Ok(grad_check_report(f, inputs, eps)?.max_rel_err)
}

/// [`grad_check`] that also counts coordinates stuck on a kink.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!("grad_check eps {eps:e} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::config("grad_check needs a scalar-valued function"));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::numerical("grad_check", "function value is not finite"));
        }
        Ok((y, g.branch_signature()))
    };

    let (analytic, base) = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| t.map(|_| 0.0)))
            .collect::<Vec<_>>();
        (grads, g.branch_signature())
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    // `None` when the stencil at step `h` leaves the smooth piece.
    let central = |i: usize, j: usize, h: f64| -> Result<Option<f64>> {
        let mut shifted = inputs.to_vec();
        let x0 = inputs[i].data()[j];
        shifted[i].data_mut()[j] = x0 + h;
        let (plus, sp) = eval(&shifted)?;
        shifted[i].data_mut()[j] = x0 - h;
        let (minus, sm) = eval(&shifted)?;
        Ok((sp == base && sm == base).then(|| (plus - minus) / (2.0 * h)))
    };

    let results = exec::try_map_indexed(coords.len(), |k| -> Result<Option<f64>> {
        let (i, j) = coords[k];
        let mut h0 = eps;
        for _ in 0..=MAX_SHRINK {
            if let Some(numeric) = ridders(|h| central(i, j, h), h0)? {
                let a = analytic[i].data()[j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                return Ok(Some((a - numeric).abs() / denom));
            }
            h0 /= STEP_RATIO;
        }
        Ok(None)
    })?;
    Ok(GradCheckReport {
        max_rel_err: results.iter().flatten().copied().fold(0.0, f64::max),
        kink_crossings: results.iter().filter(|r| r.is_none()).count(),
    })
}

/// Ridders' extrapolation of `d(h) → f'` as `h → 0`. Returns `None` as soon
/// as `d` does.
fn ridders(mut d: impl FnMut(f64) -> Result<Option<f64>>, h0: f64) -> Result<Option<f64>> {
    let c2 = STEP_RATIO * STEP_RATIO;
    let mut table = [[0.0f64; TABLEAU]; TABLEAU];
    let Some(first) = d(h0)? else { return Ok(None) };
    table[0][0] = first;
    let (mut best, mut err) = (first, f64::INFINITY);
    let mut h = h0;
    for i in 1..TABLEAU {
        h /= STEP_RATIO;
        let Some(v) = d(h)? else { return Ok(None) };
        table[0][i] = v;
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok(Some(best))
}
