use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Squeeze-and-excitation: `x ⊙ sigmoid(w2 · relu(w1 · avgpool(x)))`.
///
/// `w1` is `[C/r, C]` and `w2` is `[C, C/r]`; there are no biases.
pub fn se_block<R: Real>(g: &Graph<R>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let [n, c, h, w] = match g.shape(x)[..] {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(Error::config(format!("se_block expects N×C×H×W, got {s:?}"))),
    };
    let (s1, s2) = (g.shape(w1), g.shape(w2));
    let reduced = match (&s1[..], &s2[..]) {
        (&[r1, c1], &[c2, r2]) if c1 == c && c2 == c && r1 == r2 => r1,
        _ => {
            return Err(Error::config(format!(
                "se_block weights {s1:?}/{s2:?} do not fit {c} channels"
            )))
        }
    };
    debug_assert!(reduced > 0);
    let flat = g.reshape(x, &[n, c, h * w])?;
    let pooled = g.mean_axis(flat, 2)?;
    let pooled = g.reshape(pooled, &[n, c])?;
    let w1t = g.transpose(w1)?;
    let hidden = g.matmul(pooled, w1t)?;
    let hidden = g.relu(hidden)?;
    let w2t = g.transpose(w2)?;
    let logits = g.matmul(hidden, w2t)?;
    let gate = g.sigmoid(logits)?;
    let gate = g.reshape(gate, &[n, c, 1])?;
    let gate = g.broadcast_axis(gate, 2, h * w)?;
    let gate = g.reshape(gate, &[n, c, h, w])?;
    let out = g.mul(x, gate)?;
    Ok(g.label(out, "se_block"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock {
    pub squeeze: ParamId,
    pub excite: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let squeeze = store.add_he_uniform(format!("{prefix}.squeeze"), &[hidden, channels], rng)?;
        let excite = store.add_he_uniform(format!("{prefix}.excite"), &[channels, hidden], rng)?;
        Ok(SeBlock {
            squeeze,
            excite,
            channels,
            reduction,
        })
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, params: &Bindings, x: Var) -> Result<Var> {
        se_block(g, x, params[self.squeeze], params[self.excite])
    }
}
