//! The normalized U-Net: instance whitening on every skip connection,
//! channel normalization taps in the encoder with moment re-injection in the
//! matching decoder stage, and an SE-gated output block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::{
    channel_norm, MomentMaps, ReinjectionHead, ReinjectionMode, SeBlock, WhiteningConfig, WhiteningLayer, DEFAULT_ALPHA,
};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of resolutions; the input is downsampled `scales - 1` times.
    pub scales: usize,
    /// Width of the first scale; doubles at each deeper scale.
    pub base_channels: usize,
    pub se_reduction: usize,
    /// Instance whitening on skip connections.
    pub use_sn: bool,
    /// Channel normalization with decoder re-injection.
    pub use_cn: bool,
    pub whitening: WhiteningConfig,
    pub reinjection_mode: ReinjectionMode,
    /// Regularizer added to the channel-wise standard deviation.
    pub cn_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 4,
            base_channels: 16,
            se_reduction: 4,
            use_sn: true,
            use_cn: true,
            whitening: WhiteningConfig::default(),
            reinjection_mode: ReinjectionMode::TextForm,
            cn_alpha: DEFAULT_ALPHA,
        }
    }
}

impl ModelConfig {
    /// The plain U-Net ablation (no spatial or channel normalization).
    pub fn plain(mut self) -> Self {
        self.use_sn = false;
        self.use_cn = false;
        self
    }

    pub fn with_switches(mut self, use_sn: bool, use_cn: bool) -> Self {
        self.use_sn = use_sn;
        self.use_cn = use_cn;
        self
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.scales).map(|k| self.width(k)).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::config(format!("scales must be at least 2, got {}", self.scales)));
        }
        if self.scales > 8 {
            return Err(Error::config(format!("scales {} is unreasonably deep", self.scales)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        if self.se_reduction == 0 || self.base_channels % self.se_reduction != 0 {
            return Err(Error::config(format!(
                "SE reduction {} does not divide base width {}",
                self.se_reduction, self.base_channels
            )));
        }
        if !(self.cn_alpha > 0.0) {
            return Err(Error::config("cn_alpha must be positive"));
        }
        if self.use_sn {
            for k in 0..self.scales - 1 {
                self.whitening.validate(self.width(k))?;
            }
        }
        Ok(())
    }

    pub fn check_extents(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisor();
        if height % d != 0 || width % d != 0 {
            return Err(Error::config(format!(
                "input {height}×{width} is not divisible by {d} (scales = {})",
                self.scales
            )));
        }
        Ok(())
    }
}

/// A convolution with bias, stride and (possibly asymmetric) padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl Conv {
    fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_he_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout])?);
        let pad = kernel / 2;
        Ok(Conv {
            weight,
            bias,
            stride: 1,
            pad_lo: pad,
            pad_hi: pad,
        })
    }

    /// Stride-2 3×3 convolution that halves even extents.
    fn downsampler<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut conv = Conv::new(store, name, cin, cout, 3, rng)?;
        conv.stride = 2;
        conv.pad_lo = 1;
        conv.pad_hi = 0;
        Ok(conv)
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, p: &Bindings, x: Var) -> Result<Var> {
        g.conv2d_padded(
            x,
            p[self.weight],
            Some(p[self.bias]),
            self.stride,
            self.pad_lo,
            self.pad_hi,
        )
    }
}

/// Two 3×3 convolutions, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ConvBlock {
    fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ConvBlock {
            first: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, rng)?,
            second: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, rng)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &Graph<R>, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, p, h)?;
        g.relu(h)
    }
}

/// Decoder stage at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    /// Nearest ×2 upsampling followed by this 3×3 convolution.
    pub up: Conv,
    pub skip_whitening: Option<WhiteningLayer>,
    pub block: ConvBlock,
    pub reinjection: Option<ReinjectionHead>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    pub stem: ConvBlock,
    /// `encoder[k]` handles scale `k + 1`: a downsampler and a conv block.
    pub encoder: Vec<(Conv, ConvBlock)>,
    /// `decoder[k]` produces scale `k`.
    pub decoder: Vec<DecoderStage>,
    pub out_conv: Conv,
    pub se: SeBlock,
    pub head: Conv,
}

impl<R: Real> Model<R> {
    /// Deterministically initialized network: He-uniform kernels, zero
    /// biases, `γ = 1`, `β = 0`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = config.widths();

        let stem = ConvBlock::new(&mut params, "enc0", 3, w[0], &mut rng)?;
        let mut encoder = Vec::new();
        for k in 1..config.scales {
            let down = Conv::downsampler(&mut params, &format!("down{k}"), w[k - 1], w[k], &mut rng)?;
            let block = ConvBlock::new(&mut params, &format!("enc{k}"), w[k], w[k], &mut rng)?;
            encoder.push((down, block));
        }
        let mut decoder = Vec::new();
        for k in (0..config.scales - 1).rev() {
            let up = Conv::new(&mut params, &format!("up{k}"), w[k + 1], w[k], 3, &mut rng)?;
            let skip_whitening = if config.use_sn {
                Some(WhiteningLayer::new(
                    &mut params,
                    &format!("skip{k}"),
                    w[k],
                    config.whitening,
                )?)
            } else {
                None
            };
            let block = ConvBlock::new(&mut params, &format!("dec{k}"), 2 * w[k], w[k], &mut rng)?;
            let reinjection = if config.use_cn {
                Some(ReinjectionHead::new(
                    &mut params,
                    &format!("reinject{k}"),
                    w[k],
                    config.reinjection_mode,
                    &mut rng,
                )?)
            } else {
                None
            };
            decoder.push(DecoderStage {
                up,
                skip_whitening,
                block,
                reinjection,
            });
        }
        // Stored deepest-first during construction; index by scale instead.
        decoder.reverse();
        let out_conv = Conv::new(&mut params, "out.conv", w[0], w[0], 3, &mut rng)?;
        let se = SeBlock::new(&mut params, "out.se", w[0], config.se_reduction, &mut rng)?;
        let head = Conv::new(&mut params, "out.head", w[0], 3, 1, &mut rng)?;
        Ok(Model {
            config,
            params,
            stem,
            encoder,
            decoder,
            out_conv,
            se,
            head,
        })
    }

    /// Records the forward pass on `g` using already bound parameters.
    pub fn forward(&self, g: &Graph<R>, p: &Bindings, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let [_, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::config(format!("model input must be N×3×H×W, got {shape:?}"))),
        };
        if c != 3 {
            return Err(Error::config(format!("model input must have 3 channels, got {c}")));
        }
        self.config.check_extents(h, w)?;
        let last = self.config.scales - 1;

        let mut skips = Vec::with_capacity(last);
        let mut moments: Vec<MomentMaps> = Vec::with_capacity(last);
        let mut feat = self.stem.forward(g, p, x)?;
        for k in 0..=last {
            if k > 0 {
                let (down, block) = &self.encoder[k - 1];
                let d = down.forward(g, p, feat)?;
                let d = g.relu(d)?;
                feat = block.forward(g, p, d)?;
            }
            if k < last {
                if self.config.use_cn {
                    let (normed, m) = channel_norm(g, feat, self.config.cn_alpha)?;
                    feat = normed;
                    moments.push(m);
                }
                skips.push(feat);
            }
        }

        for k in (0..last).rev() {
            let stage = &self.decoder[k];
            let [_, _, sh, sw] = g.value(skips[k]).dims4()?;
            let up = g.resize_nearest(feat, sh, sw)?;
            let up = stage.up.forward(g, p, up)?;
            let up = g.relu(up)?;
            let skip = match &stage.skip_whitening {
                Some(layer) => layer.forward(g, p, skips[k])?,
                None => skips[k],
            };
            let joined = g.concat(&[skip, up], 1)?;
            feat = stage.block.forward(g, p, joined)?;
            if let Some(head) = &stage.reinjection {
                feat = head.forward(g, p, feat, &moments[k])?;
            }
        }

        let h = self.out_conv.forward(g, p, feat)?;
        let h = g.relu(h)?;
        let h = self.se.forward(g, p, h)?;
        let h = self.head.forward(g, p, h)?;
        g.sigmoid(h)
    }

    /// Inference on a tensor, without recording gradients for parameters.
    pub fn predict(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let xv = g.constant(x.clone());
        let out = self.forward(&g, &p, xv)?;
        let v = g.value(out).clone();
        Ok(v)
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            out_conv: self.out_conv.clone(),
            se: self.se.clone(),
            head: self.head.clone(),
        }
    }

    /// Rebuilds the architecture for `config` and installs `tensors`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<R>>) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        model.params.load_tensors(tensors)?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn whitening_layers(&self) -> usize {
        self.decoder.iter().filter(|d| d.skip_whitening.is_some()).count()
    }

    pub fn reinjection_heads(&self) -> usize {
        self.decoder.iter().filter(|d| d.reinjection.is_some()).count()
    }
}
