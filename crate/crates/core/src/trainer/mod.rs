//! Adam, the patch-sampling training loop and checkpoints.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, MAGIC, VERSION};

use crate::data::{stack_images, ImagePair};
use crate::error::{Error, Result};
use crate::loss::{total_loss, FeatureExtractor, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Square crop side.
    pub patch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (the final step always saves).
    pub checkpoint_every: Option<usize>,
    pub lambda_ps: f64,
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 1,
            patch: 128,
            steps: 5000,
            seed: 42,
            checkpoint_every: None,
            lambda_ps: 0.1,
            extractor_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.patch == 0 || self.steps == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::config(
                "batch_size, patch, steps and checkpoint_every must be positive",
            ));
        }
        let d = model.divisor();
        if self.patch % d != 0 {
            return Err(Error::config(format!(
                "patch {} is not divisible by {d} (2^(scales - 1))",
                self.patch
            )));
        }
        LossWeights {
            lambda_ps: self.lambda_ps,
        }
        .validate()
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mse: f32,
    pub ps: f32,
    pub total: f32,
}

pub const LOG_HEADER: &str = "step,loss_mse,loss_ps,loss_all";

impl StepRecord {
    pub fn line(&self) -> String {
        format!("{},{},{},{}", self.step, self.mse, self.ps, self.total)
    }
}

/// Seeded epoch shuffling and uniform crops.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Sampler {
            rng,
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Stateful training driver; [`train`] wraps it with logging and checkpoints.
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    extractor: FeatureExtractor<f32>,
    data: &'a [ImagePair],
    sampler: Sampler,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, data: &'a [ImagePair], config: TrainConfig) -> Result<Self> {
        config.validate(&model.config)?;
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if let Some(p) = data
            .iter()
            .find(|p| p.raw.height() < config.patch || p.raw.width() < config.patch)
        {
            return Err(Error::config(format!(
                "patch {} larger than a {}×{} training image",
                config.patch,
                p.raw.height(),
                p.raw.width()
            )));
        }
        let extractor = FeatureExtractor::<f64>::new(config.extractor_seed).cast::<f32>();
        extractor.check_extents(config.patch, config.patch)?;
        let adam = AdamState::new(AdamConfig::default().with_lr(config.lr), model.params.tensors());
        Ok(Trainer {
            model,
            adam,
            sampler: Sampler::new(data.len(), config.seed),
            config,
            extractor,
            data,
            step: 0,
        })
    }

    /// Picks the next batch of crops, in sampler order.
    fn batch(&mut self) -> Result<(crate::Tensor<f32>, crate::Tensor<f32>)> {
        let p = self.config.patch;
        let mut raws = Vec::with_capacity(self.config.batch_size);
        let mut refs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pair = &self.data[self.sampler.next_index()];
            let top = self.sampler.rng.gen_range(0..=pair.raw.height() - p);
            let left = self.sampler.rng.gen_range(0..=pair.raw.width() - p);
            raws.push(pair.raw.crop(top, left, p, p)?);
            refs.push(pair.reference.crop(top, left, p, p)?);
        }
        let raw_refs: Vec<_> = raws.iter().collect();
        let ref_refs: Vec<_> = refs.iter().collect();
        Ok((stack_images(&raw_refs)?, stack_images(&ref_refs)?))
    }

    /// One forward/backward pass and Adam update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (x, y) = self.batch()?;
        let g = Graph::new();
        let p = self.model.params.bind(&g);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let pred = self.model.forward(&g, &p, xv)?;
        let w = LossWeights {
            lambda_ps: self.config.lambda_ps,
        };
        let terms = total_loss(&g, pred, yv, &self.extractor, w)?;
        let record = StepRecord {
            step: self.step + 1,
            mse: g.value(terms.mse).item(),
            ps: g.value(terms.ps).item(),
            total: g.value(terms.total).item(),
        };
        if !(record.total.is_finite() && record.mse.is_finite() && record.ps.is_finite()) {
            return Err(Error::numerical(
                "train",
                format!("non-finite loss at step {}", record.step),
            ));
        }
        g.backward(terms.total)?;
        let grads = p.grads(&g, &self.model.params);
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam)?;
        self.step += 1;
        Ok(record)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            adam: self.adam.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
}

/// Runs `config.steps` steps, writing one log line per step to `log` and
/// checkpoints to `checkpoint_path`. On failure the last checkpoint written
/// stays in place.
pub fn train(
    model: Model<f32>,
    data: &[ImagePair],
    config: TrainConfig,
    checkpoint_path: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let log_err = |e: std::io::Error| Error::io("<training log>", e);
    let mut trainer = Trainer::new(model, data, config)?;
    writeln!(log, "{LOG_HEADER}").map_err(log_err)?;
    let steps = trainer.config.steps;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let rec = trainer.step()?;
        writeln!(log, "{}", rec.line()).map_err(log_err)?;
        records.push(rec);
        let done = trainer.steps_done();
        let due = trainer.config.checkpoint_every.is_some_and(|k| done % k == 0) || done == steps;
        if let (Some(path), true) = (checkpoint_path, due) {
            log.flush().map_err(log_err)?;
            trainer.checkpoint().save(path)?;
        }
    }
    log.flush().map_err(log_err)?;
    Ok(TrainOutcome {
        records,
        checkpoint: trainer.checkpoint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, synth_degrade, WaterType};

    fn tiny_data(n: usize, size: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let reference = generate_scene(size, size, i as u64).unwrap();
                let raw = synth_degrade(&reference, &WaterType::coastal_green(), 1.5, i as u64).unwrap();
                ImagePair { raw, reference }
            })
            .collect()
    }

    fn tiny_config() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            scales: 2,
            base_channels: 4,
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            patch: 8,
            steps: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (m, t)
    }

    #[test]
    fn sampler_visits_every_item_each_epoch() {
        let mut s = Sampler::new(5, 3);
        let mut seen: Vec<usize> = (0..5).map(|_| s.next_index()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn same_seed_same_log() {
        let data = tiny_data(3, 12);
        let (m, t) = tiny_config();
        let run = || {
            let mut log = Vec::new();
            let model = Model::build(m.clone(), t.seed).unwrap();
            let out = train(model, &data, t.clone(), None, &mut log).unwrap();
            (log, out.checkpoint.to_bytes().unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let text = String::from_utf8(a.0).unwrap();
        assert_eq!(text.lines().next(), Some(LOG_HEADER));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let data = tiny_data(1, 8);
        let (m, t) = tiny_config();
        let model = Model::<f32>::build(m, 0).unwrap();
        let bad_patch = TrainConfig { patch: 7, ..t.clone() };
        assert!(Trainer::new(model.clone(), &data, bad_patch).is_err());
        let too_big = TrainConfig { patch: 16, ..t.clone() };
        assert!(Trainer::new(model.clone(), &data, too_big).is_err());
        assert!(Trainer::new(model, &[], t).is_err());
    }

    #[test]
    fn checkpoints_written_at_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.scn");
        let data = tiny_data(2, 8);
        let (m, t) = tiny_config();
        let t = TrainConfig {
            checkpoint_every: Some(2),
            ..t
        };
        let out = train(Model::build(m, 1).unwrap(), &data, t, Some(&path), &mut Vec::new()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        assert_eq!(loaded.adam.t, 4);
    }
}
