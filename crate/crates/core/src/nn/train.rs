use mlab_tensor::{Adam, AdamConfig, Tape};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::{
    apply_approximation, removal_count, MaskedInput, MissingnessSpec, RegionPartition,
};
use crate::nn::{MaskMode, Model, ModelConfig, ModelKind, Network};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in optimizer steps; cosine decay afterwards.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

impl TrainParams {
    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

/// Random region removal applied to every training image at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessAugment {
    pub fraction: f64,
    /// Side of the square grid cells that are removed.
    pub cell_size: usize,
}

/// Removes `ceil(fraction * R)` uniformly chosen grid cells from each
/// image: blacked out for a CNN, token-dropped for a transformer.
pub fn augment_batch(
    kind: &ModelKind,
    images: &[&Image],
    augment: &MissingnessAugment,
    rng: &mut impl Rng,
) -> Result<Vec<MaskedInput>> {
    if !(0.0..=1.0).contains(&augment.fraction) {
        return Err(Error::InvalidParam(format!(
            "augment fraction {} outside [0,1]",
            augment.fraction
        )));
    }
    let black = MissingnessSpec::black();
    let mut out = Vec::with_capacity(images.len());
    for image in images {
        let partition = RegionPartition::grid(
            image.height(),
            image.width(),
            augment.cell_size,
            augment.cell_size,
        )?;
        let count = removal_count(augment.fraction, partition.len());
        let mut removed = index::sample(rng, partition.len(), count).into_vec();
        removed.sort_unstable();
        out.push(match kind {
            ModelKind::Cnn => {
                MaskedInput::unmasked(apply_approximation(image, &partition, &removed, &black)?)
            }
            ModelKind::Vit(grid) => MaskedInput {
                image: (*image).clone(),
                dropped_tokens: grid.covering_tokens(&partition, &removed)?,
            },
        });
    }
    Ok(out)
}

/// Trains a freshly initialized network with Adam on cross-entropy.
pub fn train_model(
    id: impl Into<String>,
    config: &ModelConfig,
    images: &[Image],
    labels: &[usize],
    params: &TrainParams,
    augment: Option<&MissingnessAugment>,
) -> Result<Model> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes()) {
        return Err(Error::UnknownClass(bad));
    }
    if params.batch_size == 0 {
        return Err(Error::InvalidParam("batch size must be positive".into()));
    }
    let mut network = Network::<f32>::init(config, params.seed)?;
    let kind = config.kind();
    let mut rng = seed::rng(seed::derive(params.seed, 1));
    let steps_per_epoch = images.len().div_ceil(params.batch_size);
    let total = params.epochs * steps_per_epoch;
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            let batch_images: Vec<&Image> = batch.iter().map(|&i| &images[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let inputs = match augment {
                Some(a) => augment_batch(&kind, &batch_images, a, &mut rng)?,
                None => batch_images
                    .iter()
                    .map(|&i| MaskedInput::unmasked(i.clone()))
                    .collect(),
            };
            let mut tape = Tape::new();
            let x = {
                let refs: Vec<&Image> = inputs.iter().map(|i| &i.image).collect();
                tape.constant(Image::batch_tensor::<f32>(&refs)?)
            };
            let mut bound = Vec::new();
            let logits = match &network {
                Network::Cnn(m) => {
                    let w = m.bind(&mut tape, true);
                    w.visit(&mut |_, v| bound.push(*v));
                    m.forward_images(&mut tape, &w, x)?
                }
                Network::Vit(m) => {
                    let w = m.bind(&mut tape, true);
                    w.visit(&mut |_, v| bound.push(*v));
                    let grid = m.grid();
                    let kept: Vec<Vec<usize>> = inputs
                        .iter()
                        .map(|i| grid.kept(&i.dropped_tokens))
                        .collect();
                    m.forward_images(&mut tape, &w, x, &kept, MaskMode::Compact)?
                }
            };
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: value as f64,
                });
            }
            tape.backward(loss)?;
            let mut tensors = network.tensors_mut();
            for (t, v) in tensors.iter_mut().zip(&bound) {
                let grad = tape
                    .grad(*v)
                    .ok_or(Error::Numerical("missing parameter gradient".into()))?;
                t.set_grad(grad.to_vec())?;
            }
            adam.config.lr = params.lr_at(step, total);
            adam.step(&mut tensors)?;
            for t in tensors.iter_mut() {
                t.clear_grad();
            }
            step += 1;
        }
    }
    Ok(Model::new(id, network))
}
