//! The two classifier architectures, gradient saliency and training.

mod cnn;
pub(crate) mod layers;
mod saliency;
mod train;
mod vit;

use mlab_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::MaskedInput;

pub use cnn::{
    CnnBlock, CnnBlockCore, CnnConfig, CnnHead, CnnModel, CnnShortcut, CnnStage, CnnStem,
    CnnWeights,
};
pub use saliency::{saliency_map, Differentiable, SaliencyMap};
pub use train::{augment_batch, train_model, MissingnessAugment, TrainParams};
pub use vit::{
    MaskMode, TokenGrid, TokenSet, VitBlock, VitConfig, VitHead, VitModel, VitStem, VitWeights,
    PAD_MASK_VALUE,
};

/// Images per forward pass when evaluating many inputs.
pub const EVAL_CHUNK: usize = 32;

/// What a removal routine needs to know about the consuming model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Vit(TokenGrid),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Cnn(CnnConfig),
    Vit(VitConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Cnn(c) => c.validate(),
            Self::Vit(c) => c.validate(),
        }
    }

    pub fn image_size(&self) -> usize {
        match self {
            Self::Cnn(c) => c.image_size,
            Self::Vit(c) => c.image_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Cnn(c) => c.num_classes,
            Self::Vit(c) => c.num_classes,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Cnn(_) => ModelKind::Cnn,
            Self::Vit(c) => ModelKind::Vit(c.grid()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<T: Scalar = f32> {
    Cnn(CnnModel<T>),
    Vit(VitModel<T>),
}

impl<T: Scalar> Network<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Cnn(c) => Self::Cnn(CnnModel::init(c.clone(), seed)?),
            ModelConfig::Vit(c) => Self::Vit(VitModel::init(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Self::Cnn(m) => ModelConfig::Cnn(m.config().clone()),
            Self::Vit(m) => ModelConfig::Vit(m.config().clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        match self {
            Self::Cnn(m) => Network::Cnn(m.cast()),
            Self::Vit(m) => Network::Vit(m.cast()),
        }
    }

    /// Every weight tensor with its dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            Self::Cnn(m) => m.weights.visit(&mut |name, t| out.push((name, t))),
            Self::Vit(m) => m.weights.visit(&mut |name, t| out.push((name, t))),
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        match self {
            Self::Cnn(m) => m.weights.visit_mut(&mut |_, t| out.push(t)),
            Self::Vit(m) => m.weights.visit_mut(&mut |_, t| out.push(t)),
        }
        out
    }

    /// Rebuilds a network from named tensors; names and shapes must match
    /// what `config` produces.
    pub fn from_named(config: &ModelConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut net = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != got {
            let missing = expected
                .iter()
                .zip(got.iter().map(Some).chain(std::iter::repeat(None)))
                .find(|(e, g)| Some(*e) != *g)
                .map_or_else(|| "extra tensors".to_string(), |(e, _)| e.0.clone());
            return Err(Error::Config(format!(
                "weights do not match configuration at {missing}"
            )));
        }
        for (slot, (_, t)) in net.tensors_mut().into_iter().zip(tensors.drain(..)) {
            *slot = t;
        }
        Ok(net)
    }
}

/// A trained classifier with an identifier used in result tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub id: String,
    pub network: Network<f32>,
}

/// Anything that maps prepared inputs to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn kind(&self) -> ModelKind;

    fn logits(&self, inputs: &[MaskedInput]) -> Result<Vec<Vec<f32>>>;

    fn predict(&self, inputs: &[MaskedInput]) -> Result<Vec<usize>> {
        Ok(self.logits(inputs)?.iter().map(|l| argmax(l)).collect())
    }
}

impl Model {
    pub fn new(id: impl Into<String>, network: Network<f32>) -> Self {
        Self {
            id: id.into(),
            network,
        }
    }

    pub fn init(id: impl Into<String>, config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(id, Network::init(config, seed)?))
    }

    pub fn config(&self) -> ModelConfig {
        self.network.config()
    }

    pub fn image_size(&self) -> usize {
        self.config().image_size()
    }

    /// Logits for plain images with nothing removed.
    pub fn logits_images(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let inputs: Vec<MaskedInput> = images.iter().cloned().map(MaskedInput::unmasked).collect();
        self.logits(&inputs)
    }

    fn logits_chunk(&self, inputs: &[MaskedInput]) -> Result<Vec<Vec<f32>>> {
        let images: Vec<&Image> = inputs.iter().map(|i| &i.image).collect();
        match &self.network {
            Network::Cnn(m) => {
                if inputs.iter().any(|i| !i.dropped_tokens.is_empty()) {
                    return Err(Error::Config(
                        "a convolutional network cannot drop tokens".into(),
                    ));
                }
                m.logits(&images)
            }
            Network::Vit(m) => {
                let grid = m.grid();
                let mut kept = Vec::with_capacity(inputs.len());
                for input in inputs {
                    if input.dropped_tokens.iter().any(|&t| t >= grid.tokens()) {
                        return Err(Error::InvalidParam("dropped token outside the grid".into()));
                    }
                    kept.push(grid.kept(&input.dropped_tokens));
                }
                let mut tape = Tape::new();
                let w = m.bind(&mut tape, false);
                let x = tape.constant(Image::batch_tensor::<f32>(&images)?);
                let out = m.forward_images(&mut tape, &w, x, &kept, MaskMode::Compact)?;
                let c = m.config().num_classes;
                Ok(tape
                    .take(out)
                    .data()
                    .chunks(c)
                    .map(<[f32]>::to_vec)
                    .collect())
            }
        }
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.config().num_classes()
    }

    fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    fn logits(&self, inputs: &[MaskedInput]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            out.extend(self.logits_chunk(chunk)?);
        }
        Ok(out)
    }
}

/// Index of the largest value, first on ties.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<T: Scalar> Differentiable<T> for Network<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes()
    }

    fn image_size(&self) -> usize {
        self.config().image_size()
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        match self {
            Self::Cnn(m) => m.logits_on_tape(tape, images),
            Self::Vit(m) => m.logits_on_tape(tape, images),
        }
    }
}

impl Differentiable<f32> for Model {
    fn num_classes(&self) -> usize {
        self.config().num_classes()
    }

    fn image_size(&self) -> usize {
        self.config().image_size()
    }

    fn logits_on_tape(&self, tape: &mut Tape<f32>, images: Var) -> Result<Var> {
        self.network.logits_on_tape(tape, images)
    }
}
