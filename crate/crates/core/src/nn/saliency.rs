use std::sync::Arc;

use mlab_tensor::{Scalar, Tape, Var};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{argmax, CnnModel, MaskMode, VitModel};

/// Non-negative per-pixel importance scores over an `H x W` image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} saliency values for a {height}x{width} plane",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// A model whose logits can be recorded on a tape for input gradients.
pub trait Differentiable<T: Scalar> {
    fn num_classes(&self) -> usize;

    fn image_size(&self) -> usize;

    /// Logits `[B, classes]` for images `[B, 3, H, W]`.
    fn logits_on_tape(&self, tape: &mut Tape<T>, images: Var) -> Result<Var>;
}

impl<T: Scalar> Differentiable<T> for CnnModel<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn image_size(&self) -> usize {
        self.config().image_size
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let w = self.bind(tape, false);
        self.forward_images(tape, &w, images)
    }
}

impl<T: Scalar> Differentiable<T> for VitModel<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn image_size(&self) -> usize {
        self.config().image_size
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let w = self.bind(tape, false);
        let batch = tape.shape(images)[0];
        let all: Vec<usize> = (0..self.grid().tokens()).collect();
        self.forward_images(tape, &w, images, &vec![all; batch], MaskMode::Compact)
    }
}

/// Absolute input gradient of the predicted-class logit, reduced over color
/// channels by max.
pub fn saliency_map<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    image: &Image,
) -> Result<SaliencyMap> {
    let (h, w) = (image.height(), image.width());
    let mut tape = Tape::new();
    let x = tape.param(Image::batch_tensor::<T>(&[image])?);
    let logits = model.logits_on_tape(&mut tape, x)?;
    let class = argmax(tape.value(logits).data());
    let picked = tape.gather(logits, &[1], Arc::from([class]))?;
    let target = tape.sum(picked)?;
    tape.backward(target)?;
    let grad = tape
        .grad(x)
        .ok_or(Error::Numerical("missing input gradient".into()))?;
    let plane = h * w;
    let values = (0..plane)
        .map(|p| {
            (0..Image::CHANNELS)
                .map(|c| grad[c * plane + p].as_f64().abs())
                .fold(0.0, f64::max)
        })
        .collect();
    SaliencyMap::new(h, w, values)
}
