//! Residual convolutional network. It has no notion of missing regions, so
//! removal always happens in pixel space before it sees the image.

use mlab_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::{self, param_fields};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnStage {
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub image_size: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<CnnStage>,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        let stage = |width, stride| CnnStage { width, stride };
        Self {
            image_size: 64,
            stem_width: 16,
            stem_stride: 2,
            stages: vec![stage(16, 1), stage(32, 2), stage(64, 2), stage(64, 2)],
            num_classes: 8,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.stem_width == 0
            || self.stem_stride == 0
            || self.num_classes == 0
        {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.stages.iter().any(|s| s.width == 0 || s.stride == 0) {
            return Err(Error::Config(
                "stage widths and strides must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Receptive field in input pixels of one unit after the last stage.
    /// Every convolution is 3x3.
    pub fn receptive_field(&self) -> usize {
        let (mut field, mut jump) = (1, 1);
        let mut conv = |stride: usize| {
            field += 2 * jump;
            jump *= stride;
        };
        conv(self.stem_stride);
        for s in &self.stages {
            conv(s.stride);
            conv(1);
        }
        field
    }

    pub fn final_width(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnStem<P> {
    pub conv_w: P,
    pub norm_g: P,
    pub norm_b: P,
}
param_fields!(CnnStem {
    conv_w,
    norm_g,
    norm_b
});

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBlockCore<P> {
    pub conv1_w: P,
    pub norm1_g: P,
    pub norm1_b: P,
    pub conv2_w: P,
    pub norm2_g: P,
    pub norm2_b: P,
}
param_fields!(CnnBlockCore {
    conv1_w,
    norm1_g,
    norm1_b,
    conv2_w,
    norm2_g,
    norm2_b
});

/// 1x1 projection used when a block changes width or resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnShortcut<P> {
    pub proj_w: P,
    pub proj_g: P,
    pub proj_b: P,
}
param_fields!(CnnShortcut {
    proj_w,
    proj_g,
    proj_b
});

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBlock<P> {
    pub core: CnnBlockCore<P>,
    pub shortcut: Option<CnnShortcut<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnHead<P> {
    pub head_w: P,
    pub head_b: P,
}
param_fields!(CnnHead { head_w, head_b });

#[derive(Debug, Clone, PartialEq)]
pub struct CnnWeights<P> {
    pub stem: CnnStem<P>,
    pub blocks: Vec<CnnBlock<P>>,
    pub head: CnnHead<P>,
}

impl<P> CnnWeights<P> {
    pub(crate) fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> CnnWeights<Q> {
        CnnWeights {
            stem: self.stem.map("stem.", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let prefix = format!("blocks.{i}.");
                    CnnBlock {
                        core: b.core.map(&prefix, f),
                        shortcut: b.shortcut.as_ref().map(|s| s.map(&prefix, f)),
                    }
                })
                .collect(),
            head: self.head.map("head.", f),
        }
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.stem.visit("stem.", f);
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}.");
            b.core.visit(&prefix, f);
            if let Some(s) = &b.shortcut {
                s.visit(&prefix, f);
            }
        }
        self.head.visit("head.", f);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        self.stem.visit_mut("stem.", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("blocks.{i}.");
            b.core.visit_mut(&prefix, f);
            if let Some(s) = &mut b.shortcut {
                s.visit_mut(&prefix, f);
            }
        }
        self.head.visit_mut("head.", f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T: Scalar = f32> {
    config: CnnConfig,
    pub weights: CnnWeights<Tensor<T>>,
}

impl<T: Scalar> CnnModel<T> {
    pub fn init(config: CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let w0 = config.stem_width;
        let stem = CnnStem {
            conv_w: layers::conv_kernel(&mut rng, w0, Image::CHANNELS, 3),
            norm_g: Tensor::ones(&[w0]),
            norm_b: Tensor::zeros(&[w0]),
        };
        let mut blocks = Vec::with_capacity(config.stages.len());
        let mut inp = w0;
        for stage in &config.stages {
            let out = stage.width;
            let core = CnnBlockCore {
                conv1_w: layers::conv_kernel(&mut rng, out, inp, 3),
                norm1_g: Tensor::ones(&[out]),
                norm1_b: Tensor::zeros(&[out]),
                conv2_w: layers::conv_kernel(&mut rng, out, out, 3),
                norm2_g: Tensor::ones(&[out]),
                norm2_b: Tensor::zeros(&[out]),
            };
            let shortcut = (inp != out || stage.stride != 1).then(|| CnnShortcut {
                proj_w: layers::conv_kernel(&mut rng, out, inp, 1),
                proj_g: Tensor::ones(&[out]),
                proj_b: Tensor::zeros(&[out]),
            });
            blocks.push(CnnBlock { core, shortcut });
            inp = out;
        }
        let head = CnnHead {
            head_w: layers::dense(&mut rng, inp, config.num_classes),
            head_b: Tensor::zeros(&[config.num_classes]),
        };
        Ok(Self {
            config,
            weights: CnnWeights { stem, blocks, head },
        })
    }

    pub fn from_weights(config: CnnConfig, weights: CnnWeights<Tensor<T>>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        let mut expected = Vec::new();
        reference
            .weights
            .visit(&mut |name, t| expected.push((name, t.shape().to_vec())));
        let mut got = Vec::new();
        weights.visit(&mut |name, t| got.push((name, t.shape().to_vec())));
        if expected != got {
            return Err(Error::Config(
                "weights do not match the network configuration".into(),
            ));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn cast<U: Scalar>(&self) -> CnnModel<U> {
        CnnModel {
            config: self.config.clone(),
            weights: self.weights.map(&mut |_, t| t.cast()),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> CnnWeights<Var> {
        self.weights.map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Logits `[B, classes]` for `[B, 3, H, W]` images.
    pub fn forward_images(
        &self,
        tape: &mut Tape<T>,
        w: &CnnWeights<Var>,
        images: Var,
    ) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != Image::CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::Dimension(format!(
                "network expects [B, 3, {s}, {s}] input, got {shape:?}"
            )));
        }
        let x = tape.conv2d(images, w.stem.conv_w, self.config.stem_stride, 1)?;
        let x = layers::sample_norm(tape, x, w.stem.norm_g, w.stem.norm_b)?;
        let mut x = tape.relu(x)?;
        for (block, stage) in w.blocks.iter().zip(&self.config.stages) {
            let c = &block.core;
            let y = tape.conv2d(x, c.conv1_w, stage.stride, 1)?;
            let y = layers::sample_norm(tape, y, c.norm1_g, c.norm1_b)?;
            let y = tape.relu(y)?;
            let y = tape.conv2d(y, c.conv2_w, 1, 1)?;
            let y = layers::sample_norm(tape, y, c.norm2_g, c.norm2_b)?;
            let skip = match &block.shortcut {
                Some(p) => {
                    let z = tape.conv2d(x, p.proj_w, stage.stride, 0)?;
                    layers::sample_norm(tape, z, p.proj_g, p.proj_b)?
                }
                None => x,
            };
            let sum = tape.add(y, skip)?;
            x = tape.relu(sum)?;
        }
        let fs = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[fs[0], fs[1], fs[2] * fs[3]])?;
        let pooled = tape.mean_last(flat)?;
        layers::linear(tape, pooled, w.head.head_w, w.head.head_b)
    }

    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let x = tape.constant(Image::batch_tensor::<T>(images)?);
        let out = self.forward_images(&mut tape, &w, x)?;
        let c = self.config.num_classes;
        Ok(tape.take(out).data().chunks(c).map(<[T]>::to_vec).collect())
    }
}
