use mlab_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image with channel values in `[0, 1]`, stored channel-major
/// (`[3, height, width]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; Self::CHANNELS * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn rgb(&self, pixel: usize) -> [f32; 3] {
        let plane = self.pixels();
        [
            self.data[pixel],
            self.data[plane + pixel],
            self.data[2 * plane + pixel],
        ]
    }

    pub fn set_rgb(&mut self, pixel: usize, rgb: [f32; 3]) {
        let plane = self.pixels();
        self.data[pixel] = rgb[0];
        self.data[plane + pixel] = rgb[1];
        self.data[2 * plane + pixel] = rgb[2];
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        Tensor::from_vec(&[Self::CHANNELS, self.height, self.width], data)
            .expect("image layout is consistent")
    }

    /// Stacks equally sized images into a `[B, 3, H, W]` tensor.
    pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * Self::CHANNELS * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(Error::Dimension(format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    im.height, im.width
                )));
            }
            data.extend(im.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(Tensor::from_vec(
            &[images.len(), Self::CHANNELS, h, w],
            data,
        )?)
    }
}
