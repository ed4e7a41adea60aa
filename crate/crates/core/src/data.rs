//! Synthetic shape-and-color dataset with a three-level class taxonomy.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{Taxonomy, TaxonomyNode};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Ring,
    Square,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFamily {
    Red,
    Blue,
}

impl ColorFamily {
    fn base(self) -> [f32; 3] {
        match self {
            ColorFamily::Red => [0.85, 0.15, 0.15],
            ColorFamily::Blue => [0.15, 0.25, 0.85],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGenerator {
    pub name: String,
    pub shape: ShapeKind,
    pub color: ColorFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Peak amplitude of the smooth background pattern.
    pub texture_amplitude: f32,
    /// Half-width of the uniform per-pixel noise.
    pub pixel_noise: f32,
    pub taxonomy: TaxonomyNode,
    /// One generator per taxonomy leaf, in leaf order.
    pub classes: Vec<ClassGenerator>,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        let shapes = [
            (
                "curved",
                [("disc", ShapeKind::Disc), ("ring", ShapeKind::Ring)],
            ),
            (
                "angular",
                [("square", ShapeKind::Square), ("cross", ShapeKind::Cross)],
            ),
        ];
        let colors = [("red", ColorFamily::Red), ("blue", ColorFamily::Blue)];
        let mut classes = Vec::new();
        let mut families = Vec::new();
        for (family, members) in shapes {
            let mut shape_nodes = Vec::new();
            for (shape_name, shape) in members {
                let mut leaves = Vec::new();
                for (color_name, color) in colors {
                    let name = format!("{color_name}_{shape_name}");
                    leaves.push(TaxonomyNode::leaf(&name));
                    classes.push(ClassGenerator { name, shape, color });
                }
                shape_nodes.push(TaxonomyNode::branch(shape_name, leaves));
            }
            families.push(TaxonomyNode::branch(family, shape_nodes));
        }
        Self {
            image_size: 64,
            n_train: 2000,
            n_test: 1000,
            seed: 0,
            texture_amplitude: 0.08,
            pixel_noise: 0.04,
            taxonomy: TaxonomyNode::branch("shape", families),
            classes,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<Taxonomy> {
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        let tax = Taxonomy::new(self.taxonomy.clone())?;
        let names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        if names != tax.class_names() {
            return Err(Error::Config(format!(
                "class generators {names:?} do not match taxonomy leaves {:?}",
                tax.class_names()
            )));
        }
        Ok(tax)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub train: Split,
    pub test: Split,
    /// Per-channel mean of the training images.
    pub channel_means: [f32; 3],
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.taxonomy.num_classes()
    }
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Generates both splits. Example `i` of a split has label `i mod C` and is
/// drawn from its own stream, so output does not depend on thread count.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    let taxonomy = spec.validate()?;
    let split = |stream: u64, n: usize| -> Split {
        let base = seed::derive(spec.seed, stream);
        let (images, labels) = (0..n)
            .into_par_iter()
            .map(|i| {
                let label = i % spec.classes.len();
                (render(spec, &spec.classes[label], base, i as u64), label)
            })
            .unzip();
        Split { images, labels }
    };
    let train = split(TRAIN_STREAM, spec.n_train);
    let test = split(TEST_STREAM, spec.n_test);
    let channel_means = channel_means(&train.images);
    Ok(Dataset {
        taxonomy,
        train,
        test,
        channel_means,
    })
}

/// Per-channel mean over all pixels of all images; zeros for no images.
pub fn channel_means(images: &[Image]) -> [f32; 3] {
    let mut sums = [0f64; 3];
    let mut count = 0usize;
    for image in images {
        let plane = image.pixels();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += image.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sums.map(|s| (s / count as f64) as f32)
}

fn inside(shape: ShapeKind, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        ShapeKind::Disc => dx * dx + dy * dy <= r * r,
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Cross => {
            let arm = 0.3 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Snaps to the nearest 8-bit level so images survive a pixmap round trip.
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(spec: &SyntheticDatasetSpec, class: &ClassGenerator, stream: u64, index: u64) -> Image {
    let mut rng = seed::rng_for(stream, index);
    let s = spec.image_size;
    let sf = s as f32;

    let gray: f32 = rng.gen_range(0.3..0.6);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
    let waves: [(f32, f32, f32, f32); 2] = std::array::from_fn(|_| {
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let freq = rng.gen_range(1.0..4.0) * std::f32::consts::TAU / sf;
        (
            angle.cos() * freq,
            angle.sin() * freq,
            rng.gen_range(0.0..std::f32::consts::TAU),
            rng.gen_range(0.3..1.0),
        )
    });

    let radius = rng.gen_range(0.18..0.3) * sf;
    let margin = radius + 2.0;
    let cx = rng.gen_range(margin..sf - margin);
    let cy = rng.gen_range(margin..sf - margin);
    let base = class.color.base();
    let color: [f32; 3] = std::array::from_fn(|c| base[c] + rng.gen_range(-0.1..0.1));

    let mut image = Image::filled(s, s, [0.0; 3]);
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let rgb = if inside(class.shape, fx - cx, fy - cy, radius) {
                let shade = rng.gen_range(-0.03..0.03);
                color.map(|v| v + shade)
            } else {
                let pattern: f32 = waves
                    .iter()
                    .map(|&(kx, ky, phase, w)| w * (kx * fx + ky * fy + phase).sin())
                    .sum();
                let level = gray + spec.texture_amplitude * pattern / 2.0;
                std::array::from_fn(|c| {
                    level + tint[c] + rng.gen_range(-spec.pixel_noise..=spec.pixel_noise)
                })
            };
            image.set_rgb(y * s + x, rgb.map(quantize));
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            image_size: 32,
            n_train: 16,
            n_test: 8,
            ..SyntheticDatasetSpec::default()
        }
    }

    #[test]
    fn default_taxonomy_has_eight_classes() {
        let tax = SyntheticDatasetSpec::default().validate().unwrap();
        assert_eq!(tax.num_classes(), 8);
        let red_disc = tax.class_index("red_disc").unwrap();
        let blue_disc = tax.class_index("blue_disc").unwrap();
        let red_ring = tax.class_index("red_ring").unwrap();
        let red_cross = tax.class_index("red_cross").unwrap();
        assert!((tax.wu_palmer(red_disc, blue_disc).unwrap() - 0.75).abs() < 1e-12);
        assert!((tax.wu_palmer(red_disc, red_ring).unwrap() - 0.5).abs() < 1e-12);
        assert!((tax.wu_palmer(red_disc, red_cross).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(&tiny()).unwrap();
        let b = generate(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.labels, (0..16).map(|i| i % 8).collect::<Vec<_>>());
        assert_eq!(a.test.len(), 8);
        assert!(a
            .train
            .images
            .iter()
            .all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a.train.images[0], a.test.images[0]);
    }

    #[test]
    fn empty_train_split_is_valid() {
        let d = generate(&SyntheticDatasetSpec {
            n_train: 0,
            ..tiny()
        })
        .unwrap();
        assert!(d.train.is_empty());
        assert_eq!(d.channel_means, [0.0; 3]);
    }

    #[test]
    fn mismatched_generators_are_rejected() {
        let mut spec = tiny();
        spec.classes.pop();
        assert!(spec.validate().is_err());
    }
}
