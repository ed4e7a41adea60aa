use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::RegionPartition;
use crate::seed;

pub const DEFAULT_BLUR_KERNEL: usize = 21;
pub const DEFAULT_BLUR_SIGMA: f32 = 10.0;

/// How removed regions are filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingnessKind {
    Black,
    MeanColor {
        rgb: [f32; 3],
    },
    RandomColorPerImage,
    RandomColorPerPixel,
    Blur {
        kernel_size: usize,
        sigma: f32,
    },
    /// Removal by dropping transformer tokens; handled model-side.
    DropTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    #[serde(flatten)]
    pub kind: MissingnessKind,
    #[serde(default)]
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn new(kind: MissingnessKind) -> Self {
        Self { kind, seed: 0 }
    }

    pub fn black() -> Self {
        Self::new(MissingnessKind::Black)
    }

    pub fn mean_color(rgb: [f32; 3]) -> Self {
        Self::new(MissingnessKind::MeanColor { rgb })
    }

    pub fn blur() -> Self {
        Self::new(MissingnessKind::Blur {
            kernel_size: DEFAULT_BLUR_KERNEL,
            sigma: DEFAULT_BLUR_SIGMA,
        })
    }

    pub fn drop_tokens() -> Self {
        Self::new(MissingnessKind::DropTokens)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_drop_tokens(&self) -> bool {
        matches!(self.kind, MissingnessKind::DropTokens)
    }

    /// The spec with its seed replaced by the stream for one image.
    pub fn for_image(&self, index: usize) -> Self {
        Self {
            kind: self.kind.clone(),
            seed: seed::derive(self.seed, index as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            MissingnessKind::MeanColor { rgb } if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) => {
                Err(Error::InvalidSpec(format!(
                    "mean color {rgb:?} outside [0,1]"
                )))
            }
            MissingnessKind::Blur { kernel_size, sigma }
                if kernel_size % 2 == 0 || *sigma <= 0.0 =>
            {
                Err(Error::InvalidSpec(format!(
                    "blur needs an odd kernel and sigma > 0, got {kernel_size}/{sigma}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            MissingnessKind::Black => "black".into(),
            MissingnessKind::MeanColor { rgb } => {
                format!("mean_color({},{},{})", rgb[0], rgb[1], rgb[2])
            }
            MissingnessKind::RandomColorPerImage => "random_color_image".into(),
            MissingnessKind::RandomColorPerPixel => "random_color_pixel".into(),
            MissingnessKind::Blur { kernel_size, sigma } => format!("blur({kernel_size},{sigma})"),
            MissingnessKind::DropTokens => "drop_tokens".into(),
        }
    }
}

/// Replaces the pixels of the `removed` regions according to `spec`;
/// every other pixel is copied unchanged.
pub fn apply_approximation(
    image: &Image,
    partition: &RegionPartition,
    removed: &[usize],
    spec: &MissingnessSpec,
) -> Result<Image> {
    if (partition.height(), partition.width()) != (image.height(), image.width()) {
        return Err(Error::Dimension(format!(
            "partition {}x{} for image {}x{}",
            partition.height(),
            partition.width(),
            image.height(),
            image.width()
        )));
    }
    let mask = partition.mask(removed)?;
    apply_mask(image, &mask, spec)
}

/// Pixel-mask form of [`apply_approximation`].
pub fn apply_mask(image: &Image, mask: &[bool], spec: &MissingnessSpec) -> Result<Image> {
    spec.validate()?;
    if mask.len() != image.pixels() {
        return Err(Error::Dimension(format!(
            "mask of {} pixels for {} pixel image",
            mask.len(),
            image.pixels()
        )));
    }
    let mut out = image.clone();
    if !mask.iter().any(|&m| m) {
        return Ok(out);
    }
    let mut rng = seed::rng(spec.seed);
    match &spec.kind {
        MissingnessKind::DropTokens => {
            return Err(Error::InvalidSpec(
                "drop-tokens removal happens inside the model, not in pixel space".into(),
            ))
        }
        MissingnessKind::Black => fill(&mut out, mask, |_| [0.0; 3]),
        MissingnessKind::MeanColor { rgb } => fill(&mut out, mask, |_| *rgb),
        MissingnessKind::RandomColorPerImage => {
            let rgb = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
            fill(&mut out, mask, |_| rgb)
        }
        MissingnessKind::RandomColorPerPixel => fill(&mut out, mask, |_| {
            [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
        }),
        MissingnessKind::Blur { kernel_size, sigma } => {
            let blurred = gaussian_blur(image, *kernel_size, *sigma);
            fill(&mut out, mask, |p| blurred.rgb(p))
        }
    }
    Ok(out)
}

fn fill(image: &mut Image, mask: &[bool], mut color: impl FnMut(usize) -> [f32; 3]) {
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let rgb = color(p);
        image.set_rgb(p, rgb);
    }
}

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f64> {
    let r = (size / 2) as f64;
    let s = sigma as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with replicate padding. Accumulates in double
/// precision so a constant image is reproduced exactly.
pub fn gaussian_blur(image: &Image, kernel_size: usize, sigma: f32) -> Image {
    let kernel = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = image.clone();
    let mut rows = vec![0f64; h * w];
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        k * image.get(c, y, clamp(x as isize + i as isize - r, w)) as f64
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| k * rows[clamp(y as isize + i as isize - r, h) * w + x])
                    .sum();
                out.set(c, y, x, v as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = seed::rng(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn empty_removal_is_identity() {
        let im = noise_image(1, 16, 16);
        let p = RegionPartition::grid(16, 16, 4, 4).unwrap();
        for spec in [
            MissingnessSpec::black(),
            MissingnessSpec::blur(),
            MissingnessSpec::new(MissingnessKind::RandomColorPerPixel),
        ] {
            assert_eq!(apply_approximation(&im, &p, &[], &spec).unwrap(), im);
        }
    }

    #[test]
    fn black_over_everything_is_zero() {
        let im = noise_image(2, 8, 8);
        let p = RegionPartition::grid(8, 8, 8, 8).unwrap();
        let out = apply_approximation(&im, &p, &[0], &MissingnessSpec::black()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_preserves_constant_images() {
        let im = Image::filled(20, 24, [0.3, 0.71, 0.05]);
        let p = RegionPartition::grid(20, 24, 5, 6).unwrap();
        let all: Vec<usize> = (0..p.len()).collect();
        let out = apply_approximation(&im, &p, &all, &MissingnessSpec::blur()).unwrap();
        assert_eq!(out, im);
        let k = gaussian_kernel(21, 10.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_color_per_image_uses_one_color() {
        let im = noise_image(3, 16, 16);
        let p = RegionPartition::grid(16, 16, 4, 4).unwrap();
        let spec = MissingnessSpec::new(MissingnessKind::RandomColorPerImage).with_seed(9);
        let out = apply_approximation(&im, &p, &[0, 5, 15], &spec).unwrap();
        let mask = p.mask(&[0, 5, 15]).unwrap();
        let colors: Vec<[f32; 3]> = (0..256).filter(|&i| mask[i]).map(|i| out.rgb(i)).collect();
        assert!(colors.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn drop_tokens_is_rejected_in_pixel_space() {
        let im = noise_image(4, 8, 8);
        let p = RegionPartition::grid(8, 8, 4, 4).unwrap();
        let err = apply_approximation(&im, &p, &[1], &MissingnessSpec::drop_tokens()).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    #[test]
    fn spec_validation() {
        let bad = MissingnessSpec::new(MissingnessKind::Blur {
            kernel_size: 4,
            sigma: 1.0,
        });
        assert!(bad.validate().is_err());
        assert!(MissingnessSpec::mean_color([1.2, 0.0, 0.0])
            .validate()
            .is_err());
        assert!(MissingnessSpec::mean_color([1.0, 0.0, 0.5])
            .validate()
            .is_ok());
    }

    #[test]
    fn spec_serializes_as_tagged_record() {
        let spec = MissingnessSpec::mean_color([0.5, 0.25, 1.0]).with_seed(3);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            text,
            r#"{"kind":"mean_color","rgb":[0.5,0.25,1.0],"seed":3}"#
        );
        assert_eq!(
            serde_json::from_str::<MissingnessSpec>(&text).unwrap(),
            spec
        );
    }
}
