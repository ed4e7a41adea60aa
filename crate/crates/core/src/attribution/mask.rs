use std::sync::Arc;

use mlab_tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::Explanation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::{apply_approximation, MissingnessSpec, PartitionKind, RegionPartition};
use crate::nn::{argmax, Differentiable};
use crate::seed;

/// Which model output the mask tries to suppress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScore {
    /// Softmax probability of the target class.
    Probability,
    /// Raw logit of the target class.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnedMaskParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    /// Standard deviation of the per-step pixel noise.
    pub noise_sigma: f64,
    pub steps: usize,
    pub lr: f64,
    pub baseline: MissingnessSpec,
    pub score: MaskScore,
    pub seed: u64,
}

impl Default for LearnedMaskParams {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.2,
            beta: 3.0,
            noise_sigma: 0.2,
            steps: 300,
            lr: 0.1,
            baseline: MissingnessSpec::black(),
            score: MaskScore::Probability,
            seed: 0,
        }
    }
}

struct MaskProblem<'a, M: ?Sized> {
    model: &'a M,
    params: &'a LearnedMaskParams,
    image: Tensor<f32>,
    baseline: Tensor<f32>,
    upsample: Arc<[usize]>,
    tv_left: Arc<[usize]>,
    tv_right: Arc<[usize]>,
    cells: usize,
    target: usize,
}

impl<M: Differentiable<f32> + ?Sized> MaskProblem<'_, M> {
    /// Records the objective for `mask` with optional additive noise.
    fn objective(
        &self,
        tape: &mut Tape<f32>,
        mask: Var,
        noise: Option<Tensor<f32>>,
    ) -> Result<Var> {
        let shape = self.image.shape().to_vec();
        let up = tape.gather(mask, &shape, self.upsample.clone())?;
        let diff: Vec<f32> = self
            .image
            .data()
            .iter()
            .zip(self.baseline.data())
            .map(|(x, b)| x - b)
            .collect();
        let diff = tape.constant(Tensor::from_vec(&shape, diff)?);
        let mut offset = self.baseline.clone();
        if let Some(noise) = noise {
            for (o, n) in offset.data_mut().iter_mut().zip(noise.data()) {
                *o += n;
            }
        }
        let offset = tape.constant(offset);
        let scaled = tape.mul(up, diff)?;
        let blended = tape.add(scaled, offset)?;
        let logits = self.model.logits_on_tape(tape, blended)?;
        let outputs = match self.params.score {
            MaskScore::Probability => tape.softmax(logits, 1)?,
            MaskScore::Logit => logits,
        };
        let picked = tape.gather(outputs, &[1], Arc::from([self.target]))?;
        let score = tape.sum(picked)?;

        let neg = tape.scale(mask, -1.0)?;
        let gap = tape.add_scalar(neg, 1.0)?;
        let gap = tape.abs(gap)?;
        let l1 = tape.sum(gap)?;
        let l1 = tape.scale(l1, self.params.lambda1 as f32)?;
        let mut total = tape.add(score, l1)?;
        if !self.tv_left.is_empty() {
            let n = self.tv_left.len();
            let a = tape.gather(mask, &[n], self.tv_left.clone())?;
            let b = tape.gather(mask, &[n], self.tv_right.clone())?;
            let d = tape.sub(a, b)?;
            let d = tape.abs(d)?;
            let d = tape.powf(d, self.params.beta as f32)?;
            let tv = tape.sum(d)?;
            let tv = tape.scale(tv, self.params.lambda2 as f32)?;
            total = tape.add(total, tv)?;
        }
        Ok(total)
    }

    fn evaluate(&self, mask: &[f32]) -> Result<f64> {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_vec(&[self.cells], mask.to_vec())?);
        let total = self.objective(&mut tape, m, None)?;
        Ok(tape.value(total).item()? as f64)
    }
}

fn problem<'a, M: Differentiable<f32> + ?Sized>(
    model: &'a M,
    image: &Image,
    partition: &RegionPartition,
    params: &'a LearnedMaskParams,
) -> Result<MaskProblem<'a, M>> {
    let PartitionKind::GridPatches { cell_h, cell_w } = *partition.kind() else {
        return Err(Error::Config(
            "learned masks are defined on grid partitions only".into(),
        ));
    };
    if params.baseline.is_drop_tokens() {
        return Err(Error::Config(
            "learned masks need a pixel-replacement baseline".into(),
        ));
    }
    params.baseline.validate()?;
    let (h, w) = (image.height(), image.width());
    if (partition.height(), partition.width()) != (h, w) {
        return Err(Error::PartitionMismatch(format!(
            "partition over {}x{} for {h}x{w} image",
            partition.height(),
            partition.width()
        )));
    }
    let all: Vec<usize> = (0..partition.len()).collect();
    let baseline = apply_approximation(image, partition, &all, &params.baseline)?;
    let upsample: Vec<usize> = (0..Image::CHANNELS)
        .flat_map(|_| partition.owners().iter().map(|&o| o as usize))
        .collect();
    let cols = w.div_ceil(cell_w);
    let rows = h.div_ceil(cell_h);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                left.push(i);
                right.push(i + 1);
            }
            if r + 1 < rows {
                left.push(i);
                right.push(i + cols);
            }
        }
    }
    let image_t = Image::batch_tensor::<f32>(&[image])?;
    let mut tape = Tape::new();
    let x = tape.constant(image_t.clone());
    let logits = model.logits_on_tape(&mut tape, x)?;
    let target = argmax(tape.value(logits).data());
    Ok(MaskProblem {
        model,
        params,
        image: image_t,
        baseline: Image::batch_tensor::<f32>(&[&baseline])?,
        upsample: upsample.into(),
        tv_left: left.into(),
        tv_right: right.into(),
        cells: partition.len(),
        target,
    })
}

/// Noise-free objective value of a mask over a grid partition.
pub fn mask_objective<M: Differentiable<f32> + ?Sized>(
    model: &M,
    image: &Image,
    partition: &RegionPartition,
    params: &LearnedMaskParams,
    mask: &[f32],
) -> Result<f64> {
    let p = problem(model, image, partition, params)?;
    if mask.len() != p.cells {
        return Err(Error::Dimension(format!(
            "{} mask values for {} cells",
            mask.len(),
            p.cells
        )));
    }
    p.evaluate(mask)
}

/// Optimizes a per-cell blend weight in `[0, 1]` that keeps as much of the
/// image as possible while suppressing the originally predicted class.
/// If the optimized mask scores worse than the all-ones start under the
/// noise-free objective, the start is returned.
pub fn learned_mask<M: Differentiable<f32> + ?Sized>(
    model: &M,
    model_id: &str,
    image: &Image,
    partition: &RegionPartition,
    params: &LearnedMaskParams,
) -> Result<Explanation> {
    let p = problem(model, image, partition, params)?;
    let mut mask = Tensor::<f32>::ones(&[p.cells]);
    let mut adam = Adam::new(AdamConfig {
        lr: params.lr,
        ..AdamConfig::default()
    });
    let mut rng = seed::rng(params.seed);
    let noise_dist = (params.noise_sigma > 0.0)
        .then(|| Normal::new(0.0f32, params.noise_sigma as f32))
        .transpose()
        .map_err(|e| Error::InvalidParam(format!("noise sigma: {e}")))?;
    for step in 0..params.steps {
        let noise = match &noise_dist {
            Some(d) => {
                let data = (0..p.image.numel()).map(|_| d.sample(&mut rng)).collect();
                Some(Tensor::from_vec(p.image.shape(), data)?)
            }
            None => None,
        };
        let mut tape = Tape::new();
        let m = tape.param(mask.clone());
        let total = p.objective(&mut tape, m, noise)?;
        if !tape.value(total).item()?.is_finite() {
            return Err(Error::MaskDiverged { step });
        }
        tape.backward(total)?;
        let grad = tape
            .grad(m)
            .ok_or(Error::Numerical("missing mask gradient".into()))?;
        mask.set_grad(grad.to_vec())?;
        adam.step(&mut [&mut mask])?;
        mask.clear_grad();
        for v in mask.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let ones = vec![1.0; p.cells];
    let scores = if p.evaluate(mask.data())? <= p.evaluate(&ones)? {
        mask.data().iter().map(|&v| v as f64).collect()
    } else {
        ones.iter().map(|&v| v as f64).collect()
    };
    Ok(Explanation {
        model_id: model_id.to_string(),
        partition: partition.descriptor(),
        method: "learned_mask".into(),
        seed: params.seed,
        target_class: p.target,
        spec: Some(params.baseline.clone()),
        scores,
    })
}
