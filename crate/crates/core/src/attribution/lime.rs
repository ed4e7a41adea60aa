use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{ridge_fit, Explanation, RidgeFit};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::{remove_regions, MaskedInput, MissingnessSpec, RegionPartition};
use crate::nn::{argmax, Classifier, EVAL_CHUNK};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeParams {
    pub n_perturbations: usize,
    pub ridge_lambda: f64,
    pub on_probability: f64,
    pub seed: u64,
}

impl Default for LimeParams {
    fn default() -> Self {
        Self {
            n_perturbations: 1000,
            ridge_lambda: 1.0,
            on_probability: 0.5,
            seed: 0,
        }
    }
}

impl LimeParams {
    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.n_perturbations < regions + 1 {
            return Err(Error::InvalidParam(format!(
                "{} perturbations for {regions} regions; need at least {}",
                self.n_perturbations,
                regions + 1
            )));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "ridge lambda {}",
                self.ridge_lambda
            )));
        }
        if !(self.on_probability > 0.0 && self.on_probability < 1.0) {
            return Err(Error::InvalidParam(format!(
                "on probability {}",
                self.on_probability
            )));
        }
        Ok(())
    }
}

/// Row-major presence matrix: `n_perturbations` rows of `regions` flags,
/// each region present independently with `on_probability`.
pub fn sample_perturbations(regions: usize, params: &LimeParams) -> Result<Vec<Vec<bool>>> {
    params.validate(regions)?;
    let mut rng = seed::rng(params.seed);
    Ok((0..params.n_perturbations)
        .map(|_| {
            (0..regions)
                .map(|_| rng.gen_bool(params.on_probability))
                .collect()
        })
        .collect())
}

/// Ridge regression of the responses on the presence indicators.
pub fn lime_fit(samples: &[Vec<bool>], responses: &[f64], lambda: f64) -> Result<RidgeFit> {
    let regions = samples.first().map_or(0, Vec::len);
    let x: Vec<f64> = samples
        .iter()
        .flat_map(|z| z.iter().map(|&on| if on { 1.0 } else { 0.0 }))
        .collect();
    ridge_fit(&x, regions, responses, lambda)
}

/// Explains the model's original prediction by regressing its logit on
/// which regions survive random removal.
pub fn lime_explain<C: Classifier + ?Sized>(
    model: &C,
    model_id: &str,
    image: &Image,
    partition: &RegionPartition,
    spec: &MissingnessSpec,
    params: &LimeParams,
) -> Result<Explanation> {
    spec.validate()?;
    let kind = model.kind();
    // Surfaces a spec/model mismatch before any sampling.
    remove_regions(image, &kind, partition, &[], spec)?;
    let original = model.logits(&[MaskedInput::unmasked(image.clone())])?;
    let target = argmax(&original[0]);
    let samples = sample_perturbations(partition.len(), params)?;
    let mut responses = Vec::with_capacity(samples.len());
    for (chunk_index, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let inputs = chunk
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let off: Vec<usize> = (0..z.len()).filter(|&r| !z[r]).collect();
                let sample_spec = spec.for_image(chunk_index * EVAL_CHUNK + j);
                remove_regions(image, &kind, partition, &off, &sample_spec)
            })
            .collect::<Result<Vec<_>>>()?;
        responses.extend(model.logits(&inputs)?.iter().map(|l| l[target] as f64));
    }
    let fit = lime_fit(&samples, &responses, params.ridge_lambda)?;
    let explanation = Explanation {
        model_id: model_id.to_string(),
        partition: partition.descriptor(),
        method: "lime".into(),
        seed: params.seed,
        target_class: target,
        spec: Some(spec.clone()),
        scores: fit.weights,
    };
    explanation.validate()?;
    Ok(explanation)
}
