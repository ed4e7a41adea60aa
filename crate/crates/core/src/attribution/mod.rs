//! Region-level explanations: LIME, learned masks and random baselines.

mod lime;
mod mask;
mod ridge;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::{rank_by_score, MissingnessSpec, RegionPartition};
use crate::seed;

pub use lime::{lime_explain, lime_fit, sample_perturbations, LimeParams};
pub use mask::{learned_mask, mask_objective, LearnedMaskParams, MaskScore};
pub use ridge::{ridge_fit, RidgeFit};

/// One score per region of a named partition, for a single model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub model_id: String,
    /// Descriptor of the partition the scores refer to.
    pub partition: String,
    pub method: String,
    pub seed: u64,
    pub target_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MissingnessSpec>,
    pub scores: Vec<f64>,
}

impl Explanation {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!(
                "explanation score {i} is not finite"
            )));
        }
        Ok(())
    }

    /// The `k` highest-scoring regions, ties broken by ascending index.
    pub fn top_k(&self, k: usize) -> Result<Vec<usize>> {
        top_k(&self.scores, k)
    }
}

/// Indices of the `k` largest scores in descending order; ties go to the
/// lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidParam(format!(
            "k = {k} exceeds {} regions",
            scores.len()
        )));
    }
    let mut ranked = rank_by_score(scores, true);
    ranked.truncate(k);
    Ok(ranked)
}

/// I.i.d. uniform `[0, 1)` scores.
pub fn random_explanation(partition: &RegionPartition, model_id: &str, seed: u64) -> Explanation {
    let mut rng = seed::rng(seed);
    Explanation {
        model_id: model_id.to_string(),
        partition: partition.descriptor(),
        method: "random".into(),
        seed,
        target_class: 0,
        spec: None,
        scores: (0..partition.len()).map(|_| rng.gen::<f64>()).collect(),
    }
}
