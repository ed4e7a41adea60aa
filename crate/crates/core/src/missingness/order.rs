use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::{apply_approximation, MissingnessSpec, RegionPartition};
use crate::nn::{ModelKind, SaliencyMap};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemovalOrder {
    Random { seed: u64 },
    MostSalientFirst,
    LeastSalientFirst,
}

impl RemovalOrder {
    pub fn name(&self) -> &'static str {
        match self {
            RemovalOrder::Random { .. } => "random",
            RemovalOrder::MostSalientFirst => "most_salient",
            RemovalOrder::LeastSalientFirst => "least_salient",
        }
    }

    pub fn needs_saliency(&self) -> bool {
        !matches!(self, RemovalOrder::Random { .. })
    }

    /// Random orders get an independent stream per image.
    pub fn for_image(&self, index: usize) -> Self {
        match *self {
            RemovalOrder::Random { seed: s } => RemovalOrder::Random {
                seed: seed::derive(s, index as u64),
            },
            other => other,
        }
    }
}

/// Mean saliency over each region's pixels.
pub fn region_saliency(partition: &RegionPartition, map: &SaliencyMap) -> Result<Vec<f64>> {
    if (map.height(), map.width()) != (partition.height(), partition.width()) {
        return Err(Error::Dimension(format!(
            "saliency map {}x{} for partition over {}x{}",
            map.height(),
            map.width(),
            partition.height(),
            partition.width()
        )));
    }
    let mut sums = vec![0f64; partition.len()];
    let mut counts = vec![0usize; partition.len()];
    for (p, &owner) in partition.owners().iter().enumerate() {
        sums[owner as usize] += map.values()[p];
        counts[owner as usize] += 1;
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect())
}

/// Region indices sorted by score, ties broken by ascending index.
pub fn rank_by_score(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx
}

/// Permutation of region indices in removal order.
pub fn order_regions(
    partition: &RegionPartition,
    order: &RemovalOrder,
    saliency: Option<&SaliencyMap>,
) -> Result<Vec<usize>> {
    match order {
        RemovalOrder::Random { seed: s } => {
            let mut idx: Vec<usize> = (0..partition.len()).collect();
            idx.shuffle(&mut seed::rng(*s));
            Ok(idx)
        }
        RemovalOrder::MostSalientFirst | RemovalOrder::LeastSalientFirst => {
            let map = saliency.ok_or_else(|| {
                Error::Config(format!("{} order needs a saliency map", order.name()))
            })?;
            let scores = region_saliency(partition, map)?;
            Ok(rank_by_score(
                &scores,
                *order == RemovalOrder::MostSalientFirst,
            ))
        }
    }
}

/// Number of regions removed at `fraction`: `ceil(fraction * regions)`.
/// A relative slack of 1e-9 keeps products such as `0.3 * 10` from rounding
/// up past the intended integer.
pub fn removal_count(fraction: f64, regions: usize) -> usize {
    let raw = fraction.clamp(0.0, 1.0) * regions as f64;
    ((raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize).min(regions)
}

/// An input prepared for a model: a possibly edited image, plus grid tokens
/// to drop (sorted) when removal is done by token dropping.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub image: Image,
    pub dropped_tokens: Vec<usize>,
}

impl MaskedInput {
    pub fn unmasked(image: Image) -> Self {
        Self {
            image,
            dropped_tokens: Vec::new(),
        }
    }
}

/// Removes the given regions by pixel replacement, or by listing the tokens
/// they touch when `spec` is drop-tokens.
pub fn remove_regions(
    image: &Image,
    model: &ModelKind,
    partition: &RegionPartition,
    removed: &[usize],
    spec: &MissingnessSpec,
) -> Result<MaskedInput> {
    if spec.is_drop_tokens() {
        let ModelKind::Vit(grid) = model else {
            return Err(Error::Config(
                "drop-tokens removal requires a vision transformer".into(),
            ));
        };
        Ok(MaskedInput {
            image: image.clone(),
            dropped_tokens: grid.covering_tokens(partition, removed)?,
        })
    } else {
        Ok(MaskedInput::unmasked(apply_approximation(
            image, partition, removed, spec,
        )?))
    }
}

/// Removes the first `ceil(fraction * R)` regions of `ordering`.
pub fn remove_fraction(
    image: &Image,
    model: &ModelKind,
    partition: &RegionPartition,
    ordering: &[usize],
    fraction: f64,
    spec: &MissingnessSpec,
) -> Result<MaskedInput> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParam(format!(
            "fraction {fraction} outside [0,1]"
        )));
    }
    if ordering.len() != partition.len() {
        return Err(Error::PartitionMismatch(format!(
            "ordering of {} regions for partition of {}",
            ordering.len(),
            partition.len()
        )));
    }
    let count = removal_count(fraction, partition.len());
    remove_regions(image, model, partition, &ordering[..count], spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn removal_count_is_ceiling() {
        assert_eq!(removal_count(0.5, 64), 32);
        assert_eq!(removal_count(0.0, 64), 0);
        assert_eq!(removal_count(1.0, 64), 64);
        assert_eq!(removal_count(0.1, 64), 7);
        assert_eq!(removal_count(0.3, 10), 3);
        assert_eq!(removal_count(0.31, 10), 4);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_by_score(&[0.1, 0.9, 0.5], true), vec![1, 2, 0]);
        assert_eq!(rank_by_score(&[0.1, 0.9, 0.5], false), vec![0, 2, 1]);
        assert_eq!(rank_by_score(&[0.4; 5], true), vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_by_score(&[0.4; 5], false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn random_order_is_seeded_permutation() {
        let p = RegionPartition::grid(32, 32, 8, 8).unwrap();
        let a = order_regions(&p, &RemovalOrder::Random { seed: 5 }, None).unwrap();
        let b = order_regions(&p, &RemovalOrder::Random { seed: 5 }, None).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn saliency_orders_need_a_map() {
        let p = RegionPartition::grid(8, 8, 4, 4).unwrap();
        assert!(order_regions(&p, &RemovalOrder::MostSalientFirst, None).is_err());
    }

    #[test]
    fn region_saliency_by_hand() {
        // 4x4 map, 2x2 cells: means of each quadrant.
        let values = vec![
            1., 2., 0., 0., //
            3., 4., 0., 8., //
            1., 1., 5., 5., //
            1., 1., 5., 5., //
        ];
        let map = SaliencyMap::new(4, 4, values).unwrap();
        let p = RegionPartition::grid(4, 4, 2, 2).unwrap();
        assert_eq!(region_saliency(&p, &map).unwrap(), vec![2.5, 2.0, 1.0, 5.0]);
        let order = order_regions(&p, &RemovalOrder::MostSalientFirst, Some(&map)).unwrap();
        assert_eq!(order, vec![3, 0, 1, 2]);
    }

    #[test]
    fn constant_and_indicator_maps() {
        let p = RegionPartition::grid(8, 8, 2, 2).unwrap();
        let map = SaliencyMap::new(8, 8, vec![0.25; 64]).unwrap();
        assert!(region_saliency(&p, &map)
            .unwrap()
            .iter()
            .all(|&s| s == 0.25));
        let mask = p.mask(&[3]).unwrap();
        let map = SaliencyMap::new(
            8,
            8,
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let scores = region_saliency(&p, &map).unwrap();
        assert_eq!(scores[3], 1.0);
        assert_eq!(scores.iter().filter(|&&s| s == 0.0).count(), 15);
    }
}
