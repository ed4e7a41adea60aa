//! End-to-end protocols: bias sweeps, retraining comparisons, LIME
//! consistency across baseline colors and top-k ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    learned_mask, lime_explain, random_explanation, Explanation, LearnedMaskParams, LimeParams,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{
    class_distribution, entropy, keep_fraction, mean_wup_on_errors, topk_jaccard, Taxonomy,
};
use crate::missingness::{
    order_regions, remove_fraction, remove_regions, MaskedInput, MissingnessSpec, RegionPartition,
    RemovalOrder,
};
use crate::nn::{saliency_map, Classifier, Model, ModelKind, SaliencyMap, EVAL_CHUNK};
use crate::seed;
use crate::superpixels::{labelmap_to_partition, slic, SlicParams};

/// One measurement; `value` is `None` when the metric is undefined (for
/// example no prediction changed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub series: String,
    pub spec: String,
    pub axis: String,
    pub x: f64,
    pub metric: String,
    pub value: Option<f64>,
    pub samples: usize,
}

/// How each image is divided into removable regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    Grid { cell_size: usize },
    Slic(SlicParams),
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Grid { cell_size: 8 }
    }
}

impl PartitionSpec {
    pub fn partition(&self, image: &Image) -> Result<RegionPartition> {
        match self {
            PartitionSpec::Grid { cell_size } => {
                RegionPartition::grid(image.height(), image.width(), *cell_size, *cell_size)
            }
            PartitionSpec::Slic(params) => labelmap_to_partition(&slic(image, params)?),
        }
    }

    pub fn partitions(&self, images: &[Image]) -> Result<Vec<RegionPartition>> {
        images.par_iter().map(|i| self.partition(i)).collect()
    }
}

/// Controls whether per-image work is spread over the rayon pool. Results
/// are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Serial,
    Parallel,
}

fn map_images<T: Send, F>(schedule: Schedule, n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match schedule {
        Schedule::Serial => (0..n).map(f).collect(),
        Schedule::Parallel => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Predicted classes in input order.
pub fn predict_all<C: Classifier + Sync + ?Sized>(
    model: &C,
    inputs: &[MaskedInput],
    schedule: Schedule,
) -> Result<Vec<usize>> {
    let chunks: Vec<&[MaskedInput]> = inputs.chunks(EVAL_CHUNK).collect();
    let parts = map_images(schedule, chunks.len(), |i| model.predict(chunks[i]))?;
    Ok(parts.concat())
}

/// Fraction of unmasked images whose prediction matches the label.
pub fn accuracy<C: Classifier + Sync + ?Sized>(
    model: &C,
    images: &[Image],
    labels: &[usize],
    schedule: Schedule,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    if images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    let inputs: Vec<MaskedInput> = images.iter().cloned().map(MaskedInput::unmasked).collect();
    let preds = predict_all(model, &inputs, schedule)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / images.len() as f64)
}

/// Input-gradient saliency of the designated model for every image.
pub fn saliency_maps(
    model: &Model,
    images: &[Image],
    schedule: Schedule,
) -> Result<Vec<SaliencyMap>> {
    map_images(schedule, images.len(), |i| {
        saliency_map::<f32, _>(&model.network, &images[i])
    })
}

pub fn check_spec(kind: &ModelKind, spec: &MissingnessSpec) -> Result<()> {
    spec.validate()?;
    if spec.is_drop_tokens() && *kind == ModelKind::Cnn {
        return Err(Error::Config(
            "drop-tokens missingness requires a vision transformer model".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasSweepConfig {
    pub partition: PartitionSpec,
    pub spec: MissingnessSpec,
    pub orders: Vec<RemovalOrder>,
    pub fractions: Vec<f64>,
    pub schedule: Schedule,
}

impl Default for BiasSweepConfig {
    fn default() -> Self {
        Self {
            partition: PartitionSpec::default(),
            spec: MissingnessSpec::black(),
            orders: vec![
                RemovalOrder::Random { seed: 0 },
                RemovalOrder::MostSalientFirst,
                RemovalOrder::LeastSalientFirst,
            ],
            fractions: (0..10).map(|i| i as f64 / 10.0).collect(),
            schedule: Schedule::Serial,
        }
    }
}

impl BiasSweepConfig {
    pub fn validate(&self, kind: &ModelKind) -> Result<()> {
        check_spec(kind, &self.spec)?;
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("sweep fractions must lie in [0,1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("sweep fractions must be sorted".into()));
        }
        if self.orders.is_empty() || self.fractions.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one order and one fraction".into(),
            ));
        }
        Ok(())
    }
}

/// Metrics written per (order, fraction) besides the per-class fractions.
pub const SWEEP_METRICS: [&str; 3] = ["class_entropy", "keep_fraction", "mean_wup_on_errors"];

/// Removes growing fractions of each image's regions in every order and
/// records how the prediction distribution shifts.
pub fn bias_sweep<C: Classifier + Sync + ?Sized>(
    model: &C,
    images: &[Image],
    saliency: Option<&[SaliencyMap]>,
    taxonomy: &Taxonomy,
    cfg: &BiasSweepConfig,
) -> Result<Vec<ResultRow>> {
    let kind = model.kind();
    cfg.validate(&kind)?;
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    if taxonomy.num_classes() != model.num_classes() {
        return Err(Error::Config(format!(
            "taxonomy has {} classes, model {}",
            taxonomy.num_classes(),
            model.num_classes()
        )));
    }
    if cfg.orders.iter().any(RemovalOrder::needs_saliency) {
        match saliency {
            Some(maps) if maps.len() == images.len() => {}
            _ => {
                return Err(Error::Config(
                    "saliency orders need one saliency map per image".into(),
                ))
            }
        }
    }
    let partitions = cfg.partition.partitions(images)?;
    let unmasked: Vec<MaskedInput> = images.iter().cloned().map(MaskedInput::unmasked).collect();
    let original = predict_all(model, &unmasked, cfg.schedule)?;
    drop(unmasked);
    let classes = model.num_classes();
    let names = taxonomy.class_names();
    let spec_name = cfg.spec.name();
    let mut rows = Vec::new();
    for order in &cfg.orders {
        let orderings = map_images(cfg.schedule, images.len(), |i| {
            order_regions(&partitions[i], &order.for_image(i), saliency.map(|m| &m[i]))
        })?;
        for &fraction in &cfg.fractions {
            let inputs = map_images(cfg.schedule, images.len(), |i| {
                remove_fraction(
                    &images[i],
                    &kind,
                    &partitions[i],
                    &orderings[i],
                    fraction,
                    &cfg.spec.for_image(i),
                )
            })?;
            let preds = predict_all(model, &inputs, cfg.schedule)?;
            let dist = class_distribution(&preds, classes)?;
            let changed = original.iter().zip(&preds).filter(|(a, b)| a != b).count();
            let row = |metric: String, value: Option<f64>, samples: usize| ResultRow {
                experiment: "bias_sweep".into(),
                series: order.name().into(),
                spec: spec_name.clone(),
                axis: "fraction".into(),
                x: fraction,
                metric,
                value,
                samples,
            };
            rows.push(row(
                "class_entropy".into(),
                Some(entropy(&dist)),
                images.len(),
            ));
            rows.push(row(
                "keep_fraction".into(),
                Some(keep_fraction(&original, &preds)?),
                images.len(),
            ));
            rows.push(row(
                "mean_wup_on_errors".into(),
                mean_wup_on_errors(&original, &preds, taxonomy)?,
                changed,
            ));
            for (c, p) in dist.iter().enumerate() {
                rows.push(row(
                    format!("class_fraction:{}", names[c]),
                    Some(*p),
                    images.len(),
                ));
            }
        }
    }
    Ok(rows)
}

/// Looks up one metric value from sweep rows.
pub fn find_value(rows: &[ResultRow], series: &str, metric: &str, x: f64) -> Option<f64> {
    rows.iter()
        .find(|r| r.series == series && r.metric == metric && (r.x - x).abs() < 1e-12)
        .and_then(|r| r.value)
}

/// Sweeps a standard and a retrained model identically and reports the
/// per-fraction keep-fraction gap between them.
pub fn roar_compare<S: Classifier + Sync + ?Sized, R: Classifier + Sync + ?Sized>(
    standard: &S,
    retrained: &R,
    images: &[Image],
    saliency: Option<&[SaliencyMap]>,
    taxonomy: &Taxonomy,
    cfg: &BiasSweepConfig,
) -> Result<Vec<ResultRow>> {
    if standard.kind() != retrained.kind() || standard.num_classes() != retrained.num_classes() {
        return Err(Error::Config(
            "standard and retrained models differ in architecture".into(),
        ));
    }
    let a = bias_sweep(standard, images, saliency, taxonomy, cfg)?;
    let b = bias_sweep(retrained, images, saliency, taxonomy, cfg)?;
    let mut rows = Vec::new();
    for order in &cfg.orders {
        for &f in &cfg.fractions {
            let ka = find_value(&a, order.name(), "keep_fraction", f).expect("sweep row present");
            let kb = find_value(&b, order.name(), "keep_fraction", f).expect("sweep row present");
            rows.push(ResultRow {
                experiment: "roar".into(),
                series: order.name().into(),
                spec: cfg.spec.name(),
                axis: "fraction".into(),
                x: f,
                metric: "keep_fraction_gap".into(),
                value: Some((ka - kb).abs()),
                samples: images.len(),
            });
        }
    }
    for (tag, sweep) in [("standard", a), ("retrained", b)] {
        rows.extend(sweep.into_iter().map(|mut r| {
            r.experiment = "roar".into();
            r.series = format!("{tag}/{}", r.series);
            r
        }));
    }
    Ok(rows)
}

/// Mean of the gap rows over the given fractions for one order.
pub fn mean_gap(rows: &[ResultRow], series: &str, fractions: &[f64]) -> Option<f64> {
    let values: Option<Vec<f64>> = fractions
        .iter()
        .map(|&f| find_value(rows, series, "keep_fraction_gap", f))
        .collect();
    let values = values?;
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// LIME explanations for every image with per-image seeds.
pub fn lime_explanations<C: Classifier + Sync + ?Sized>(
    model: &C,
    model_id: &str,
    images: &[Image],
    partitions: &[RegionPartition],
    spec: &MissingnessSpec,
    params: &LimeParams,
    schedule: Schedule,
) -> Result<Vec<Explanation>> {
    check_spec(&model.kind(), spec)?;
    map_images(schedule, images.len(), |i| {
        let p = LimeParams {
            seed: seed::derive(params.seed, i as u64),
            ..params.clone()
        };
        lime_explain(
            model,
            model_id,
            &images[i],
            &partitions[i],
            &spec.for_image(i),
            &p,
        )
    })
}

pub fn learned_mask_explanations(
    model: &Model,
    images: &[Image],
    partitions: &[RegionPartition],
    params: &LearnedMaskParams,
    schedule: Schedule,
) -> Result<Vec<Explanation>> {
    map_images(schedule, images.len(), |i| {
        let p = LearnedMaskParams {
            seed: seed::derive(params.seed, i as u64),
            baseline: params.baseline.for_image(i),
            ..params.clone()
        };
        learned_mask(model, &model.id, &images[i], &partitions[i], &p)
    })
}

/// The eight baseline colors with every channel at 0 or 1.
pub fn corner_colors() -> Vec<[f32; 3]> {
    (0..8u8)
        .map(|i| [(i >> 2) & 1, (i >> 1) & 1, i & 1].map(|b| b as f32))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub partition: PartitionSpec,
    /// Remove regions by token dropping instead of corner-color fills.
    pub drop_tokens: bool,
    pub k_grid: Vec<usize>,
    pub lime: LimeParams,
    pub random_seed: u64,
    pub schedule: Schedule,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            partition: PartitionSpec::default(),
            drop_tokens: false,
            k_grid: vec![1, 2, 4, 8, 16, 32, 64],
            lime: LimeParams::default(),
            random_seed: 0,
            schedule: Schedule::Serial,
        }
    }
}

/// LIME top-k agreement between every pair of the eight corner baseline
/// colors, plus a random-explanation reference curve.
///
/// With token dropping there is no baseline color, so one explanation per
/// image stands in for all eight.
pub fn consistency_test<C: Classifier + Sync + ?Sized>(
    model: &C,
    model_id: &str,
    images: &[Image],
    cfg: &ConsistencyConfig,
) -> Result<Vec<ResultRow>> {
    let kind = model.kind();
    if cfg.drop_tokens {
        check_spec(&kind, &MissingnessSpec::drop_tokens())?;
    }
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let partitions = cfg.partition.partitions(images)?;
    let colors = corner_colors();
    let per_color: Vec<Vec<Explanation>> = if cfg.drop_tokens {
        let once = lime_explanations(
            model,
            model_id,
            images,
            &partitions,
            &MissingnessSpec::drop_tokens(),
            &cfg.lime,
            cfg.schedule,
        )?;
        vec![once; colors.len()]
    } else {
        colors
            .iter()
            .map(|&rgb| {
                lime_explanations(
                    model,
                    model_id,
                    images,
                    &partitions,
                    &MissingnessSpec::mean_color(rgb),
                    &cfg.lime,
                    cfg.schedule,
                )
            })
            .collect::<Result<_>>()?
    };
    let random: Vec<Vec<Explanation>> = (0..colors.len())
        .map(|c| {
            partitions
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let s = seed::derive(seed::derive(cfg.random_seed, c as u64), i as u64);
                    random_explanation(p, "random", s)
                })
                .collect()
        })
        .collect();
    let spec = if cfg.drop_tokens {
        "drop_tokens"
    } else {
        "corner_colors"
    };
    let color_name = |c: [f32; 3]| format!("{}{}{}", c[0], c[1], c[2]);
    let mut rows = Vec::new();
    for &k in &cfg.k_grid {
        let mut pair_means = Vec::new();
        let mut random_means = Vec::new();
        for a in 0..colors.len() {
            for b in a + 1..colors.len() {
                let mut total = 0.0;
                let mut rtotal = 0.0;
                let mut n = 0;
                for i in 0..images.len() {
                    if k == 0 || k > partitions[i].len() {
                        continue;
                    }
                    total += topk_jaccard(&per_color[a][i], &per_color[b][i], k)?;
                    rtotal += topk_jaccard(&random[a][i], &random[b][i], k)?;
                    n += 1;
                }
                let mean = (n > 0).then(|| total / n as f64);
                let rmean = (n > 0).then(|| rtotal / n as f64);
                pair_means.extend(mean);
                random_means.extend(rmean);
                rows.push(ResultRow {
                    experiment: "consistency".into(),
                    series: format!("pair:{}-{}", color_name(colors[a]), color_name(colors[b])),
                    spec: spec.into(),
                    axis: "k".into(),
                    x: k as f64,
                    metric: "jaccard".into(),
                    value: mean,
                    samples: n,
                });
            }
        }
        let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        for (series, values) in [("mean", &pair_means), ("random", &random_means)] {
            rows.push(ResultRow {
                experiment: "consistency".into(),
                series: series.into(),
                spec: spec.into(),
                axis: "k".into(),
                x: k as f64,
                metric: "jaccard".into(),
                value: avg(values),
                samples: images.len(),
            });
        }
    }
    Ok(rows)
}

/// A named set of explanations, one per evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationSource {
    pub name: String,
    pub explanations: Vec<Explanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub partition: PartitionSpec,
    pub spec: MissingnessSpec,
    pub k_grid: Vec<usize>,
    pub schedule: Schedule,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            partition: PartitionSpec::default(),
            spec: MissingnessSpec::black(),
            k_grid: vec![0, 4, 8, 16, 32, 64],
            schedule: Schedule::Serial,
        }
    }
}

/// Removes each source's top-k regions per image and records how often the
/// prediction survives.
pub fn topk_ablation<C: Classifier + Sync + ?Sized>(
    model: &C,
    images: &[Image],
    sources: &[ExplanationSource],
    cfg: &AblationConfig,
) -> Result<Vec<ResultRow>> {
    let kind = model.kind();
    check_spec(&kind, &cfg.spec)?;
    if images.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let partitions = cfg.partition.partitions(images)?;
    for source in sources {
        if source.explanations.len() != images.len() {
            return Err(Error::Dimension(format!(
                "source {} has {} explanations for {} images",
                source.name,
                source.explanations.len(),
                images.len()
            )));
        }
        for (e, p) in source.explanations.iter().zip(&partitions) {
            if e.partition != p.descriptor() || e.len() != p.len() {
                return Err(Error::PartitionMismatch(format!(
                    "source {} explains {} but evaluation uses {}",
                    source.name,
                    e.partition,
                    p.descriptor()
                )));
            }
        }
    }
    let unmasked: Vec<MaskedInput> = images.iter().cloned().map(MaskedInput::unmasked).collect();
    let original = predict_all(model, &unmasked, cfg.schedule)?;
    drop(unmasked);
    let mut rows = Vec::new();
    for source in sources {
        for &k in &cfg.k_grid {
            let inputs = map_images(cfg.schedule, images.len(), |i| {
                let k = k.min(partitions[i].len());
                let removed = source.explanations[i].top_k(k)?;
                remove_regions(
                    &images[i],
                    &kind,
                    &partitions[i],
                    &removed,
                    &cfg.spec.for_image(i),
                )
            })?;
            let preds = predict_all(model, &inputs, cfg.schedule)?;
            rows.push(ResultRow {
                experiment: "ablation".into(),
                series: source.name.clone(),
                spec: cfg.spec.name(),
                axis: "k".into(),
                x: k as f64,
                metric: "keep_fraction".into(),
                value: Some(keep_fraction(&original, &preds)?),
                samples: images.len(),
            });
        }
    }
    Ok(rows)
}
