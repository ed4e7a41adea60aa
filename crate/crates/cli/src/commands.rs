//! Subcommand bodies. Each validates its whole configuration against the
//! models it names before loading images or computing anything, and
//! returns one report line per written artifact.

use std::path::{Path, PathBuf};

use mlab_core::attribution::random_explanation;
use mlab_core::data::generate;
use mlab_core::experiments::{
    accuracy, bias_sweep, check_spec, consistency_test, learned_mask_explanations,
    lime_explanations, roar_compare, saliency_maps, topk_ablation, BiasSweepConfig,
    ExplanationSource, ResultRow, Schedule,
};
use mlab_core::io::{
    encode_pgm, load_model, load_split, read_explanations, read_taxonomy, save_dataset, save_model,
    series_for_metric, write_csv, write_explanations, write_svg, PlotSpec,
};
use mlab_core::metrics::Taxonomy;
use mlab_core::missingness::{MissingnessSpec, RemovalOrder};
use mlab_core::nn::{train_model, Classifier, Model, ModelConfig, SaliencyMap};
use mlab_core::superpixels::slic;
use mlab_core::{seed, Image};

use crate::config::{
    to_toml, AblateJob, BiasSweepJob, ConsistencyJob, GenDataJob, LearnedMaskJob, LimeJob, RoarJob,
    SlicJob, TrainJob,
};
use crate::error::{CliError, Result};

/// The first `n_eval` test images with labels and the class tree.
pub struct EvalSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub taxonomy: Taxonomy,
}

pub fn load_eval(data: &Path, n_eval: Option<usize>, image_size: usize) -> Result<EvalSet> {
    let taxonomy = read_taxonomy(&data.join("taxonomy.json"))?;
    let mut split = load_split(data, "test")?;
    if let Some(n) = n_eval {
        if n == 0 || n > split.len() {
            return Err(CliError::Invalid(format!(
                "n_eval = {n} but the test split has {} images",
                split.len()
            )));
        }
        split = split.head(n);
    }
    if split.is_empty() {
        return Err(CliError::Invalid("the test split is empty".into()));
    }
    check_image_size(&split.images[0], image_size)?;
    Ok(EvalSet {
        images: split.images,
        labels: split.labels,
        taxonomy,
    })
}

fn check_image_size(image: &Image, size: usize) -> Result<()> {
    if image.height() != size || image.width() != size {
        return Err(CliError::Invalid(format!(
            "dataset images are {}x{} but the model expects {size}x{size}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn wrote(path: &Path) -> String {
    format!("wrote {}", path.display())
}

/// Writes the table, the resolved config and one plot per metric.
fn emit(
    dir: &Path,
    name: &str,
    config_toml: &str,
    rows: &[ResultRow],
    plots: &[(&str, &str, Option<(f64, f64)>)],
) -> Result<Vec<String>> {
    create_dir(dir)?;
    let mut report = Vec::new();
    let csv = dir.join(format!("{name}.csv"));
    write_csv(&csv, rows)?;
    report.push(wrote(&csv));
    let config = dir.join("config.toml");
    write_file(&config, config_toml.as_bytes())?;
    report.push(wrote(&config));
    for &(metric, x_label, y_range) in plots {
        let series = series_for_metric(rows, metric);
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{metric}.svg"));
        let plot = PlotSpec {
            title: format!("{name}: {metric}"),
            x_label: x_label.into(),
            y_label: metric.into(),
            y_range,
        };
        write_svg(&path, &plot, &series)?;
        report.push(wrote(&path));
    }
    Ok(report)
}

pub fn gen_data(job: &GenDataJob) -> Result<Vec<String>> {
    job.dataset.validate()?;
    let dataset = generate(&job.dataset)?;
    save_dataset(&job.out, &job.dataset, &dataset)?;
    Ok(vec![format!(
        "wrote {} ({} train, {} test images)",
        job.out.display(),
        dataset.train.len(),
        dataset.test.len()
    )])
}

pub fn train(job: &TrainJob) -> Result<Vec<String>> {
    job.model.validate()?;
    if let Some(a) = &job.augment {
        if !(0.0..=1.0).contains(&a.fraction) || a.cell_size == 0 {
            return Err(CliError::Invalid(format!(
                "augment needs a fraction in [0,1] and a positive cell size, got {} and {}",
                a.fraction, a.cell_size
            )));
        }
        if job.model.image_size() % a.cell_size != 0 {
            return Err(CliError::Invalid(format!(
                "augment cell size {} does not divide the image size {}",
                a.cell_size,
                job.model.image_size()
            )));
        }
    }
    if job.train.batch_size == 0 {
        return Err(CliError::Invalid("batch_size must be positive".into()));
    }
    let train = load_split(&job.data, "train")?;
    let test = load_split(&job.data, "test")?;
    if let Some(first) = train.images.first() {
        check_image_size(first, job.model.image_size())?;
    }
    let model = train_model(
        job.id.clone(),
        &job.model,
        &train.images,
        &train.labels,
        &job.train,
        job.augment.as_ref(),
    )?;
    create_parent(&job.out)?;
    save_model(&job.out, &model)?;
    let mut report = vec![wrote(&job.out)];
    if !test.is_empty() {
        let acc = accuracy(&model, &test.images, &test.labels, Schedule::Serial)?;
        report.push(format!("test accuracy {acc:.4} on {} images", test.len()));
    }
    Ok(report)
}

/// Loads the saliency model when any order needs one. A CNN under
/// evaluation is its own default saliency source.
fn saliency_source(
    sweep: &BiasSweepConfig,
    path: Option<&Path>,
    evaluated: &Model,
) -> Result<Option<Model>> {
    if !sweep.orders.iter().any(RemovalOrder::needs_saliency) {
        return Ok(None);
    }
    let model = match path {
        Some(p) => load_model(p)?,
        None if matches!(evaluated.config(), ModelConfig::Cnn(_)) => evaluated.clone(),
        None => {
            return Err(CliError::Invalid(
                "saliency orders on a transformer need `saliency_model` (a CNN weights file)"
                    .into(),
            ))
        }
    };
    if model.image_size() != evaluated.image_size() {
        return Err(CliError::Invalid(
            "saliency model and evaluated model differ in image size".into(),
        ));
    }
    Ok(Some(model))
}

fn maps_for(
    source: Option<&Model>,
    images: &[Image],
    schedule: Schedule,
) -> Result<Option<Vec<SaliencyMap>>> {
    source
        .map(|m| saliency_maps(m, images, schedule))
        .transpose()
        .map_err(Into::into)
}

pub fn bias_sweep_cmd(job: &BiasSweepJob) -> Result<Vec<String>> {
    let model = load_model(&job.model)?;
    job.sweep.validate(&model.kind())?;
    let source = saliency_source(&job.sweep, job.saliency_model.as_deref(), &model)?;
    let eval = load_eval(&job.data, job.n_eval, model.image_size())?;
    let maps = maps_for(source.as_ref(), &eval.images, job.sweep.schedule)?;
    let rows = bias_sweep(
        &model,
        &eval.images,
        maps.as_deref(),
        &eval.taxonomy,
        &job.sweep,
    )?;
    emit(
        &job.out,
        "bias_sweep",
        &to_toml(job)?,
        &rows,
        &[
            ("keep_fraction", "fraction removed", Some((0.0, 1.0))),
            ("class_entropy", "fraction removed", None),
            ("mean_wup_on_errors", "fraction removed", Some((0.0, 1.0))),
        ],
    )
}

pub fn roar(job: &RoarJob) -> Result<Vec<String>> {
    let standard = load_model(&job.standard)?;
    let retrained = load_model(&job.retrained)?;
    if standard.kind() != retrained.kind() || standard.num_classes() != retrained.num_classes() {
        return Err(CliError::Invalid(
            "standard and retrained models differ in architecture".into(),
        ));
    }
    job.sweep.validate(&standard.kind())?;
    let source = saliency_source(&job.sweep, job.saliency_model.as_deref(), &standard)?;
    let eval = load_eval(&job.data, job.n_eval, standard.image_size())?;
    let maps = maps_for(source.as_ref(), &eval.images, job.sweep.schedule)?;
    let rows = roar_compare(
        &standard,
        &retrained,
        &eval.images,
        maps.as_deref(),
        &eval.taxonomy,
        &job.sweep,
    )?;
    emit(
        &job.out,
        "roar",
        &to_toml(job)?,
        &rows,
        &[
            ("keep_fraction_gap", "fraction removed", Some((0.0, 1.0))),
            ("keep_fraction", "fraction removed", Some((0.0, 1.0))),
        ],
    )
}

pub fn lime(job: &LimeJob) -> Result<Vec<String>> {
    let model = load_model(&job.model)?;
    check_spec(&model.kind(), &job.spec)?;
    if job.lime.n_perturbations == 0 {
        return Err(CliError::Invalid("n_perturbations must be positive".into()));
    }
    let eval = load_eval(&job.data, job.n_eval, model.image_size())?;
    let partitions = job.partition.partitions(&eval.images)?;
    let explanations = lime_explanations(
        &model,
        &model.id,
        &eval.images,
        &partitions,
        &job.spec,
        &job.lime,
        job.schedule,
    )?;
    create_parent(&job.out)?;
    write_explanations(&job.out, &explanations)?;
    Ok(vec![wrote(&job.out)])
}

pub fn learned_mask(job: &LearnedMaskJob) -> Result<Vec<String>> {
    let model = load_model(&job.model)?;
    job.mask.baseline.validate()?;
    if job.mask.baseline.is_drop_tokens() {
        return Err(CliError::Invalid(
            "learned masks blend pixels and cannot use a drop-tokens baseline".into(),
        ));
    }
    let eval = load_eval(&job.data, job.n_eval, model.image_size())?;
    let partitions = job.partition.partitions(&eval.images)?;
    let explanations =
        learned_mask_explanations(&model, &eval.images, &partitions, &job.mask, job.schedule)?;
    create_parent(&job.out)?;
    write_explanations(&job.out, &explanations)?;
    Ok(vec![wrote(&job.out)])
}

pub fn ablate(job: &AblateJob) -> Result<Vec<String>> {
    let model = load_model(&job.model)?;
    check_spec(&model.kind(), &job.ablation.spec)?;
    if job.sources.is_empty() && !job.random_baseline {
        return Err(CliError::Invalid(
            "no explanation sources and no random baseline".into(),
        ));
    }
    if job.ablation.k_grid.is_empty() {
        return Err(CliError::Invalid("k_grid is empty".into()));
    }
    let mut sources = Vec::new();
    for s in &job.sources {
        sources.push(ExplanationSource {
            name: s.name.clone(),
            explanations: read_explanations(&s.path)?,
        });
    }
    let eval = load_eval(&job.data, job.n_eval, model.image_size())?;
    for s in &mut sources {
        if s.explanations.len() < eval.images.len() {
            return Err(CliError::Invalid(format!(
                "source {} has {} explanations for {} images",
                s.name,
                s.explanations.len(),
                eval.images.len()
            )));
        }
        s.explanations.truncate(eval.images.len());
    }
    if job.random_baseline {
        let partitions = job.ablation.partition.partitions(&eval.images)?;
        sources.push(ExplanationSource {
            name: "random".into(),
            explanations: partitions
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    random_explanation(p, "random", seed::derive(job.random_seed, i as u64))
                })
                .collect(),
        });
    }
    let rows = topk_ablation(&model, &eval.images, &sources, &job.ablation)?;
    emit(
        &job.out,
        "ablation",
        &to_toml(job)?,
        &rows,
        &[("keep_fraction", "regions removed (k)", Some((0.0, 1.0)))],
    )
}

pub fn consistency(job: &ConsistencyJob) -> Result<Vec<String>> {
    let model = load_model(&job.model)?;
    if job.consistency.drop_tokens {
        check_spec(&model.kind(), &MissingnessSpec::drop_tokens())?;
    }
    if job.consistency.k_grid.is_empty() {
        return Err(CliError::Invalid("k_grid is empty".into()));
    }
    let eval = load_eval(&job.data, job.n_eval, model.image_size())?;
    let rows = consistency_test(&model, &model.id, &eval.images, &job.consistency)?;
    let mut report = emit(&job.out, "consistency", &to_toml(job)?, &rows, &[])?;
    // The table keeps all 28 pairs; the plot shows the pair mean and the
    // random reference only.
    let summary: Vec<ResultRow> = rows
        .iter()
        .filter(|r| !r.series.starts_with("pair:"))
        .cloned()
        .collect();
    let path = job.out.join("jaccard.svg");
    write_svg(
        &path,
        &PlotSpec {
            title: "consistency: top-k jaccard".into(),
            x_label: "k".into(),
            y_label: "jaccard".into(),
            y_range: Some((0.0, 1.0)),
        },
        &series_for_metric(&summary, "jaccard"),
    )?;
    report.push(wrote(&path));
    Ok(report)
}

pub fn slic_cmd(job: &SlicJob) -> Result<Vec<String>> {
    if job.split != "train" && job.split != "test" {
        return Err(CliError::Invalid(format!(
            "split must be `train` or `test`, got `{}`",
            job.split
        )));
    }
    if job.params.k == 0 || job.params.k > 256 {
        return Err(CliError::Invalid(
            "k must lie in 1..=256 so labels fit an 8-bit graymap".into(),
        ));
    }
    let split = load_split(&job.data, &job.split)?;
    let n = job.n_images.unwrap_or(split.len()).min(split.len());
    create_dir(&job.out)?;
    let mut written: Vec<PathBuf> = Vec::with_capacity(n);
    for (i, image) in split.images[..n].iter().enumerate() {
        let map = slic(image, &job.params)?;
        if map.num_labels() > 256 {
            return Err(CliError::Invalid(format!(
                "image {i} has {} superpixels; at most 256 fit a graymap",
                map.num_labels()
            )));
        }
        let values: Vec<u8> = map.labels.iter().map(|&l| l as u8).collect();
        let path = job.out.join(format!("{i:05}.pgm"));
        write_file(&path, &encode_pgm(map.width, map.height, &values)?)?;
        written.push(path);
    }
    Ok(vec![format!(
        "wrote {} label maps to {}",
        written.len(),
        job.out.display()
    )])
}
