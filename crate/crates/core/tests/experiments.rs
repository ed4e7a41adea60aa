use mlab_core::attribution::{random_explanation, LimeParams};
use mlab_core::data::{generate, SyntheticDatasetSpec};
use mlab_core::experiments::{
    bias_sweep, consistency_test, find_value, lime_explanations, mean_gap, roar_compare,
    saliency_maps, topk_ablation, AblationConfig, BiasSweepConfig, ConsistencyConfig,
    ExplanationSource, PartitionSpec, Schedule, SWEEP_METRICS,
};
use mlab_core::metrics::Taxonomy;
use mlab_core::missingness::{MissingnessKind, MissingnessSpec, RemovalOrder};
use mlab_core::nn::{CnnConfig, CnnStage, Model, ModelConfig, VitConfig};
use mlab_core::superpixels::SlicParams;
use mlab_core::{Error, Image};

fn data(n: usize) -> (Vec<Image>, Taxonomy) {
    let spec = SyntheticDatasetSpec {
        image_size: 16,
        n_train: 0,
        n_test: n,
        seed: 11,
        ..SyntheticDatasetSpec::default()
    };
    let d = generate(&spec).unwrap();
    (d.test.images, d.taxonomy)
}

fn cnn(seed: u64) -> Model {
    let config = CnnConfig {
        image_size: 16,
        stem_width: 4,
        stem_stride: 1,
        stages: vec![
            CnnStage {
                width: 4,
                stride: 2,
            },
            CnnStage {
                width: 8,
                stride: 2,
            },
        ],
        num_classes: 8,
    };
    Model::init("cnn", &ModelConfig::Cnn(config), seed).unwrap()
}

fn vit(seed: u64) -> Model {
    let config = VitConfig {
        image_size: 16,
        token_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 1,
        mlp_ratio: 2,
        num_classes: 8,
    };
    Model::init("vit", &ModelConfig::Vit(config), seed).unwrap()
}

fn sweep_config(spec: MissingnessSpec) -> BiasSweepConfig {
    BiasSweepConfig {
        partition: PartitionSpec::Grid { cell_size: 4 },
        spec,
        fractions: vec![0.0, 0.25, 0.5, 1.0],
        ..BiasSweepConfig::default()
    }
}

#[test]
fn nothing_removed_keeps_every_prediction() {
    let (images, tax) = data(12);
    let cnn = cnn(1);
    let vit = vit(2);
    let maps = saliency_maps(&cnn, &images, Schedule::Serial).unwrap();
    let per_pixel = MissingnessSpec::new(MissingnessKind::RandomColorPerPixel).with_seed(4);
    let runs: Vec<(&Model, MissingnessSpec)> = vec![
        (&cnn, MissingnessSpec::black()),
        (&cnn, per_pixel.clone()),
        (&vit, MissingnessSpec::drop_tokens()),
        (&vit, MissingnessSpec::blur()),
    ];
    for (model, spec) in runs {
        let rows = bias_sweep(model, &images, Some(&maps), &tax, &sweep_config(spec)).unwrap();
        for order in ["random", "most_salient", "least_salient"] {
            assert_eq!(find_value(&rows, order, "keep_fraction", 0.0), Some(1.0));
            assert_eq!(find_value(&rows, order, "mean_wup_on_errors", 0.0), None);
        }
    }
}

#[test]
fn row_count_arithmetic() {
    let (images, tax) = data(6);
    let model = cnn(3);
    let maps = saliency_maps(&model, &images, Schedule::Serial).unwrap();
    let cfg = sweep_config(MissingnessSpec::black());
    let rows = bias_sweep(&model, &images, Some(&maps), &tax, &cfg).unwrap();
    let per_point = SWEEP_METRICS.len() + tax.num_classes();
    assert_eq!(
        rows.len(),
        cfg.orders.len() * cfg.fractions.len() * per_point
    );
    let dist_sum: f64 = rows
        .iter()
        .filter(|r| r.series == "random" && r.x == 0.5 && r.metric.starts_with("class_fraction:"))
        .map(|r| r.value.unwrap())
        .sum();
    assert!((dist_sum - 1.0).abs() < 1e-12);
}

#[test]
fn drop_tokens_on_cnn_is_a_config_error() {
    let (images, tax) = data(2);
    let cfg = sweep_config(MissingnessSpec::drop_tokens());
    let err = bias_sweep(&cnn(0), &images, None, &tax, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let consistency = ConsistencyConfig {
        drop_tokens: true,
        ..ConsistencyConfig::default()
    };
    assert!(consistency_test(&cnn(0), "cnn", &images, &consistency).is_err());
}

#[test]
fn saliency_orders_need_maps() {
    let (images, tax) = data(2);
    let cfg = sweep_config(MissingnessSpec::black());
    assert!(bias_sweep(&cnn(0), &images, None, &tax, &cfg).is_err());
    let random_only = BiasSweepConfig {
        orders: vec![RemovalOrder::Random { seed: 1 }],
        ..cfg
    };
    assert!(bias_sweep(&cnn(0), &images, None, &tax, &random_only).is_ok());
}

#[test]
fn schedules_and_reruns_agree() {
    let (images, tax) = data(10);
    let model = vit(5);
    let maps = saliency_maps(&cnn(5), &images, Schedule::Parallel).unwrap();
    assert_eq!(
        maps,
        saliency_maps(&cnn(5), &images, Schedule::Serial).unwrap()
    );
    for spec in [
        MissingnessSpec::drop_tokens(),
        MissingnessSpec::new(MissingnessKind::RandomColorPerImage).with_seed(8),
    ] {
        let serial = sweep_config(spec);
        let parallel = BiasSweepConfig {
            schedule: Schedule::Parallel,
            ..serial.clone()
        };
        let a = bias_sweep(&model, &images, Some(&maps), &tax, &serial).unwrap();
        let b = bias_sweep(&model, &images, Some(&maps), &tax, &parallel).unwrap();
        let c = bias_sweep(&model, &images, Some(&maps), &tax, &serial).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            mlab_core::io::rows_to_csv(&a).unwrap(),
            mlab_core::io::rows_to_csv(&c).unwrap()
        );
    }

    let partitions = PartitionSpec::Grid { cell_size: 4 }
        .partitions(&images)
        .unwrap();
    let params = LimeParams {
        n_perturbations: 40,
        ..LimeParams::default()
    };
    let spec = MissingnessSpec::new(MissingnessKind::RandomColorPerPixel);
    let a = lime_explanations(
        &model,
        "vit",
        &images,
        &partitions,
        &spec,
        &params,
        Schedule::Serial,
    )
    .unwrap();
    let b = lime_explanations(
        &model,
        "vit",
        &images,
        &partitions,
        &spec,
        &params,
        Schedule::Parallel,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn superpixel_sweeps_run() {
    let (images, tax) = data(4);
    let cfg = BiasSweepConfig {
        partition: PartitionSpec::Slic(SlicParams {
            k: 16,
            ..SlicParams::default()
        }),
        orders: vec![RemovalOrder::Random { seed: 2 }],
        ..sweep_config(MissingnessSpec::drop_tokens())
    };
    let rows = bias_sweep(&vit(1), &images, None, &tax, &cfg).unwrap();
    assert_eq!(find_value(&rows, "random", "keep_fraction", 0.0), Some(1.0));
}

#[test]
fn identical_models_have_no_retraining_gap() {
    let (images, tax) = data(8);
    let model = cnn(9);
    let maps = saliency_maps(&model, &images, Schedule::Serial).unwrap();
    let cfg = sweep_config(MissingnessSpec::black());
    let rows = roar_compare(&model, &model.clone(), &images, Some(&maps), &tax, &cfg).unwrap();
    let gaps: Vec<_> = rows
        .iter()
        .filter(|r| r.metric == "keep_fraction_gap")
        .collect();
    assert_eq!(gaps.len(), cfg.orders.len() * cfg.fractions.len());
    assert!(gaps.iter().all(|r| r.value == Some(0.0)));
    assert_eq!(mean_gap(&rows, "random", &[0.25, 0.5]), Some(0.0));
    assert!(rows.iter().any(|r| r.series == "standard/random"));
    assert!(rows.iter().any(|r| r.series == "retrained/least_salient"));
    assert!(roar_compare(&model, &vit(1), &images, Some(&maps), &tax, &cfg).is_err());
}

#[test]
fn ablation_endpoints() {
    let (images, _) = data(8);
    let model = cnn(4);
    let partitions = PartitionSpec::Grid { cell_size: 4 }
        .partitions(&images)
        .unwrap();
    let sources: Vec<ExplanationSource> = (0..2)
        .map(|s| ExplanationSource {
            name: format!("random{s}"),
            explanations: partitions
                .iter()
                .enumerate()
                .map(|(i, p)| random_explanation(p, "r", s * 100 + i as u64))
                .collect(),
        })
        .collect();
    let cfg = AblationConfig {
        partition: PartitionSpec::Grid { cell_size: 4 },
        k_grid: vec![0, 4, 16],
        ..AblationConfig::default()
    };
    let rows = topk_ablation(&model, &images, &sources, &cfg).unwrap();
    assert_eq!(rows.len(), 2 * 3);
    for s in &sources {
        assert_eq!(find_value(&rows, &s.name, "keep_fraction", 0.0), Some(1.0));
    }
    assert_eq!(
        find_value(&rows, "random0", "keep_fraction", 16.0),
        find_value(&rows, "random1", "keep_fraction", 16.0)
    );

    let wrong = AblationConfig {
        partition: PartitionSpec::Grid { cell_size: 8 },
        ..cfg
    };
    assert!(matches!(
        topk_ablation(&model, &images, &sources, &wrong),
        Err(Error::PartitionMismatch(_))
    ));
}

#[test]
fn consistency_rows_and_references() {
    let (images, _) = data(3);
    let model = vit(6);
    let base = ConsistencyConfig {
        partition: PartitionSpec::Grid { cell_size: 4 },
        k_grid: vec![1, 4, 16, 32],
        lime: LimeParams {
            n_perturbations: 32,
            ..LimeParams::default()
        },
        ..ConsistencyConfig::default()
    };
    let colors = consistency_test(&model, "vit", &images, &base).unwrap();
    let dropped = consistency_test(
        &model,
        "vit",
        &images,
        &ConsistencyConfig {
            drop_tokens: true,
            ..base.clone()
        },
    )
    .unwrap();
    for rows in [&colors, &dropped] {
        assert_eq!(rows.len(), base.k_grid.len() * (28 + 2));
        for &k in &[1.0, 4.0, 16.0] {
            let pairs = rows
                .iter()
                .filter(|r| r.x == k && r.series.starts_with("pair:"))
                .count();
            assert_eq!(pairs, 28);
        }
        assert_eq!(find_value(rows, "random", "jaccard", 16.0), Some(1.0));
        assert_eq!(find_value(rows, "mean", "jaccard", 16.0), Some(1.0));
        assert_eq!(find_value(rows, "mean", "jaccard", 32.0), None);
    }
    assert!(dropped
        .iter()
        .filter(|r| r.series.starts_with("pair:") && r.x <= 16.0)
        .all(|r| r.value == Some(1.0)));
    assert!(dropped.iter().all(|r| r.spec == "drop_tokens"));
    assert!(colors
        .iter()
        .any(|r| r.series == "pair:000-111" && r.x == 4.0));

    let parallel = ConsistencyConfig {
        schedule: Schedule::Parallel,
        ..base.clone()
    };
    assert_eq!(
        consistency_test(&model, "vit", &images, &parallel).unwrap(),
        colors
    );
}
