use std::collections::VecDeque;

use mlab_core::data::{generate, SyntheticDatasetSpec};
use mlab_core::io::{decode_pgm, encode_pgm};
use mlab_core::missingness::{PartitionKind, Region};
use mlab_core::superpixels::{labelmap_to_partition, slic, LabelMap, SlicParams};
use mlab_core::Image;

fn test_images() -> Vec<Image> {
    let spec = SyntheticDatasetSpec {
        n_train: 0,
        n_test: 10,
        seed: 3,
        ..SyntheticDatasetSpec::default()
    };
    generate(&spec).unwrap().test.images
}

/// Counts the 4-connected components of one label by flood fill.
fn label_components(map: &LabelMap, label: u32) -> usize {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if map.labels[start] != label || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if map.labels[q] == label && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    count
}

#[test]
fn dataset_images_partition_cleanly() {
    let params = SlicParams::default();
    for img in test_images() {
        let map = slic(&img, &params).unwrap();
        assert_eq!(map.labels.len(), img.pixels());
        let labels = map.num_labels();
        assert!(labels >= 1 && labels <= 2 * params.k, "{labels} labels");
        for l in 0..labels as u32 {
            assert_eq!(label_components(&map, l), 1, "label {l} is not 4-connected");
        }
        map.validate().unwrap();

        let partition = labelmap_to_partition(&map).unwrap();
        assert_eq!(partition.len(), labels);
        let mut covered = vec![0u8; img.pixels()];
        for (r, region) in partition.regions().iter().enumerate() {
            for p in region.pixel_indices(img.width()) {
                covered[p] += 1;
                assert_eq!(map.labels[p], r as u32);
            }
        }
        assert!(covered.iter().all(|&c| c == 1));

        assert_eq!(slic(&img, &params).unwrap(), map);
    }
}

#[test]
fn constant_image_follows_seeding_grid() {
    let img = Image::filled(64, 64, [0.4, 0.5, 0.6]);
    for k in [4, 16, 64] {
        let map = slic(
            &img,
            &SlicParams {
                k,
                ..SlicParams::default()
            },
        )
        .unwrap();
        let expect = 64.0 * 64.0 / k as f64;
        let mut counts = vec![0usize; map.num_labels()];
        for &l in &map.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts.len(), k);
        for c in counts {
            assert!(
                (c as f64 - expect).abs() <= 0.2 * expect,
                "k={k}: {c} vs {expect}"
            );
        }
    }
}

#[test]
fn two_halves_separate() {
    let mut img = Image::filled(32, 32, [0.9, 0.1, 0.1]);
    for y in 0..32 {
        for x in 16..32 {
            img.set_rgb(y * 32 + x, [0.1, 0.2, 0.9]);
        }
    }
    let map = slic(
        &img,
        &SlicParams {
            k: 2,
            ..SlicParams::default()
        },
    )
    .unwrap();
    for l in 0..map.num_labels() as u32 {
        let (mut left, mut right) = (0usize, 0usize);
        for (p, &v) in map.labels.iter().enumerate() {
            if v == l {
                if p % 32 < 16 {
                    left += 1;
                } else {
                    right += 1;
                }
            }
        }
        let purity = left.max(right) as f64 / (left + right) as f64;
        assert!(purity >= 0.95, "label {l} purity {purity}");
    }
}

#[test]
fn small_label_maps_to_partition() {
    let one = LabelMap {
        height: 3,
        width: 5,
        labels: vec![0; 15],
    };
    let p = labelmap_to_partition(&one).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p.regions()[0].len(), 15);
    assert_eq!(p.kind(), &PartitionKind::Superpixels);

    let checker = LabelMap {
        height: 2,
        width: 2,
        labels: vec![0, 1, 2, 3],
    };
    let p = labelmap_to_partition(&checker).unwrap();
    assert_eq!(p.len(), 4);
    for (r, region) in p.regions().iter().enumerate() {
        assert_eq!(region, &Region::Pixels(vec![r as u32]));
    }
}

#[test]
fn regions_follow_ascending_label() {
    let map = LabelMap {
        height: 2,
        width: 4,
        labels: vec![0, 0, 1, 1, 2, 2, 1, 1],
    };
    let p = labelmap_to_partition(&map).unwrap();
    assert_eq!(p.regions()[0].pixel_indices(4), vec![0, 1]);
    assert_eq!(p.regions()[1].pixel_indices(4), vec![2, 3, 6, 7]);
    assert_eq!(p.regions()[2].pixel_indices(4), vec![4, 5]);
}

#[test]
fn label_map_exports_as_graymap() {
    let img = test_images().remove(0);
    let map = slic(&img, &SlicParams::default()).unwrap();
    assert!(map.num_labels() <= 256);
    let bytes: Vec<u8> = map.labels.iter().map(|&l| l as u8).collect();
    let encoded = encode_pgm(map.width, map.height, &bytes).unwrap();
    let (w, h, decoded) = decode_pgm(&encoded).unwrap();
    assert_eq!((w, h), (map.width, map.height));
    assert_eq!(decoded, bytes);
}

#[test]
fn invalid_params_rejected() {
    let img = Image::filled(8, 8, [0.0; 3]);
    assert!(slic(
        &img,
        &SlicParams {
            k: 0,
            ..SlicParams::default()
        }
    )
    .is_err());
    assert!(slic(
        &img,
        &SlicParams {
            iterations: 0,
            ..SlicParams::default()
        }
    )
    .is_err());
    assert!(slic(
        &img,
        &SlicParams {
            compactness: 0.0,
            ..SlicParams::default()
        }
    )
    .is_err());
}
