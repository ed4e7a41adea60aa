use mlab_core::attribution::Explanation;
use mlab_core::data::SyntheticDatasetSpec;
use mlab_core::metrics::{entropy, topk_jaccard, wu_palmer, Taxonomy, TaxonomyNode};
use proptest::prelude::*;
use rand::Rng;

fn shipped() -> Taxonomy {
    SyntheticDatasetSpec::default().validate().unwrap()
}

/// Root-to-leaf name paths, collected independently of `Taxonomy`.
fn leaf_paths(node: &TaxonomyNode, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    prefix.push(node.name.clone());
    if node.children.is_empty() {
        out.push(prefix.clone());
    }
    for child in &node.children {
        leaf_paths(child, prefix, out);
    }
    prefix.pop();
}

#[test]
fn shipped_taxonomy_matches_path_oracle() {
    let tax = shipped();
    let mut paths = Vec::new();
    leaf_paths(tax.root(), &mut Vec::new(), &mut paths);
    assert_eq!(paths.len(), tax.num_classes());
    for a in 0..paths.len() {
        for b in 0..paths.len() {
            let common = paths[a]
                .iter()
                .zip(&paths[b])
                .take_while(|(x, y)| x == y)
                .count();
            let expect = 2.0 * common as f64 / (paths[a].len() + paths[b].len()) as f64;
            let got = wu_palmer(&tax, a, b).unwrap();
            assert!((got - expect).abs() < 1e-12, "{a} {b}");
            assert_eq!(got, wu_palmer(&tax, b, a).unwrap());
            assert!(got > 0.0 && got <= 1.0);
        }
        assert_eq!(wu_palmer(&tax, a, a).unwrap(), 1.0);
    }
}

#[test]
fn shipped_taxonomy_levels() {
    let tax = shipped();
    let idx = |n: &str| tax.class_index(n).unwrap();
    assert_eq!(
        tax.wu_palmer(idx("red_disc"), idx("blue_disc")).unwrap(),
        0.75
    );
    assert_eq!(
        tax.wu_palmer(idx("red_disc"), idx("red_ring")).unwrap(),
        0.5
    );
    assert_eq!(
        tax.wu_palmer(idx("red_disc"), idx("red_cross")).unwrap(),
        0.25
    );
}

#[test]
fn entropy_bounded_by_log_classes() {
    let mut rng = mlab_core::seed::rng(17);
    for _ in 0..100 {
        let c = rng.gen_range(1..20);
        let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = entropy(&p);
        assert!(h >= 0.0 && h <= (c as f64).ln() + 1e-12);
    }
    let uniform = vec![0.125; 8];
    assert!((entropy(&uniform) - 8f64.ln()).abs() < 1e-9);
}

fn explanation(scores: Vec<f64>) -> Explanation {
    Explanation {
        model_id: "m".into(),
        partition: "grid".into(),
        method: "test".into(),
        seed: 0,
        target_class: 0,
        spec: None,
        scores,
    }
}

proptest! {
    #[test]
    fn jaccard_symmetric_and_reflexive(a in proptest::collection::vec(0.0f64..1.0, 12), b in proptest::collection::vec(0.0f64..1.0, 12), k in 1usize..=12) {
        let (ea, eb) = (explanation(a), explanation(b));
        let ab = topk_jaccard(&ea, &eb, k).unwrap();
        prop_assert_eq!(ab, topk_jaccard(&eb, &ea, k).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(topk_jaccard(&ea, &ea, k).unwrap(), 1.0);
    }
}
