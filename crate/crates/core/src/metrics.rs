//! Prediction-shift measurements: class distributions and entropy, keep
//! fractions, taxonomy similarity of changed predictions and top-k overlap.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::Explanation;
use crate::error::{Error, Result};

/// A node as stored on disk: a name and optional children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TaxonomyNode>,
}

impl TaxonomyNode {
    pub fn leaf(name: &str) -> Self {
        Self {
            name: name.into(),
            children: Vec::new(),
        }
    }

    pub fn branch(name: &str, children: Vec<TaxonomyNode>) -> Self {
        Self {
            name: name.into(),
            children,
        }
    }
}

/// Rooted class tree; leaves in depth-first order are the classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    root: TaxonomyNode,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    leaves: Vec<usize>,
}

impl Taxonomy {
    pub fn new(root: TaxonomyNode) -> Result<Self> {
        let mut tax = Self {
            root: root.clone(),
            names: Vec::new(),
            parent: Vec::new(),
            depth: Vec::new(),
            leaves: Vec::new(),
        };
        tax.walk(&root, None, 1);
        let mut seen = BTreeSet::new();
        for &l in &tax.leaves {
            if !seen.insert(tax.names[l].as_str()) {
                return Err(Error::Format(format!(
                    "duplicate class name {}",
                    tax.names[l]
                )));
            }
        }
        Ok(tax)
    }

    fn walk(&mut self, node: &TaxonomyNode, parent: Option<usize>, depth: usize) {
        let id = self.names.len();
        self.names.push(node.name.clone());
        self.parent.push(parent);
        self.depth.push(depth);
        if node.children.is_empty() {
            self.leaves.push(id);
        }
        for child in &node.children {
            self.walk(child, Some(id), depth + 1);
        }
    }

    pub fn root(&self) -> &TaxonomyNode {
        &self.root
    }

    pub fn num_classes(&self) -> usize {
        self.leaves.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .map(|&l| self.names[l].as_str())
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.leaves.iter().position(|&l| self.names[l] == name)
    }

    /// Depth of a class leaf, counting the root as depth 1.
    pub fn depth(&self, class: usize) -> Result<usize> {
        Ok(self.depth[self.leaf(class)?])
    }

    fn leaf(&self, class: usize) -> Result<usize> {
        self.leaves
            .get(class)
            .copied()
            .ok_or(Error::UnknownClass(class))
    }

    fn ancestors(&self, mut node: usize) -> Vec<usize> {
        let mut out = vec![node];
        while let Some(p) = self.parent[node] {
            out.push(p);
            node = p;
        }
        out
    }

    /// Wu-Palmer similarity `2 depth(lca) / (depth(a) + depth(b))`.
    pub fn wu_palmer(&self, a: usize, b: usize) -> Result<f64> {
        let (na, nb) = (self.leaf(a)?, self.leaf(b)?);
        let up: BTreeSet<usize> = self.ancestors(na).into_iter().collect();
        let lca = self
            .ancestors(nb)
            .into_iter()
            .find(|n| up.contains(n))
            .expect("every node reaches the root");
        Ok(2.0 * self.depth[lca] as f64 / (self.depth[na] + self.depth[nb]) as f64)
    }
}

pub fn wu_palmer(tax: &Taxonomy, a: usize, b: usize) -> Result<f64> {
    tax.wu_palmer(a, b)
}

pub fn class_distribution(preds: &[usize], classes: usize) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let mut counts = vec![0usize; classes];
    for &p in preds {
        *counts.get_mut(p).ok_or(Error::UnknownClass(p))? += 1;
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / preds.len() as f64)
        .collect())
}

/// Shannon entropy in nats, skipping zero-probability classes.
pub fn entropy(distribution: &[f64]) -> f64 {
    // Folding from +0.0 keeps a point mass at +0.0 rather than -0.0.
    distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .fold(0.0, |acc, &p| acc - p * p.ln())
}

pub fn class_entropy(preds: &[usize], classes: usize) -> Result<f64> {
    Ok(entropy(&class_distribution(preds, classes)?))
}

/// Predictions before removal and under each removal configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionTable {
    pub original: Vec<usize>,
    pub configs: Vec<Vec<usize>>,
}

impl PredictionTable {
    pub fn new(original: Vec<usize>) -> Self {
        Self {
            original,
            configs: Vec::new(),
        }
    }

    /// Appends a column of predictions and returns its index.
    pub fn push(&mut self, preds: Vec<usize>) -> Result<usize> {
        if preds.len() != self.original.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} images",
                preds.len(),
                self.original.len()
            )));
        }
        self.configs.push(preds);
        Ok(self.configs.len() - 1)
    }

    pub fn keep_fraction(&self, config: usize) -> Result<f64> {
        keep_fraction(&self.original, self.column(config)?)
    }

    pub fn mean_wup_on_errors(&self, config: usize, tax: &Taxonomy) -> Result<Option<f64>> {
        mean_wup_on_errors(&self.original, self.column(config)?, tax)
    }

    fn column(&self, config: usize) -> Result<&[usize]> {
        self.configs
            .get(config)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidParam(format!("no prediction column {config}")))
    }
}

/// Fraction of images whose prediction is unchanged.
pub fn keep_fraction(original: &[usize], altered: &[usize]) -> Result<f64> {
    if original.is_empty() {
        return Err(Error::Empty("prediction table"));
    }
    if original.len() != altered.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} predictions",
            original.len(),
            altered.len()
        )));
    }
    let kept = original.iter().zip(altered).filter(|(a, b)| a == b).count();
    Ok(kept as f64 / original.len() as f64)
}

/// Mean Wu-Palmer similarity between old and new prediction over the images
/// whose prediction changed; `None` when nothing changed.
pub fn mean_wup_on_errors(
    original: &[usize],
    altered: &[usize],
    tax: &Taxonomy,
) -> Result<Option<f64>> {
    if original.len() != altered.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} predictions",
            original.len(),
            altered.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (&a, &b) in original.iter().zip(altered) {
        if a != b {
            total += tax.wu_palmer(a, b)?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Jaccard overlap of the two explanations' top-k region sets.
pub fn topk_jaccard(e1: &Explanation, e2: &Explanation, k: usize) -> Result<f64> {
    if e1.partition != e2.partition || e1.len() != e2.len() {
        return Err(Error::PartitionMismatch(format!(
            "{} vs {}",
            e1.partition, e2.partition
        )));
    }
    if k == 0 || k > e1.len() {
        return Err(Error::InvalidParam(format!(
            "k = {k} for {} regions",
            e1.len()
        )));
    }
    let a: BTreeSet<usize> = e1.top_k(k)?.into_iter().collect();
    let b: BTreeSet<usize> = e2.top_k(k)?.into_iter().collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_tree() -> Taxonomy {
        Taxonomy::new(TaxonomyNode::branch(
            "root",
            vec![
                TaxonomyNode::branch(
                    "A",
                    vec![TaxonomyNode::leaf("a1"), TaxonomyNode::leaf("a2")],
                ),
                TaxonomyNode::branch("B", vec![TaxonomyNode::leaf("b1")]),
            ],
        ))
        .unwrap()
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

    #[test]
    fn distributions() {
        assert_eq!(
            class_distribution(&[0, 0, 1, 1], 2).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(class_distribution(&[2, 2], 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(
            class_distribution(&[0, 1, 1, 1], 3).unwrap(),
            vec![0.25, 0.75, 0.0]
        );
        assert!(class_distribution(&[], 3).is_err());
        assert!(class_distribution(&[3], 3).is_err());
    }

    #[test]
    fn entropies() {
        let uniform: Vec<usize> = (0..10).collect();
        assert!((class_entropy(&uniform, 10).unwrap() - 10f64.ln()).abs() < 1e-9);
        let point = class_entropy(&[4, 4, 4], 10).unwrap();
        assert_eq!(point.to_bits(), 0f64.to_bits());
        let direct = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((class_entropy(&[0, 0, 0, 1], 2).unwrap() - direct).abs() < 1e-12);
        assert!((direct - 0.562335).abs() < 1e-6);
        assert!(class_entropy(&[], 2).is_err());
    }

    #[test]
    fn keep_fractions() {
        assert_eq!(keep_fraction(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(keep_fraction(&[1, 2], &[0, 0]).unwrap(), 0.0);
        assert_eq!(keep_fraction(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(keep_fraction(&[], &[]).is_err());
        let mut t = PredictionTable::new(vec![0, 1]);
        let c = t.push(vec![0, 0]).unwrap();
        assert_eq!(t.keep_fraction(c).unwrap(), 0.5);
        assert!(t.push(vec![0]).is_err());
    }

    #[test]
    fn wu_palmer_hand_cases() {
        let t = small_tree();
        assert_eq!(t.class_names(), vec!["a1", "a2", "b1"]);
        assert_eq!(t.wu_palmer(0, 0).unwrap(), 1.0);
        assert!((t.wu_palmer(0, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.wu_palmer(0, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(t.wu_palmer(0, 3), Err(Error::UnknownClass(3))));
    }

    #[test]
    fn wup_on_errors() {
        let t = small_tree();
        assert_eq!(mean_wup_on_errors(&[0, 1], &[0, 1], &t).unwrap(), None);
        let one = mean_wup_on_errors(&[0, 2], &[1, 2], &t).unwrap().unwrap();
        assert!((one - 2.0 / 3.0).abs() < 1e-12);
        let two = mean_wup_on_errors(&[0, 0], &[1, 2], &t).unwrap().unwrap();
        assert!((two - 0.5).abs() < 1e-12);
    }

    #[test]
    fn jaccard_cases() {
        let a = explanation(vec![0.0, 0.9, 0.8, 0.7, 0.1]);
        let b = explanation(vec![0.0, 0.1, 0.8, 0.7, 0.9]);
        assert_eq!(topk_jaccard(&a, &b, 3).unwrap(), 0.5);
        for k in 1..=5 {
            assert_eq!(topk_jaccard(&a, &a, k).unwrap(), 1.0);
        }
        let c = explanation(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = explanation(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(topk_jaccard(&c, &d, 1).unwrap(), 0.0);
        let mut other = a.clone();
        other.partition = "superpixels".into();
        assert!(matches!(
            topk_jaccard(&a, &other, 1),
            Err(Error::PartitionMismatch(_))
        ));
    }
}
