//! Unpruned CART classification tree with Gini impurity.

use crate::corpus::{ClassMap, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::features::{Histogram, BINS};

/// Splits must lower impurity by more than this.
const MIN_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Samples with `x[feature] <= threshold` go left.
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        label: usize,
        class_counts: Vec<u32>,
    },
}

impl TreeNode {
    fn leaf(counts: Vec<u32>) -> TreeNode {
        let mut label = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[label] {
                label = i;
            }
        }
        TreeNode::Leaf {
            label,
            class_counts: counts,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Internal { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    fn find_leaf(&self, x: &[f64]) -> &TreeNode {
        let mut node = self;
        while let TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } = node
        {
            node = if x[*feature] <= *threshold { left } else { right };
        }
        node
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    root: TreeNode,
    classes: ClassMap,
}

impl DecisionTree {
    pub fn new(root: TreeNode, classes: ClassMap) -> Result<Self> {
        validate(&root, &classes)?;
        Ok(DecisionTree { root, classes })
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }
}

fn validate(node: &TreeNode, classes: &ClassMap) -> Result<()> {
    match node {
        TreeNode::Leaf { label, class_counts } => {
            if *label >= classes.len() || class_counts.len() != classes.len() {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    classes: classes.len(),
                });
            }
            Ok(())
        }
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            if *feature >= BINS || !threshold.is_finite() {
                return Err(Error::InvalidArgument(format!("bad split on feature {feature}")));
            }
            validate(left, classes)?;
            validate(right, classes)
        }
    }
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Split {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

/// Best split over every feature and every midpoint between adjacent distinct
/// values. Earliest feature, then smallest threshold, wins ties.
fn best_split(data: &[&[f64; BINS]], labels: &[usize], idx: &[usize], n_classes: usize, parent: &[u32]) -> Option<Split> {
    let n = idx.len() as u32;
    let parent_gini = gini(parent, n);
    let mut best: Option<Split> = None;
    let mut order = idx.to_vec();
    let mut left = vec![0u32; n_classes];
    let mut right = vec![0u32; n_classes];
    #[allow(clippy::needless_range_loop)]
    for feature in 0..BINS {
        order.sort_by(|&a, &b| data[a][feature].total_cmp(&data[b][feature]).then(a.cmp(&b)));
        left.iter_mut().for_each(|c| *c = 0);
        right.copy_from_slice(parent);
        for pos in 0..order.len() - 1 {
            let i = order[pos];
            left[labels[i]] += 1;
            right[labels[i]] -= 1;
            let lo = data[i][feature];
            let hi = data[order[pos + 1]][feature];
            if lo == hi {
                continue;
            }
            let nl = pos as u32 + 1;
            let nr = n - nl;
            let weighted = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            let decrease = parent_gini - weighted;
            if decrease > MIN_DECREASE && best.as_ref().is_none_or(|b| decrease > b.decrease) {
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(Split {
                    feature,
                    threshold,
                    decrease,
                });
            }
        }
    }
    best
}

fn grow(data: &[&[f64; BINS]], labels: &[usize], idx: Vec<usize>, n_classes: usize) -> TreeNode {
    let mut counts = vec![0u32; n_classes];
    for &i in &idx {
        counts[labels[i]] += 1;
    }
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if pure || idx.len() < 2 {
        return TreeNode::leaf(counts);
    }
    match best_split(data, labels, &idx, n_classes, &counts) {
        None => TreeNode::leaf(counts),
        Some(split) => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| data[i][split.feature] <= split.threshold);
            TreeNode::Internal {
                feature: split.feature,
                threshold: split.threshold,
                left: Box::new(grow(data, labels, l, n_classes)),
                right: Box::new(grow(data, labels, r, n_classes)),
            }
        }
    }
}

pub fn tree_fit<'a, I>(samples: I, classes: &ClassMap) -> Result<DecisionTree>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let samples: Vec<&LabeledSample> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::EmptySupervisedSet);
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes.len()) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: classes.len(),
        });
    }
    let data: Vec<&[f64; BINS]> = samples.iter().map(|s| s.features.bins()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let root = grow(&data, &labels, (0..samples.len()).collect(), classes.len());
    Ok(DecisionTree {
        root,
        classes: classes.clone(),
    })
}

pub fn tree_predict(tree: &DecisionTree, histogram: &Histogram) -> usize {
    tree.predict(histogram)
}

impl Predictor for DecisionTree {
    fn classes(&self) -> &ClassMap {
        &self.classes
    }

    /// Class distribution of the training samples at the reached leaf.
    fn predict_proba(&self, x: &Histogram) -> Vec<f64> {
        match self.root.find_leaf(x.as_slice()) {
            TreeNode::Leaf { class_counts, .. } => {
                let total: u32 = class_counts.iter().sum();
                class_counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
            }
            TreeNode::Internal { .. } => unreachable!("find_leaf stops at leaves"),
        }
    }

    fn predict(&self, x: &Histogram) -> usize {
        match self.root.find_leaf(x.as_slice()) {
            TreeNode::Leaf { label, .. } => *label,
            TreeNode::Internal { .. } => unreachable!("find_leaf stops at leaves"),
        }
    }
}
