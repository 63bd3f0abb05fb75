//! Brute-force k-nearest neighbours under Euclidean distance.
//!
//! Neighbours are ordered by distance, then by insertion order. The vote is
//! an unweighted majority; ties go to the label with the smallest summed
//! distance, then to the lowest label.

use std::cmp::Ordering;

use crate::corpus::{ClassMap, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::features::{Histogram, BINS};

pub const MAX_K: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    points: Vec<[f64; BINS]>,
    labels: Vec<usize>,
    k: usize,
    classes: ClassMap,
}

impl KnnModel {
    /// Stored points are rounded to `f32` so saved models predict identically.
    pub fn new(points: Vec<[f64; BINS]>, labels: Vec<usize>, k: usize, classes: ClassMap) -> Result<Self> {
        if !(1..=MAX_K).contains(&k) {
            return Err(Error::InvalidArgument(format!("k must be in 1..={MAX_K}, got {k}")));
        }
        if points.is_empty() {
            return Err(Error::EmptySupervisedSet);
        }
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                actual: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: classes.len(),
            });
        }
        let points = points
            .into_iter()
            .map(|mut p| {
                p.iter_mut().for_each(|v| *v = *v as f32 as f64);
                p
            })
            .collect();
        Ok(KnnModel {
            points,
            labels,
            k,
            classes,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[[f64; BINS]] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Same stored set, different `k`.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        KnnModel::new(self.points.clone(), self.labels.clone(), k, self.classes.clone())
    }

    /// `(index, squared distance)` of the k nearest stored points, nearest first.
    pub fn neighbors(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, query)))
            .collect();
        let by_distance = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let k = self.k.min(all.len());
        if all.len() > k {
            all.select_nth_unstable_by(k - 1, by_distance);
            all.truncate(k);
        }
        all.sort_by(by_distance);
        all
    }

    fn votes(&self, query: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let mut counts = vec![0usize; self.classes.len()];
        let mut dist = vec![0.0f64; self.classes.len()];
        for (i, d2) in self.neighbors(query) {
            counts[self.labels[i]] += 1;
            dist[self.labels[i]] += d2.sqrt();
        }
        (counts, dist)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

pub fn knn_fit<'a, I>(samples: I, classes: &ClassMap, k: usize) -> Result<KnnModel>
where
    I: IntoIterator<Item = &'a LabeledSample>,
{
    let (points, labels) = samples.into_iter().map(|s| (*s.features.bins(), s.label)).unzip();
    KnnModel::new(points, labels, k, classes.clone())
}

pub fn knn_predict(model: &KnnModel, histogram: &Histogram) -> usize {
    model.predict(histogram)
}

impl Predictor for KnnModel {
    fn classes(&self) -> &ClassMap {
        &self.classes
    }

    /// Vote fractions among the k neighbours.
    fn predict_proba(&self, x: &Histogram) -> Vec<f64> {
        let (counts, _) = self.votes(x.as_slice());
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    fn predict(&self, x: &Histogram) -> usize {
        let (counts, dist) = self.votes(x.as_slice());
        let mut best = 0;
        for label in 1..counts.len() {
            let better = match counts[label].cmp(&counts[best]) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => dist[label] < dist[best],
            };
            if better {
                best = label;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(values: &[(usize, f64)]) -> [f64; BINS] {
        let mut p = [0.0; BINS];
        for &(i, v) in values {
            p[i] = v;
        }
        p
    }

    fn model(points: Vec<[f64; BINS]>, labels: Vec<usize>, k: usize) -> KnnModel {
        KnnModel::new(points, labels, k, ClassMap::new(["a", "b", "c"])).unwrap()
    }

    #[test]
    fn k1_returns_exact_match_label() {
        let m = model(vec![point(&[(0, 1.0)]), point(&[(1, 1.0)]), point(&[(2, 1.0)])], vec![0, 1, 2], 1);
        let q = Histogram::from_bins_unchecked(point(&[(1, 1.0)]));
        assert_eq!(knn_predict(&m, &q), 1);
    }

    #[test]
    fn majority_vote() {
        let m = model(
            vec![point(&[(0, 0.9)]), point(&[(0, 0.8)]), point(&[(0, 0.95)]), point(&[(1, 1.0)])],
            vec![0, 0, 1, 2],
            3,
        );
        let q = Histogram::from_bins_unchecked(point(&[(0, 1.0)]));
        assert_eq!(m.predict(&q), 0);
        let p = m.predict_proba(&q);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vote_tie_goes_to_smaller_summed_distance_then_lower_label() {
        // k=2, one neighbour of each label; label 1 is closer
        let m = model(vec![point(&[(0, 0.5)]), point(&[(0, 0.9)])], vec![0, 1], 2);
        assert_eq!(m.predict(&Histogram::from_bins_unchecked(point(&[(0, 1.0)]))), 1);
        // equidistant: lowest label
        let m = model(vec![point(&[(0, 1.0)]), point(&[(1, 1.0)])], vec![1, 0], 2);
        assert_eq!(m.predict(&Histogram::from_bins_unchecked(point(&[]))), 0);
    }

    #[test]
    fn distance_ties_use_insertion_order() {
        let m = model(vec![point(&[(0, 1.0)]), point(&[(1, 1.0)]), point(&[(2, 1.0)])], vec![2, 1, 0], 1);
        assert_eq!(m.neighbors(&point(&[])), vec![(0, 1.0)]);
        assert_eq!(m.predict(&Histogram::from_bins_unchecked(point(&[]))), 2);
    }

    #[test]
    fn invalid_models() {
        let classes = ClassMap::new(["a"]);
        assert!(KnnModel::new(vec![point(&[])], vec![0], 0, classes.clone()).is_err());
        assert!(KnnModel::new(vec![point(&[])], vec![0], 7, classes.clone()).is_err());
        assert!(matches!(KnnModel::new(vec![], vec![], 1, classes.clone()), Err(Error::EmptySupervisedSet)));
        assert!(KnnModel::new(vec![point(&[])], vec![1], 1, classes).is_err());
    }

    #[test]
    fn k_larger_than_store_uses_everything() {
        let m = model(vec![point(&[(0, 1.0)]), point(&[(0, 0.5)])], vec![1, 1], 6);
        assert_eq!(m.neighbors(&point(&[])).len(), 2);
        assert_eq!(m.predict(&Histogram::from_bins_unchecked(point(&[]))), 1);
    }
}
