//! Scoring: accuracy and confusion matrices, the supervision-budget sweep,
//! the header-overwrite robustness check and CSV report rendering.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::baselines::{knn_fit, train_mlp, tree_fit, MAX_K};
use crate::corpus::{ClassMap, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::features::{normalize, raw_histogram_file, Histogram};
use crate::ndmath::activation::argmax;
use crate::ndmath::{derive_seed, DenseNet};
use crate::par::{self, Exec};
use crate::sgan::{self, Classifier, SganModel, TrainConfig, TrainHistory};

/// Anything that maps a histogram to a class of a known [`ClassMap`].
pub trait Predictor: Sync {
    fn classes(&self) -> &ClassMap;

    fn predict_proba(&self, x: &Histogram) -> Vec<f64>;

    fn predict(&self, x: &Histogram) -> usize {
        argmax(&self.predict_proba(x))
    }

    fn predict_batch(&self, xs: &[&Histogram], exec: Exec) -> Vec<usize> {
        par::map(exec, xs, |x| self.predict(x))
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    classes: ClassMap,
}

impl ConfusionMatrix {
    pub fn new(classes: ClassMap) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            counts: vec![vec![0; n]; n],
            classes,
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn classes(&self) -> &ClassMap {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// `None` for classes absent from the evaluated set.
    pub fn recall(&self, class: usize) -> Option<f64> {
        match self.row_total(class) {
            0 => None,
            t => Some(self.counts[class][class] as f64 / t as f64),
        }
    }

    /// Row-normalized percentages; empty rows are all zero.
    pub fn row_percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if t == 0 { 0.0 } else { 100.0 * c as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }

    /// Present class with the lowest recall (earliest on ties).
    pub fn worst_class(&self) -> Option<usize> {
        let mut worst: Option<(usize, f64)> = None;
        for c in 0..self.counts.len() {
            if let Some(r) = self.recall(c) {
                if worst.is_none_or(|(_, w)| r < w) {
                    worst = Some((c, r));
                }
            }
        }
        worst.map(|(c, _)| c)
    }

    /// Most frequent wrong prediction for `class`, if it was ever misclassified.
    pub fn dominant_confusion(&self, class: usize) -> Option<usize> {
        let row = &self.counts[class];
        let mut best: Option<usize> = None;
        for (p, &c) in row.iter().enumerate() {
            if p != class && c > 0 && best.is_none_or(|b| c > row[b]) {
                best = Some(p);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Score `predictor` on `test`; labels index the predictor's class map.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, test: &[LabeledSample]) -> Result<Evaluation> {
    let xs: Vec<&Histogram> = test.iter().map(|s| &s.features).collect();
    let predictions = predictor.predict_batch(&xs, Exec::default());
    evaluate_predictions(&predictions, test, predictor.classes())
}

pub fn evaluate_predictions(predictions: &[usize], test: &[LabeledSample], classes: &ClassMap) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if predictions.len() != test.len() {
        return Err(Error::DimensionMismatch {
            expected: test.len(),
            actual: predictions.len(),
        });
    }
    let mut confusion = ConfusionMatrix::new(classes.clone());
    for (s, &p) in test.iter().zip(predictions) {
        if s.label >= classes.len() || p >= classes.len() {
            return Err(Error::LabelOutOfRange {
                label: s.label.max(p),
                classes: classes.len(),
            });
        }
        confusion.record(s.label, p);
    }
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sgan,
    Mlp,
    Tree,
    Knn(usize),
}

impl Algorithm {
    /// The nine reference columns: SGAN, MLP, tree, kNN k = 1..6.
    pub fn all() -> Vec<Algorithm> {
        let mut v = vec![Algorithm::Sgan, Algorithm::Mlp, Algorithm::Tree];
        v.extend((1..=MAX_K).map(Algorithm::Knn));
        v
    }

    /// Stable id used in seed derivation.
    pub fn id(self) -> u64 {
        match self {
            Algorithm::Sgan => 0,
            Algorithm::Mlp => 1,
            Algorithm::Tree => 2,
            Algorithm::Knn(k) => 10 + k as u64,
        }
    }

    pub fn name(self) -> String {
        match self {
            Algorithm::Sgan => "sgan".into(),
            Algorithm::Mlp => "mlp".into(),
            Algorithm::Tree => "tree".into(),
            Algorithm::Knn(k) => format!("knn_k{k}"),
        }
    }

    /// Parse a name; `knn` alone expands to every k.
    pub fn parse_list(text: &str) -> Result<Vec<Algorithm>> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "sgan" => out.push(Algorithm::Sgan),
                "mlp" => out.push(Algorithm::Mlp),
                "tree" => out.push(Algorithm::Tree),
                "knn" => out.extend((1..=MAX_K).map(Algorithm::Knn)),
                other => {
                    let k = other
                        .strip_prefix("knn_k")
                        .or_else(|| other.strip_prefix("knn"))
                        .and_then(|k| k.parse::<usize>().ok())
                        .filter(|k| (1..=MAX_K).contains(k))
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm {other:?}")))?;
                    out.push(Algorithm::Knn(k));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("no algorithms given".into()));
        }
        Ok(out)
    }
}

/// Budgets of the reference sweep, largest first.
pub const REFERENCE_BUDGETS: [usize; 5] = [2288, 1144, 500, 100, 50];

/// Part id mixed into the supervised-subset seed.
const SUBSET_STREAM: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub algorithms: Vec<Algorithm>,
    pub budgets: Vec<usize>,
    pub replicates: usize,
    pub master_seed: u64,
    /// Shared by the SGAN and MLP; its `seed` is overridden per cell.
    pub train: TrainConfig,
}

impl SweepPlan {
    /// Training seed of one cell: `derive_seed(master, [budget, algorithm id, replicate])`.
    pub fn cell_seed(&self, budget: usize, algorithm: Algorithm, replicate: usize) -> u64 {
        derive_seed(self.master_seed, &[budget as u64, algorithm.id(), replicate as u64])
    }

    /// Supervised-subset seed, shared by every algorithm of a (budget, replicate).
    pub fn subset_seed(&self, budget: usize, replicate: usize) -> u64 {
        derive_seed(self.master_seed, &[budget as u64, SUBSET_STREAM, replicate as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub budgets: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub replicates: usize,
    pub master_seed: u64,
    /// `[budget][algorithm][replicate]` test accuracies.
    pub accuracies: Vec<Vec<Vec<f64>>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl SweepResult {
    pub fn median(&self, budget_idx: usize, algorithm_idx: usize) -> f64 {
        median(&self.accuracies[budget_idx][algorithm_idx])
    }

    pub fn column(&self, algorithm: Algorithm) -> Option<Vec<f64>> {
        let a = self.algorithms.iter().position(|&x| x == algorithm)?;
        Some((0..self.budgets.len()).map(|b| self.median(b, a)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    pub budget: usize,
    pub algorithm: Algorithm,
    pub replicate: usize,
    pub accuracy: f64,
}

fn run_cell(split: &DatasetSplit, plan: &SweepPlan, budget: usize, algorithm: Algorithm, replicate: usize) -> Result<f64> {
    let subset = split.select_supervised(budget, plan.subset_seed(budget, replicate))?;
    let config = TrainConfig {
        seed: plan.cell_seed(budget, algorithm, replicate),
        ..plan.train.clone()
    };
    let accuracy = match algorithm {
        Algorithm::Sgan => {
            let model = SganModel::with_classes(split.n_classes(), config.seed)?;
            let out = sgan::train(model, &subset, &config)?;
            evaluate(&out.classifier, &subset.test)?.accuracy
        }
        Algorithm::Mlp => evaluate(&train_mlp(&subset, &config)?.0, &subset.test)?.accuracy,
        Algorithm::Tree => evaluate(&tree_fit(subset.supervised(), &subset.classes)?, &subset.test)?.accuracy,
        Algorithm::Knn(k) => evaluate(&knn_fit(subset.supervised(), &subset.classes, k)?, &subset.test)?.accuracy,
    };
    Ok(accuracy)
}

/// Train and test every (budget, algorithm, replicate) cell on one fixed
/// split. Cells run in parallel when `exec` allows; each is seeded on its own.
pub fn run_sweep<F>(split: &DatasetSplit, plan: &SweepPlan, exec: Exec, on_cell: F) -> Result<SweepResult>
where
    F: Fn(&CellResult) + Sync + Send,
{
    if plan.replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    if split.test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    for &b in &plan.budgets {
        if b == 0 || b > split.train.len() {
            return Err(Error::InvalidArgument(format!(
                "budget {b} not in [1, {}]",
                split.train.len()
            )));
        }
    }
    let mut jobs = Vec::new();
    for (bi, &budget) in plan.budgets.iter().enumerate() {
        for (ai, &algorithm) in plan.algorithms.iter().enumerate() {
            for r in 0..plan.replicates {
                jobs.push((bi, ai, budget, algorithm, r));
            }
        }
    }
    let results = par::map(exec, &jobs, |&(_, _, budget, algorithm, replicate)| {
        let acc = run_cell(split, plan, budget, algorithm, replicate)?;
        on_cell(&CellResult {
            budget,
            algorithm,
            replicate,
            accuracy: acc,
        });
        Ok(acc)
    });
    let mut accuracies = vec![vec![vec![0.0; plan.replicates]; plan.algorithms.len()]; plan.budgets.len()];
    for (&(bi, ai, _, _, r), acc) in jobs.iter().zip(results) {
        accuracies[bi][ai][r] = acc?;
    }
    Ok(SweepResult {
        budgets: plan.budgets.clone(),
        algorithms: plan.algorithms.clone(),
        replicates: plan.replicates,
        master_seed: plan.master_seed,
        accuracies,
    })
}

/// Bytes written over the start of every non-exempt file.
pub const HEADER_OVERWRITE: [u8; 6] = [0xAA, 0xBB, 0xCC, 0xDD, 0xEE, 0xFF];
/// Text formats without a binary header; their features pass through unchanged.
pub const HEADERLESS_CLASSES: [&str; 3] = ["xml", "html", "txt"];

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSet {
    /// Test samples in input order, minus skipped ones.
    pub samples: Vec<LabeledSample>,
    pub perturbed: usize,
    /// `(source path, reason)` for files that could not be perturbed.
    pub skipped: Vec<(String, String)>,
}

/// Features of `path` as if its first six bytes were [`HEADER_OVERWRITE`].
/// The file itself is never modified.
pub fn perturbed_histogram(path: &Path) -> Result<Histogram> {
    let mut head = [0u8; 6];
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut head).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::FileTooShort(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut raw = raw_histogram_file(path)?;
    raw.overwrite_prefix(&head, &HEADER_OVERWRITE);
    Ok(normalize(&raw))
}

/// Re-featurize test files with overwritten headers. Samples of
/// [`HEADERLESS_CLASSES`] are passed through untouched.
pub fn perturb_headers(test: &[LabeledSample], classes: &ClassMap, source_root: &Path) -> PerturbedSet {
    let results = par::map(Exec::default(), test, |s| {
        let exempt = classes.name(s.label).is_some_and(|n| HEADERLESS_CLASSES.contains(&n));
        if exempt {
            return Ok((s.clone(), false));
        }
        let features = perturbed_histogram(&source_root.join(&s.source_path))?;
        Ok::<_, Error>((
            LabeledSample {
                features,
                ..s.clone()
            },
            true,
        ))
    });
    let mut out = PerturbedSet {
        samples: Vec::with_capacity(test.len()),
        perturbed: 0,
        skipped: Vec::new(),
    };
    for (s, r) in test.iter().zip(results) {
        match r {
            Ok((sample, touched)) => {
                out.perturbed += usize::from(touched);
                out.samples.push(sample);
            }
            Err(e) => out.skipped.push((s.source_path.clone(), e.to_string())),
        }
    }
    out
}

/// Test accuracy before and after the header overwrite at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeaderGapRecord {
    pub epoch: usize,
    pub original: f64,
    pub perturbed: f64,
}

impl HeaderGapRecord {
    pub fn delta(&self) -> f64 {
        self.perturbed - self.original
    }
}

/// Scores a training run's network on the original and header-overwritten
/// test sets after every epoch. Files that could not be perturbed are left
/// out of both sets.
#[derive(Debug, Clone)]
pub struct HeaderGapTracker {
    classes: ClassMap,
    original: Vec<LabeledSample>,
    perturbed: Vec<LabeledSample>,
    pub skipped: Vec<(String, String)>,
    pub records: Vec<HeaderGapRecord>,
}

impl HeaderGapTracker {
    pub fn new(test: &[LabeledSample], classes: &ClassMap, source_root: &Path) -> Result<Self> {
        if !source_root.is_dir() {
            return Err(Error::InvalidArgument(format!("{} is not a directory", source_root.display())));
        }
        let p = perturb_headers(test, classes, source_root);
        let original: Vec<LabeledSample> = test
            .iter()
            .filter(|s| !p.skipped.iter().any(|(path, _)| *path == s.source_path))
            .cloned()
            .collect();
        if original.is_empty() {
            return Err(Error::InvalidArgument("no test file could be perturbed or passed through".into()));
        }
        Ok(HeaderGapTracker {
            classes: classes.clone(),
            original,
            perturbed: p.samples,
            skipped: p.skipped,
            records: Vec::new(),
        })
    }

    /// Score `net` (a classifier trunk) as the saved classifier would be.
    pub fn observe(&mut self, epoch: usize, net: &DenseNet) -> Result<HeaderGapRecord> {
        let classifier = Classifier::new(net.clone(), self.classes.clone())?;
        let record = HeaderGapRecord {
            epoch,
            original: evaluate(&classifier, &self.original)?.accuracy,
            perturbed: evaluate(&classifier, &self.perturbed)?.accuracy,
        };
        self.records.push(record);
        Ok(record)
    }
}

pub fn header_gap_csv(records: &[HeaderGapRecord]) -> String {
    let mut out = String::from("epoch,original_accuracy,perturbed_accuracy,delta\n");
    for r in records {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.epoch, r.original, r.perturbed, r.delta());
    }
    out
}

/// Reports to write; each tag becomes part of a file name.
#[derive(Debug, Default)]
pub struct ReportSet<'a> {
    pub sweep: Option<&'a SweepResult>,
    pub confusions: Vec<(String, &'a ConfusionMatrix)>,
    pub histories: Vec<(String, &'a TrainHistory)>,
}

fn sanitize_tag(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("n_supervised");
    for a in &sweep.algorithms {
        out.push(',');
        out.push_str(&a.name());
    }
    out.push('\n');
    for (bi, budget) in sweep.budgets.iter().enumerate() {
        let _ = write!(out, "{budget}");
        for ai in 0..sweep.algorithms.len() {
            let _ = write!(out, ",{:.5}", sweep.median(bi, ai));
        }
        out.push('\n');
    }
    out
}

/// Percent block then raw-count block, one row per true class.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("kind,true_class");
    for name in cm.classes().names() {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (c, row) in cm.row_percentages().iter().enumerate() {
        let _ = write!(out, "percent,{}", cm.classes().names()[c]);
        for v in row {
            let _ = write!(out, ",{v:.3}");
        }
        out.push('\n');
    }
    for (c, row) in cm.counts().iter().enumerate() {
        let _ = write!(out, "count,{}", cm.classes().names()[c]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn history_csv(history: &TrainHistory) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("epoch,d_real_loss,d_fake_loss,c_loss,g_loss,train_accuracy,best\n");
    for r in &history.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{:.6},{}",
            r.epoch,
            opt(r.d_real_loss),
            opt(r.d_fake_loss),
            r.c_loss,
            opt(r.g_loss),
            r.train_accuracy,
            u8::from(r.epoch == history.best_epoch)
        );
    }
    out
}

/// Write `sweep.csv`, `confusion_<tag>.csv` and `history_<tag>.csv` files.
pub fn render_reports(reports: &ReportSet<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if let Some(sweep) = reports.sweep {
        files.push((out_dir.join("sweep.csv"), sweep_csv(sweep)));
    }
    for (tag, cm) in &reports.confusions {
        files.push((out_dir.join(format!("confusion_{}.csv", sanitize_tag(tag))), confusion_csv(cm)));
    }
    for (tag, h) in &reports.histories {
        files.push((out_dir.join(format!("history_{}.csv", sanitize_tag(tag))), history_csv(h)));
    }
    for (path, body) in &files {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
