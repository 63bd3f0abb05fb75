//! Labeled datasets: directory ingest, rare-class filtering, shuffled
//! train/test split, stratified supervised subsets and the CSV feature cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::features::{featurize_files, Histogram, BINS};
use crate::ndmath::rng::seeded;
use crate::par::Exec;

/// Classes with fewer files than this are dropped at ingest.
pub const MIN_CLASS_SIZE: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.8;

const CHECKSUM_PREFIX: &str = "#sha256:";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: Histogram,
    pub label: usize,
    /// Path relative to the ingest root, `/`-separated.
    pub source_path: String,
    /// Lowercase, without the leading dot.
    pub original_extension: String,
}

/// Sorted, unique class names; a label is an index into this list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        ClassMap { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub files_seen: usize,
    /// Dropped classes and their file counts, sorted by name.
    pub removed_classes: Vec<(String, usize)>,
    pub removed_files: Vec<String>,
    /// Files that could not be featurized (unreadable, empty, no extension).
    pub failed: Vec<(String, String)>,
}

impl IngestReport {
    pub fn rejected(&self) -> usize {
        self.removed_files.len() + self.failed.len()
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub samples: Vec<LabeledSample>,
    pub classes: ClassMap,
    pub report: IngestReport,
}

/// Ingest every regular file under `root`, labeled by lowercased extension.
pub fn ingest(root: &Path) -> Result<Ingested> {
    ingest_with(root, MIN_CLASS_SIZE, Exec::default())
}

pub fn ingest_with(root: &Path, min_class_size: usize, exec: Exec) -> Result<Ingested> {
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(root, std::io::Error::other("not a directory")));
    }

    let mut report = IngestReport::default();
    let mut candidates = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        report.files_seen += 1;
        let rel = relative_name(root, entry.path());
        match extension_of(entry.path()) {
            Some(ext) => candidates.push((entry.into_path(), rel, ext)),
            None => report.failed.push((rel, "no file extension".into())),
        }
    }

    let paths: Vec<&Path> = candidates.iter().map(|(p, _, _)| p.as_path()).collect();
    let features = featurize_files(exec, &paths);

    let mut ok = Vec::new();
    for ((_, rel, ext), feat) in candidates.into_iter().zip(features) {
        match feat {
            Ok(h) => ok.push((rel, ext, h)),
            Err(e) => report.failed.push((rel, e.to_string())),
        }
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, ext, _) in &ok {
        *counts.entry(ext.as_str()).or_default() += 1;
    }
    let kept: Vec<String> = counts
        .iter()
        .filter(|(_, &c)| c >= min_class_size)
        .map(|(e, _)| e.to_string())
        .collect();
    report.removed_classes = counts
        .iter()
        .filter(|(_, &c)| c < min_class_size)
        .map(|(e, &c)| (e.to_string(), c))
        .collect();
    let classes = ClassMap::new(kept);

    let mut samples = Vec::with_capacity(ok.len());
    for (rel, ext, features) in ok {
        match classes.index_of(&ext) {
            Some(label) => samples.push(LabeledSample {
                features,
                label,
                source_path: rel,
                original_extension: ext,
            }),
            None => report.removed_files.push(rel),
        }
    }
    Ok(Ingested {
        samples,
        classes,
        report,
    })
}

fn relative_name(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn extension_of(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_string_lossy().to_lowercase();
    (!ext.is_empty()).then_some(ext)
}

/// Per-class sample counts, indexed by label.
pub fn class_counts(samples: &[LabeledSample], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub classes: ClassMap,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    /// Sorted indices into `train` whose labels the classifier may use.
    pub supervised_indices: Vec<usize>,
    pub seed: u64,
}

/// Shuffle with `seed` and put the first `round(fraction · n)` samples in train.
/// Every training sample starts out supervised.
pub fn shuffle_split(
    mut samples: Vec<LabeledSample>,
    classes: ClassMap,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes.len()) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: classes.len(),
        });
    }
    let total = samples.len();
    let n_train = ((total as f64 * train_fraction).round() as usize).clamp(1, total - 1);
    let mut rng = seeded(seed);
    samples.shuffle(&mut rng);
    let test = samples.split_off(n_train);
    Ok(DatasetSplit {
        classes,
        supervised_indices: (0..samples.len()).collect(),
        train: samples,
        test,
        seed,
    })
}

impl DatasetSplit {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn supervised(&self) -> impl Iterator<Item = &LabeledSample> {
        self.supervised_indices.iter().map(|&i| &self.train[i])
    }

    /// Copy of this split with a stratified supervised subset of size `n`.
    pub fn select_supervised(&self, n: usize, seed: u64) -> Result<DatasetSplit> {
        let supervised_indices = stratified_indices(&self.train, self.n_classes(), n, seed)?;
        Ok(DatasetSplit {
            supervised_indices,
            ..self.clone()
        })
    }
}

/// Each class gets `⌊n/C⌋` picks (or all of its samples if it has fewer).
/// The remainder goes one per class to randomly chosen classes that still have
/// spare samples, and any rest is drawn uniformly from the leftover pool.
pub fn stratified_indices(train: &[LabeledSample], n_classes: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptySupervisedSet);
    }
    if n > train.len() {
        return Err(Error::InvalidArgument(format!(
            "supervised budget {n} not in [1, {}]",
            train.len()
        )));
    }
    if n == train.len() {
        return Ok((0..n).collect());
    }
    let mut rng = seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in train.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let present = by_class.iter().filter(|c| !c.is_empty()).count().max(1);
    let quota = n / present;

    let mut chosen = Vec::with_capacity(n);
    let mut leftovers: Vec<Vec<usize>> = Vec::with_capacity(n_classes);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let take = quota.min(members.len());
        chosen.extend_from_slice(&members[..take]);
        leftovers.push(members[take..].to_vec());
    }

    let mut remaining = n - chosen.len();
    let mut spare: Vec<usize> = (0..n_classes).filter(|&c| !leftovers[c].is_empty()).collect();
    spare.shuffle(&mut rng);
    for &c in spare.iter().take(remaining) {
        chosen.push(leftovers[c].remove(0));
    }
    remaining = n - chosen.len();
    if remaining > 0 {
        let mut pool: Vec<usize> = leftovers.into_iter().flatten().collect();
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..remaining]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn render_float(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{:.8e}", v as f32)
    }
}

/// Serialize samples to the checksummed CSV cache format.
pub fn features_to_csv(samples: &[LabeledSample], classes: &ClassMap) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "label".to_string(), "ext".to_string()];
    header.extend((0..BINS).map(|i| format!("b{i}")));
    let csv_err = |e: csv::Error| Error::format(0, e.to_string());
    writer.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let name = classes.name(s.label).ok_or(Error::LabelOutOfRange {
            label: s.label,
            classes: classes.len(),
        })?;
        let mut row = Vec::with_capacity(3 + BINS);
        row.push(s.source_path.clone());
        row.push(name.to_string());
        row.push(s.original_extension.clone());
        row.extend(s.features.bins().iter().map(|&b| render_float(b)));
        writer.write_record(&row).map_err(csv_err)?;
    }
    let mut bytes = writer.into_inner().map_err(|e| Error::format(0, e.to_string()))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let mut trailer = String::new();
    let _ = writeln!(trailer, "{CHECKSUM_PREFIX}{digest}");
    bytes.extend_from_slice(trailer.as_bytes());
    Ok(bytes)
}

pub fn save_features(samples: &[LabeledSample], classes: &ClassMap, path: &Path) -> Result<()> {
    let bytes = features_to_csv(samples, classes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<(Vec<LabeledSample>, ClassMap)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_csv(&bytes)
}

pub fn features_from_csv(bytes: &[u8]) -> Result<(Vec<LabeledSample>, ClassMap)> {
    let body_len = verify_checksum(bytes)?;
    let body = &bytes[..body_len];

    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(body);
    let header = reader.headers().map_err(|e| Error::format(1, e.to_string()))?.clone();
    let expected_len = 3 + BINS;
    let header_ok = header.len() == expected_len
        && header.get(0) == Some("path")
        && header.get(1) == Some("label")
        && header.get(2) == Some("ext")
        && (0..BINS).all(|i| header.get(3 + i) == Some(format!("b{i}").as_str()));
    if !header_ok {
        return Err(Error::format(
            1,
            format!("expected header path,label,ext,b0..b255 ({expected_len} columns), got {} columns", header.len()),
        ));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::format(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != expected_len {
            return Err(Error::format(line, format!("expected {expected_len} columns, got {}", record.len())));
        }
        let mut bins = [0.0; BINS];
        for (i, b) in bins.iter_mut().enumerate() {
            let text = &record[3 + i];
            let v: f32 = text
                .parse()
                .map_err(|_| Error::format(line, format!("bad value {text:?} in column b{i}")))?;
            *b = v as f64;
        }
        let features = Histogram::from_bins(bins).map_err(|e| Error::format(line, e.to_string()))?;
        rows.push((record[0].to_string(), record[1].to_string(), record[2].to_string(), features));
    }

    let classes = ClassMap::new(rows.iter().map(|r| r.1.clone()));
    let samples = rows
        .into_iter()
        .map(|(source_path, name, original_extension, features)| LabeledSample {
            label: classes.index_of(&name).expect("class built from these rows"),
            features,
            source_path,
            original_extension,
        })
        .collect();
    Ok((samples, classes))
}

/// Check the trailing `#sha256:` line; return the length of the covered body.
fn verify_checksum(bytes: &[u8]) -> Result<usize> {
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let start = trimmed.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let last_line = &trimmed[start..];
    let line_no = bytes[..start].iter().filter(|&&b| b == b'\n').count() + 1;
    let text = std::str::from_utf8(last_line).map_err(|_| Error::format(line_no, "checksum line is not UTF-8"))?;
    let digest = text
        .strip_prefix(CHECKSUM_PREFIX)
        .ok_or_else(|| Error::format(line_no, "missing #sha256 checksum line"))?;
    if hex::encode(Sha256::digest(&bytes[..start])) != digest.trim() {
        return Err(Error::Checksum);
    }
    Ok(start)
}
