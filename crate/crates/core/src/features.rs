//! Byte-value histograms: the only feature the classifiers see.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const BINS: usize = 256;

/// Stored histograms (single precision on disk) must sum to 1 within this.
pub const STORED_SUM_TOLERANCE: f64 = 1e-6;

const CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawHistogram {
    counts: [u64; BINS],
    total: u64,
}

impl RawHistogram {
    pub fn counts(&self) -> &[u64; BINS] {
        &self.counts
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    /// Histogram a stream in fixed-size chunks.
    pub fn from_reader<R: Read>(mut reader: R, origin: &Path) -> Result<Self> {
        let mut counts = [0u64; BINS];
        let mut total = 0u64;
        let mut buf = vec![0u8; CHUNK];
        loop {
            let n = match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(Error::io(origin, e)),
            };
            for &b in &buf[..n] {
                counts[b as usize] += 1;
            }
            total += n as u64;
        }
        if total == 0 {
            return Err(Error::EmptyFile(origin.to_path_buf()));
        }
        Ok(RawHistogram { counts, total })
    }

    /// Replace the first `prefix.len()` bytes of the counted content, whose
    /// original values were `original`, by `prefix`.
    pub fn overwrite_prefix(&mut self, original: &[u8], prefix: &[u8]) {
        debug_assert_eq!(original.len(), prefix.len());
        for &b in original {
            self.counts[b as usize] -= 1;
        }
        for &b in prefix {
            self.counts[b as usize] += 1;
        }
    }
}

pub fn byte_histogram(bytes: &[u8]) -> Result<RawHistogram> {
    if bytes.is_empty() {
        return Err(Error::EmptyFile(PathBuf::from("<memory>")));
    }
    let mut counts = [0u64; BINS];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    Ok(RawHistogram {
        counts,
        total: bytes.len() as u64,
    })
}

/// Normalized byte-value distribution. Bins are non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    bins: [f64; BINS],
}

impl Histogram {
    /// Accept externally supplied bins (e.g. from the feature cache).
    pub fn from_bins(bins: [f64; BINS]) -> Result<Self> {
        if bins.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument("histogram bin outside [0, 1]".into()));
        }
        let sum: f64 = bins.iter().sum();
        if (sum - 1.0).abs() > STORED_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("histogram sums to {sum}")));
        }
        Ok(Histogram { bins })
    }

    /// No invariant checks; for generated vectors (e.g. GAN samples, tests).
    pub fn from_bins_unchecked(bins: [f64; BINS]) -> Self {
        Histogram { bins }
    }

    pub fn bins(&self) -> &[f64; BINS] {
        &self.bins
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.bins
    }

    /// Round every bin to the nearest `f32`.
    pub fn quantized_f32(&self) -> Histogram {
        let mut bins = self.bins;
        for b in bins.iter_mut() {
            *b = *b as f32 as f64;
        }
        Histogram { bins }
    }
}

pub fn normalize(raw: &RawHistogram) -> Histogram {
    let total = raw.total as f64;
    let mut bins = [0.0; BINS];
    for (b, &c) in bins.iter_mut().zip(raw.counts.iter()) {
        *b = c as f64 / total;
    }
    Histogram { bins }
}

pub fn raw_histogram_file(path: &Path) -> Result<RawHistogram> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if let Ok(meta) = file.metadata() {
        if !meta.is_file() {
            return Err(Error::io(path, std::io::Error::other("not a regular file")));
        }
    }
    RawHistogram::from_reader(file, path)
}

pub fn featurize_file(path: &Path) -> Result<Histogram> {
    raw_histogram_file(path).map(|raw| normalize(&raw))
}

/// Featurize many files; output order matches input order.
pub fn featurize_files<P: AsRef<Path> + Sync>(exec: Exec, paths: &[P]) -> Vec<Result<Histogram>> {
    par::map(exec, paths, |p| featurize_file(p.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn histogram_examples() {
        let raw = byte_histogram(&[0x41, 0x41]).unwrap();
        assert_eq!(raw.counts()[65], 2);
        assert_eq!(raw.counts().iter().sum::<u64>(), 2);

        let all: Vec<u8> = (0..=255).collect();
        let raw = byte_histogram(&all).unwrap();
        assert!(raw.counts().iter().all(|&c| c == 1));
        let h = normalize(&raw);
        assert!(h.bins().iter().all(|&b| b == 1.0 / 256.0));

        assert!(matches!(byte_histogram(&[]), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn normalize_examples() {
        let h = normalize(&byte_histogram(b"AA").unwrap());
        assert_eq!(h.bins()[65], 1.0);
        let h = normalize(&byte_histogram(&[0, 1, 1, 1]).unwrap());
        assert_eq!(&h.bins()[..3], &[0.25, 0.75, 0.0]);
    }

    #[test]
    fn featurize_file_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::File::create(&p).unwrap().write_all(b"AA").unwrap();
        let h = featurize_file(&p).unwrap();
        assert_eq!(h.bins()[65], 1.0);
        assert_eq!(featurize_file(&p).unwrap(), h);

        let empty = dir.path().join("empty.bin");
        std::fs::File::create(&empty).unwrap();
        assert!(matches!(featurize_file(&empty), Err(Error::EmptyFile(_))));
        assert!(matches!(featurize_file(&dir.path().join("missing")), Err(Error::Io { .. })));
        assert!(featurize_file(dir.path()).is_err());
    }

    #[test]
    fn streaming_matches_in_memory_across_chunk_boundaries() {
        let data: Vec<u8> = (0..(CHUNK * 2 + 123)).map(|i| (i * 31 % 251) as u8).collect();
        let a = RawHistogram::from_reader(&data[..], Path::new("mem")).unwrap();
        assert_eq!(a, byte_histogram(&data).unwrap());
    }

    #[test]
    fn from_bins_validates() {
        let mut bins = [0.0; BINS];
        bins[0] = 0.9;
        assert!(Histogram::from_bins(bins).is_err());
        bins[1] = 0.1;
        assert!(Histogram::from_bins(bins).is_ok());
        bins[1] = -0.1;
        assert!(Histogram::from_bins(bins).is_err());
    }

    proptest! {
        #[test]
        fn normalized_sums_to_one(bytes in prop::collection::vec(any::<u8>(), 1..4096)) {
            let raw = byte_histogram(&bytes).unwrap();
            prop_assert_eq!(raw.counts().iter().sum::<u64>(), bytes.len() as u64);
            prop_assert_eq!(raw.total_bytes(), bytes.len() as u64);
            let h = normalize(&raw);
            let sum: f64 = h.bins().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(h.bins().iter().all(|&b| (0.0..=1.0).contains(&b)));
        }

        #[test]
        fn permutation_invariant(mut bytes in prop::collection::vec(any::<u8>(), 1..512), seed in any::<u64>()) {
            let before = byte_histogram(&bytes).unwrap();
            let mut rng = crate::ndmath::seeded(seed);
            use rand::seq::SliceRandom;
            bytes.shuffle(&mut rng);
            prop_assert_eq!(before, byte_histogram(&bytes).unwrap());
        }

        #[test]
        fn six_byte_overwrite_touches_at_most_twelve_bins(bytes in prop::collection::vec(any::<u8>(), 6..512)) {
            let before = byte_histogram(&bytes).unwrap();
            let mut patched = bytes.clone();
            patched[..6].copy_from_slice(&[0xAA, 0xBB, 0xCC, 0xDD, 0xEE, 0xFF]);
            let after = byte_histogram(&patched).unwrap();
            let changed = before.counts().iter().zip(after.counts()).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= 12);
            let mut adjusted = before.clone();
            adjusted.overwrite_prefix(&bytes[..6], &[0xAA, 0xBB, 0xCC, 0xDD, 0xEE, 0xFF]);
            prop_assert_eq!(adjusted, after);
        }
    }
}
