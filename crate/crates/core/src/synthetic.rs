//! Synthetic byte-histogram families for tests, benches and the offline
//! acceptance track.
//!
//! # Dirichlet mixture family
//!
//! Each class owns `components` mixture components. A component's mean
//! profile over the 256 bins is
//!
//! ```text
//! profile = shared_weight · background + (1 − shared_weight) · bumps + floor
//! ```
//!
//! renormalized, where `background` is one fixed profile common to every
//! class (four wide Gaussian bumps) and `bumps` is the component's own sum of
//! three Gaussian bumps with centers uniform in [0, 255], widths uniform in
//! [2, 24] and weights uniform in [0.2, 1]. All profiles derive from
//! `profile_seed`. A sample picks a component uniformly and draws
//! `Dirichlet(concentration · profile)`, via normalized Gamma variates.
//!
//! # File corpus
//!
//! [`write_file_corpus`] turns the same profiles into real files: bytes are
//! drawn i.i.d. from a Dirichlet-sampled histogram, and the binary classes
//! (`bin`, `img`) start with a fixed 6-byte magic number.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::corpus::{ClassMap, LabeledSample};
use crate::error::{Error, Result};
use crate::features::{byte_histogram, normalize, Histogram, BINS};
use crate::ndmath::rng::{seeded, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFamily {
    pub n_classes: usize,
    pub components: usize,
    pub concentration: f64,
    pub shared_weight: f64,
    pub profile_seed: u64,
}

/// Class names used by [`DirichletFamily::sample_dataset`].
pub fn family_class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class{c}")).collect()
}

fn gaussian_bump(center: f64, width: f64) -> [f64; BINS] {
    let mut out = [0.0; BINS];
    for (i, v) in out.iter_mut().enumerate() {
        let d = (i as f64 - center) / width;
        *v = (-0.5 * d * d).exp();
    }
    out
}

impl DirichletFamily {
    /// The documented offline acceptance family: two components per class,
    /// concentration 300, background weight 0.5, profile seed 0x5EED.
    pub fn default_with_classes(n_classes: usize) -> Self {
        DirichletFamily {
            n_classes,
            components: 2,
            concentration: 300.0,
            shared_weight: 0.5,
            profile_seed: 0x5EED,
        }
    }

    /// Mean profiles indexed `[class][component]`.
    pub fn profiles(&self) -> Vec<Vec<[f64; BINS]>> {
        let mut rng = seeded(self.profile_seed);
        let mut background = [0.0; BINS];
        for _ in 0..4 {
            let bump = gaussian_bump(rng.random_range(0.0..255.0), rng.random_range(20.0..60.0));
            for (b, v) in background.iter_mut().zip(bump) {
                *b += v;
            }
        }
        normalize_in_place(&mut background);

        (0..self.n_classes)
            .map(|_| {
                (0..self.components)
                    .map(|_| {
                        let mut own = [0.0; BINS];
                        for _ in 0..3 {
                            let w = rng.random_range(0.2..1.0);
                            let bump = gaussian_bump(rng.random_range(0.0..255.0), rng.random_range(2.0..24.0));
                            for (o, v) in own.iter_mut().zip(bump) {
                                *o += w * v;
                            }
                        }
                        normalize_in_place(&mut own);
                        let mut profile = [0.0; BINS];
                        for i in 0..BINS {
                            profile[i] = self.shared_weight * background[i] + (1.0 - self.shared_weight) * own[i] + 1e-4;
                        }
                        normalize_in_place(&mut profile);
                        profile
                    })
                    .collect()
            })
            .collect()
    }

    /// Draw one histogram of class `class`.
    pub fn sample_with(&self, profiles: &[Vec<[f64; BINS]>], class: usize, rng: &mut Rng) -> Histogram {
        let comp = rng.random_range(0..self.components);
        let profile = &profiles[class][comp];
        loop {
            let mut bins = [0.0; BINS];
            for (b, &p) in bins.iter_mut().zip(profile.iter()) {
                let gamma = Gamma::new(self.concentration * p, 1.0).expect("positive shape");
                *b = gamma.sample(rng);
            }
            let sum: f64 = bins.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                bins.iter_mut().for_each(|b| *b /= sum);
                return Histogram::from_bins_unchecked(bins);
            }
        }
    }

    /// `total` samples, classes as balanced as possible, in class-major order.
    pub fn sample_dataset(&self, total: usize, seed: u64) -> (Vec<LabeledSample>, ClassMap) {
        let profiles = self.profiles();
        let classes = ClassMap::new(family_class_names(self.n_classes));
        let mut rng = seeded(seed);
        let mut samples = Vec::with_capacity(total);
        for i in 0..total {
            let class = i * self.n_classes / total.max(1);
            let features = self.sample_with(&profiles, class, &mut rng);
            let name = &classes.names()[class];
            samples.push(LabeledSample {
                features,
                label: class,
                source_path: format!("synthetic/{i:05}.{name}"),
                original_extension: name.clone(),
            });
        }
        (samples, classes)
    }
}

fn normalize_in_place(v: &mut [f64; BINS]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Classes of the synthetic file corpus and their leading magic bytes.
pub const FILE_CLASSES: [(&str, Option<[u8; 6]>); 5] = [
    ("bin", Some([0x7F, 0x45, 0x4C, 0x46, 0x02, 0x01])),
    ("html", None),
    ("img", Some([0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A])),
    ("txt", None),
    ("xml", None),
];

/// Write `per_class` files of each [`FILE_CLASSES`] type under `dir`, with
/// lengths uniform in `[min_len, 2·min_len)`. Returns the number written.
pub fn write_file_corpus(dir: &Path, per_class: usize, min_len: usize, seed: u64) -> Result<usize> {
    if min_len < 6 {
        return Err(Error::InvalidArgument("synthetic files need at least 6 bytes".into()));
    }
    let family = DirichletFamily::default_with_classes(FILE_CLASSES.len());
    let profiles = family.profiles();
    let mut rng = seeded(seed);
    let mut written = 0;
    for (class, (ext, magic)) in FILE_CLASSES.iter().enumerate() {
        for i in 0..per_class {
            let hist = family.sample_with(&profiles, class, &mut rng);
            let len = rng.random_range(min_len..2 * min_len);
            let dist = WeightedIndex::new(hist.bins().iter().map(|&p| p + 1e-12))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut bytes: Vec<u8> = (0..len).map(|_| dist.sample(&mut rng) as u8).collect();
            if let Some(m) = magic {
                bytes[..6].copy_from_slice(m);
            }
            let path = dir.join(format!("{ext}_{i:04}.{ext}"));
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            written += 1;
        }
    }
    Ok(written)
}

/// Histogram of `bytes` as a feature vector (panics on empty input).
pub fn histogram_of(bytes: &[u8]) -> Histogram {
    normalize(&byte_histogram(bytes).expect("non-empty"))
}
