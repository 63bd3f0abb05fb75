//! Semi-supervised GAN over byte histograms.
//!
//! The discriminator and classifier share one trunk (256 → 512 → 256 → 128 →
//! 64 → C logits). The classifier reads the logits through a softmax; the
//! discriminator feeds them to a single sigmoid unit. A generator maps
//! 100-dimensional standard-normal noise to fake 256-bin histograms.
//!
//! Each training batch runs three Adam steps, in order:
//!
//! 1. **D-step**: half a batch of real training histograms (labeled or not)
//!    with target 1 and half a batch of generated ones with target 0, binary
//!    cross-entropy through head and trunk; updates trunk and head.
//! 2. **C-step**: a full batch from the supervised subset, categorical
//!    cross-entropy on the softmax of the logits; updates the trunk.
//! 3. **G-step**: a full batch of fresh latents scored by the frozen
//!    discriminator against target 1 (non-saturating loss); updates the
//!    generator only.
//!
//! Dropout is active in every network during training, in both roles.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{ClassMap, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::features::{Histogram, BINS};
use crate::ndmath::activation::{argmax, softmax, softmax_in_place};
use crate::ndmath::loss::{bce_loss, cce_loss};
use crate::ndmath::{derive_seed, seeded, Activation, AdamConfig, AdamState, BackwardOptions, DenseNet, LayerSpec, Matrix, Mode, Rng};
use crate::par::{self, Exec};

pub const LATENT_DIM: usize = 100;
pub const DROPOUT: f64 = 0.3;
/// Class count of the reference Govdocs1 subset.
pub const REFERENCE_CLASSES: usize = 11;
pub const TRUNK_HIDDEN: [usize; 4] = [512, 256, 128, 64];

const EVAL_CHUNK: usize = 256;
/// Stream id mixed into the training seed so training draws differ from init draws.
const TRAIN_STREAM: u64 = 1;

/// Trunk layers: ReLU + dropout on every hidden layer, linear logits.
pub fn trunk_specs(n_classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut inputs = BINS;
    for &width in &TRUNK_HIDDEN {
        specs.push(LayerSpec::new(inputs, width, Activation::Relu, DROPOUT));
        inputs = width;
    }
    specs.push(LayerSpec::new(inputs, n_classes, Activation::Linear, 0.0));
    specs
}

pub fn disc_head_spec(n_classes: usize) -> LayerSpec {
    LayerSpec::new(n_classes, 1, Activation::Sigmoid, 0.0)
}

/// Generator layers: 100 → 32 → 64 → 128 (ReLU + dropout) → 256 (ReLU) → 256 (sigmoid).
pub fn generator_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(LATENT_DIM, 32, Activation::Relu, DROPOUT),
        LayerSpec::new(32, 64, Activation::Relu, DROPOUT),
        LayerSpec::new(64, 128, Activation::Relu, DROPOUT),
        LayerSpec::new(128, 256, Activation::Relu, 0.0),
        LayerSpec::new(256, BINS, Activation::Sigmoid, 0.0),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SganModel {
    pub trunk: DenseNet,
    /// Single sigmoid unit over the trunk logits.
    pub disc_head: DenseNet,
    pub gen: DenseNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trunk: usize,
    pub disc_head: usize,
    pub gen: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trunk + self.disc_head + self.gen
    }
}

impl SganModel {
    /// The reference 11-class model.
    pub fn build(seed: u64) -> Self {
        SganModel::with_classes(REFERENCE_CLASSES, seed).expect("reference architecture is valid")
    }

    pub fn with_classes(n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {n_classes}")));
        }
        let mut rng = seeded(seed);
        let trunk = DenseNet::init(&trunk_specs(n_classes), &mut rng)?;
        let disc_head = DenseNet::init(&[disc_head_spec(n_classes)], &mut rng)?;
        let gen = DenseNet::init(&generator_specs(), &mut rng)?;
        Ok(SganModel { trunk, disc_head, gen })
    }

    pub fn n_classes(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            trunk: self.trunk.param_count(),
            disc_head: self.disc_head.param_count(),
            gen: self.gen.param_count(),
        }
    }

    /// Discriminator real-probability for each row, in inference mode.
    pub fn discriminate(&self, x: &Matrix) -> Result<Vec<f64>> {
        let logits = self.trunk.infer(x)?;
        Ok(self.disc_head.infer(&logits)?.into_vec())
    }

    /// Generator output for each latent row, in inference mode.
    pub fn generate(&self, z: &Matrix) -> Result<Matrix> {
        self.gen.infer(z)
    }

    fn set_mode(&mut self, mode: Mode) {
        self.trunk.mode = mode;
        self.disc_head.mode = mode;
        self.gen.mode = mode;
    }
}

/// `batch × LATENT_DIM` standard-normal draws.
pub fn sample_latent(rng: &mut Rng, batch: usize) -> Matrix {
    let data = (0..batch * LATENT_DIM).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(batch, LATENT_DIM, data).expect("shape by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Learning rate of the discriminator and classifier optimizers.
    pub lr_dc: f64,
    pub lr_g: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 300,
            lr_dc: 0.0005,
            lr_g: 0.0005,
            latent_dim: LATENT_DIM,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.latent_dim != LATENT_DIM {
            return Err(Error::InvalidArgument(format!("latent dimension must be {LATENT_DIM}")));
        }
        if !(self.lr_dc > 0.0 && self.lr_g > 0.0 && self.lr_dc.is_finite() && self.lr_g.is_finite()) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean losses and full-training-set accuracy. Losses that a
/// trainer does not compute (e.g. the MLP has no discriminator) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub d_real_loss: Option<f64>,
    pub d_fake_loss: Option<f64>,
    pub c_loss: f64,
    pub g_loss: Option<f64>,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was kept; 0 means the initial weights.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch).map(|r| r.train_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SganOptimizers {
    /// Trunk then head parameters.
    pub disc: AdamState,
    pub class: AdamState,
    pub gen: AdamState,
}

impl SganOptimizers {
    pub fn new(model: &SganModel, config: &TrainConfig) -> Self {
        let mut disc_params = model.trunk.params();
        disc_params.extend(model.disc_head.params());
        SganOptimizers {
            disc: AdamState::for_params(AdamConfig::with_lr(config.lr_dc), &disc_params),
            class: AdamState::for_params(AdamConfig::with_lr(config.lr_dc), &model.trunk.params()),
            gen: AdamState::for_params(AdamConfig::with_lr(config.lr_g), &model.gen.params()),
        }
    }
}

/// Inference-only classifier: trunk logits followed by softmax.
///
/// Parameters are rounded to `f32` on construction, so a classifier that has
/// been saved and loaded predicts bit-identically to the original.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: DenseNet,
    classes: ClassMap,
}

impl Classifier {
    pub fn new(mut net: DenseNet, classes: ClassMap) -> Result<Self> {
        if net.output_dim() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: classes.len(),
                actual: net.output_dim(),
            });
        }
        if net.input_dim() != BINS {
            return Err(Error::DimensionMismatch {
                expected: BINS,
                actual: net.input_dim(),
            });
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::InvalidArgument("classifier output layer must produce linear logits".into()));
        }
        net.quantize_f32();
        net.mode = Mode::Inference;
        Ok(Classifier { net, classes })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// Predicted label and the class probabilities.
    pub fn classify(&self, histogram: &Histogram) -> (usize, Vec<f64>) {
        let probs = self.predict_proba(histogram);
        (argmax(&probs), probs)
    }

    pub fn probabilities_batch(&self, xs: &[&Histogram], exec: Exec) -> Vec<Vec<f64>> {
        par::map_chunks(exec, xs, EVAL_CHUNK, |chunk| {
            let rows: Vec<&[f64]> = chunk.iter().map(|h| h.as_slice()).collect();
            let x = Matrix::from_rows(&rows).expect("histograms have 256 bins");
            let logits = self.net.infer(&x).expect("input width checked at construction");
            logits
                .row_iter()
                .map(|r| {
                    let mut p = r.to_vec();
                    softmax_in_place(&mut p);
                    p
                })
                .collect()
        })
    }
}

impl Predictor for Classifier {
    fn classes(&self) -> &ClassMap {
        &self.classes
    }

    fn predict_proba(&self, x: &Histogram) -> Vec<f64> {
        let logits = self.net.infer(&Matrix::row_vector(x.as_slice())).expect("input width checked at construction");
        softmax(logits.as_slice())
    }

    fn predict_batch(&self, xs: &[&Histogram], exec: Exec) -> Vec<usize> {
        self.probabilities_batch(xs, exec).iter().map(|p| argmax(p)).collect()
    }
}

/// Training features as one matrix plus labels.
pub(crate) struct TrainingView {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl TrainingView {
    pub fn new(samples: &[LabeledSample]) -> Result<Self> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let features = if rows.is_empty() { Matrix::zeros(0, BINS) } else { Matrix::from_rows(&rows)? };
        Ok(TrainingView {
            features,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn gather(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * BINS);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Matrix::from_vec(indices.len(), BINS, data).expect("shape by construction")
    }

    /// Fraction of rows whose argmax logit matches the label, without dropout.
    pub fn accuracy(&self, trunk: &DenseNet, exec: Exec) -> f64 {
        if self.len() == 0 {
            return 0.0;
        }
        let starts: Vec<usize> = (0..self.len()).step_by(EVAL_CHUNK).collect();
        let correct: usize = par::map(exec, &starts, |&start| {
            let end = (start + EVAL_CHUNK).min(self.len());
            let idx: Vec<usize> = (start..end).collect();
            let logits = trunk.infer(&self.gather(&idx)).expect("trunk input is 256 wide");
            logits
                .row_iter()
                .zip(&self.labels[start..end])
                .filter(|(row, &label)| argmax(row) == label)
                .count()
        })
        .into_iter()
        .sum();
        correct as f64 / self.len() as f64
    }
}

/// Endless reshuffled pass over an index pool.
pub(crate) struct CyclicSampler {
    pool: Vec<usize>,
    pos: usize,
}

impl CyclicSampler {
    pub fn new(mut pool: Vec<usize>, rng: &mut Rng) -> Self {
        pool.shuffle(rng);
        CyclicSampler { pool, pos: 0 }
    }

    pub fn next_batch(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.pool.len() {
                self.pool.shuffle(rng);
                self.pos = 0;
            }
            let take = (n - out.len()).min(self.pool.len() - self.pos);
            out.extend_from_slice(&self.pool[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Mean categorical cross-entropy of a logits batch and its gradient
/// `(softmax - one_hot) / batch` w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let batch = logits.rows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        softmax_in_place(row);
        loss += cce_loss(row, label)?;
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g /= batch);
    }
    Ok((loss / batch, grad))
}

fn params_and_grads_step(state: &mut AdamState, mut params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
    state.step(&mut params, &grads)
}

/// One epoch: `ceil(|train| / batch)` batches of D-, C- and G-steps, then
/// full-training-set accuracy.
pub fn train_epoch(
    model: &mut SganModel,
    optimizers: &mut SganOptimizers,
    split: &DatasetSplit,
    config: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
) -> Result<EpochRecord> {
    let view = TrainingView::new(&split.train)?;
    run_epoch(model, optimizers, split, &view, config, rng, epoch)
}

fn check_inputs(model: &SganModel, split: &DatasetSplit, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if split.supervised_indices.is_empty() {
        return Err(Error::EmptySupervisedSet);
    }
    if model.n_classes() != split.n_classes() {
        return Err(Error::DimensionMismatch {
            expected: split.n_classes(),
            actual: model.n_classes(),
        });
    }
    if let Some(&bad) = split.supervised_indices.iter().find(|&&i| i >= split.train.len()) {
        return Err(Error::InvalidArgument(format!("supervised index {bad} outside the training set")));
    }
    Ok(())
}

fn run_epoch(
    model: &mut SganModel,
    opt: &mut SganOptimizers,
    split: &DatasetSplit,
    view: &TrainingView,
    config: &TrainConfig,
    rng: &mut Rng,
    epoch: usize,
) -> Result<EpochRecord> {
    check_inputs(model, split, config)?;
    model.set_mode(Mode::Training);
    let batch = config.batch_size;
    let half = batch / 2;
    let batches = view.len().div_ceil(batch);

    let mut reals = CyclicSampler::new((0..view.len()).collect(), rng);
    let mut supervised = CyclicSampler::new(split.supervised_indices.clone(), rng);

    let (mut d_real_sum, mut d_fake_sum, mut c_sum, mut g_sum) = (0.0, 0.0, 0.0, 0.0);
    let backprop_input_only = BackwardOptions {
        from_preactivation: false,
        param_grads: false,
        input_grad: true,
    };

    for _ in 0..batches {
        // D-step
        let x_real = view.gather(&reals.next_batch(half, rng));
        let fake = model.gen.forward(&sample_latent(rng, half), rng)?;
        let x = x_real.vstack(fake.output())?;
        let trunk_trace = model.trunk.forward(&x, rng)?;
        let head_trace = model.disc_head.forward(trunk_trace.output(), rng)?;
        let p = head_trace.output().as_slice();
        let mut grad = Matrix::zeros(batch, 1);
        for (i, &pi) in p.iter().enumerate() {
            let target = if i < half { 1.0 } else { 0.0 };
            if i < half {
                d_real_sum += bce_loss(pi, target) / half as f64;
            } else {
                d_fake_sum += bce_loss(pi, target) / half as f64;
            }
            grad.set(i, 0, (pi - target) / batch as f64);
        }
        let head_grads = model.disc_head.backward_with(
            &head_trace,
            &grad,
            BackwardOptions {
                from_preactivation: true,
                ..Default::default()
            },
        )?;
        let trunk_grads = model.trunk.backward_with(
            &trunk_trace,
            head_grads.input.as_ref().expect("input gradient requested"),
            BackwardOptions {
                input_grad: false,
                ..Default::default()
            },
        )?;
        let mut params = model.trunk.params_mut();
        params.extend(model.disc_head.params_mut());
        let mut grads = trunk_grads.slices();
        grads.extend(head_grads.slices());
        params_and_grads_step(&mut opt.disc, params, grads)?;

        // C-step
        let idx = supervised.next_batch(batch, rng);
        let labels: Vec<usize> = idx.iter().map(|&i| view.labels[i]).collect();
        let trace = model.trunk.forward(&view.gather(&idx), rng)?;
        let (loss, grad) = softmax_cross_entropy(trace.output(), &labels)?;
        c_sum += loss;
        let grads = model.trunk.backward_with(
            &trace,
            &grad,
            BackwardOptions {
                input_grad: false,
                ..Default::default()
            },
        )?;
        params_and_grads_step(&mut opt.class, model.trunk.params_mut(), grads.slices())?;

        // G-step: discriminator frozen
        let gen_trace = model.gen.forward(&sample_latent(rng, batch), rng)?;
        let trunk_trace = model.trunk.forward(gen_trace.output(), rng)?;
        let head_trace = model.disc_head.forward(trunk_trace.output(), rng)?;
        let mut grad = Matrix::zeros(batch, 1);
        let mut g_loss = 0.0;
        for (i, &pi) in head_trace.output().as_slice().iter().enumerate() {
            g_loss += bce_loss(pi, 1.0);
            grad.set(i, 0, (pi - 1.0) / batch as f64);
        }
        g_sum += g_loss / batch as f64;
        let head_grads = model.disc_head.backward_with(
            &head_trace,
            &grad,
            BackwardOptions {
                from_preactivation: true,
                ..backprop_input_only
            },
        )?;
        let trunk_grads = model.trunk.backward_with(
            &trunk_trace,
            head_grads.input.as_ref().expect("input gradient requested"),
            backprop_input_only,
        )?;
        let gen_grads = model.gen.backward_with(
            &gen_trace,
            trunk_grads.input.as_ref().expect("input gradient requested"),
            BackwardOptions {
                input_grad: false,
                ..Default::default()
            },
        )?;
        params_and_grads_step(&mut opt.gen, model.gen.params_mut(), gen_grads.slices())?;
    }

    let n = batches.max(1) as f64;
    Ok(EpochRecord {
        epoch,
        d_real_loss: Some(d_real_sum / n),
        d_fake_loss: Some(d_fake_sum / n),
        c_loss: c_sum / n,
        g_loss: Some(g_sum / n),
        train_accuracy: view.accuracy(&model.trunk, Exec::default()),
    })
}

/// Best-so-far trunk tracking: strict improvement, earliest tie wins.
pub(crate) struct BestSnapshot {
    pub net: DenseNet,
    pub accuracy: f64,
    pub epoch: usize,
}

impl BestSnapshot {
    pub fn new(initial: &DenseNet) -> Self {
        BestSnapshot {
            net: initial.clone(),
            accuracy: f64::NEG_INFINITY,
            epoch: 0,
        }
    }

    pub fn offer(&mut self, net: &DenseNet, record: &EpochRecord) {
        if record.train_accuracy > self.accuracy {
            self.net = net.clone();
            self.accuracy = record.train_accuracy;
            self.epoch = record.epoch;
        }
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct SganOutcome {
    pub classifier: Classifier,
    pub history: TrainHistory,
    /// Final (not best) state, for checkpointing.
    pub model: SganModel,
    pub optimizers: SganOptimizers,
}

/// Train from scratch for up to `config.max_epochs` epochs.
pub fn train(model: SganModel, split: &DatasetSplit, config: &TrainConfig) -> Result<SganOutcome> {
    let optimizers = SganOptimizers::new(&model, config);
    train_observed(model, optimizers, split, config, |_, _| {})
}

/// Train (or resume), calling `observe` with each epoch's record and the
/// trunk as it stands after that epoch.
pub fn train_observed<F: FnMut(&EpochRecord, &DenseNet)>(
    mut model: SganModel,
    mut optimizers: SganOptimizers,
    split: &DatasetSplit,
    config: &TrainConfig,
    mut observe: F,
) -> Result<SganOutcome> {
    check_inputs(&model, split, config)?;
    let view = TrainingView::new(&split.train)?;
    let mut rng = seeded(derive_seed(config.seed, &[TRAIN_STREAM]));
    let mut best = BestSnapshot::new(&model.trunk);
    let mut history = TrainHistory::default();
    for epoch in 1..=config.max_epochs {
        let record = run_epoch(&mut model, &mut optimizers, split, &view, config, &mut rng, epoch)?;
        best.offer(&model.trunk, &record);
        observe(&record, &model.trunk);
        history.epochs.push(record);
    }
    history.best_epoch = best.epoch;
    model.set_mode(Mode::Inference);
    Ok(SganOutcome {
        classifier: Classifier::new(best.net, split.classes.clone())?,
        history,
        model,
        optimizers,
    })
}

/// Argmax label and class probabilities.
pub fn classify(classifier: &Classifier, histogram: &Histogram) -> (usize, Vec<f64>) {
    classifier.classify(histogram)
}
