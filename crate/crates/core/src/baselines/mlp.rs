//! Standalone MLP with the same architecture as the SGAN classifier, trained
//! purely supervised.

use rand::seq::SliceRandom;

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};
use crate::ndmath::{derive_seed, seeded, AdamConfig, AdamState, BackwardOptions, DenseNet, Mode};
use crate::par::Exec;
use crate::sgan::{softmax_cross_entropy, trunk_specs, BestSnapshot, Classifier, EpochRecord, TrainConfig, TrainHistory, TrainingView};

const TRAIN_STREAM: u64 = 2;

pub fn train_mlp(split: &DatasetSplit, config: &TrainConfig) -> Result<(Classifier, TrainHistory)> {
    train_mlp_observed(split, config, |_, _| {})
}

/// `observe` sees each epoch's record and the network after that epoch.
/// Each epoch shuffles the supervised subset and walks it in batches (the
/// last one may be short). Snapshot selection is by full-training-set
/// accuracy, as for the SGAN.
pub fn train_mlp_observed<F: FnMut(&EpochRecord, &DenseNet)>(
    split: &DatasetSplit,
    config: &TrainConfig,
    mut observe: F,
) -> Result<(Classifier, TrainHistory)> {
    config.validate()?;
    if split.supervised_indices.is_empty() {
        return Err(Error::EmptySupervisedSet);
    }
    let mut net = DenseNet::init(&trunk_specs(split.n_classes()), &mut seeded(config.seed))?;
    let mut adam = AdamState::for_params(AdamConfig::with_lr(config.lr_dc), &net.params());
    let mut rng = seeded(derive_seed(config.seed, &[TRAIN_STREAM]));
    let view = TrainingView::new(&split.train)?;
    let mut best = BestSnapshot::new(&net);
    let mut history = TrainHistory::default();
    let mut order = split.supervised_indices.clone();
    let no_input_grad = BackwardOptions {
        input_grad: false,
        ..Default::default()
    };

    for epoch in 1..=config.max_epochs {
        net.mode = Mode::Training;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| view.labels[i]).collect();
            let trace = net.forward(&view.gather(chunk), &mut rng)?;
            let (loss, grad) = softmax_cross_entropy(trace.output(), &labels)?;
            let grads = net.backward_with(&trace, &grad, no_input_grad)?;
            adam.step(&mut net.params_mut(), &grads.slices())?;
            loss_sum += loss;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            d_real_loss: None,
            d_fake_loss: None,
            c_loss: loss_sum / batches as f64,
            g_loss: None,
            train_accuracy: view.accuracy(&net, Exec::default()),
        };
        best.offer(&net, &record);
        observe(&record, &net);
        history.epochs.push(record);
    }
    history.best_epoch = best.epoch;
    Ok((Classifier::new(best.net, split.classes.clone())?, history))
}
