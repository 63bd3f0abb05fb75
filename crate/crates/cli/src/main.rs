//! `bytescope`: byte-histogram file type identification from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bytescope::baselines::{knn_fit, train_mlp_observed, tree_fit, MAX_K};
use bytescope::corpus::{load_features, save_features, shuffle_split, TRAIN_FRACTION};
use bytescope::eval::{
    self, evaluate, header_gap_csv, history_csv, perturb_headers, render_reports, run_sweep, Algorithm, HeaderGapTracker,
    ReportSet, SweepPlan,
};
use bytescope::features::featurize_files;
use bytescope::ndmath::DenseNet;
use bytescope::par::{self, Exec};
use bytescope::persist::{self, SavedModel, SganCheckpoint};
use bytescope::sgan::{self, SganModel, TrainConfig};
use bytescope::{ClassMap, DatasetSplit, LabeledSample, TrainHistory};

#[derive(Parser, Debug)]
#[command(name = "bytescope", version, about = "Identify file types from byte-value histograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Sgan,
    Mlp,
    Knn,
    Tree,
}

#[derive(clap::Args, Debug, Clone)]
struct SplitArgs {
    /// Seed of the train/test shuffle.
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

#[derive(clap::Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 5e-4, value_parser = positive_float)]
    lr: f64,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch as usize,
            max_epochs: self.epochs,
            lr_dc: self.lr,
            lr_g: self.lr,
            seed,
            ..TrainConfig::default()
        }
    }
}

fn positive_float(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

#[derive(clap::Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum)]
    algo: Algo,
    /// Number of labeled training samples.
    #[arg(long)]
    labeled: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=MAX_K as u64))]
    k: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV (default: `<out>.history.csv`; SGAN and MLP only).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Write the held-out test samples to this feature cache.
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Also save the final SGAN state (with optimizers) for resuming.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source root of the cache; after every epoch, score the test set with
    /// and without overwritten headers into `<out>.header_gap.csv`.
    #[arg(long)]
    header_gap: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Featurize every file under a directory into a feature cache.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classes with fewer files are dropped.
        #[arg(long, default_value_t = bytescope::corpus::MIN_CLASS_SIZE)]
        min_class_size: usize,
    },
    /// Split a feature cache, train one model on the training part and save it.
    Train(TrainOpts),
    /// Score a saved model on a feature cache.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Also score with every non-text file's first six bytes overwritten.
        #[arg(long, requires = "source_dir")]
        perturb_headers: bool,
        /// Root the cache's relative paths point into.
        #[arg(long)]
        source_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the predicted type of each file.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Accuracy for every (budget, algorithm) cell, median over seeds.
    Sweep {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = eval::REFERENCE_BUDGETS)]
        budgets: Vec<usize>,
        /// Replicates per cell.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
        /// Comma-separated subset of sgan, mlp, tree, knn, knn_k1..knn_k6.
        #[arg(long, default_value = "sgan,mlp,tree,knn", value_parser = parse_algorithms)]
        algos: AlgorithmList,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct AlgorithmList(Vec<Algorithm>);

fn parse_algorithms(s: &str) -> std::result::Result<AlgorithmList, String> {
    Algorithm::parse_list(s).map(AlgorithmList).map_err(|e| e.to_string())
}

fn load_split(path: &Path, split: &SplitArgs) -> Result<DatasetSplit> {
    let (samples, classes) = load_features(path).with_context(|| format!("loading {}", path.display()))?;
    if classes.len() < 2 {
        bail!("{} holds {} class(es); need at least 2", path.display(), classes.len());
    }
    Ok(shuffle_split(samples, classes, TRAIN_FRACTION, split.split_seed)?)
}

fn cmd_ingest(dir: &Path, out: &Path, min_class_size: usize) -> Result<()> {
    eprintln!("ingest: dir={} out={} min_class_size={min_class_size}", dir.display(), out.display());
    let data = bytescope::corpus::ingest_with(dir, min_class_size, Exec::default())?;
    let report = &data.report;
    for (class, n) in &report.removed_classes {
        eprintln!("removed class {class} ({n} files)");
    }
    for (path, why) in &report.failed {
        eprintln!("skipped {path}: {why}");
    }
    eprintln!(
        "{} files seen, {} kept in {} classes, {} rejected",
        report.files_seen,
        data.samples.len(),
        data.classes.len(),
        report.rejected()
    );
    if data.samples.is_empty() {
        eprintln!("warning: no samples ingested; writing an empty cache");
    }
    save_features(&data.samples, &data.classes, out)?;
    Ok(())
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    std::fs::write(path, history_csv(history)).with_context(|| format!("writing {}", path.display()))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn cmd_train(opts: TrainOpts) -> Result<()> {
    let TrainOpts {
        features,
        algo,
        labeled,
        seed,
        split: split_args,
        train,
        k,
        out,
        history,
        test_out,
        checkpoint,
        header_gap,
    } = opts;
    let (features, out, k) = (features.as_path(), out.as_path(), k as usize);
    eprintln!(
        "train: features={} algo={algo:?} labeled={labeled} seed={seed} split_seed={} epochs={} batch={} lr={} k={k} out={}",
        features.display(),
        split_args.split_seed,
        train.epochs,
        train.batch,
        train.lr,
        out.display()
    );
    let split = load_split(features, &split_args)?;
    let algorithm = match algo {
        Algo::Sgan => Algorithm::Sgan,
        Algo::Mlp => Algorithm::Mlp,
        Algo::Tree => Algorithm::Tree,
        Algo::Knn => Algorithm::Knn(k),
    };
    // same seeds as replicate 0 of a sweep with this master seed
    let plan = SweepPlan {
        algorithms: vec![algorithm],
        budgets: vec![labeled],
        replicates: 1,
        master_seed: seed,
        train: train.config(seed),
    };
    let split = split.select_supervised(labeled, plan.subset_seed(labeled, 0))?;
    let config = train.config(plan.cell_seed(labeled, algorithm, 0));
    eprintln!(
        "{} train / {} test samples, {} supervised, {} classes",
        split.train.len(),
        split.test.len(),
        split.supervised_indices.len(),
        split.n_classes()
    );
    let history_path = history.unwrap_or_else(|| sibling(out, ".history.csv"));
    if checkpoint.is_some() && algo != Algo::Sgan {
        eprintln!("note: --checkpoint only applies to sgan");
    }
    let mut tracker = match &header_gap {
        Some(root) if matches!(algo, Algo::Sgan | Algo::Mlp) => {
            let t = HeaderGapTracker::new(&split.test, &split.classes, root)?;
            for (path, why) in &t.skipped {
                eprintln!("header gap: skipped {path}: {why}");
            }
            Some(t)
        }
        Some(_) => {
            eprintln!("note: --header-gap only applies to sgan and mlp");
            None
        }
        None => None,
    };
    let mut tracker_error = None;
    let progress = |r: &sgan::EpochRecord, net: &DenseNet| {
        let mut line = format!("epoch {:>4} c_loss {:.5} train_acc {:.5}", r.epoch, r.c_loss, r.train_accuracy);
        if let Some(t) = tracker.as_mut() {
            match t.observe(r.epoch, net) {
                Ok(g) => line.push_str(&format!(" test {:.5} perturbed {:.5}", g.original, g.perturbed)),
                Err(e) => tracker_error = Some(e),
            }
        }
        eprintln!("{line}");
    };
    let model = match algo {
        Algo::Sgan => {
            let model = SganModel::with_classes(split.n_classes(), config.seed)?;
            let optimizers = sgan::SganOptimizers::new(&model, &config);
            let outcome = sgan::train_observed(model, optimizers, &split, &config, progress)?;
            write_history(&history_path, &outcome.history)?;
            eprintln!("best epoch {}", outcome.history.best_epoch);
            if let Some(path) = checkpoint {
                let mut state = outcome.model;
                state.trunk.quantize_f32();
                state.disc_head.quantize_f32();
                state.gen.quantize_f32();
                let ckpt = SavedModel::SganFull(Box::new(SganCheckpoint {
                    model: state,
                    optimizers: outcome.optimizers,
                    classes: split.classes.clone(),
                }));
                persist::save(&ckpt, &path)?;
            }
            SavedModel::Classifier(outcome.classifier)
        }
        Algo::Mlp => {
            let (classifier, hist) = train_mlp_observed(&split, &config, progress)?;
            write_history(&history_path, &hist)?;
            eprintln!("best epoch {}", hist.best_epoch);
            SavedModel::Classifier(classifier)
        }
        Algo::Knn => SavedModel::Knn(knn_fit(split.supervised(), &split.classes, k)?),
        Algo::Tree => SavedModel::Tree(tree_fit(split.supervised(), &split.classes)?),
    };
    if let Some(e) = tracker_error {
        return Err(e.into());
    }
    if let Some(t) = &tracker {
        std::fs::write(sibling(out, ".header_gap.csv"), header_gap_csv(&t.records))?;
        let worst = t.records.iter().map(|r| r.delta().abs()).fold(0.0, f64::max);
        eprintln!("largest per-epoch header-overwrite gap {:.3} points", 100.0 * worst);
    }
    persist::save(&model, out)?;
    if let Some(path) = test_out {
        save_features(&split.test, &split.classes, &path)?;
    }
    Ok(())
}

/// Relabel samples from a cache's class map onto the model's.
fn remap(samples: Vec<LabeledSample>, from: &ClassMap, to: &ClassMap) -> Result<Vec<LabeledSample>> {
    samples
        .into_iter()
        .map(|mut s| {
            let name = from.name(s.label).unwrap_or("?");
            s.label = to
                .index_of(name)
                .ok_or_else(|| anyhow!("{}: class {name:?} unknown to the model", s.source_path))?;
            Ok(s)
        })
        .collect()
}

fn cmd_evaluate(model: &Path, features: &Path, perturb: bool, source_dir: Option<&Path>, out: &Path) -> Result<()> {
    eprintln!(
        "evaluate: model={} features={} perturb_headers={perturb} out={}",
        model.display(),
        features.display(),
        out.display()
    );
    let saved = persist::load(model).with_context(|| format!("loading {}", model.display()))?;
    let kind = saved.kind().name();
    let predictor = saved.into_predictor()?;
    let (samples, cache_classes) = load_features(features)?;
    let test = remap(samples, &cache_classes, predictor.classes())?;
    let base = evaluate(predictor.as_ref(), &test)?;
    println!("accuracy\t{:.5}", base.accuracy);
    let mut summary = format!("metric,value\nsamples,{}\naccuracy,{:.5}\n", test.len(), base.accuracy);
    let perturbed = match (perturb, source_dir) {
        (true, Some(root)) => {
            let p = perturb_headers(&test, predictor.classes(), root);
            for (path, why) in &p.skipped {
                eprintln!("skipped {path}: {why}");
            }
            let kept: Vec<LabeledSample> = test
                .iter()
                .filter(|s| !p.skipped.iter().any(|(path, _)| *path == s.source_path))
                .cloned()
                .collect();
            let before = evaluate(predictor.as_ref(), &kept)?.accuracy;
            let after = evaluate(predictor.as_ref(), &p.samples)?;
            let delta = after.accuracy - before;
            println!("perturbed_accuracy\t{:.5}", after.accuracy);
            println!("delta\t{delta:+.5}");
            summary.push_str(&format!(
                "perturbed_files,{}\nskipped_files,{}\nunperturbed_accuracy_kept,{before:.5}\nperturbed_accuracy,{:.5}\ndelta,{delta:.5}\n",
                p.perturbed,
                p.skipped.len(),
                after.accuracy
            ));
            Some(after.confusion)
        }
        _ => None,
    };
    let mut reports = ReportSet {
        confusions: vec![(kind.to_string(), &base.confusion)],
        ..Default::default()
    };
    if let Some(cm) = &perturbed {
        reports.confusions.push((format!("{kind}_perturbed"), cm));
    }
    render_reports(&reports, out)?;
    std::fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

fn cmd_classify(model: &Path, files: &[PathBuf]) -> Result<bool> {
    let predictor = persist::load(model)
        .with_context(|| format!("loading {}", model.display()))?
        .into_predictor()?;
    let features = featurize_files(Exec::default(), files);
    let lines = par::map(Exec::default(), &features, |f| f.as_ref().map(|h| predictor.predict_proba(h)).ok());
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut ok = 0;
    for ((path, feat), probs) in files.iter().zip(&features).zip(lines) {
        match (feat, probs) {
            (Ok(h), Some(p)) => {
                let label = predictor.predict(h);
                let name = predictor.classes().name(label).unwrap_or("?");
                let all: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
                writeln!(out, "{}\t{name}\t{:.6}\t{}", path.display(), p[label], all.join(","))?;
                ok += 1;
            }
            (Err(e), _) => eprintln!("{}\terror\t{e}", path.display()),
            (Ok(_), None) => unreachable!("probabilities exist for every featurized file"),
        }
    }
    Ok(ok > 0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    features: &Path,
    budgets: Vec<usize>,
    seeds: usize,
    algorithms: Vec<Algorithm>,
    seed: u64,
    split_args: &SplitArgs,
    train: &TrainArgs,
    out: &Path,
) -> Result<()> {
    let names: Vec<String> = algorithms.iter().map(|a| a.name()).collect();
    eprintln!(
        "sweep: features={} budgets={budgets:?} seeds={seeds} algos={} seed={seed} split_seed={} epochs={} batch={} lr={} out={}",
        features.display(),
        names.join(","),
        split_args.split_seed,
        train.epochs,
        train.batch,
        train.lr,
        out.display()
    );
    let split = load_split(features, split_args)?;
    let plan = SweepPlan {
        algorithms,
        budgets,
        replicates: seeds,
        master_seed: seed,
        train: train.config(seed),
    };
    let result = run_sweep(&split, &plan, Exec::default(), |c| {
        eprintln!(
            "cell budget={} algo={} replicate={} accuracy={:.5}",
            c.budget,
            c.algorithm.name(),
            c.replicate,
            c.accuracy
        )
    })?;
    std::fs::write(out, eval::sweep_csv(&result)).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest {
            dir,
            out,
            min_class_size,
        } => cmd_ingest(&dir, &out, min_class_size).map(|_| true),
        Command::Train(opts) => cmd_train(opts).map(|_| true),
        Command::Evaluate {
            model,
            features,
            perturb_headers,
            source_dir,
            out,
        } => cmd_evaluate(&model, &features, perturb_headers, source_dir.as_deref(), &out).map(|_| true),
        Command::Classify { model, files } => cmd_classify(&model, &files),
        Command::Sweep {
            features,
            budgets,
            seeds,
            algos,
            seed,
            split,
            train,
            out,
        } => cmd_sweep(&features, budgets, seeds as usize, algos.0, seed, &split, &train, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
