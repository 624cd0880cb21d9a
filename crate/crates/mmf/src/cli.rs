//! Command-line surface: `prepare`, `train`, `eval`, `report`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmf_core::baselines::{mean_predict, mf_fit, prior_product_predict, MfConfig};
use mmf_core::episodes::{make_meta_test_suite, partition_and_normalize, Episode, Normalization, RatingMatrix};
use mmf_core::metatrain::{
    evaluate, evaluate_predictions, meta_train_blocks, validation_suite, Checkpoint, EpochLog, EvalReport, TrainConfig,
};
use mmf_core::rng::stream;
use mmf_core::{AdaptConfig, ModelConfig};

use crate::checkpoint;
use crate::data::{self, Manifest, TripletFormat};
use crate::error::{Error, Result};
use crate::exec::Threaded;
use crate::num::fmt_f64;
use crate::report::{self, ReportRow};

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "meta_test.manifest";
pub const SEED_ENV: &str = "MMF_SEED";

pub const SWEEP_SIZES: [usize; 5] = [10, 20, 30, 40, 50];
pub const SWEEP_STEPS: [usize; 6] = [0, 1, 2, 5, 10, 20];

#[derive(Parser, Debug)]
#[command(name = "mmf", version, about = "Meta-learned matrix factorization for rating imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split raw ratings into normalized blocks and a fixed meta-test manifest.
    Prepare(PrepareArgs),
    /// Meta-train on a prepared split and write a checkpoint.
    Train(TrainArgs),
    /// Score the trained model and the baselines on meta-test episodes.
    Eval(EvalArgs),
    /// Summarize one or more report files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: TripletFormat,
    #[arg(long, default_value = "prepared")]
    pub out_dir: PathBuf,
    /// Train, validation and test fractions for users and items.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub test_episodes: usize,
    #[arg(long, default_value_t = 30)]
    pub rows: usize,
    #[arg(long, default_value_t = 30)]
    pub cols: usize,
    /// Fraction of observed cells hidden in each meta-test episode.
    #[arg(long, default_value_t = 0.5)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long, default_value = "prepared")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// Epoch log; defaults to the checkpoint path with `.log.tsv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batches_per_epoch)]
    pub batches_per_epoch: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().outer_lr)]
    pub outer_lr: f64,
    /// Output channels of each exchangeable layer.
    #[arg(long, value_delimiter = ',', default_values_t = ModelConfig::default().exml_channels)]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = ModelConfig::default().ff_hidden)]
    pub ff_hidden: usize,
    /// Weight layers in each prior network.
    #[arg(long, default_value_t = ModelConfig::default().ff_layers)]
    pub ff_layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().latent)]
    pub latent: usize,
    #[arg(long, default_value_t = ModelConfig::default().lambda_init)]
    pub lambda_init: f64,
    /// Inner learning rate of the MAP steps.
    #[arg(long, default_value_t = AdaptConfig::default().eta)]
    pub eta: f64,
    #[arg(long, default_value_t = AdaptConfig::default().steps)]
    pub inner_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().rows)]
    pub rows: usize,
    #[arg(long, default_value_t = TrainConfig::default().cols)]
    pub cols: usize,
    #[arg(long, default_value_t = TrainConfig::default().train_ratio)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = TrainConfig::default().dropout)]
    pub dropout: f64,
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    #[arg(long, default_value_t = TrainConfig::default().valid_episodes)]
    pub valid_episodes: usize,
    #[arg(long, default_value_t = TrainConfig::default().valid_holdout)]
    pub valid_holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    #[value(name = "ours")]
    Ours,
    #[value(name = "mean")]
    Mean,
    #[value(name = "mf")]
    Mf,
    #[value(name = "prior_product")]
    PriorProduct,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Mean => "mean",
            Method::Mf => "mf",
            Method::PriorProduct => "prior_product",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    /// Regenerate test episodes at 10, 20, 30, 40 and 50 rows and columns.
    #[value(name = "size")]
    Size,
    /// Evaluate the model with 0, 1, 2, 5, 10 and 20 MAP steps.
    #[value(name = "inner-steps")]
    InnerSteps,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// Meta-test manifest; defaults to the one in `--data-dir`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "prepared")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "report.tsv")]
    pub output: PathBuf,
    /// Label written into the dataset column.
    #[arg(long, default_value = "data")]
    pub dataset: String,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Method::Ours, Method::Mean, Method::Mf, Method::PriorProduct])]
    pub methods: Vec<Method>,
    #[arg(long, value_enum)]
    pub sweep: Option<Sweep>,
    /// Overrides the checkpoint's number of MAP steps.
    #[arg(long)]
    pub inner_steps: Option<usize>,
    /// Overrides the checkpoint's inner learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Episodes per size in the size sweep.
    #[arg(long, default_value_t = 10)]
    pub sweep_episodes: usize,
    #[arg(long, default_value_t = 0.5)]
    pub holdout: f64,
    #[arg(long, default_value_t = MfConfig::default().latent)]
    pub mf_latent: usize,
    #[arg(long, default_value_t = MfConfig::default().max_iters)]
    pub mf_max_iters: usize,
    #[arg(long, value_delimiter = ',', default_values_t = MfConfig::default().weight_decays)]
    pub mf_weight_decays: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = MfConfig::default().learning_rates)]
    pub mf_learning_rates: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Method whose per-episode wins are counted against every other method.
    #[arg(long, default_value = "ours")]
    pub reference: String,
    /// Also write the combined rows to this report file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// `MMF_SEED` wins over `--seed` when set.
pub fn resolve_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw.trim().parse().map_err(|_| Error::Usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(flag),
        Err(e) => Err(Error::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Report(a) => summarize(&a, out),
    }
}

fn say(out: &mut dyn std::io::Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text).and_then(|_| out.write_all(b"\n")).map_err(Error::io("<stdout>"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub fn prepare(a: &PrepareArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let fractions: [f64; 3] =
        a.fractions.as_slice().try_into().map_err(|_| Error::Usage("--fractions takes three values".into()))?;
    if a.test_episodes == 0 || a.rows == 0 || a.cols == 0 {
        return Err(Error::Usage("--test-episodes, --rows and --cols must be positive".into()));
    }
    let ratings = data::load_triplets(&a.input, a.format)?;
    let s = data::summarize(&ratings);
    say(out, format_args!("ratings\t{}\tusers\t{}\titems\t{}\trange\t{}..{}", s.ratings, s.users, s.items, s.min, s.max))?;

    let split = partition_and_normalize(&ratings, fractions, &mut stream(seed, 10))?;
    let norm = split.normalization;
    say(out, format_args!("norm\tmean\t{}\tstd\t{}", fmt_f64(norm.mean), fmt_f64(norm.std)))?;
    create_dir(&a.out_dir)?;
    for (name, block) in [(TRAIN_FILE, &split.train), (VALID_FILE, &split.valid), (TEST_FILE, &split.test)] {
        data::write_block(&a.out_dir.join(name), block, &norm)?;
        say(out, format_args!("{name}\t{} users\t{} items\t{} ratings", block.n_rows(), block.n_cols(), block.n_observed()))?;
    }

    let rows = a.rows.min(split.test.n_rows());
    let cols = a.cols.min(split.test.n_cols());
    let episodes = make_meta_test_suite(&split.test, a.test_episodes, rows, cols, a.holdout, &mut stream(seed, 11))?;
    let avg = |f: fn(&Episode) -> usize| episodes.iter().map(f).sum::<usize>() as f64 / episodes.len() as f64;
    say(
        out,
        format_args!(
            "{MANIFEST_FILE}\t{} episodes of {rows}x{cols}\tavg train {:.1}\tavg test {:.1}",
            episodes.len(),
            avg(Episode::n_train),
            avg(Episode::n_test)
        ),
    )?;
    data::write_manifest(&a.out_dir.join(MANIFEST_FILE), &Manifest { normalization: norm, episodes })
}

fn train_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        model: ModelConfig {
            exml_channels: a.channels.clone(),
            ff_hidden: a.ff_hidden,
            ff_layers: a.ff_layers,
            latent: a.latent,
            lambda_init: a.lambda_init,
        },
        adapt: AdaptConfig { eta: a.eta, steps: a.inner_steps },
        epochs: a.epochs,
        batches_per_epoch: a.batches_per_epoch,
        batch_size: a.batch_size,
        outer_lr: a.outer_lr,
        rows: a.rows,
        cols: a.cols,
        train_ratio: a.train_ratio,
        dropout: a.dropout,
        seed,
        patience: a.patience,
        valid_episodes: a.valid_episodes,
        valid_holdout: a.valid_holdout,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_blocks(dir: &Path, names: &[&str]) -> Result<(Vec<RatingMatrix>, Normalization)> {
    let mut blocks = Vec::new();
    let mut norm: Option<Normalization> = None;
    for name in names {
        let path = dir.join(name);
        let (block, n) = data::read_block(&path)?;
        if let Some(prev) = norm {
            check_norm(&prev, &n, &format!("{} vs {}", dir.join(names[0]).display(), path.display()))?;
        }
        norm = Some(n);
        blocks.push(block);
    }
    Ok((blocks, norm.expect("at least one block")))
}

/// Normalization statistics must agree bit for bit.
pub fn check_norm(a: &Normalization, b: &Normalization, what: &str) -> Result<()> {
    if a.mean.to_bits() != b.mean.to_bits() || a.std.to_bits() != b.std.to_bits() {
        return Err(Error::Incompatible(format!(
            "normalization mismatch ({what}): mean {} / {}, std {} / {}",
            fmt_f64(a.mean),
            fmt_f64(b.mean),
            fmt_f64(a.std),
            fmt_f64(b.std)
        )));
    }
    Ok(())
}

pub fn render_log(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tvalid_loss\n");
    for l in history {
        s.push_str(&format!("{}\t{}\t{}\n", l.epoch, fmt_f64(l.train_loss), fmt_f64(l.valid_loss)));
    }
    s
}

fn params_finite(ck: &Checkpoint) -> bool {
    ck.params.tensors().iter().all(|t| t.is_finite())
}

pub fn train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let cfg = train_config(a, seed)?;
    let (blocks, norm) = read_blocks(&a.data_dir, &[TRAIN_FILE, VALID_FILE])?;
    let suite = validation_suite(&blocks[1], &cfg)?;
    let exec = Threaded::new(a.workers);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(".log.tsv");
        p.into()
    });

    let start = Instant::now();
    let mut history = Vec::new();
    let quiet = a.quiet;
    let result = meta_train_blocks(&blocks[..1], &suite, norm, &cfg, &exec, &mut |l| {
        history.push(*l);
        if !quiet {
            eprintln!(
                "epoch {:>5}  train {:.6}  valid {:.6}  {:.1}s",
                l.epoch,
                l.train_loss,
                l.valid_loss,
                start.elapsed().as_secs_f64()
            );
        }
    });
    fs::write(&log_path, render_log(&history)).map_err(Error::io(&log_path))?;
    let outcome = match result {
        Ok(o) => o,
        Err(mmf_core::Error::Diverged { epoch, last_finite }) => {
            checkpoint::save(&a.checkpoint, &last_finite)?;
            return Err(Error::NonFinite(format!(
                "validation loss at epoch {epoch}; kept the best checkpoint from epoch {} in {}",
                last_finite.best_epoch,
                a.checkpoint.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ck = &outcome.checkpoint;
    if !params_finite(ck) || !ck.best_valid_loss.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    checkpoint::save(&a.checkpoint, ck)?;
    say(
        out,
        format_args!(
            "best epoch {} of {}\tvalid loss {}\tlambda {:.6}\t{}{}",
            ck.best_epoch,
            outcome.history.len() - 1,
            fmt_f64(ck.best_valid_loss),
            ck.params.lambda(),
            a.checkpoint.display(),
            if outcome.stopped_early { "\tstopped early" } else { "" }
        ),
    )
}

fn mf_config(a: &EvalArgs, seed: u64) -> Result<MfConfig> {
    let cfg = MfConfig {
        latent: a.mf_latent,
        weight_decays: a.mf_weight_decays.clone(),
        learning_rates: a.mf_learning_rates.clone(),
        max_iters: a.mf_max_iters,
        seed,
        ..MfConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Scores one method on a suite.
pub fn score(
    method: Method,
    ck: &Checkpoint,
    adapt: AdaptConfig,
    mf: &MfConfig,
    suite: &[Episode],
    exec: &Threaded,
) -> Result<EvalReport> {
    let r = match method {
        Method::Ours => evaluate(&ck.params, suite, adapt, exec),
        Method::Mean => evaluate_predictions(suite, exec, |e| mean_predict(&e.x, &e.b)),
        Method::Mf => evaluate_predictions(suite, exec, |e| Ok(mf_fit(&e.x, &e.b, mf, None)?.fit.predict())),
        Method::PriorProduct => evaluate_predictions(suite, exec, |e| prior_product_predict(&e.x, &e.b, &ck.params)),
    };
    Ok(r?)
}

pub fn eval_rows(a: &EvalArgs) -> Result<Vec<ReportRow>> {
    let seed = resolve_seed(a.seed)?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let adapt = AdaptConfig { eta: a.eta.unwrap_or(ck.config.adapt.eta), steps: a.inner_steps.unwrap_or(ck.config.adapt.steps) };
    adapt.validate()?;
    let mf = mf_config(a, seed)?;
    let exec = Threaded::new(a.workers);
    if a.methods.is_empty() {
        return Err(Error::Usage("--methods is empty".into()));
    }

    let mut rows = Vec::new();
    if a.sweep == Some(Sweep::Size) {
        let (blocks, norm) = read_blocks(&a.data_dir, &[TEST_FILE])?;
        check_norm(&ck.normalization, &norm, "checkpoint vs test block")?;
        let test = &blocks[0];
        for size in SWEEP_SIZES {
            let (n, m) = (size.min(test.n_rows()), size.min(test.n_cols()));
            let suite = make_meta_test_suite(test, a.sweep_episodes, n, m, a.holdout, &mut stream(seed, 100 + size as u64))?;
            for &method in &a.methods {
                let r = score(method, &ck, adapt, &mf, &suite, &exec)?;
                rows.extend(report::rows_for(&format!("{}@size={size}", method.name()), &a.dataset, &r));
            }
        }
        return Ok(rows);
    }

    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.data_dir.join(MANIFEST_FILE));
    let manifest = data::read_manifest(&manifest_path)?;
    check_norm(&ck.normalization, &manifest.normalization, "checkpoint vs manifest")?;
    let suite = &manifest.episodes;
    for &method in &a.methods {
        if method == Method::Ours && a.sweep == Some(Sweep::InnerSteps) {
            for steps in SWEEP_STEPS {
                let r = score(method, &ck, AdaptConfig { steps, ..adapt }, &mf, suite, &exec)?;
                rows.extend(report::rows_for(&format!("ours@T={steps}"), &a.dataset, &r));
            }
        } else {
            let r = score(method, &ck, adapt, &mf, suite, &exec)?;
            rows.extend(report::rows_for(method.name(), &a.dataset, &r));
        }
    }
    Ok(rows)
}

fn rows_finite(rows: &[ReportRow]) -> bool {
    rows.iter().all(|r| r.test_mse.is_finite() && r.train_mse.is_finite() && r.stderr.is_none_or(f64::is_finite))
}

pub fn eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let rows = eval_rows(a)?;
    report::write(&a.output, &rows)?;
    out.write_all(report::render_summary(&report::summarize(&rows, "ours"), "ours").as_bytes())
        .map_err(Error::io("<stdout>"))?;
    if !rows_finite(&rows) {
        return Err(Error::NonFinite(format!("report {}", a.output.display())));
    }
    Ok(())
}

pub fn summarize(a: &ReportArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        rows.extend(report::read(path)?);
    }
    if let Some(path) = &a.output {
        report::write(path, &rows)?;
    }
    let lines = report::summarize(&rows, &a.reference);
    out.write_all(report::render_summary(&lines, &a.reference).as_bytes()).map_err(Error::io("<stdout>"))?;
    out.flush().map_err(Error::io("<stdout>"))?;
    if !rows_finite(&rows) {
        return Err(Error::NonFinite("report rows".into()));
    }
    Ok(())
}
