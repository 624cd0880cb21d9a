//! Episodic meta-training with Adam, validation-based model selection, and
//! evaluation of imputers on fixed episode suites.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::episodes::{make_meta_test_suite, sample_episode, DatasetSplit, Episode, Normalization, RatingMatrix};
use crate::error::{Error, Result};
use crate::imputer::{episode_gradient, impute, AdaptConfig, ModelConfig, ModelParams, Mode};
use crate::rng;
use crate::tensor::Tensor;

/// Outer-loop settings. Defaults follow the reference protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub outer_lr: f64,
    /// Episode rows `N`.
    pub rows: usize,
    /// Episode columns `M`.
    pub cols: usize,
    /// Probability an observed cell goes to the episode's training mask.
    pub train_ratio: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub valid_episodes: usize,
    pub valid_holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adapt: AdaptConfig::default(),
            epochs: 1000,
            batches_per_epoch: 50,
            batch_size: 16,
            outer_lr: 1e-4,
            rows: 30,
            cols: 30,
            train_ratio: 0.5,
            dropout: 0.1,
            seed: 0,
            patience: 100,
            valid_episodes: 10,
            valid_holdout: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt.validate()?;
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("batch size and batches per epoch must be at least 1".into()));
        }
        if !(self.outer_lr > 0.0) {
            return Err(Error::Config(format!("outer learning rate {} must be positive", self.outer_lr)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("episode size must be positive".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("training ratio {} must lie in (0, 1)", self.train_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if !(self.valid_holdout > 0.0 && self.valid_holdout < 1.0) {
            return Err(Error::Config(format!("validation holdout {} must lie in (0, 1)", self.valid_holdout)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update applied in place. Nothing is modified if any gradient is
/// non-finite; the error names the offending tensor by index.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension { op: "adam_step", detail: format!("tensor #{i}") });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: format!("#{i}") });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        for k in 0..gd.len() {
            let mk = b1 * m.data()[k] + (1.0 - b1) * gd[k];
            let vk = b2 * v.data()[k] + (1.0 - b2) * gd[k] * gd[k];
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            pd[k] -= lr * (mk / c1) / (libm::sqrt(vk / c2) + eps);
        }
    }
    Ok(())
}

/// Adam over every tensor of a [`ModelParams`], naming the tensor on failure.
pub fn adam_step_model(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    let names = params.names();
    let mut tensors = params.tensors_mut();
    adam_step(&mut tensors, grads, state, lr).map_err(|e| match e {
        Error::NonFiniteGradient { param } => {
            let idx: usize = param.trim_start_matches('#').parse().unwrap_or(0);
            Error::NonFiniteGradient { param: names.get(idx).cloned().unwrap_or(param) }
        }
        other => other,
    })
}

/// Maps a function over a slice, possibly in parallel, returning results in
/// input order.
pub trait Executor {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync;
}

/// Runs everything on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        items.iter().map(f).collect()
    }
}

/// An episode plus the seed of its dropout stream.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub episode: Episode,
    pub dropout_seed: u64,
}

/// Mean loss and mean gradient over a batch. Per-episode results are merged
/// in batch order.
pub fn batch_gradient<E: Executor>(
    params: &ModelParams,
    batch: &[BatchItem],
    adapt: AdaptConfig,
    mode: Mode,
    exec: &E,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let results = exec.map(batch, |item| {
        let ep = &item.episode;
        episode_gradient(params, &ep.x, &ep.b, &ep.x_test, &ep.b_test, adapt, mode, item.dropout_seed)
    });
    let mut loss_sum = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, g) = r?;
        loss_sum += loss;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.scale(inv));
    Ok((loss_sum * inv, grads))
}

/// Everything needed to reload a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub normalization: Normalization,
    pub best_valid_loss: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training batch loss; NaN for the initial evaluation.
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Fixed validation suite drawn from a block with the config's seed.
pub fn validation_suite(block: &RatingMatrix, cfg: &TrainConfig) -> Result<Vec<Episode>> {
    let mut rng = rng::stream(cfg.seed, 3);
    let rows = cfg.rows.min(block.n_rows());
    let cols = cfg.cols.min(block.n_cols());
    make_meta_test_suite(block, cfg.valid_episodes, rows, cols, cfg.valid_holdout, &mut rng)
}

/// Mean eval-mode test loss over a suite.
pub fn suite_loss<E: Executor>(params: &ModelParams, suite: &[Episode], adapt: AdaptConfig, exec: &E) -> Result<f64> {
    Ok(evaluate(params, suite, adapt, exec)?.mean_test())
}

/// Meta-trains on a dataset split: episodes come from the training block, and
/// model selection uses a fixed suite drawn from the validation block.
pub fn meta_train<E: Executor>(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    exec: &E,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let suite = validation_suite(&split.valid, cfg)?;
    meta_train_blocks(core::slice::from_ref(&split.train), &suite, split.normalization, cfg, exec, on_epoch)
}

/// Meta-trains over several training blocks, picking one uniformly per
/// episode, and keeps the parameters with the lowest validation loss.
pub fn meta_train_blocks<E: Executor>(
    blocks: &[RatingMatrix],
    valid_suite: &[Episode],
    normalization: Normalization,
    cfg: &TrainConfig,
    exec: &E,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if blocks.is_empty() {
        return Err(Error::Config("no meta-training blocks".into()));
    }
    if valid_suite.is_empty() {
        return Err(Error::Config("empty validation suite".into()));
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(params.tensors());
    let mut rng = rng::stream(cfg.seed, 2);
    let mode = if cfg.dropout > 0.0 { Mode::Train { dropout: cfg.dropout } } else { Mode::Eval };

    let initial = suite_loss(&params, valid_suite, cfg.adapt, exec)?;
    if !initial.is_finite() {
        return Err(Error::Numeric("initial validation loss is not finite".into()));
    }
    let mut best = Checkpoint {
        params: params.clone(),
        config: cfg.clone(),
        normalization,
        best_valid_loss: initial,
        best_epoch: 0,
    };
    let log = EpochLog { epoch: 0, train_loss: f64::NAN, valid_loss: initial };
    on_epoch(&log);
    let mut history = alloc::vec![log];
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut train_sum = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let block = &blocks[rng.random_range(0..blocks.len())];
                let rows = cfg.rows.min(block.n_rows());
                let cols = cfg.cols.min(block.n_cols());
                let episode = sample_episode(block, rows, cols, cfg.train_ratio, &mut rng)?;
                batch.push(BatchItem { episode, dropout_seed: rng.random() });
            }
            let (loss, grads) = batch_gradient(&params, &batch, cfg.adapt, mode, exec)?;
            adam_step_model(&mut params, &grads, &mut adam, cfg.outer_lr)?;
            train_sum += loss;
        }
        let valid_loss = suite_loss(&params, valid_suite, cfg.adapt, exec)?;
        let log = EpochLog { epoch, train_loss: train_sum / cfg.batches_per_epoch as f64, valid_loss };
        on_epoch(&log);
        history.push(log);
        if !valid_loss.is_finite() {
            return Err(Error::Diverged { epoch, last_finite: alloc::boxed::Box::new(best) });
        }
        if valid_loss < best.best_valid_loss {
            best.params = params.clone();
            best.best_valid_loss = valid_loss;
            best.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { checkpoint: best, history, stopped_early })
}

/// Per-episode error of one imputer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeScore {
    /// MSE on the held-out cells.
    pub test_mse: f64,
    /// MSE on the observed cells the imputer saw.
    pub train_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<EpisodeScore>,
}

impl EvalReport {
    pub fn test_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.test_mse).collect()
    }

    pub fn mean_test(&self) -> f64 {
        mean(self.scores.iter().map(|s| s.test_mse))
    }

    pub fn mean_train(&self) -> f64 {
        mean(self.scores.iter().map(|s| s.train_mse))
    }

    /// Standard error of the mean test MSE across episodes.
    pub fn stderr_test(&self) -> f64 {
        standard_error(&self.test_values())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Sample standard deviation over `√n`; 0 for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mu = mean(values.iter().copied());
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
    libm::sqrt(var / n as f64)
}

/// Mean squared error over cells with non-zero mask.
pub fn masked_mse(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &t), &w) in pred.data().iter().zip(truth.data()).zip(mask.data()) {
        if w != 0.0 {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Scores any imputer on a suite.
pub fn evaluate_predictions<E, F>(suite: &[Episode], exec: &E, predict: F) -> Result<EvalReport>
where
    E: Executor,
    F: Fn(&Episode) -> Result<Tensor> + Sync,
{
    if suite.is_empty() {
        return Err(Error::Contract("evaluation suite is empty".into()));
    }
    let scores = exec.map(suite, |ep| {
        let pred = predict(ep)?;
        Ok(EpisodeScore {
            test_mse: masked_mse(&pred, &ep.x_test, &ep.b_test),
            train_mse: masked_mse(&pred, &ep.x, &ep.b),
        })
    });
    Ok(EvalReport { scores: scores.into_iter().collect::<Result<Vec<_>>>()? })
}

/// Scores the meta-learned imputer with `adapt.steps` MAP steps.
pub fn evaluate<E: Executor>(params: &ModelParams, suite: &[Episode], adapt: AdaptConfig, exec: &E) -> Result<EvalReport> {
    evaluate_predictions(suite, exec, |ep| impute(params, &ep.x, &ep.b, adapt))
}
