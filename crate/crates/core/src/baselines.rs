//! Reference imputers that do not meta-learn: per-matrix factorization,
//! the observed mean, and the prior-product ablation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imputer::{factorize, predict_factors, AdaptConfig, ModelParams};
use crate::metatrain::masked_mse;
use crate::rng::{self, uniform_tensor};
use crate::tensor::Tensor;

/// Per-matrix factorization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MfConfig {
    pub latent: usize,
    pub weight_decays: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub max_iters: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    /// Factors start i.i.d. uniform in `±init_scale`.
    pub init_scale: f64,
    /// Fraction of observed entries held out for the grid search.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            latent: 32,
            weight_decays: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            learning_rates: vec![1e-3, 1e-2, 1e-1],
            max_iters: 500,
            tol: 1e-8,
            init_scale: 0.1,
            valid_fraction: 0.2,
            seed: 0,
        }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 {
            return Err(Error::Config("MF latent size must be positive".into()));
        }
        if self.weight_decays.is_empty() || self.learning_rates.is_empty() {
            return Err(Error::Config("MF hyperparameter grids must be non-empty".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0)) || self.weight_decays.iter().any(|&wd| !(wd >= 0.0)) {
            return Err(Error::Config("MF learning rates must be positive and weight decays non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.valid_fraction)));
        }
        Ok(())
    }
}

/// Result of one gradient-descent run.
#[derive(Clone, Debug)]
pub struct MfFit {
    pub u: Tensor,
    pub v: Tensor,
    /// Objective after each accepted iteration, starting with the initial value.
    pub objective: Vec<f64>,
}

impl MfFit {
    pub fn predict(&self) -> Tensor {
        predict_factors(&self.u, &self.v).expect("factor shapes agree")
    }
}

/// Chosen hyperparameters and the refit factors.
#[derive(Clone, Debug)]
pub struct MfSelection {
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub valid_mse: f64,
    pub fit: MfFit,
}

fn residual(x: &Tensor, b: &Tensor, u: &Tensor, v: &Tensor) -> Tensor {
    let mut r = predict_factors(u, v).expect("factor shapes agree");
    for ((r, &xv), &bv) in r.data_mut().iter_mut().zip(x.data()).zip(b.data()) {
        *r = if bv != 0.0 { *r - xv } else { 0.0 };
    }
    r
}

fn sq_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// `Σ b (uᵀv - x)² + wd (‖U‖² + ‖V‖²)`.
pub fn mf_objective(x: &Tensor, b: &Tensor, u: &Tensor, v: &Tensor, weight_decay: f64) -> f64 {
    sq_norm(&residual(x, b, u, v)) + weight_decay * (sq_norm(u) + sq_norm(v))
}

/// Gradient descent from a small random start. A step that would raise the
/// objective is retried with half the rate; the run stops after `max_iters`
/// accepted steps, on relative change below `tol`, or when halving no longer
/// finds a decrease.
pub fn mf_gradient_descent(
    x: &Tensor,
    b: &Tensor,
    latent: usize,
    weight_decay: f64,
    learning_rate: f64,
    cfg: &MfConfig,
    seed: u64,
) -> Result<MfFit> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let mut rng = rng::stream(seed, 0);
    let mut u = uniform_tensor(&mut rng, &[n, latent], cfg.init_scale);
    let mut v = uniform_tensor(&mut rng, &[m, latent], cfg.init_scale);
    let mut f = mf_objective(x, b, &u, &v, weight_decay);
    if !f.is_finite() {
        return Err(Error::Baseline("non-finite initial MF objective".into()));
    }
    let mut objective = vec![f];
    let mut lr = learning_rate;
    'outer: for _ in 0..cfg.max_iters {
        let r = residual(x, b, &u, &v);
        let mut gu = r.matmul(&v)?;
        let mut gv = r.transpose().matmul(&u)?;
        for (g, &p) in gu.data_mut().iter_mut().zip(u.data()) {
            *g = 2.0 * (*g + weight_decay * p);
        }
        for (g, &p) in gv.data_mut().iter_mut().zip(v.data()) {
            *g = 2.0 * (*g + weight_decay * p);
        }
        for _ in 0..60 {
            let u_new = u.zip_map(&gu, |p, g| p - lr * g);
            let v_new = v.zip_map(&gv, |p, g| p - lr * g);
            let f_new = mf_objective(x, b, &u_new, &v_new, weight_decay);
            if f_new.is_finite() && f_new <= f {
                let rel = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
                u = u_new;
                v = v_new;
                f = f_new;
                objective.push(f);
                if rel < cfg.tol {
                    break 'outer;
                }
                continue 'outer;
            }
            lr *= 0.5;
        }
        break;
    }
    Ok(MfFit { u, v, objective })
}

/// Grid search over weight decay and learning rate on a held-out subset of
/// the observed entries, then a refit on all of them.
///
/// `valid` overrides the held-out subset; otherwise `cfg.valid_fraction` of
/// the observed cells are drawn with `cfg.seed`. With fewer than two
/// observations there is nothing to hold out and the cell with the lowest
/// training error wins.
pub fn mf_fit(x: &Tensor, b: &Tensor, cfg: &MfConfig, valid: Option<&Tensor>) -> Result<MfSelection> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape() != b.shape() {
        return Err(Error::Dimension { op: "mf_fit", detail: format!("{:?} vs {:?}", x.shape(), b.shape()) });
    }
    let observed: Vec<usize> = (0..b.numel()).filter(|&k| b.data()[k] != 0.0).collect();
    if observed.is_empty() {
        return Err(Error::Contract("MF needs at least one observed entry".into()));
    }

    let holdout = match valid {
        Some(v) => v.zip_map(b, |a, c| if a != 0.0 && c != 0.0 { 1.0 } else { 0.0 }),
        None => {
            let mut h = Tensor::zeros(b.shape());
            let k = libm::round(cfg.valid_fraction * observed.len() as f64) as usize;
            let k = k.min(observed.len().saturating_sub(1));
            let mut order = observed.clone();
            order.shuffle(&mut rng::stream(cfg.seed, 7));
            for &i in &order[..k] {
                h.data_mut()[i] = 1.0;
            }
            h
        }
    };
    let n_holdout = holdout.sum();
    let (fit_mask, score_mask) = if n_holdout > 0.0 {
        (b.zip_map(&holdout, |a, h| if h != 0.0 { 0.0 } else { a }), holdout)
    } else {
        (b.clone(), b.clone())
    };

    let mut best: Option<(f64, f64, f64)> = None;
    for &wd in &cfg.weight_decays {
        for &lr in &cfg.learning_rates {
            let Ok(fit) = mf_gradient_descent(x, &fit_mask, cfg.latent, wd, lr, cfg, cfg.seed) else { continue };
            let pred = fit.predict();
            let score = masked_mse(&pred, x, &score_mask);
            if score.is_finite() && best.map_or(true, |(s, _, _)| score < s) {
                best = Some((score, wd, lr));
            }
        }
    }
    let Some((valid_mse, weight_decay, learning_rate)) = best else {
        return Err(Error::Baseline(format!(
            "all {} MF grid cells diverged",
            cfg.weight_decays.len() * cfg.learning_rates.len()
        )));
    };
    let fit = mf_gradient_descent(x, b, cfg.latent, weight_decay, learning_rate, cfg, cfg.seed)?;
    Ok(MfSelection { weight_decay, learning_rate, valid_mse, fit })
}

/// Constant matrix filled with the mean of the observed entries.
pub fn mean_predict(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&v, &w) in x.data().iter().zip(b.data()) {
        if w != 0.0 {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("mean baseline needs at least one observed entry".into()));
    }
    Ok(Tensor::full(x.shape(), sum / count as f64))
}

/// `U0 V0ᵀ`: the prior means without any adaptation step.
pub fn prior_product_predict(x: &Tensor, b: &Tensor, params: &ModelParams) -> Result<Tensor> {
    Ok(factorize(params, x, b, AdaptConfig { eta: 1.0, steps: 0 })?.predict())
}
