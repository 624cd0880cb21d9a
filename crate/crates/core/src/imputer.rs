//! The full imputation model: exchangeable encoder, prior networks, and `T`
//! differentiable MAP gradient steps on the factor matrices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{softplus, softplus_inverse, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{exml_stack, init_stack, prior_means, validate_stack, BoundExchangeable, BoundFeedForward, Dropout, DropoutSpec, ExchangeableLayer, FeedForward};
use crate::rng;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channel count of each exchangeable layer.
    pub exml_channels: Vec<usize>,
    /// Hidden width of `f_U` and `f_V`.
    pub ff_hidden: usize,
    /// Number of weight layers in `f_U` and `f_V`.
    pub ff_layers: usize,
    /// Latent dimension `K`.
    pub latent: usize,
    /// Initial value of the prior precision.
    pub lambda_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { exml_channels: vec![32, 32, 32], ff_hidden: 32, ff_layers: 4, latent: 32, lambda_init: 1.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exml_channels.is_empty() || self.exml_channels.contains(&0) {
            return Err(Error::Config("exchangeable channel widths must be non-empty and positive".into()));
        }
        if self.ff_layers == 0 || self.ff_hidden == 0 || self.latent == 0 {
            return Err(Error::Config("feed-forward depth, hidden width and latent size must be positive".into()));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::Config(format!("initial lambda {} must be positive", self.lambda_init)));
        }
        Ok(())
    }

    fn ff_widths(&self) -> Vec<usize> {
        let c = *self.exml_channels.last().expect("validated");
        let mut widths = vec![c];
        widths.extend(core::iter::repeat(self.ff_hidden).take(self.ff_layers - 1));
        widths.push(self.latent);
        widths
    }
}

/// Inner-loop MAP adaptation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub eta: f64,
    pub steps: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { eta: 1e-2, steps: 10 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("inner learning rate {} must be positive", self.eta)));
        }
        Ok(())
    }
}

/// Meta-learned parameters Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub exml: Vec<ExchangeableLayer>,
    pub f_u: FeedForward,
    pub f_v: FeedForward,
    /// Rank-0 tensor; `λ = softplus(lambda_raw)`.
    pub lambda_raw: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0);
        let exml = init_stack(&config.exml_channels, &mut rng)?;
        let widths = config.ff_widths();
        let f_u = FeedForward::init(&widths, &mut rng)?;
        let f_v = FeedForward::init(&widths, &mut rng)?;
        Ok(Self { exml, f_u, f_v, lambda_raw: Tensor::scalar(softplus_inverse(config.lambda_init)) })
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.lambda_raw.item())
    }

    pub fn latent(&self) -> usize {
        self.f_u.output_width()
    }

    /// Tensor names, in the canonical order shared by [`tensors`](Self::tensors).
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.exml.len() {
            names.push(format!("exml.{l}.weight"));
            names.push(format!("exml.{l}.bias"));
        }
        for (net, ff) in [("f_u", &self.f_u), ("f_v", &self.f_v)] {
            for l in 0..ff.depth() {
                names.push(format!("{net}.{l}.weight"));
                names.push(format!("{net}.{l}.bias"));
            }
        }
        names.push("lambda_raw".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.exml {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        for ff in [&self.f_u, &self.f_v] {
            for (w, b) in ff.weights.iter().zip(&ff.biases) {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&self.lambda_raw);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.exml {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for ff in [&mut self.f_u, &mut self.f_v] {
            for (w, b) in ff.weights.iter_mut().zip(ff.biases.iter_mut()) {
                out.push(w);
                out.push(b);
            }
        }
        out.push(&mut self.lambda_raw);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds parameters from named tensors, checking the architecture.
    pub fn from_named(config: &ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let names = params.names();
        if names.len() != named.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", names.len(), named.len())));
        }
        for ((slot, expected), (name, t)) in params.tensors_mut().into_iter().zip(&names).zip(named) {
            if name != expected {
                return Err(Error::Config(format!("expected tensor `{expected}`, found `{name}`")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, architecture needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        validate_stack(&params.exml)?;
        Ok(params)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let exml = self.exml.iter().map(|l| l.bind(tape)).collect();
        let f_u = self.f_u.bind(tape);
        let f_v = self.f_v.bind(tape);
        let lambda_raw = tape.leaf(self.lambda_raw.clone());
        BoundModel { exml, f_u, f_v, lambda_raw }
    }
}

/// [`ModelParams`] registered as leaves on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub exml: Vec<BoundExchangeable>,
    pub f_u: BoundFeedForward,
    pub f_v: BoundFeedForward,
    pub lambda_raw: Var,
}

impl BoundModel {
    /// Leaf handles in the canonical parameter order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.exml {
            out.push(l.weight);
            out.push(l.bias);
        }
        for ff in [&self.f_u, &self.f_v] {
            for &(w, b) in &ff.layers {
                out.push(w);
                out.push(b);
            }
        }
        out.push(self.lambda_raw);
        out
    }

    /// Gradients after backward, zeros for parameters the loss did not reach.
    pub fn gradients(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.vars()
            .into_iter()
            .map(|v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}

/// Current factors and their prior means.
#[derive(Clone, Copy, Debug)]
pub struct FactorPair {
    pub u: Var,
    pub v: Var,
    pub u0: Var,
    pub v0: Var,
}

impl FactorPair {
    /// Factors initialised at the prior means.
    pub fn at_prior(u0: Var, v0: Var) -> Self {
        Self { u: u0, v: v0, u0, v0 }
    }
}

/// Whether a forward pass is part of meta-training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

/// Negated log-posterior up to constants:
/// `Σ b (uᵀv - x)² + λ (Σ‖u - u0‖² + Σ‖v - v0‖²)`.
pub fn map_objective(tape: &mut Tape, x: Var, b: Var, fp: &FactorPair, lambda: Var) -> Result<Var> {
    let pred = tape.matmul_nt(fp.u, fp.v)?;
    let diff = tape.sub(pred, x)?;
    let masked = tape.mul(diff, b)?;
    let sq = tape.square(masked);
    let data = tape.sum(sq);

    let du = tape.sub(fp.u, fp.u0)?;
    let du = tape.square(du);
    let du = tape.sum(du);
    let dv = tape.sub(fp.v, fp.v0)?;
    let dv = tape.square(dv);
    let dv = tape.sum(dv);
    let prior = tape.add(du, dv)?;
    let prior = tape.mul(prior, lambda)?;
    tape.add(data, prior)
}

/// One simultaneous gradient step on both factor matrices.
///
/// Both updates read the factors at time `t`.
pub fn adapt_step(tape: &mut Tape, x: Var, b: Var, fp: &FactorPair, lambda: Var, eta: f64) -> Result<FactorPair> {
    let pred = tape.matmul_nt(fp.u, fp.v)?;
    let diff = tape.sub(pred, x)?;
    let resid = tape.mul(diff, b)?;

    let grad_u = tape.matmul(resid, fp.v)?;
    let du = tape.sub(fp.u, fp.u0)?;
    let du = tape.mul(du, lambda)?;
    let grad_u = tape.add(grad_u, du)?;

    let resid_t = tape.transpose(resid)?;
    let grad_v = tape.matmul(resid_t, fp.u)?;
    let dv = tape.sub(fp.v, fp.v0)?;
    let dv = tape.mul(dv, lambda)?;
    let grad_v = tape.add(grad_v, dv)?;

    let step_u = tape.scale(grad_u, eta);
    let step_v = tape.scale(grad_v, eta);
    let u = tape.sub(fp.u, step_u)?;
    let v = tape.sub(fp.v, step_v)?;
    Ok(FactorPair { u, v, u0: fp.u0, v0: fp.v0 })
}

fn check_inputs(x: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 || x.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "model_forward",
            detail: format!("matrix {:?} vs mask {:?}", x.shape(), b.shape()),
        });
    }
    let (n, m) = (x.shape()[0], x.shape()[1]);
    if n == 0 || m == 0 {
        return Err(Error::Contract(format!("empty {n}x{m} matrix")));
    }
    if b.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Contract("observation mask must be binary".into()));
    }
    Ok((n, m))
}

/// Encoder, prior networks and `cfg.steps` MAP updates.
///
/// `rng` drives dropout in [`Mode::Train`] and is ignored in [`Mode::Eval`].
/// Returns the adapted factors together with the `λ` node used.
pub fn model_forward(
    tape: &mut Tape,
    model: &BoundModel,
    x: &Tensor,
    b: &Tensor,
    cfg: AdaptConfig,
    mode: Mode,
    rng: &mut dyn rand::RngCore,
) -> Result<(FactorPair, Var)> {
    check_inputs(x, b)?;
    cfg.validate()?;
    // Unobserved cells are stored as zero before entering the encoder.
    let x_clean = x.zip_map(b, |v, m| if m != 0.0 { v } else { 0.0 });
    let mask = tape.constant(b.clone());
    let mut dropout = match mode {
        Mode::Train { dropout } => Dropout::new(DropoutSpec::training(dropout), rng),
        Mode::Eval => Dropout::off(),
    };
    let z = exml_stack(tape, &x_clean, mask, &model.exml, &mut dropout)?;
    let (u0, v0) = prior_means(tape, z, &model.f_u, &model.f_v, &mut dropout)?;

    let lambda = tape.softplus(model.lambda_raw);
    let xv = tape.constant(x_clean);
    let mut fp = FactorPair::at_prior(u0, v0);
    for _ in 0..cfg.steps {
        fp = adapt_step(tape, xv, mask, &fp, lambda, cfg.eta)?;
    }
    Ok((fp, lambda))
}

/// `x̂ = U Vᵀ` as a graph node.
pub fn predict(tape: &mut Tape, fp: &FactorPair) -> Result<Var> {
    tape.matmul_nt(fp.u, fp.v)
}

/// `x̂ = U Vᵀ` for plain tensors.
pub fn predict_factors(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    u.matmul(&v.transpose())
}

/// Mean squared error over the entries observed in `b_test`.
pub fn episode_loss(tape: &mut Tape, x_test: &Tensor, b_test: &Tensor, fp: &FactorPair) -> Result<Var> {
    let count = b_test.sum();
    if count <= 0.0 {
        return Err(Error::Contract("test mask has no observed entries".into()));
    }
    let pred = predict(tape, fp)?;
    if tape.shape(pred) != x_test.shape() {
        return Err(Error::Dimension {
            op: "episode_loss",
            detail: format!("prediction {:?} vs test matrix {:?}", tape.shape(pred), x_test.shape()),
        });
    }
    let xt = tape.constant(x_test.zip_map(b_test, |v, m| if m != 0.0 { v } else { 0.0 }));
    let bt = tape.constant(b_test.clone());
    let diff = tape.sub(xt, pred)?;
    let diff = tape.mul(diff, bt)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / count))
}

/// Loss and parameter gradients for one episode, on a private tape.
pub fn episode_gradient(
    params: &ModelParams,
    x: &Tensor,
    b: &Tensor,
    x_test: &Tensor,
    b_test: &Tensor,
    cfg: AdaptConfig,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let mut rng = rng::stream(dropout_seed, 1);
    let (fp, _) = model_forward(&mut tape, &model, x, b, cfg, mode, &mut rng)?;
    let loss = episode_loss(&mut tape, x_test, b_test, &fp)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    Ok((value, model.gradients(&mut tape)))
}

/// Adapted factors `(U, V)` and prior means `(U0, V0)` in eval mode.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub u: Tensor,
    pub v: Tensor,
    pub u0: Tensor,
    pub v0: Tensor,
}

impl Factorization {
    pub fn predict(&self) -> Tensor {
        predict_factors(&self.u, &self.v).expect("factor shapes agree")
    }

    pub fn prior_product(&self) -> Tensor {
        predict_factors(&self.u0, &self.v0).expect("factor shapes agree")
    }
}

/// Eval-mode forward pass without gradient bookkeeping for the caller.
pub fn factorize(params: &ModelParams, x: &Tensor, b: &Tensor, cfg: AdaptConfig) -> Result<Factorization> {
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let mut rng = rng::stream(0, 0);
    let (fp, _) = model_forward(&mut tape, &model, x, b, cfg, Mode::Eval, &mut rng)?;
    Ok(Factorization {
        u: tape.value(fp.u).clone(),
        v: tape.value(fp.v).clone(),
        u0: tape.value(fp.u0).clone(),
        v0: tape.value(fp.v0).clone(),
    })
}

/// Imputed matrix `U Vᵀ` after `cfg.steps` adaptation steps.
pub fn impute(params: &ModelParams, x: &Tensor, b: &Tensor, cfg: AdaptConfig) -> Result<Tensor> {
    Ok(factorize(params, x, b, cfg)?.predict())
}
