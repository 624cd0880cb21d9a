//! Exchangeable matrix layers, permutation-invariant pooling into feed-forward
//! prior networks, and inverted dropout.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{ReduceAxis, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::uniform_tensor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Number of weighted terms per channel pair: element, column average, row
/// average, global average.
pub const EXML_TERMS: usize = 4;

/// One exchangeable matrix layer.
///
/// `weight[c_in, c_out, i]` holds the coefficients of the element term
/// (`i = 0`), column average (`1`), row average (`2`) and global average
/// (`3`). `bias[c_out]` is the per-channel offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeableLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl ExchangeableLayer {
    pub fn zeros(c_in: usize, c_out: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor::zeros(&[c_in, c_out, EXML_TERMS]),
            bias: Tensor::zeros(&[c_out]),
            activation,
        }
    }

    /// Scaled-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / ((EXML_TERMS * c_in + c_out) as f64));
        Self {
            weight: uniform_tensor(rng, &[c_in, c_out, EXML_TERMS], bound),
            bias: Tensor::zeros(&[c_out]),
            activation,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundExchangeable {
        BoundExchangeable {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
            activation: self.activation,
        }
    }
}

/// An [`ExchangeableLayer`] whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundExchangeable {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// Dense feed-forward network with ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    /// `weights[l]` is `in_l × out_l`.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl FeedForward {
    /// `widths = [input, hidden.., output]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("feed-forward network needs at least one layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let bound = libm::sqrt(6.0 / ((pair[0] + pair[1]) as f64));
            weights.push(uniform_tensor(rng, &[pair[0], pair[1]], bound));
            biases.push(Tensor::zeros(&[pair[1]]));
        }
        Ok(Self { weights, biases })
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().map_or(0, |w| w.shape()[1])
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFeedForward {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect();
        BoundFeedForward { layers }
    }
}

#[derive(Clone, Debug)]
pub struct BoundFeedForward {
    pub layers: Vec<(Var, Var)>,
}

impl BoundFeedForward {
    /// Applies the network row-wise to `x[R, C]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: &mut Dropout<'_>) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if l != last {
                h = tape.relu(h);
                h = dropout.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Dropout configuration. Identity when disabled or `rate == 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub enabled: bool,
}

impl DropoutSpec {
    pub const OFF: Self = Self { rate: 0.0, enabled: false };

    pub fn training(rate: f64) -> Self {
        Self { rate, enabled: true }
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled || self.rate == 0.0
    }
}

/// A dropout spec paired with the random stream it draws from.
pub struct Dropout<'r> {
    spec: DropoutSpec,
    rng: Option<&'r mut dyn rand::RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn new(spec: DropoutSpec, rng: &'r mut dyn rand::RngCore) -> Self {
        Self { spec, rng: Some(rng) }
    }

    pub fn off() -> Self {
        Self { spec: DropoutSpec::OFF, rng: None }
    }

    pub fn spec(&self) -> DropoutSpec {
        self.spec
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => dropout_apply(tape, x, self.spec, rng),
            None => Ok(x),
        }
    }
}

/// Inverted dropout: zero each activation with probability `rate`, scale
/// survivors by `1 / (1 - rate)`.
pub fn dropout_apply<R: rand::RngCore + ?Sized>(
    tape: &mut Tape,
    x: Var,
    spec: DropoutSpec,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::Config(format!("dropout rate {} outside [0, 1)", spec.rate)));
    }
    if spec.is_identity() {
        return Ok(x);
    }
    let keep = 1.0 - spec.rate;
    let scale = 1.0 / keep;
    let mut mask = Tensor::zeros(tape.shape(x));
    for m in mask.data_mut() {
        if rng.random::<f64>() < keep {
            *m = scale;
        }
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// One exchangeable matrix layer applied to `z[N, M, C_in]` under `mask[N, M]`.
pub fn exml_forward(tape: &mut Tape, layer: &BoundExchangeable, z: Var, mask: Var) -> Result<Var> {
    let (n, m, c_in) = match *tape.shape(z) {
        [n, m, c] => (n, m, c),
        ref s => {
            return Err(Error::Dimension { op: "exml_forward", detail: format!("input shape {:?}", s) })
        }
    };
    let wshape = tape.shape(layer.weight).to_vec();
    if wshape.len() != 3 || wshape[0] != c_in || wshape[2] != EXML_TERMS {
        return Err(Error::Dimension {
            op: "exml_forward",
            detail: format!("weight {:?} for {} input channels", wshape, c_in),
        });
    }
    if tape.shape(mask) != [n, m] {
        return Err(Error::Dimension {
            op: "exml_forward",
            detail: format!("mask {:?} for {}x{} input", tape.shape(mask), n, m),
        });
    }
    let c_out = wshape[1];

    let w_elem = tape.index_last(layer.weight, 0)?;
    let w_col = tape.index_last(layer.weight, 1)?;
    let w_row = tape.index_last(layer.weight, 2)?;
    let w_all = tape.index_last(layer.weight, 3)?;

    let masked = tape.mask_channels(z, mask)?;
    let flat = tape.reshape(masked, &[n * m, c_in])?;
    let elem = tape.matmul(flat, w_elem)?;
    let mut out = tape.reshape(elem, &[n, m, c_out])?;

    let col_avg = tape.masked_reduce(z, mask, ReduceAxis::Rows)?;
    let col_term = tape.matmul(col_avg, w_col)?;
    out = tape.add_col_term(out, col_term)?;

    let row_avg = tape.masked_reduce(z, mask, ReduceAxis::Cols)?;
    let row_term = tape.matmul(row_avg, w_row)?;
    out = tape.add_row_term(out, row_term)?;

    let all_avg = tape.masked_reduce(z, mask, ReduceAxis::All)?;
    let all_avg = tape.reshape(all_avg, &[1, c_in])?;
    let all_term = tape.matmul(all_avg, w_all)?;
    let all_term = tape.reshape(all_term, &[c_out])?;
    out = tape.add_bias(out, all_term)?;
    out = tape.add_bias(out, layer.bias)?;

    Ok(match layer.activation {
        Activation::Relu => tape.relu(out),
        Activation::Identity => out,
    })
}

/// Checks that a stack of layers chains from one input channel.
pub fn validate_stack(layers: &[ExchangeableLayer]) -> Result<()> {
    let Some(first) = layers.first() else {
        return Err(Error::Config("exchangeable stack needs at least one layer".into()));
    };
    if first.c_in() != 1 {
        return Err(Error::Config(format!("first exchangeable layer takes {} channels, expected 1", first.c_in())));
    }
    for (l, pair) in layers.windows(2).enumerate() {
        if pair[0].c_out() != pair[1].c_in() {
            return Err(Error::Config(format!(
                "exchangeable layer {} emits {} channels but layer {} takes {}",
                l,
                pair[0].c_out(),
                l + 1,
                pair[1].c_in()
            )));
        }
    }
    Ok(())
}

/// Builds `depth` exchangeable layers with the given output widths; the last
/// one is linear.
pub fn init_stack<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Vec<ExchangeableLayer>> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut c_in = 1;
    for (l, &c_out) in widths.iter().enumerate() {
        let act = if l + 1 == widths.len() { Activation::Identity } else { Activation::Relu };
        layers.push(ExchangeableLayer::init(c_in, c_out, act, rng));
        c_in = c_out;
    }
    validate_stack(&layers)?;
    Ok(layers)
}

/// Runs the exchangeable stack on a matrix `input[N, M]` with observation
/// `mask[N, M]`, returning the final representation `Z[N, M, C]`.
///
/// Hidden layers use ReLU followed by dropout; the final layer is linear
/// regardless of its stored activation.
pub fn exml_stack(
    tape: &mut Tape,
    input: &Tensor,
    mask: Var,
    layers: &[BoundExchangeable],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("exchangeable stack needs at least one layer".into()));
    }
    if input.rank() != 2 {
        return Err(Error::Dimension { op: "exml_stack", detail: format!("input {:?}", input.shape()) });
    }
    let (n, m) = (input.shape()[0], input.shape()[1]);
    let mut z = tape.constant(input.clone().reshape(&[n, m, 1])?);
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let expected = tape.shape(z)[2];
        let got = tape.shape(layer.weight)[0];
        if expected != got {
            return Err(Error::Config(format!(
                "exchangeable layer {l} takes {got} channels but receives {expected}"
            )));
        }
        let mut bound = *layer;
        bound.activation = if l == last { Activation::Identity } else { Activation::Relu };
        z = exml_forward(tape, &bound, z, mask)?;
        if l != last {
            z = dropout.apply(tape, z)?;
        }
    }
    Ok(z)
}

/// Prior means `U0 = f_U(mean_m Z)`, `V0 = f_V(mean_n Z)`.
///
/// Pooling is the plain mean over all `M` (resp. `N`) positions.
pub fn prior_means(
    tape: &mut Tape,
    z: Var,
    f_u: &BoundFeedForward,
    f_v: &BoundFeedForward,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    let pooled_rows = tape.mean_reduce(z, ReduceAxis::Cols)?;
    let pooled_cols = tape.mean_reduce(z, ReduceAxis::Rows)?;
    let u0 = f_u.forward(tape, pooled_rows, dropout)?;
    let v0 = f_v.forward(tape, pooled_cols, dropout)?;
    Ok((u0, v0))
}
