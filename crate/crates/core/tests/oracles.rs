mod support;

use mmf_core::imputer::{adapt_step, episode_loss, predict, FactorPair};
use mmf_core::layers::{exml_forward, exml_stack, prior_means, Activation, Dropout, FeedForward};
use mmf_core::rng::uniform_tensor;
use mmf_core::{Tape, Tensor};
use rand::Rng;
use support::*;

const TOL: f64 = 1e-12;
const INSTANCES: u64 = 100;

fn dims(r: &mut mmf_core::rng::RngStream) -> (usize, usize) {
    (r.random_range(1..7), r.random_range(1..7))
}

#[test]
fn exchangeable_layer_matches_loops() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (n, m) = dims(&mut r);
        let (ci, co) = (r.random_range(1..5), r.random_range(1..5));
        let act = if seed % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let layer = random_layer(&mut r, ci, co, act);
        let z = uniform_tensor(&mut r, &[n, m, ci], 2.0);
        let mask = random_mask(&mut r, n, m, 0.5);

        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let bv = tape.constant(mask.clone());
        let out = exml_forward(&mut tape, &bound, zv, bv).unwrap();
        let err = max_abs(tape.value(out), &exml_oracle(&z, &mask, &layer));
        assert!(err <= TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn stack_matches_loops() {
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let (n, m) = dims(&mut r);
        let widths = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
        let layers = mmf_core::layers::init_stack(&widths, &mut r).unwrap();
        let mask = random_mask(&mut r, n, m, 0.5);
        let x = random_matrix(&mut r, n, m).zip_map(&mask, |v, b| v * b);

        let mut tape = Tape::new();
        let bound: Vec<_> = layers.iter().map(|l| l.bind(&mut tape)).collect();
        let bv = tape.constant(mask.clone());
        let out = exml_stack(&mut tape, &x, bv, &bound, &mut Dropout::off()).unwrap();
        let err = max_abs(tape.value(out), &stack_oracle(&x, &mask, &layers));
        assert!(err <= TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn pooling_and_prior_networks_match_loops() {
    for seed in 0..INSTANCES {
        let mut r = rng(2000 + seed);
        let (n, m) = dims(&mut r);
        let c = r.random_range(1..5);
        let hidden = r.random_range(1..5);
        let k = r.random_range(1..4);
        let f_u = FeedForward::init(&[c, hidden, hidden, k], &mut r).unwrap();
        let f_v = FeedForward::init(&[c, hidden, k], &mut r).unwrap();
        let z = uniform_tensor(&mut r, &[n, m, c], 2.0);

        let mut tape = Tape::new();
        let (bu, bv) = (f_u.bind(&mut tape), f_v.bind(&mut tape));
        let zv = tape.constant(z.clone());
        let (u0, v0) = prior_means(&mut tape, zv, &bu, &bv, &mut Dropout::off()).unwrap();
        let eu = max_abs(tape.value(u0), &ff_oracle(&pool_oracle(&z, false), &f_u));
        let ev = max_abs(tape.value(v0), &ff_oracle(&pool_oracle(&z, true), &f_v));
        assert!(eu <= TOL && ev <= TOL, "seed {seed}: {eu:e} {ev:e}");
    }
}

struct StepCase {
    x: Tensor,
    b: Tensor,
    f: [Tensor; 4],
    lambda: f64,
}

fn step_case(seed: u64) -> StepCase {
    let mut r = rng(3000 + seed);
    let (n, m) = dims(&mut r);
    let k = r.random_range(1..5);
    let b = random_mask(&mut r, n, m, 0.6);
    let x = random_matrix(&mut r, n, m).zip_map(&b, |v, w| v * w);
    let f = [
        uniform_tensor(&mut r, &[n, k], 1.0),
        uniform_tensor(&mut r, &[m, k], 1.0),
        uniform_tensor(&mut r, &[n, k], 1.0),
        uniform_tensor(&mut r, &[m, k], 1.0),
    ];
    StepCase { x, b, f, lambda: r.random_range(0.0..3.0) }
}

fn bind_case(tape: &mut Tape, c: &StepCase) -> FactorPair {
    let [u, v, u0, v0] = c.f.clone().map(|t| tape.leaf(t));
    FactorPair { u, v, u0, v0 }
}

#[test]
fn map_step_matches_loops() {
    for seed in 0..INSTANCES {
        let c = step_case(seed);
        let eta = 0.01 * (1 + seed % 7) as f64;
        let mut tape = Tape::new();
        let fp = bind_case(&mut tape, &c);
        let (xv, bv) = (tape.constant(c.x.clone()), tape.constant(c.b.clone()));
        let lam = tape.constant(Tensor::scalar(c.lambda));
        let next = adapt_step(&mut tape, xv, bv, &fp, lam, eta).unwrap();
        let (u, v) = step_oracle(&c.x, &c.b, &c.f[0], &c.f[1], &c.f[2], &c.f[3], c.lambda, eta);
        let (eu, ev) = (max_abs(tape.value(next.u), &u), max_abs(tape.value(next.v), &v));
        assert!(eu <= TOL && ev <= TOL, "seed {seed}: {eu:e} {ev:e}");
        assert_eq!(tape.value(next.u0), &c.f[2]);
    }
}

#[test]
fn prediction_and_loss_match_loops() {
    for seed in 0..INSTANCES {
        let c = step_case(seed + 500);
        let mut tape = Tape::new();
        let fp = bind_case(&mut tape, &c);
        let pred = predict(&mut tape, &fp).unwrap();
        let expected = predict_oracle(&c.f[0], &c.f[1]);
        let err = max_abs(tape.value(pred), &expected);
        assert!(err <= TOL, "seed {seed}: prediction {err:e}");

        let mut bt = c.b.map(|w| 1.0 - w);
        if bt.sum() == 0.0 {
            bt.set(0, 0, 1.0);
        }
        let xt = random_matrix(&mut rng(seed), c.x.rows(), c.x.cols());
        let loss = episode_loss(&mut tape, &xt, &bt, &fp).unwrap();
        let want = loss_oracle(&xt, &bt, &expected);
        assert!(close(tape.value(loss).item(), want, TOL), "seed {seed}: {} vs {want}", tape.value(loss).item());
    }
}
