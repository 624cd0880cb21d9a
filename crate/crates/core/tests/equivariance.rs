mod support;

use mmf_core::imputer::factorize;
use mmf_core::layers::{exml_stack, init_stack, prior_means, Dropout, FeedForward};
use mmf_core::{AdaptConfig, Tape, Tensor};
use rand::Rng;
use support::*;

const TOL: f64 = 1e-10;

struct Run {
    z: Tensor,
    u0: Tensor,
    v0: Tensor,
}

fn run(x: &Tensor, b: &Tensor, layers: &[mmf_core::layers::ExchangeableLayer], f_u: &FeedForward, f_v: &FeedForward) -> Run {
    let mut tape = Tape::new();
    let bound: Vec<_> = layers.iter().map(|l| l.bind(&mut tape)).collect();
    let (bu, bv) = (f_u.bind(&mut tape), f_v.bind(&mut tape));
    let mask = tape.constant(b.clone());
    let z = exml_stack(&mut tape, x, mask, &bound, &mut Dropout::off()).unwrap();
    let (u0, v0) = prior_means(&mut tape, z, &bu, &bv, &mut Dropout::off()).unwrap();
    Run { z: tape.value(z).clone(), u0: tape.value(u0).clone(), v0: tape.value(v0).clone() }
}

#[test]
fn stack_is_equivariant_and_priors_follow_their_axis() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(2..9), r.random_range(2..9));
        let layers = init_stack(&[4, 5, 3], &mut r).unwrap();
        let f_u = FeedForward::init(&[3, 6, 6, 2], &mut r).unwrap();
        let f_v = FeedForward::init(&[3, 6, 6, 2], &mut r).unwrap();
        let b = random_mask(&mut r, n, m, 0.5);
        let x = random_matrix(&mut r, n, m).zip_map(&b, |v, w| v * w);
        let (pr, pc) = (random_permutation(&mut r, n), random_permutation(&mut r, m));
        let identity_rows: Vec<usize> = (0..n).collect();
        let identity_cols: Vec<usize> = (0..m).collect();

        let base = run(&x, &b, &layers, &f_u, &f_v);
        let both = run(&permute(&x, &pr, &pc), &permute(&b, &pr, &pc), &layers, &f_u, &f_v);
        assert!(max_abs(&both.z, &permute(&base.z, &pr, &pc)) <= TOL, "seed {seed}: Z");
        assert!(max_abs(&both.u0, &permute_rows(&base.u0, &pr)) <= TOL, "seed {seed}: U0");
        assert!(max_abs(&both.v0, &permute_rows(&base.v0, &pc)) <= TOL, "seed {seed}: V0");

        let cols_only = run(&permute(&x, &identity_rows, &pc), &permute(&b, &identity_rows, &pc), &layers, &f_u, &f_v);
        assert!(max_abs(&cols_only.u0, &base.u0) <= TOL, "seed {seed}: U0 under column permutation");
        let rows_only = run(&permute(&x, &pr, &identity_cols), &permute(&b, &pr, &identity_cols), &layers, &f_u, &f_v);
        assert!(max_abs(&rows_only.v0, &base.v0) <= TOL, "seed {seed}: V0 under row permutation");
    }
}

#[test]
fn adapted_prediction_is_equivariant() {
    let cfg = small_config(6);
    for seed in 0..10 {
        let params = random_params(&cfg, seed);
        let mut r = rng(900 + seed);
        let (n, m) = (r.random_range(2..8), r.random_range(2..8));
        let b = random_mask(&mut r, n, m, 0.5);
        let x = random_matrix(&mut r, n, m);
        let (pr, pc) = (random_permutation(&mut r, n), random_permutation(&mut r, m));
        let adapt = AdaptConfig { eta: 0.02, steps: 5 };
        let base = factorize(&params, &x, &b, adapt).unwrap().predict();
        let perm = factorize(&params, &permute(&x, &pr, &pc), &permute(&b, &pr, &pc), adapt).unwrap().predict();
        assert!(max_abs(&perm, &permute(&base, &pr, &pc)) <= TOL, "seed {seed}");
    }
}

#[test]
fn unobserved_values_do_not_matter() {
    let cfg = small_config(5);
    let params = random_params(&cfg, 4);
    let mut r = rng(77);
    let b = random_mask(&mut r, 6, 5, 0.5);
    let x = random_matrix(&mut r, 6, 5);
    let noisy = x.zip_map(&b, |v, w| if w != 0.0 { v } else { v + 100.0 });
    let adapt = AdaptConfig { eta: 0.01, steps: 3 };
    let a = factorize(&params, &x, &b, adapt).unwrap().predict();
    let c = factorize(&params, &noisy, &b, adapt).unwrap().predict();
    assert_eq!(a, c);
}

#[test]
fn episode_loss_ignores_joint_permutation() {
    use mmf_core::episodes::Episode;
    use mmf_core::metatrain::{suite_loss, Sequential};
    let cfg = small_config(6);
    for seed in 0..10 {
        let params = random_params(&cfg, 40 + seed);
        let mut r = rng(1300 + seed);
        let (n, m) = (r.random_range(2..8), r.random_range(2..8));
        let b = random_mask(&mut r, n, m, 0.5);
        let b_test = b.map(|w| 1.0 - w);
        let x = random_matrix(&mut r, n, m);
        let ep = Episode { x: x.zip_map(&b, |v, w| v * w), b, x_test: x.zip_map(&b_test, |v, w| v * w), b_test };
        let (pr, pc) = (random_permutation(&mut r, n), random_permutation(&mut r, m));
        let perm = Episode {
            x: permute(&ep.x, &pr, &pc),
            b: permute(&ep.b, &pr, &pc),
            x_test: permute(&ep.x_test, &pr, &pc),
            b_test: permute(&ep.b_test, &pr, &pc),
        };
        let adapt = AdaptConfig { eta: 0.02, steps: 3 };
        let base = suite_loss(&params, &[ep], adapt, &Sequential).unwrap();
        let moved = suite_loss(&params, &[perm], adapt, &Sequential).unwrap();
        assert!((base - moved).abs() <= TOL, "seed {seed}: {base} vs {moved}");
    }
}
