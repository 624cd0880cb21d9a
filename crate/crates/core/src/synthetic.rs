//! Synthetic families of low-rank matrices that share generative structure.
//!
//! Every task draws its row factors from `N(μ_U, s² I)` and its column factors
//! from `N(μ_V, s² I)`, where the family means `μ_U, μ_V` are fixed per
//! family. Cells are `u_nᵀ v_m + ε` with Gaussian noise and are observed
//! independently with a fixed probability.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::episodes::{Rating, RatingMatrix};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Standard deviation of the family-level factor means.
    pub mean_scale: f64,
    /// Within-task standard deviation of factors around the family mean.
    pub factor_spread: f64,
    pub noise: f64,
    /// Probability that a cell is observed.
    pub observed: f64,
    pub seed: u64,
}

impl Default for TaskFamily {
    fn default() -> Self {
        Self { rows: 30, cols: 30, rank: 3, mean_scale: 1.0, factor_spread: 0.5, noise: 0.1, observed: 0.3, seed: 0 }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

impl TaskFamily {
    /// Family-level `(μ_U, μ_V)`.
    pub fn factor_means(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng::stream(self.seed, 0);
        let mu_u = gaussian(&mut rng, self.rank).into_iter().map(|v| v * self.mean_scale).collect();
        let mu_v = gaussian(&mut rng, self.rank).into_iter().map(|v| v * self.mean_scale).collect();
        (mu_u, mu_v)
    }

    /// Task `index` of the family; the same index always yields the same matrix.
    pub fn task(&self, index: u64) -> RatingMatrix {
        let (mu_u, mu_v) = self.factor_means();
        let mut rng = rng::stream(self.seed, 1 + index);
        let k = self.rank;
        let draw = |rng: &mut rng::RngStream, mu: &[f64], count: usize| -> Vec<f64> {
            (0..count * k).map(|i| mu[i % k] + self.factor_spread * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let u = draw(&mut rng, &mu_u, self.rows);
        let v = draw(&mut rng, &mu_v, self.cols);
        let mut ratings = Vec::new();
        for n in 0..self.rows {
            for m in 0..self.cols {
                let dot: f64 = (0..k).map(|c| u[n * k + c] * v[m * k + c]).sum();
                let value = dot + self.noise * rng.sample::<f64, _>(StandardNormal);
                if rng.random_bool(self.observed) {
                    ratings.push(Rating::new(n as u64, m as u64, value));
                }
            }
        }
        let rows: Vec<u64> = (0..self.rows as u64).collect();
        let cols: Vec<u64> = (0..self.cols as u64).collect();
        RatingMatrix::from_ratings(&ratings, &rows, &cols)
    }

    /// Tasks `start..start + count`.
    pub fn tasks(&self, start: u64, count: usize) -> Vec<RatingMatrix> {
        (start..start + count as u64).map(|i| self.task(i)).collect()
    }
}
