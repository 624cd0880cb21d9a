//! Rating blocks, user/item partitioning, normalization, and episodic
//! sampling of training/test submatrices.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Retries allowed when a sampled episode has an empty training or test mask.
pub const SAMPLE_RETRIES: usize = 100;

/// One `(user, item, rating)` observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: u64,
    pub item: u64,
    pub value: f64,
}

impl Rating {
    pub fn new(user: u64, item: u64, value: f64) -> Self {
        Self { user, item, value }
    }
}

/// A sparse partially-observed matrix in compressed-row form.
///
/// Rows and columns carry the original entity ids, sorted ascending.
/// Unobserved cells read as value 0, mask 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingMatrix {
    row_ids: Vec<u64>,
    col_ids: Vec<u64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

impl RatingMatrix {
    /// Builds a block over the given row and column ids, keeping only ratings
    /// whose user and item both belong to it. Duplicate cells keep the last
    /// rating.
    pub fn from_ratings(ratings: &[Rating], row_ids: &[u64], col_ids: &[u64]) -> Self {
        let mut row_ids = row_ids.to_vec();
        row_ids.sort_unstable();
        row_ids.dedup();
        let mut col_ids = col_ids.to_vec();
        col_ids.sort_unstable();
        col_ids.dedup();
        let row_of: BTreeMap<u64, usize> = row_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let col_of: BTreeMap<u64, u32> = col_ids.iter().enumerate().map(|(j, &id)| (id, j as u32)).collect();

        let mut per_row: Vec<BTreeMap<u32, f64>> = vec![BTreeMap::new(); row_ids.len()];
        for r in ratings {
            if let (Some(&i), Some(&j)) = (row_of.get(&r.user), col_of.get(&r.item)) {
                per_row[i].insert(j, r.value);
            }
        }
        let mut row_ptr = Vec::with_capacity(row_ids.len() + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in per_row {
            for (j, v) in row {
                cols.push(j);
                values.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { row_ids, col_ids, row_ptr, cols, values }
    }

    /// Block holding every observed cell of a dense matrix/mask pair, with ids
    /// `0..N` and `0..M`.
    pub fn from_dense(x: &Tensor, b: &Tensor) -> Result<Self> {
        if x.rank() != 2 || x.shape() != b.shape() {
            return Err(Error::Dimension { op: "from_dense", detail: format!("{:?} vs {:?}", x.shape(), b.shape()) });
        }
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mut ratings = Vec::new();
        for i in 0..n {
            for j in 0..m {
                if b.at(i, j) != 0.0 {
                    ratings.push(Rating::new(i as u64, j as u64, x.at(i, j)));
                }
            }
        }
        let rows: Vec<u64> = (0..n as u64).collect();
        let cols: Vec<u64> = (0..m as u64).collect();
        Ok(Self::from_ratings(&ratings, &rows, &cols))
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[u64] {
        &self.col_ids
    }

    pub fn n_observed(&self) -> usize {
        self.values.len()
    }

    /// Observed `(col, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().map(|&j| j as usize).zip(self.values[span].iter().copied())
    }

    /// All observations as `(row index, col index, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows()).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// All observations with original ids.
    pub fn ratings(&self) -> Vec<Rating> {
        self.entries().map(|(i, j, v)| Rating::new(self.row_ids[i], self.col_ids[j], v)).collect()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Dense `(values, mask)` pair.
    pub fn to_dense(&self) -> (Tensor, Tensor) {
        self.submatrix(&(0..self.n_rows()).collect::<Vec<_>>(), &(0..self.n_cols()).collect::<Vec<_>>())
    }

    /// Dense `(values, mask)` of the given rows and columns, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> (Tensor, Tensor) {
        let (n, m) = (rows.len(), cols.len());
        let mut pos = vec![usize::MAX; self.n_cols()];
        for (k, &j) in cols.iter().enumerate() {
            pos[j] = k;
        }
        let mut x = Tensor::zeros(&[n, m]);
        let mut b = Tensor::zeros(&[n, m]);
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in self.row(i) {
                let k = pos[j];
                if k != usize::MAX {
                    x.set(r, k, v);
                    b.set(r, k, 1.0);
                }
            }
        }
        (x, b)
    }
}

/// Affine normalization applied to every rating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Normalization {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation of `values`.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let (count, sum) = values.clone().fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
        if count == 0 {
            return Err(Error::Partition("no ratings to fit normalization".into()));
        }
        let mean = sum / count as f64;
        let var = values.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / count as f64;
        let std = libm::sqrt(var);
        if !(std > 0.0) {
            return Err(Error::Partition("ratings have zero variance".into()));
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Meta-training, meta-validation and meta-test blocks with disjoint users
/// and items, already normalized.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: RatingMatrix,
    pub valid: RatingMatrix,
    pub test: RatingMatrix,
    pub normalization: Normalization,
}

/// Shuffles `ids` and cuts them by `fractions` using floor sizes, with the
/// remainder going to the last group.
fn split_ids<R: Rng + ?Sized>(mut ids: Vec<u64>, fractions: [f64; 3], rng: &mut R) -> [Vec<u64>; 3] {
    ids.shuffle(rng);
    let n = ids.len();
    let a = libm::floor(fractions[0] * n as f64 + 1e-9) as usize;
    let b = libm::floor(fractions[1] * n as f64 + 1e-9) as usize;
    let mut rest = ids.split_off(a.min(n));
    let tail = rest.split_off(b.min(rest.len()));
    [ids, rest, tail]
}

/// Partitions users and items independently by `fractions`, builds the three
/// blocks, and z-scores every block with statistics of the training block.
pub fn partition_and_normalize<R: Rng + ?Sized>(ratings: &[Rating], fractions: [f64; 3], rng: &mut R) -> Result<DatasetSplit> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", fractions)));
    }
    let mut users: Vec<u64> = ratings.iter().map(|r| r.user).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<u64> = ratings.iter().map(|r| r.item).collect();
    items.sort_unstable();
    items.dedup();

    let [tu, vu, su] = split_ids(users, fractions, rng);
    let [ti, vi, si] = split_ids(items, fractions, rng);
    let mut train = RatingMatrix::from_ratings(ratings, &tu, &ti);
    let mut valid = RatingMatrix::from_ratings(ratings, &vu, &vi);
    let mut test = RatingMatrix::from_ratings(ratings, &su, &si);
    for (name, block) in [("meta-training", &train), ("meta-validation", &valid), ("meta-test", &test)] {
        if block.n_observed() == 0 {
            return Err(Error::Partition(format!("{name} block has no observed ratings; try another seed")));
        }
    }
    let normalization = Normalization::fit(train.values.iter().copied())?;
    for block in [&mut train, &mut valid, &mut test] {
        for v in block.values_mut() {
            *v = normalization.normalize(*v);
        }
    }
    Ok(DatasetSplit { train, valid, test, normalization })
}

/// A training matrix with its mask and a disjoint held-out test matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub x: Tensor,
    pub b: Tensor,
    pub x_test: Tensor,
    pub b_test: Tensor,
}

impl Episode {
    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn n_train(&self) -> usize {
        self.b.sum() as usize
    }

    pub fn n_test(&self) -> usize {
        self.b_test.sum() as usize
    }

    /// Builds an episode from explicit cells, checking mask disjointness.
    pub fn from_cells(rows: usize, cols: usize, train: &[(usize, usize, f64)], test: &[(usize, usize, f64)]) -> Result<Self> {
        let mut ep = Self {
            x: Tensor::zeros(&[rows, cols]),
            b: Tensor::zeros(&[rows, cols]),
            x_test: Tensor::zeros(&[rows, cols]),
            b_test: Tensor::zeros(&[rows, cols]),
        };
        for &(i, j, v) in train {
            if i >= rows || j >= cols {
                return Err(Error::Dimension { op: "episode", detail: format!("cell ({i},{j}) outside {rows}x{cols}") });
            }
            ep.x.set(i, j, v);
            ep.b.set(i, j, 1.0);
        }
        for &(i, j, v) in test {
            if i >= rows || j >= cols {
                return Err(Error::Dimension { op: "episode", detail: format!("cell ({i},{j}) outside {rows}x{cols}") });
            }
            if ep.b.at(i, j) != 0.0 {
                return Err(Error::Contract(format!("cell ({i},{j}) in both training and test masks")));
            }
            ep.x_test.set(i, j, v);
            ep.b_test.set(i, j, 1.0);
        }
        Ok(ep)
    }

    /// `(row, col, value, is_test)` for every observed cell, row-major.
    pub fn cells(&self) -> Vec<(usize, usize, f64, bool)> {
        let mut out = Vec::new();
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                if self.b.at(i, j) != 0.0 {
                    out.push((i, j, self.x.at(i, j), false));
                }
                if self.b_test.at(i, j) != 0.0 {
                    out.push((i, j, self.x_test.at(i, j), true));
                }
            }
        }
        out
    }
}

fn sample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, amount: usize) -> Vec<usize> {
    index::sample(rng, len, amount).into_vec()
}

fn check_block(block: &RatingMatrix, n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::Config(format!("episode size {n}x{m} must be positive")));
    }
    if block.n_rows() < n || block.n_cols() < m {
        return Err(Error::Sampling(format!(
            "block is {}x{}, cannot sample {n}x{m}",
            block.n_rows(),
            block.n_cols()
        )));
    }
    Ok(())
}

/// Samples `n` rows and `m` columns uniformly without replacement, then sends
/// each observed cell to the training mask with probability `train_ratio` and
/// to the test mask otherwise. Resamples until both masks are non-empty.
pub fn sample_episode<R: Rng + ?Sized>(block: &RatingMatrix, n: usize, m: usize, train_ratio: f64, rng: &mut R) -> Result<Episode> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("training ratio {train_ratio} must lie in (0, 1)")));
    }
    check_block(block, n, m)?;
    for _ in 0..SAMPLE_RETRIES {
        let rows = sample_indices(rng, block.n_rows(), n);
        let cols = sample_indices(rng, block.n_cols(), m);
        let (x, obs) = block.submatrix(&rows, &cols);
        let mut b = Tensor::zeros(&[n, m]);
        let mut b_test = Tensor::zeros(&[n, m]);
        let (mut n_train, mut n_test) = (0, 0);
        for k in 0..n * m {
            if obs.data()[k] == 0.0 {
                continue;
            }
            if rng.random_bool(train_ratio) {
                b.data_mut()[k] = 1.0;
                n_train += 1;
            } else {
                b_test.data_mut()[k] = 1.0;
                n_test += 1;
            }
        }
        if n_train > 0 && n_test > 0 {
            let x_train = x.zip_map(&b, |v, w| v * w);
            let x_test = x.zip_map(&b_test, |v, w| v * w);
            return Ok(Episode { x: x_train, b, x_test, b_test });
        }
    }
    Err(Error::Sampling(format!("no {n}x{m} episode with non-empty masks after {SAMPLE_RETRIES} attempts")))
}

/// A fixed evaluation suite: each episode hides `holdout` of the sampled
/// submatrix's observed cells (rounded, at least one on each side).
pub fn make_meta_test_suite<R: Rng + ?Sized>(
    block: &RatingMatrix,
    count: usize,
    n: usize,
    m: usize,
    holdout: f64,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::Config(format!("holdout fraction {holdout} must lie in (0, 1)")));
    }
    check_block(block, n, m)?;
    let mut suite = Vec::with_capacity(count);
    'episode: for _ in 0..count {
        for _ in 0..SAMPLE_RETRIES {
            let rows = sample_indices(rng, block.n_rows(), n);
            let cols = sample_indices(rng, block.n_cols(), m);
            let (x, obs) = block.submatrix(&rows, &cols);
            let observed: Vec<usize> = (0..n * m).filter(|&k| obs.data()[k] != 0.0).collect();
            if observed.len() < 2 {
                continue;
            }
            let hidden = (libm::round(holdout * observed.len() as f64) as usize).clamp(1, observed.len() - 1);
            let mut order = observed.clone();
            order.shuffle(rng);
            let mut b = obs.clone();
            let mut b_test = Tensor::zeros(&[n, m]);
            for &k in &order[..hidden] {
                b.data_mut()[k] = 0.0;
                b_test.data_mut()[k] = 1.0;
            }
            let x_train = x.zip_map(&b, |v, w| v * w);
            let x_test = x.zip_map(&b_test, |v, w| v * w);
            suite.push(Episode { x: x_train, b, x_test, b_test });
            continue 'episode;
        }
        return Err(Error::Sampling(format!(
            "no {n}x{m} submatrix with two observed cells after {SAMPLE_RETRIES} attempts"
        )));
    }
    Ok(suite)
}
