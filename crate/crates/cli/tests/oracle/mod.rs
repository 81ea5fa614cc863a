#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `rows` points in a random `rank`-dimensional subspace plus isotropic noise.
pub fn low_rank(rows: usize, dim: usize, rank: usize, noise: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let basis = gaussian(rank, dim, rng);
    let coeffs = gaussian(rows, rank, rng);
    coeffs * basis + gaussian(rows, dim, rng) * noise
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `‖MY‖²_F` by explicit summation.
pub fn energy(m: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..m.nrows() {
        for j in 0..y.ncols() {
            let mut dot = 0.0;
            for k in 0..m.ncols() {
                dot += m[(i, k)] * y[(k, j)];
            }
            total += dot * dot;
        }
    }
    total
}

/// Rank-`n` truncation through the eigendecomposition of `MᵀM`: rows
/// `σᵢvᵢᵀ` for the top `n` eigenpairs and the discarded eigenvalue mass.
pub fn eigen_truncate(m: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, f64) {
    let gram = m.transpose() * m;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let kept = n.min(order.len());
    let mut out = DMatrix::zeros(kept, m.ncols());
    for (row, &idx) in order.iter().take(kept).enumerate() {
        let sigma = eig.eigenvalues[idx].max(0.0).sqrt();
        for k in 0..m.ncols() {
            out[(row, k)] = sigma * eig.eigenvectors[(k, idx)];
        }
    }
    let tail = order[kept..]
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .sum();
    (out, tail)
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Independent binary-counter replay: same merge order as the tree, with its
/// own truncation, accumulating the discarded energy of every reduction.
pub struct ReplayTree {
    n: usize,
    stack: Vec<(u32, DMatrix<f64>, f64)>,
    pending: Vec<Vec<f64>>,
    pub merges: usize,
}

impl ReplayTree {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            stack: Vec::new(),
            pending: Vec::new(),
            merges: 0,
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        self.pending.push(row.to_vec());
        if self.pending.len() < self.n {
            return;
        }
        let leaf = DMatrix::from_fn(self.n, row.len(), |i, j| self.pending[i][j]);
        self.pending.clear();
        self.stack.push((0, leaf, 0.0));
        while self.stack.len() >= 2 {
            let len = self.stack.len();
            if self.stack[len - 1].0 != self.stack[len - 2].0 {
                break;
            }
            let (level, newer, c_new) = self.stack.pop().unwrap();
            let (_, older, c_old) = self.stack.pop().unwrap();
            let (m, tail) = eigen_truncate(&stack(&older, &newer), self.n);
            self.stack.push((level + 1, m, c_old + c_new + tail));
            self.merges += 1;
        }
    }

    pub fn levels(&self) -> Vec<u32> {
        self.stack.iter().map(|s| s.0).collect()
    }

    /// Root summary and its accumulated constant.
    pub fn collapse(&self) -> (DMatrix<f64>, f64) {
        let mut parts: Vec<(DMatrix<f64>, f64)> =
            self.stack.iter().map(|(_, m, c)| (m.clone(), *c)).collect();
        if !self.pending.is_empty() {
            let d = self.pending[0].len();
            parts.push((
                DMatrix::from_fn(self.pending.len(), d, |i, j| self.pending[i][j]),
                0.0,
            ));
        }
        let mut iter = parts.into_iter();
        let (mut acc, mut c) = iter.next().expect("replay tree is empty");
        for (m, cm) in iter {
            let (t, tail) = eigen_truncate(&stack(&acc, &m), self.n);
            acc = t;
            c += cm + tail;
        }
        (acc, c)
    }
}
