//! Dense blocks of feature rows and the SVD truncation that turns a stack of
//! up to `2n` rows into an `n`-row summary plus an additive constant.
//!
//! For a block `M` and a summary `(Ã, c)` produced by [`reduce`], every
//! orthonormal `Y` satisfies
//!
//! ```text
//! ‖ÃY‖²_F  ≤  ‖MY‖²_F  ≤  ‖ÃY‖²_F + c
//! ```
//!
//! so `‖ÃY‖² + c` approximates `‖MY‖²` and the constant composes additively
//! when summaries are stacked.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Column Gram deviation tolerated before a `Y` is rejected as non-orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Queries whose projected energy falls below this are skipped when
/// measuring the relative approximation error.
const MIN_PROJECTED_ENERGY: f64 = 1e-12;

/// A dense `rows × dim` matrix of finite feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    values: DMatrix<f64>,
}

impl DataBlock {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Empty("data block has no rows"));
        }
        if values.ncols() == 0 {
            return Err(Error::Empty("data block has zero dimension"));
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    /// Builds a block from row-major data.
    pub fn from_row_slice(rows: usize, dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                found: data.len(),
            });
        }
        if rows == 0 || dim == 0 {
            return Err(Error::Empty("data block has no rows"));
        }
        Self::new(DMatrix::from_row_slice(rows, dim, data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("data block has no rows"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_slice(rows.len(), dim, &data)
    }

    pub(crate) fn from_matrix_unchecked(values: DMatrix<f64>) -> Self {
        debug_assert!(values.nrows() > 0 && values.ncols() > 0);
        Self { values }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    /// Copies row `i` out as a vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Row-major copy of all entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows() * self.dim());
        for i in 0..self.rows() {
            out.extend(self.values.row(i).iter());
        }
        out
    }

    /// New block made of the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("row selection is empty"));
        }
        Ok(Self::from_matrix_unchecked(self.values.select_rows(indices)))
    }

    /// Squared Frobenius norm of the block.
    pub fn energy(&self) -> f64 {
        self.values.norm_squared()
    }
}

/// An `≤ n`-row summary `Ã` with additive constant `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetBlock {
    block: DataBlock,
    c: f64,
    source_rows: usize,
}

impl CoresetBlock {
    pub fn new(block: DataBlock, c: f64, source_rows: usize) -> Result<Self> {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "additive constant must be finite and nonnegative, got {c}"
            )));
        }
        if source_rows < block.rows() {
            return Err(Error::InvalidParameter(format!(
                "summary of {source_rows} source rows cannot hold {} rows",
                block.rows()
            )));
        }
        Ok(Self {
            block,
            c,
            source_rows,
        })
    }

    /// Lossless summary of raw rows (`c = 0`).
    pub fn exact(block: DataBlock) -> Self {
        let source_rows = block.rows();
        Self {
            block,
            c: 0.0,
            source_rows,
        }
    }

    pub fn block(&self) -> &DataBlock {
        &self.block
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn rows(&self) -> usize {
        self.block.rows()
    }

    pub fn dim(&self) -> usize {
        self.block.dim()
    }

    pub(crate) fn with_accounting(mut self, c: f64, source_rows: usize) -> Self {
        self.c = c;
        self.source_rows = source_rows;
        self
    }
}

/// Row budget and verification shape for a reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionParams {
    /// Target number of summary rows.
    pub n: usize,
    /// Subspace dimension; queries `Y` are `dim × (dim − k)`.
    pub k: usize,
    pub dim: usize,
    pub epsilon_target: f64,
}

impl ReductionParams {
    pub fn new(n: usize, k: usize, dim: usize, epsilon_target: f64) -> Result<Self> {
        let params = Self {
            n,
            k,
            dim,
            epsilon_target,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("row budget n must be ≥ 1".into()));
        }
        if self.k == 0 || self.k >= self.dim {
            return Err(Error::InvalidParameter(format!(
                "need 1 ≤ k < dim, got k = {} with dim = {}",
                self.k, self.dim
            )));
        }
        if !(self.epsilon_target > 0.0 && self.epsilon_target <= 0.1) {
            return Err(Error::InvalidParameter(format!(
                "epsilon target must lie in (0, 0.1], got {}",
                self.epsilon_target
            )));
        }
        Ok(())
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Largest absolute entry of `YᵀY − I`.
pub fn orthonormality_defect(y: &DMatrix<f64>) -> f64 {
    let gram = y.transpose() * y;
    let mut worst = 0.0_f64;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// `‖AY‖²_F` for a block `A` and a matrix `Y` with orthonormal columns.
pub fn dist_sq(block: &DataBlock, y: &DMatrix<f64>) -> Result<f64> {
    if y.nrows() != block.dim() {
        return Err(Error::DimensionMismatch {
            expected: block.dim(),
            found: y.nrows(),
        });
    }
    let deviation = orthonormality_defect(y);
    if !(deviation <= ORTHONORMAL_TOL) {
        return Err(Error::NotOrthonormal { deviation });
    }
    Ok(projected_energy(block.matrix(), y))
}

pub(crate) fn projected_energy(a: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (a * y).norm_squared()
}

/// Seeded `d × cols` matrix with orthonormal columns, Haar-distributed.
pub fn random_orthonormal(d: usize, cols: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_orthonormal_with(d, cols, &mut rng)
}

pub fn random_orthonormal_with<R: Rng + ?Sized>(
    d: usize,
    cols: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if cols == 0 || cols > d {
        return Err(Error::InvalidParameter(format!(
            "need 1 ≤ cols ≤ d, got cols = {cols}, d = {d}"
        )));
    }
    let gaussian = DMatrix::from_fn(d, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Fixing the sign of R's diagonal makes the factorization unique.
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Singular values (descending) and matching right singular vectors as rows,
/// with each vector's largest-magnitude entry made positive.
pub(crate) struct RightSpectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub(crate) fn right_spectrum(m: &DMatrix<f64>) -> Result<RightSpectrum> {
    // faer rather than nalgebra: nalgebra's bidiagonal SVD returns inexact
    // factors for a few percent of exactly rank-deficient inputs.
    let (rows, cols) = m.shape();
    let svd = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)])
        .svd()
        .map_err(|_| Error::SvdFailed)?;
    let s = svd.S().column_vector();
    let sv: Vec<f64> = (0..rows.min(cols)).map(|i| s[i]).collect();
    let v = svd.V();
    let v_t = DMatrix::from_fn(sv.len(), cols, |i, j| v[(j, i)]);
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));

    let mut vectors = DMatrix::zeros(order.len(), m.ncols());
    let mut values = Vec::with_capacity(order.len());
    for (dst, &src) in order.iter().enumerate() {
        let mut row = v_t.row(src).into_owned();
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, &x)| {
                if x.abs() > best.1.abs() {
                    (i, x)
                } else {
                    best
                }
            })
            .1;
        if pivot < 0.0 {
            row.neg_mut();
        }
        vectors.set_row(dst, &row);
        values.push(sv[src]);
    }
    Ok(RightSpectrum { values, vectors })
}

/// Number of singular values above the usual numerical-rank cutoff.
fn numerical_rank(values: &[f64], rows: usize, cols: usize) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    let tol = rows.max(cols) as f64 * f64::EPSILON * top;
    values.iter().take_while(|&&s| s > tol).count()
}

/// Truncates `m` to at most `n` rows `σ_i v_iᵀ`; returns the summary and the
/// discarded tail energy `Σ_{i>kept} σ_i²`.
pub(crate) fn truncate(m: &DMatrix<f64>, n: usize) -> Result<(DMatrix<f64>, f64)> {
    let spectrum = right_spectrum(m)?;
    let rank = numerical_rank(&spectrum.values, m.nrows(), m.ncols());
    let kept = rank.min(n);
    if kept == 0 {
        // Zero energy: a single zero row keeps the block well-formed.
        return Ok((DMatrix::zeros(1, m.ncols()), 0.0));
    }
    let mut out = DMatrix::zeros(kept, m.ncols());
    for i in 0..kept {
        let scaled = spectrum.vectors.row(i) * spectrum.values[i];
        out.set_row(i, &scaled);
    }
    let tail: f64 = spectrum.values[kept..].iter().map(|s| s * s).sum();
    Ok((out, tail))
}

/// Compresses `input` (normally `≤ 2n` rows) to an `≤ n`-row summary.
///
/// Rows are ordered by descending singular value; `c` collects the energy of
/// every discarded direction, so inputs of rank `≤ n` reduce losslessly.
pub fn reduce(input: &DataBlock, params: &ReductionParams) -> Result<CoresetBlock> {
    if input.dim() != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            found: input.dim(),
        });
    }
    if params.n == 0 {
        return Err(Error::InvalidParameter("row budget n must be ≥ 1".into()));
    }
    let (summary, tail) = truncate(input.matrix(), params.n)?;
    Ok(CoresetBlock {
        block: DataBlock::from_matrix_unchecked(summary),
        c: tail,
        source_rows: input.rows(),
    })
}

/// Stacks `a` above `b`; the second value is the combined constant `c_a + c_b`.
pub fn concat(a: &CoresetBlock, b: &CoresetBlock) -> Result<(DataBlock, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let stacked = stack_rows(a.block.matrix(), b.block.matrix());
    Ok((DataBlock::from_matrix_unchecked(stacked), a.c + b.c))
}

pub(crate) fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Worst relative gap `|‖AY‖² − (‖ÃY‖² + c)| / ‖AY‖²` over `trials` random
/// orthonormal `Y` of shape `dim × (dim − k)`.
pub fn measure_epsilon(
    original: &DataBlock,
    summary: &CoresetBlock,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if original.dim() != summary.dim() {
        return Err(Error::DimensionMismatch {
            expected: original.dim(),
            found: summary.dim(),
        });
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be ≥ 1".into()));
    }
    if k >= original.dim() {
        return Err(Error::InvalidParameter(format!(
            "need k < dim, got k = {k} with dim = {}",
            original.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = original.dim() - k;
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let y = random_orthonormal_with(original.dim(), cols, &mut rng)?;
        let full = projected_energy(original.matrix(), &y);
        if full < MIN_PROJECTED_ENERGY {
            continue;
        }
        let approx = projected_energy(summary.block.matrix(), &y) + summary.c;
        worst = worst.max((full - approx).abs() / full);
    }
    Ok(worst)
}

/// Singular values of a block, descending.
pub fn singular_values(block: &DataBlock) -> Result<DVector<f64>> {
    let spectrum = right_spectrum(block.matrix())?;
    Ok(DVector::from_vec(spectrum.values))
}
