//! Dense linear algebra and stochastic primitives.
//!
//! Everything here is immutable after construction and safe to share across
//! rollout workers. Randomness is counter-based: a draw is a pure function of
//! `(seed, step, sample index)`, so any partition of sample indices across
//! workers reproduces sequential evaluation bit for bit.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sequence::ControlSequence;

const SYMMETRY_TOLERANCE: f64 = 1e-8;
const EIGEN_MAX_ITERATIONS: usize = 10_000;

/// Relative eigenvalue floor applied when building an [`SpdMatrix`].
pub const CLAMP_RELATIVE_FLOOR: f64 = 1e-10;

/// Eigenvalue floor `1e-10 * max(1, trace / dim)` for a symmetric matrix.
pub fn clamp_floor(matrix: &DMatrix<f64>) -> f64 {
    let dim = matrix.nrows().max(1) as f64;
    CLAMP_RELATIVE_FLOOR * (matrix.trace() / dim).max(1.0)
}

/// Symmetric positive-definite matrix with its Cholesky factor and
/// eigendecomposition cached.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    factor: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    diagonal: bool,
}

impl SpdMatrix {
    /// Symmetrizes, clamps eigenvalues below [`clamp_floor`] and factorizes.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let sym = symmetrize_checked(matrix)?;
        let floor = clamp_floor(&sym);
        let (values, vectors) = symmetric_eigen(&sym)?;
        if values[0] >= floor {
            let factor = cholesky_with_jitter(&sym, floor);
            return Ok(Self::assemble(sym, factor, values, vectors));
        }
        let clamped = values.map(|v| v.max(floor));
        Ok(Self::from_eigen_unchecked(clamped, vectors))
    }

    /// Builds `V diag(values) V^T` from an orthonormal eigenbasis (columns of
    /// `vectors`). Values below the clamp floor are raised to it.
    pub fn from_eigen(values: DVector<f64>, vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.nrows() != vectors.ncols() {
            return Err(Error::NonSquare {
                rows: vectors.nrows(),
                cols: vectors.ncols(),
            });
        }
        if values.len() != vectors.ncols() {
            return Err(Error::DimensionMismatch {
                expected: vectors.ncols(),
                got: values.len(),
            });
        }
        let dim = values.len().max(1) as f64;
        let floor = CLAMP_RELATIVE_FLOOR * (values.sum() / dim).max(1.0);
        let clamped = values.map(|v| v.max(floor));
        Ok(Self::from_eigen_unchecked(clamped, vectors))
    }

    fn from_eigen_unchecked(values: DVector<f64>, vectors: DMatrix<f64>) -> Self {
        let (values, vectors) = sort_ascending(values, vectors);
        let scaled = scale_columns(&vectors, values.as_slice());
        let mut matrix = &scaled * vectors.transpose();
        symmetrize_in_place(&mut matrix);
        let floor = clamp_floor(&matrix).max(values[0] * 1e-6);
        let factor = cholesky_with_jitter(&matrix, floor);
        Self::assemble(matrix, factor, values, vectors)
    }

    /// `scale * I`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::diagonal(&vec![scale; dim])
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }

    fn assemble(
        matrix: DMatrix<f64>,
        factor: DMatrix<f64>,
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
    ) -> Self {
        let n = factor.nrows();
        let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || factor[(i, j)] == 0.0));
        Self {
            matrix,
            factor,
            eigenvalues,
            eigenvectors,
            diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `L L^T = self`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, ordered like [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// `log det` from the Cholesky diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.factor.diagonal().iter().map(|l| l.ln()).sum::<f64>()
    }

    /// `log det` as the sum of log eigenvalues.
    pub fn log_det_eigen(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.ln()).sum()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `c * self` for `c > 0`, reusing the cached decompositions.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "scale must be positive, got {c}");
        Self::assemble(
            &self.matrix * c,
            &self.factor * c.sqrt(),
            &self.eigenvalues * c,
            self.eigenvectors.clone(),
        )
    }

    /// `f(self)` applied spectrally: `V diag(f(values)) V^T`.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&v| f(v)).collect();
        let scaled = scale_columns(&self.eigenvectors, &mapped);
        let mut out = scaled * self.eigenvectors.transpose();
        symmetrize_in_place(&mut out);
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.spectral_map(|v| 1.0 / v)
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(f64::sqrt)
    }

    /// Largest eigenvalue (spectral norm).
    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

/// Factorizes a symmetric matrix. See [`SpdMatrix::new`].
pub fn spd_factorize(matrix: DMatrix<f64>) -> Result<SpdMatrix> {
    SpdMatrix::new(matrix)
}

/// Eigendecomposition of an SPD matrix: ascending eigenvalues and orthonormal
/// eigenvectors as columns.
pub fn sym_eig(matrix: &SpdMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((matrix.eigenvalues.clone(), matrix.eigenvectors.clone()))
}

/// Eigendecomposition of any symmetric matrix, ascending.
pub fn symmetric_eigen(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if matrix.nrows() != matrix.ncols() {
        return Err(Error::NonSquare {
            rows: matrix.nrows(),
            cols: matrix.ncols(),
        });
    }
    let eig = SymmetricEigen::try_new(matrix.clone(), f64::EPSILON, EIGEN_MAX_ITERATIONS)
        .ok_or(Error::ConvergenceFailure)?;
    Ok(sort_ascending(eig.eigenvalues, eig.eigenvectors))
}

fn sort_ascending(values: DVector<f64>, vectors: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return (values, vectors);
    }
    let sorted_values = DVector::from_iterator(values.len(), order.iter().map(|&j| values[j]));
    let sorted_vectors = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, order[c])]
    });
    (sorted_values, sorted_vectors)
}

fn scale_columns(vectors: &DMatrix<f64>, scales: &[f64]) -> DMatrix<f64> {
    let mut out = vectors.clone();
    for (mut col, &s) in out.column_iter_mut().zip(scales) {
        col *= s;
    }
    out
}

fn symmetrize_checked(matrix: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if matrix.nrows() != matrix.ncols() {
        return Err(Error::NonSquare {
            rows: matrix.nrows(),
            cols: matrix.ncols(),
        });
    }
    let norm = matrix.norm();
    let asym = (&matrix - matrix.transpose()).norm();
    let relative = if norm > 0.0 { asym / norm } else { 0.0 };
    if relative > SYMMETRY_TOLERANCE {
        return Err(Error::AsymmetricBeyondTolerance { relative });
    }
    let mut sym = matrix;
    symmetrize_in_place(&mut sym);
    Ok(sym)
}

pub(crate) fn symmetrize_in_place(matrix: &mut DMatrix<f64>) {
    let n = matrix.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = avg;
            matrix[(j, i)] = avg;
        }
    }
}

fn cholesky_with_jitter(matrix: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut jitter = 0.0;
    loop {
        let shifted = if jitter > 0.0 {
            matrix + DMatrix::identity(matrix.nrows(), matrix.ncols()) * jitter
        } else {
            matrix.clone()
        };
        if let Some(chol) = Cholesky::new(shifted) {
            return chol.l();
        }
        jitter = if jitter == 0.0 { floor } else { jitter * 10.0 };
    }
}

/// Counter-based random stream: every draw is keyed by `(seed, step, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomStream {
    seed: u64,
    step: u64,
    domain: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            step: 0,
            domain: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// The same stream positioned at control step `t`.
    pub fn at_step(&self, t: u64) -> Self {
        Self { step: t, ..*self }
    }

    /// An independent stream for another purpose (disturbances, trials, ...).
    pub fn domain(&self, tag: u64) -> Self {
        Self {
            domain: splitmix64(self.domain ^ splitmix64(tag.wrapping_add(0x5851_f42d))),
            ..*self
        }
    }

    /// Generator for sample `index` at the current step.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let k0 = splitmix64(self.seed);
        let k1 = splitmix64(k0 ^ self.step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let k2 = splitmix64(k1 ^ index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
        let k3 = splitmix64(k2 ^ self.domain);
        let mut key = [0u8; 32];
        for (chunk, k) in key.chunks_exact_mut(8).zip([k0, k1, k2, k3]) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Fills `out` with standard-normal draws for sample `index`.
    pub fn standard_normals(&self, index: u64, out: &mut [f64]) {
        let mut rng = self.rng(index);
        for z in out.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `n` samples stored contiguously, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn from_data(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.dim)
    }

    pub(crate) fn par_iter_mut(&mut self) -> rayon::slice::ChunksExactMut<'_, f64> {
        self.data.par_chunks_exact_mut(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_sequences(&self, control_dim: usize, horizon: usize) -> Result<Vec<ControlSequence>> {
        self.iter()
            .map(|s| ControlSequence::new(s.to_vec(), control_dim, horizon))
            .collect()
    }
}

/// Draws `n` samples `mean + L z_i` with `z_i` keyed by `(seed, step, i)`.
pub fn sample_gaussian(
    mean: &[f64],
    cov: &SpdMatrix,
    n: usize,
    rng: &RandomStream,
) -> Result<SampleSet> {
    let dim = mean.len();
    if cov.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: cov.dim(),
            got: dim,
        });
    }
    if n == 0 || dim == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: n.min(dim),
        });
    }
    let mut set = SampleSet {
        dim,
        data: vec![0.0; dim * n],
    };
    let factor = cov.factor();
    let diag: Vec<f64> = factor.diagonal().iter().copied().collect();
    set.par_iter_mut().enumerate().for_each_init(
        || vec![0.0; dim],
        |z, (i, out)| {
            rng.standard_normals(i as u64, z);
            out.copy_from_slice(mean);
            if cov.is_diagonal() {
                for ((o, d), zk) in out.iter_mut().zip(&diag).zip(z.iter()) {
                    *o += d * zk;
                }
            } else {
                // Column axpy over the lower triangle: out += L[:, k] * z_k.
                for (k, &zk) in z.iter().enumerate() {
                    let col = factor.column(k);
                    for r in k..dim {
                        out[r] += col[r] * zk;
                    }
                }
            }
        },
    );
    Ok(set)
}

/// Softmax weights `exp(-(J_i - min J)/lambda)`, normalized.
pub fn softmax_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    assert!(lambda > 0.0, "temperature must be positive");
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    if costs.is_empty() {
        return Ok(Vec::new());
    }
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = costs.iter().map(|c| (-(c - min) / lambda).exp()).collect();
    let total = pairwise_sum(&weights);
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Pairwise summation with split points fixed by index.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `sum_i weights[i] * samples[i]`, pairwise over sample index.
pub fn weighted_sum(samples: &SampleSet, weights: &[f64]) -> Vec<f64> {
    assert_eq!(samples.len(), weights.len());
    fn recurse(samples: &SampleSet, weights: &[f64], start: usize, out: &mut [f64]) {
        const BLOCK: usize = 32;
        if weights.len() <= BLOCK {
            for (k, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(samples.sample(start + k)) {
                    *o += w * x;
                }
            }
            return;
        }
        let mid = weights.len() / 2;
        let mut right = vec![0.0; out.len()];
        recurse(samples, &weights[..mid], start, out);
        recurse(samples, &weights[mid..], start + mid, &mut right);
        for (o, r) in out.iter_mut().zip(right) {
            *o += r;
        }
    }
    let mut out = vec![0.0; samples.dim()];
    recurse(samples, weights, 0, &mut out);
    out
}

/// Spectral norm (largest singular value) of a general square matrix.
pub fn spectral_norm(matrix: &DMatrix<f64>) -> f64 {
    matrix
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}
