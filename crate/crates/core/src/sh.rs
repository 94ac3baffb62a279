//! Real even-order spherical-harmonic basis, least-squares fitting on the
//! sphere, and the angular correlation coefficient between coefficient
//! vectors.
//!
//! The basis is real, orthonormal and antipodally symmetric. For order k
//! and degree m the basis function is built from the complex harmonic
//! Y_k^m = N_k^m P_k^m(cos theta) e^(i m phi):
//!
//!   m < 0:  sqrt(2) * Im Y_k^|m|
//!   m = 0:  Y_k^0
//!   m > 0:  sqrt(2) * (-1)^m * Re Y_k^m
//!
//! Coefficients are stored flat over (k, m) with k = 0, 2, ..., L and
//! m = -k..k, lexicographic in (k, m); order 8 gives 45 entries.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShError {
    #[error("spherical harmonic order must be even, got {0}")]
    OddOrder(usize),
    #[error("coefficient vector has {got} entries, order {order} needs {want}")]
    LengthMismatch { order: usize, want: usize, got: usize },
    #[error("non-finite coefficient at index {0}")]
    NonFiniteCoefficient(usize),
    #[error("signal has {signal} samples but design matrix has {rows} rows")]
    SignalLengthMismatch { signal: usize, rows: usize },
    #[error("{rows} samples cannot determine {cols} coefficients without regularization")]
    UnderdeterminedFit { rows: usize, cols: usize },
    #[error("normal equations are numerically singular")]
    SingularSystem,
    #[error("angular correlation needs matching orders, got {0} and {1}")]
    OrderMismatch(usize, usize),
    #[error("all anisotropic (k >= 2) coefficients are zero")]
    DegenerateAnisotropy,
}

/// Number of even-order real SH basis functions up to order `order`.
pub fn coefficient_count(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// The SH order k of each flat coefficient index, for even orders up to
/// `order`.
pub fn order_of_index(order: usize) -> Vec<usize> {
    let mut ks = Vec::with_capacity(coefficient_count(order));
    for k in (0..=order).step_by(2) {
        for _ in 0..=(2 * k) {
            ks.push(k);
        }
    }
    ks
}

/// Coefficients of a function on the sphere in the real even basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    order: usize,
    c: Vec<f64>,
}

impl ShCoeffs {
    pub fn new(order: usize, c: Vec<f64>) -> Result<Self, ShError> {
        if order % 2 != 0 {
            return Err(ShError::OddOrder(order));
        }
        let want = coefficient_count(order);
        if c.len() != want {
            return Err(ShError::LengthMismatch { order, want, got: c.len() });
        }
        if let Some(i) = c.iter().position(|v| !v.is_finite()) {
            return Err(ShError::NonFiniteCoefficient(i));
        }
        Ok(Self { order, c })
    }

    pub fn zeros(order: usize) -> Self {
        Self { order, c: vec![0.0; coefficient_count(order)] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }
}

/// SH design matrix: one row per direction, one column per basis function.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    order: usize,
    b: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn cols(&self) -> usize {
        self.b.ncols()
    }
}

/// Associated Legendre P_k^m(x) for m >= 0 with the Condon-Shortley phase.
fn legendre_pkm(k: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= k);
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= -fact * somx2;
        fact += 2.0;
    }
    if k == m {
        return pmm;
    }
    let mut pmmp1 = x * (2.0 * m as f64 + 1.0) * pmm;
    if k == m + 1 {
        return pmmp1;
    }
    let mut pkm = 0.0;
    for kk in (m + 2)..=k {
        pkm = (x * (2.0 * kk as f64 - 1.0) * pmmp1 - (kk + m - 1) as f64 * pmm)
            / (kk - m) as f64;
        pmm = pmmp1;
        pmmp1 = pkm;
    }
    pkm
}

/// Orthonormalization factor sqrt((2k+1)/(4pi) * (k-m)!/(k+m)!) for m >= 0.
fn normalization(k: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for i in (k - m + 1)..=(k + m) {
        ratio /= i as f64;
    }
    ((2.0 * k as f64 + 1.0) / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

/// Evaluates every basis function up to `order` at one direction, writing
/// into `row` (length must be `coefficient_count(order)`).
fn basis_row(dir: &Vector3<f64>, order: usize, row: &mut [f64]) {
    let ct = dir.z.clamp(-1.0, 1.0);
    let phi = dir.y.atan2(dir.x);
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut j = 0;
    for k in (0..=order).step_by(2) {
        for m in -(k as i64)..=(k as i64) {
            let ma = m.unsigned_abs() as usize;
            let np = normalization(k, ma) * legendre_pkm(k, ma, ct);
            row[j] = if m < 0 {
                sqrt2 * np * (ma as f64 * phi).sin()
            } else if m == 0 {
                np
            } else {
                let sign = if ma % 2 == 0 { 1.0 } else { -1.0 };
                sqrt2 * sign * np * (ma as f64 * phi).cos()
            };
            j += 1;
        }
    }
}

/// Raw design matrix over a direction slice.
pub fn basis_matrix(dirs: &[Vector3<f64>], order: usize) -> DMatrix<f64> {
    let cols = coefficient_count(order);
    let mut b = DMatrix::zeros(dirs.len(), cols);
    let mut row = vec![0.0; cols];
    for (i, d) in dirs.iter().enumerate() {
        basis_row(d, order, &mut row);
        for (j, v) in row.iter().enumerate() {
            b[(i, j)] = *v;
        }
    }
    b
}

/// Builds the order-`order` design matrix over a direction set.
pub fn build_design_matrix(
    dirs: &crate::sphere::DirectionSet,
    order: usize,
) -> Result<DesignMatrix, ShError> {
    if order % 2 != 0 {
        return Err(ShError::OddOrder(order));
    }
    Ok(DesignMatrix { order, b: basis_matrix(dirs.dirs(), order) })
}

/// 2-norm condition number of the order-`order` design over raw directions.
pub fn design_condition_number(dirs: &[Vector3<f64>], order: usize) -> f64 {
    let b = basis_matrix(dirs, order);
    let svd = b.svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Precomputed normal-equations factorization for fitting many signals
/// against one design matrix (one Cholesky, one solve per voxel).
pub struct DesignFit {
    b: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    order: usize,
}

impl DesignFit {
    pub fn new(b: DMatrix<f64>, order: usize) -> Result<Self, ShError> {
        Self::with_regularization(b, order, 0.0)
    }

    pub fn with_regularization(b: DMatrix<f64>, order: usize, regularize: f64) -> Result<Self, ShError> {
        if b.nrows() < b.ncols() && regularize == 0.0 {
            return Err(ShError::UnderdeterminedFit { rows: b.nrows(), cols: b.ncols() });
        }
        let mut ata = b.transpose() * &b;
        for i in 0..ata.nrows() {
            ata[(i, i)] += regularize;
        }
        let chol = ata.cholesky().ok_or(ShError::SingularSystem)?;
        Ok(Self { b, chol, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    /// Least-squares coefficients for one signal vector.
    pub fn solve(&self, signal: &[f64]) -> Vec<f64> {
        assert_eq!(signal.len(), self.b.nrows(), "signal length must match design rows");
        let atb = self.b.transpose() * DVector::from_column_slice(signal);
        self.chol.solve(&atb).as_slice().to_vec()
    }
}

/// Least-squares SH fit: minimizes |B c - s|^2 + regularize * |c|^2 via the
/// normal equations with a symmetric positive-definite solve.
pub fn fit_sh(signal: &[f64], dm: &DesignMatrix, regularize: f64) -> Result<ShCoeffs, ShError> {
    if signal.len() != dm.rows() {
        return Err(ShError::SignalLengthMismatch { signal: signal.len(), rows: dm.rows() });
    }
    let fit = DesignFit::with_regularization(dm.b.clone(), dm.order, regularize)?;
    ShCoeffs::new(dm.order, fit.solve(signal))
}

/// Evaluates the SH expansion at each direction of `dirs`.
pub fn eval_sh(c: &ShCoeffs, dirs: &[Vector3<f64>]) -> Vec<f64> {
    let cols = coefficient_count(c.order);
    let mut row = vec![0.0; cols];
    dirs.iter()
        .map(|d| {
            basis_row(d, c.order, &mut row);
            row.iter().zip(&c.c).map(|(b, c)| b * c).sum()
        })
        .collect()
}

/// Angular correlation coefficient: cosine similarity of the coefficient
/// vectors with the isotropic (k = 0) term excluded. The even basis has no
/// k = 1 block, so the sum runs over k = 2, 4, ..., L.
pub fn acc(u: &ShCoeffs, v: &ShCoeffs) -> Result<f64, ShError> {
    if u.order != v.order {
        return Err(ShError::OrderMismatch(u.order, v.order));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.c[1..].iter().zip(&v.c[1..]) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(ShError::DegenerateAnisotropy);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// The 0th-order coefficient, used as a mean-diffusivity stand-in for
/// fODF fields: up to the constant 1/sqrt(4pi) it is the sphere average.
pub fn mean_diffusivity_proxy(c: &ShCoeffs) -> f64 {
    c.c[0]
}
