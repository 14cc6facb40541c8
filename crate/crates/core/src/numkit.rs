//! Dense symmetric linear algebra: eigendecomposition by cyclic Jacobi
//! rotations, SPD matrix powers and quadratic forms.
//!
//! Everything here is a pure function of its inputs. Eigenvectors follow a
//! fixed sign convention (first non-negligible component positive) so that
//! every downstream quantity is bit-stable across runs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Flat parameter or displacement vector.
pub type ParamVector = DVector<f64>;

/// Eigenvalues at or below this are treated as non-SPD rather than regularized.
pub const SPD_FLOOR: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;
const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("matrix is not symmetric: max |M_ij - M_ji| = {max_asymmetry:e}")]
    Asymmetric { max_asymmetry: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has dimension zero")]
    Empty,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue #{index} = {value:e} is not above the SPD floor {floor:e}")]
    NotPositiveDefinite { index: usize, value: f64, floor: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Jacobi sweeps did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
}

/// Dense real symmetric matrix. Construction verifies symmetry and then
/// stores the exactly symmetrized average `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, NumError> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(NumError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(NumError::Empty);
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(NumError::NonFinite);
        }
        let max_asymmetry = max_asymmetry(&m);
        let scale = m.amax();
        if max_asymmetry > SYMMETRY_TOL * scale {
            return Err(NumError::Asymmetric { max_asymmetry });
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self(sym))
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be positive");
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be positive");
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "SymMatrix dimension must be positive");
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Builds `V diag(values) Vᵀ`.
    pub fn from_spectrum(values: &[f64], vectors: &DMatrix<f64>) -> Result<Self, NumError> {
        let n = values.len();
        if vectors.shape() != (n, n) {
            return Err(NumError::DimensionMismatch { expected: n, got: vectors.nrows() });
        }
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(values));
        let m = vectors * d * vectors.transpose();
        Ok(Self((&m + m.transpose()) * 0.5))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn mul_vec(&self, v: &ParamVector) -> Result<ParamVector, NumError> {
        check_dim(self.dim(), v.len())?;
        Ok(&self.0 * v)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix, NumError> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self(&self.0 + &other.0))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        Self(&self.0 * s)
    }

    /// `A M Aᵀ` for a square `A` of matching size; the result is symmetric.
    pub fn congruence(&self, a: &DMatrix<f64>) -> Result<SymMatrix, NumError> {
        check_dim(self.dim(), a.ncols())?;
        let m = a * &self.0 * a.transpose();
        Ok(Self((&m + m.transpose()) * 0.5))
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_dim(expected: usize, got: usize) -> Result<(), NumError> {
    if expected != got {
        Err(NumError::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// Eigenvalues sorted ascending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomp {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.values);
        &self.vectors * d * self.vectors.transpose()
    }

    pub fn min_value(&self) -> f64 {
        self.values[0]
    }

    pub fn max_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Applies a scalar function to the spectrum: `V f(Λ) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        SymMatrix::from_spectrum(&mapped, &self.vectors).expect("shapes are consistent")
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm drops below
/// `1e-14 * ‖M‖_F`. Each eigenvector is oriented so that its first
/// component with magnitude above `1e-12` is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomp, NumError> {
    let n = m.dim();
    let mut a = m.as_matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();

    if scale > 0.0 {
        let mut converged = false;
        let mut off = off_diagonal_norm(&a);
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off <= JACOBI_TOL * scale {
                converged = true;
                break;
            }
            for p in 0..n.saturating_sub(1) {
                for q in (p + 1)..n {
                    rotate(&mut a, &mut v, p, q);
                }
            }
            off = off_diagonal_norm(&a);
        }
        if !converged && off > JACOBI_TOL * scale {
            return Err(NumError::NoConvergence { sweeps: JACOBI_MAX_SWEEPS, off_norm: off });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));

    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut column = v.column(src).clone_owned();
        if let Some(first) = column.iter().find(|x| x.abs() > SIGN_EPS) {
            if *first < 0.0 {
                column.neg_mut();
            }
        }
        vectors.set_column(col, &column);
    }
    Ok(EigenDecomp { values, vectors })
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[(i, j)] * a[(i, j)];
            }
        }
    }
    sum.sqrt()
}

// One Jacobi rotation zeroing a[(p, q)]: A ← Pᵀ A P, V ← V P.
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Rejects matrices whose smallest eigenvalue is not above [`SPD_FLOOR`].
pub fn require_spd(eig: &EigenDecomp) -> Result<(), NumError> {
    match eig.values.iter().enumerate().find(|(_, &x)| x <= SPD_FLOOR) {
        Some((index, &value)) => Err(NumError::NotPositiveDefinite { index, value, floor: SPD_FLOOR }),
        None => Ok(()),
    }
}

/// `M^p` for SPD `M`.
pub fn spd_power(m: &SymMatrix, p: f64) -> Result<SymMatrix, NumError> {
    let eig = sym_eig(m)?;
    require_spd(&eig)?;
    Ok(eig.map_spectrum(|x| x.powf(p)))
}

pub fn spd_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix, NumError> {
    let eig = sym_eig(m)?;
    require_spd(&eig)?;
    Ok(eig.map_spectrum(|x| 1.0 / x.sqrt()))
}

pub fn spd_sqrt(m: &SymMatrix) -> Result<SymMatrix, NumError> {
    let eig = sym_eig(m)?;
    require_spd(&eig)?;
    Ok(eig.map_spectrum(f64::sqrt))
}

pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix, NumError> {
    let eig = sym_eig(m)?;
    require_spd(&eig)?;
    Ok(eig.map_spectrum(|x| 1.0 / x))
}

/// Un-rooted quadratic form `vᵀ M v`.
pub fn quad_form(v: &ParamVector, m: &SymMatrix) -> Result<f64, NumError> {
    check_dim(m.dim(), v.len())?;
    Ok(v.dot(&(m.as_matrix() * v)))
}

/// Angle in radians between two nonzero vectors.
pub fn angle_between(a: &ParamVector, b: &ParamVector) -> f64 {
    let cos = a.dot(b) / (a.norm() * b.norm());
    cos.clamp(-1.0, 1.0).acos()
}
