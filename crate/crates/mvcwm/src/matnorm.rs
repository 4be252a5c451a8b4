//! The matrix normal distribution on p x r matrices with separable row and
//! column covariances, plus the SPD linear-algebra kernels the estimators
//! are built on.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Relative symmetry tolerance for SPD construction.
const SYM_TOL: f64 = 1e-12;
/// Ridge added (relative to the mean diagonal) when a scatter estimate fails
/// to factorize; one retry, then the failure is surfaced.
const RIDGE_EPS: f64 = 1e-8;

/// A symmetric positive definite matrix, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<T: Scalar> {
    mat: DMatrix<T>,
}

impl<T: Scalar> SpdMatrix<T> {
    /// Validates symmetry and positive definiteness (Cholesky succeeds).
    pub fn new(mat: DMatrix<T>) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::InvariantViolation(format!(
                "SPD matrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let scale = mat.iter().fold(T::one(), |acc, &v| acc.max(v.abs()));
        for i in 0..mat.nrows() {
            for j in 0..i {
                if (mat[(i, j)] - mat[(j, i)]).abs() > T::of_f64(SYM_TOL) * scale {
                    return Err(Error::InvariantViolation(format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let sym = symmetrize(&mat);
        if Cholesky::new(sym.clone()).is_none() {
            return Err(Error::CholeskyFailure {
                context: "SpdMatrix::new".into(),
            });
        }
        Ok(Self { mat: sym })
    }

    /// Builds an SPD matrix from a weighted scatter estimate, symmetrizing
    /// and applying a single ridge repair if the factorization fails.
    pub fn from_estimate(mat: DMatrix<T>, context: &str) -> Result<Self> {
        let sym = symmetrize(&mat);
        if Cholesky::new(sym.clone()).is_some() {
            return Ok(Self { mat: sym });
        }
        let dim = sym.nrows();
        let ridge = T::of_f64(RIDGE_EPS) * sym.trace() / T::of_f64(dim as f64);
        let mut repaired = sym;
        for i in 0..dim {
            repaired[(i, i)] += ridge;
        }
        if Cholesky::new(repaired.clone()).is_some() {
            Ok(Self { mat: repaired })
        } else {
            Err(Error::CholeskyFailure {
                context: context.into(),
            })
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.mat
    }

    pub fn cholesky(&self) -> Cholesky<T, Dyn> {
        // Construction guarantees this succeeds.
        Cholesky::new(self.mat.clone()).expect("validated SPD matrix")
    }

    /// Scales the matrix by a positive constant.
    pub fn scale(&self, a: T) -> Self {
        Self {
            mat: &self.mat * a,
        }
    }

    /// Ratio of smallest to largest eigenvalue, for spurious-solution checks.
    pub fn eigenvalue_ratio(&self) -> T {
        let eig = self.mat.clone().symmetric_eigenvalues();
        let mut lo = eig[0];
        let mut hi = eig[0];
        for &v in eig.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        lo / hi
    }
}

fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::of_f64(0.5);
    (m + m.transpose()) * half
}

/// Inverse and log-determinant of an SPD matrix through its Cholesky factor.
pub fn chol_inv_logdet<T: Scalar>(s: &SpdMatrix<T>) -> (DMatrix<T>, T) {
    let chol = s.cholesky();
    let logdet = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &d| acc + d.ln())
        * T::of_f64(2.0);
    (chol.inverse(), logdet)
}

/// Parameters of a matrix normal distribution: mean `m` (p x r), row
/// covariance `phi` (p x p) and column covariance `psi` (r x r).
#[derive(Debug, Clone)]
pub struct MatNormParams<T: Scalar> {
    pub m: DMatrix<T>,
    pub phi: SpdMatrix<T>,
    pub psi: SpdMatrix<T>,
}

impl<T: Scalar> MatNormParams<T> {
    pub fn new(m: DMatrix<T>, phi: SpdMatrix<T>, psi: SpdMatrix<T>) -> Result<Self> {
        if phi.dim() != m.nrows() || psi.dim() != m.ncols() {
            return Err(Error::InvariantViolation(format!(
                "matrix normal dimensions inconsistent: mean {}x{}, phi {}, psi {}",
                m.nrows(),
                m.ncols(),
                phi.dim(),
                psi.dim()
            )));
        }
        Ok(Self { m, phi, psi })
    }
}

/// Precomputed form of a matrix normal density for repeated evaluation.
#[derive(Debug, Clone)]
pub struct MatNormDensity<T: Scalar> {
    pub m: DMatrix<T>,
    phi_inv: DMatrix<T>,
    psi_inv: DMatrix<T>,
    log_const: T,
}

impl<T: Scalar> MatNormDensity<T> {
    pub fn new(params: &MatNormParams<T>) -> Self {
        let (p, r) = (params.m.nrows(), params.m.ncols());
        let (phi_inv, phi_logdet) = chol_inv_logdet(&params.phi);
        let (psi_inv, psi_logdet) = chol_inv_logdet(&params.psi);
        let two_pi = T::of_f64(2.0 * std::f64::consts::PI);
        let half = T::of_f64(0.5);
        let log_const = -T::of_f64((p * r) as f64) * half * two_pi.ln()
            - T::of_f64(r as f64) * half * phi_logdet
            - T::of_f64(p as f64) * half * psi_logdet;
        Self {
            m: params.m.clone(),
            phi_inv,
            psi_inv,
            log_const,
        }
    }

    /// Log-density at `y`, via the trace form
    /// -(pr/2) ln 2pi - (r/2) ln|Phi| - (p/2) ln|Psi|
    /// - 1/2 tr[Phi^-1 (Y-M) Psi^-1 (Y-M)^T].
    pub fn log_density(&self, y: &DMatrix<T>) -> T {
        let resid = y - &self.m;
        self.log_density_of_residual(&resid)
    }

    /// Same as [`log_density`](Self::log_density) but with the residual
    /// Y - M already formed (the regression path computes it directly).
    pub fn log_density_of_residual(&self, resid: &DMatrix<T>) -> T {
        let tmp = &self.phi_inv * resid * &self.psi_inv;
        let mut quad = T::zero();
        for (a, b) in tmp.iter().zip(resid.iter()) {
            quad += *a * *b;
        }
        self.log_const - T::of_f64(0.5) * quad
    }
}

pub fn log_density<T: Scalar>(y: &DMatrix<T>, params: &MatNormParams<T>) -> T {
    MatNormDensity::new(params).log_density(y)
}

/// Draws `n` matrices as M + L_phi Z L_psi^T with Z i.i.d. standard normal.
pub fn sample<T: Scalar>(params: &MatNormParams<T>, n: usize, seed: u64) -> Vec<DMatrix<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(params, n, &mut rng)
}

pub fn sample_with_rng<T: Scalar, R: Rng + ?Sized>(
    params: &MatNormParams<T>,
    n: usize,
    rng: &mut R,
) -> Vec<DMatrix<T>> {
    let (p, r) = (params.m.nrows(), params.m.ncols());
    let l_phi = params.phi.cholesky().l();
    let l_psi = params.psi.cholesky().l();
    (0..n)
        .map(|_| {
            let z = DMatrix::from_fn(p, r, |_, _| T::standard_normal(rng));
            &params.m + &l_phi * z * l_psi.transpose()
        })
        .collect()
}

/// Resolves the (a Phi, a^-1 Psi) scaling ambiguity by forcing Phi[0,0] = 1.
pub fn normalize_identifiability<T: Scalar>(
    phi: &SpdMatrix<T>,
    psi: &SpdMatrix<T>,
) -> Result<(SpdMatrix<T>, SpdMatrix<T>)> {
    let a = phi.matrix()[(0, 0)];
    if a <= T::of_f64(1e-12) {
        return Err(Error::DegenerateScale { value: a.to_f64() });
    }
    let mut phi_new = phi.scale(T::one() / a);
    // Pin the normalized entry exactly.
    phi_new.mat[(0, 0)] = T::one();
    Ok((phi_new, psi.scale(a)))
}

/// Weighted maximum likelihood for a single matrix normal by alternating
/// row/column covariance updates, followed by identifiability normalization.
pub fn weighted_flipflop_mle<T: Scalar>(
    samples: &[DMatrix<T>],
    weights: &[T],
) -> Result<MatNormParams<T>> {
    assert_eq!(samples.len(), weights.len());
    let positive = weights.iter().filter(|w| **w > T::zero()).count();
    if positive < 2 {
        return Err(Error::DegenerateData(
            "flip-flop needs at least 2 effective samples".into(),
        ));
    }
    let (p, r) = (samples[0].nrows(), samples[0].ncols());
    let wsum = weights.iter().fold(T::zero(), |acc, &w| acc + w);
    if wsum <= T::zero() {
        return Err(Error::DegenerateData("total weight is zero".into()));
    }

    let mut mean = DMatrix::<T>::zeros(p, r);
    for (x, &w) in samples.iter().zip(weights) {
        mean += x * w;
    }
    mean /= wsum;
    let residuals: Vec<DMatrix<T>> = samples.iter().map(|x| x - &mean).collect();

    let mut psi = SpdMatrix::<T>::identity(r);
    let mut phi = SpdMatrix::<T>::identity(p);
    let mut prev_ll = T::of_f64(f64::NEG_INFINITY);
    for _ in 0..100 {
        let (psi_inv, _) = chol_inv_logdet(&psi);
        let mut phi_acc = DMatrix::<T>::zeros(p, p);
        for (resid, &w) in residuals.iter().zip(weights) {
            phi_acc += resid * &psi_inv * resid.transpose() * w;
        }
        phi_acc /= T::of_f64(r as f64) * wsum;
        phi = SpdMatrix::from_estimate(phi_acc, "flip-flop row covariance")
            .map_err(|_| Error::DegenerateData("degenerate row scatter in flip-flop".into()))?;

        let (phi_inv, _) = chol_inv_logdet(&phi);
        let mut psi_acc = DMatrix::<T>::zeros(r, r);
        for (resid, &w) in residuals.iter().zip(weights) {
            psi_acc += resid.transpose() * &phi_inv * resid * w;
        }
        psi_acc /= T::of_f64(p as f64) * wsum;
        psi = SpdMatrix::from_estimate(psi_acc, "flip-flop column covariance")
            .map_err(|_| Error::DegenerateData("degenerate column scatter in flip-flop".into()))?;

        let params = MatNormParams::new(mean.clone(), phi.clone(), psi.clone())?;
        let dens = MatNormDensity::new(&params);
        let ll = residuals
            .iter()
            .zip(weights)
            .fold(T::zero(), |acc, (resid, &w)| {
                acc + w * dens.log_density_of_residual(resid)
            });
        let done = (ll - prev_ll).abs() < T::of_f64(1e-8) * (T::one() + ll.abs());
        prev_ll = ll;
        if done {
            break;
        }
    }

    let (phi_n, psi_n) = normalize_identifiability(&phi, &psi)?;
    MatNormParams::new(mean, phi_n, psi_n)
}
