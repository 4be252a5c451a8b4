//! Comparison estimators: the matrix-normal mixture of regressions (MN-FMR)
//! and the multivariate-multiple normal CWM on vectorized data (MMN-CWM).

use nalgebra::DMatrix;

use crate::cwm::{
    bic, count_free_params, log_sum_exp, Dataset, EcmInit, FitConfig, FitParams,
    FittedModel, ModelKind, Responsibilities,
};
use crate::error::{Error, Result};
use crate::matnorm::{
    chol_inv_logdet, normalize_identifiability, MatNormDensity, MatNormParams, SpdMatrix,
};
use crate::scalar::Scalar;

/// Conditional-block parameters of one MN-FMR component.
#[derive(Debug, Clone)]
pub struct FmrComponentParams<T: Scalar> {
    pub pi: T,
    pub bstar: DMatrix<T>,
    pub phi_y: SpdMatrix<T>,
    pub psi_y: SpdMatrix<T>,
}

struct FmrDensities<T: Scalar> {
    log_pi: Vec<T>,
    dens_y: Vec<MatNormDensity<T>>,
    bstar: Vec<DMatrix<T>>,
}

impl<T: Scalar> FmrDensities<T> {
    fn new(components: &[FmrComponentParams<T>], p: usize, r: usize) -> Result<Self> {
        let mut log_pi = Vec::new();
        let mut dens_y = Vec::new();
        let mut bstar = Vec::new();
        for c in components {
            log_pi.push(c.pi.ln());
            dens_y.push(MatNormDensity::new(&MatNormParams::new(
                DMatrix::zeros(p, r),
                c.phi_y.clone(),
                c.psi_y.clone(),
            )?));
            bstar.push(c.bstar.clone());
        }
        Ok(Self {
            log_pi,
            dens_y,
            bstar,
        })
    }

    /// ln pi_g + ln phi(Y | X*); the covariate marginal never enters.
    fn component_log_density(&self, g: usize, xstar: &DMatrix<T>, y: &DMatrix<T>) -> T {
        let resid = y - &self.bstar[g] * xstar;
        self.log_pi[g] + self.dens_y[g].log_density_of_residual(&resid)
    }
}

fn fmr_e_step<T: Scalar>(
    data: &Dataset<T>,
    designs: &[DMatrix<T>],
    dens: &FmrDensities<T>,
) -> Result<Responsibilities<T>> {
    let g_count = dens.log_pi.len();
    let mut z = DMatrix::zeros(data.n(), g_count);
    for i in 0..data.n() {
        let vals: Vec<T> = (0..g_count)
            .map(|g| dens.component_log_density(g, &designs[i], &data.y()[i]))
            .collect();
        let lse = log_sum_exp(&vals);
        if !lse.is_finite() {
            return Err(Error::AllZeroRow { i });
        }
        for g in 0..g_count {
            z[(i, g)] = (vals[g] - lse).exp();
        }
    }
    Ok(Responsibilities { z })
}

/// Fits the MN-FMR by ECM; the covariate marginal is ignored throughout and
/// the reported log-likelihood is the conditional one.
pub fn fit_fmr<T: Scalar>(
    data: &Dataset<T>,
    g: usize,
    init: &EcmInit<T>,
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    assert!(g >= 1 && data.n() > g);
    let (n, p, q, r) = (data.n(), data.p(), data.q(), data.r());
    let designs = data.designs();
    let min_mass = (p.max(q) + 1) as f64;

    let mut z = init.z0.clone();
    let mut psi_y = init.psi_y0.clone();
    let mut trace: Vec<T> = Vec::new();
    let mut components: Vec<FmrComponentParams<T>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iter {
        let masses = z.column_masses();
        let mut current = Vec::with_capacity(g);
        for k in 0..g {
            let mass = masses[k];
            if mass.to_f64() < min_mass {
                return Err(Error::EmptyCluster {
                    g: k,
                    mass: mass.to_f64(),
                    min: min_mass,
                });
            }
            let (psi_y_inv, _) = chol_inv_logdet(&psi_y[k]);
            let mut num = DMatrix::<T>::zeros(p, q + 1);
            let mut gram = DMatrix::<T>::zeros(q + 1, q + 1);
            for i in 0..n {
                let w = z.z[(i, k)];
                let xpsi = &designs[i] * &psi_y_inv;
                num += &data.y()[i] * xpsi.transpose() * w;
                gram += &xpsi * designs[i].transpose() * w;
            }
            let gram_inv = gram.try_inverse().ok_or(Error::SingularGram { g: k })?;
            let bstar = num * gram_inv;
            let mut phi_acc = DMatrix::<T>::zeros(p, p);
            for i in 0..n {
                let w = z.z[(i, k)];
                let ry = &data.y()[i] - &bstar * &designs[i];
                phi_acc += &ry * &psi_y_inv * ry.transpose() * w;
            }
            phi_acc /= T::of_f64(r as f64) * mass;
            let phi = SpdMatrix::from_estimate(phi_acc, "FMR Phi_Y update")?;
            // second CM-step: Psi_Y given the new Phi_Y and B*
            let (phi_inv, _) = chol_inv_logdet(&phi);
            let mut psi_acc = DMatrix::<T>::zeros(r, r);
            for i in 0..n {
                let w = z.z[(i, k)];
                let ry = &data.y()[i] - &bstar * &designs[i];
                psi_acc += ry.transpose() * &phi_inv * ry * w;
            }
            psi_acc /= T::of_f64(p as f64) * mass;
            psi_y[k] = SpdMatrix::from_estimate(psi_acc, "FMR Psi_Y update")?;
            current.push(FmrComponentParams {
                pi: mass / T::of_f64(n as f64),
                bstar,
                phi_y: phi,
                psi_y: psi_y[k].clone(),
            });
        }

        let dens = FmrDensities::new(&current, p, r)?;
        let mut ll = T::zero();
        for i in 0..n {
            let vals: Vec<T> = (0..g)
                .map(|k| dens.component_log_density(k, &designs[i], &data.y()[i]))
                .collect();
            ll += log_sum_exp(&vals);
        }
        if let Some(&prev) = trace.last() {
            let drop = prev - ll;
            if drop > T::of_f64(1e-6) * (T::one() + prev.abs()) {
                return Err(Error::NonMonotone {
                    iter,
                    drop: drop.to_f64(),
                });
            }
        }
        trace.push(ll);
        iterations = iter + 1;
        components = current;
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (ll - prev).abs() < T::of_f64(config.tol) * (T::one() + ll.abs()) {
                converged = true;
                break;
            }
        }
        let dens = FmrDensities::new(&components, p, r)?;
        z = fmr_e_step(data, &designs, &dens)?;
    }

    let dens = FmrDensities::new(&components, p, r)?;
    let final_z = fmr_e_step(data, &designs, &dens)?;
    let normalized = components
        .iter()
        .map(|c| {
            let (phi_y, psi_y) = normalize_identifiability(&c.phi_y, &c.psi_y)?;
            Ok(FmrComponentParams {
                pi: c.pi,
                bstar: c.bstar.clone(),
                phi_y,
                psi_y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loglik = *trace.last().expect("non-empty trace");
    let n_params = count_free_params(p, q, r, g, ModelKind::MnFmr);
    let bic_val = bic(loglik.to_f64(), n_params, n);
    Ok(FittedModel {
        map_labels: final_z.map_labels(),
        responsibilities: final_z,
        params: FitParams::Fmr(normalized),
        loglik_trace: trace,
        loglik,
        bic: T::of_f64(bic_val),
        n_params,
        converged,
        iterations,
        model_kind: ModelKind::MnFmr,
    })
}

/// Column-major vectorization of every X_i and Y_i; the result is a dataset
/// of qr x 1 covariates and pr x 1 responses.
pub fn vectorize_dataset<T: Scalar>(data: &Dataset<T>) -> Dataset<T> {
    let vecize = |m: &DMatrix<T>| {
        let d = m.nrows() * m.ncols();
        let mut out = DMatrix::zeros(d, 1);
        for (k, v) in m.iter().enumerate() {
            out[(k, 0)] = *v;
        }
        out
    };
    let xs = data.x().iter().map(vecize).collect();
    let ys = data.y().iter().map(vecize).collect();
    Dataset::new(xs, ys, data.labels().map(|l| l.to_vec())).expect("valid vectorized dataset")
}

/// One component of the vectorized CWM: a qr-variate normal marginal on
/// vec(X) and a pr-variate normal regression of vec(Y) on [1; vec(X)].
#[derive(Debug, Clone)]
pub struct MmnCwmComponentParams<T: Scalar> {
    pub pi: T,
    pub mu: DMatrix<T>,
    pub sigma_x: SpdMatrix<T>,
    pub c: DMatrix<T>,
    pub sigma_y: SpdMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct MmnCwmParams<T: Scalar> {
    pub components: Vec<MmnCwmComponentParams<T>>,
}

struct MmnDensities<T: Scalar> {
    log_pi: Vec<T>,
    dens_x: Vec<MatNormDensity<T>>,
    dens_y: Vec<MatNormDensity<T>>,
    coef: Vec<DMatrix<T>>,
}

impl<T: Scalar> MmnDensities<T> {
    fn new(params: &MmnCwmParams<T>) -> Result<Self> {
        let mut log_pi = Vec::new();
        let mut dens_x = Vec::new();
        let mut dens_y = Vec::new();
        let mut coef = Vec::new();
        for c in &params.components {
            let dy = c.sigma_y.dim();
            log_pi.push(c.pi.ln());
            // a d x 1 matrix normal with unit column covariance is exactly
            // the d-variate normal
            dens_x.push(MatNormDensity::new(&MatNormParams::new(
                c.mu.clone(),
                c.sigma_x.clone(),
                SpdMatrix::identity(1),
            )?));
            dens_y.push(MatNormDensity::new(&MatNormParams::new(
                DMatrix::zeros(dy, 1),
                c.sigma_y.clone(),
                SpdMatrix::identity(1),
            )?));
            coef.push(c.c.clone());
        }
        Ok(Self {
            log_pi,
            dens_x,
            dens_y,
            coef,
        })
    }

    fn component_log_density(&self, g: usize, x: &DMatrix<T>, xstar: &DMatrix<T>, y: &DMatrix<T>) -> T {
        let resid = y - &self.coef[g] * xstar;
        self.log_pi[g] + self.dens_y[g].log_density_of_residual(&resid) + self.dens_x[g].log_density(x)
    }
}

fn mmn_e_step<T: Scalar>(
    data: &Dataset<T>,
    designs: &[DMatrix<T>],
    dens: &MmnDensities<T>,
) -> Result<Responsibilities<T>> {
    let g_count = dens.log_pi.len();
    let mut z = DMatrix::zeros(data.n(), g_count);
    for i in 0..data.n() {
        let vals: Vec<T> = (0..g_count)
            .map(|g| dens.component_log_density(g, &data.x()[i], &designs[i], &data.y()[i]))
            .collect();
        let lse = log_sum_exp(&vals);
        if !lse.is_finite() {
            return Err(Error::AllZeroRow { i });
        }
        for g in 0..g_count {
            z[(i, g)] = (vals[g] - lse).exp();
        }
    }
    Ok(Responsibilities { z })
}

/// Standard EM for the vectorized CWM: weighted means, weighted OLS and
/// weighted scatters, all in closed form.
pub fn fit_mmn_cwm<T: Scalar>(
    vec_data: &Dataset<T>,
    g: usize,
    z0: &Responsibilities<T>,
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    assert!(g >= 1 && vec_data.n() > g);
    assert_eq!(vec_data.r(), 1, "fit_mmn_cwm expects a vectorized dataset");
    let (n, dy, dx) = (vec_data.n(), vec_data.p(), vec_data.q());
    let designs = vec_data.designs();
    let min_mass = (dy.max(dx) + 1) as f64;

    let mut z = z0.clone();
    let mut trace: Vec<T> = Vec::new();
    let mut params: Option<MmnCwmParams<T>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iter {
        let masses = z.column_masses();
        let mut components = Vec::with_capacity(g);
        for k in 0..g {
            let mass = masses[k];
            if mass.to_f64() < min_mass {
                return Err(Error::EmptyCluster {
                    g: k,
                    mass: mass.to_f64(),
                    min: min_mass,
                });
            }
            let mut mu = DMatrix::<T>::zeros(dx, 1);
            for i in 0..n {
                mu += &vec_data.x()[i] * z.z[(i, k)];
            }
            mu /= mass;
            let mut sx = DMatrix::<T>::zeros(dx, dx);
            for i in 0..n {
                let d = &vec_data.x()[i] - &mu;
                sx += &d * d.transpose() * z.z[(i, k)];
            }
            sx /= mass;
            let sigma_x = SpdMatrix::from_estimate(sx, "MMN Sigma_X update")?;

            let mut num = DMatrix::<T>::zeros(dy, dx + 1);
            let mut gram = DMatrix::<T>::zeros(dx + 1, dx + 1);
            for i in 0..n {
                let w = z.z[(i, k)];
                num += &vec_data.y()[i] * designs[i].transpose() * w;
                gram += &designs[i] * designs[i].transpose() * w;
            }
            let gram_inv = gram.try_inverse().ok_or(Error::SingularGram { g: k })?;
            let c = num * gram_inv;
            let mut sy = DMatrix::<T>::zeros(dy, dy);
            for i in 0..n {
                let resid = &vec_data.y()[i] - &c * &designs[i];
                sy += &resid * resid.transpose() * z.z[(i, k)];
            }
            sy /= mass;
            let sigma_y = SpdMatrix::from_estimate(sy, "MMN Sigma_Y update")?;

            components.push(MmnCwmComponentParams {
                pi: mass / T::of_f64(n as f64),
                mu,
                sigma_x,
                c,
                sigma_y,
            });
        }
        let current = MmnCwmParams { components };
        let dens = MmnDensities::new(&current)?;
        let mut ll = T::zero();
        for i in 0..n {
            let vals: Vec<T> = (0..g)
                .map(|k| dens.component_log_density(k, &vec_data.x()[i], &designs[i], &vec_data.y()[i]))
                .collect();
            ll += log_sum_exp(&vals);
        }
        if let Some(&prev) = trace.last() {
            let drop = prev - ll;
            if drop > T::of_f64(1e-6) * (T::one() + prev.abs()) {
                return Err(Error::NonMonotone {
                    iter,
                    drop: drop.to_f64(),
                });
            }
        }
        trace.push(ll);
        iterations = iter + 1;
        params = Some(current.clone());
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (ll - prev).abs() < T::of_f64(config.tol) * (T::one() + ll.abs()) {
                converged = true;
                break;
            }
        }
        z = mmn_e_step(vec_data, &designs, &dens)?;
    }

    let params = params.expect("at least one EM iteration");
    let dens = MmnDensities::new(&params)?;
    let final_z = mmn_e_step(vec_data, &designs, &dens)?;
    let loglik = *trace.last().expect("non-empty trace");
    let n_params = count_free_params(dy, dx, 1, g, ModelKind::MmnCwm);
    let bic_val = bic(loglik.to_f64(), n_params, n);
    Ok(FittedModel {
        map_labels: final_z.map_labels(),
        responsibilities: final_z,
        params: FitParams::Mmn(params),
        loglik_trace: trace,
        loglik,
        bic: T::of_f64(bic_val),
        n_params,
        converged,
        iterations,
        model_kind: ModelKind::MmnCwm,
    })
}
