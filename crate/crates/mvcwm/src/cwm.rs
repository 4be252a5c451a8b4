//! The matrix normal cluster-weighted model: joint density, ECM fitting,
//! parameter counting and BIC.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{FmrComponentParams, MmnCwmParams};
use crate::error::{Error, Result};
use crate::matnorm::{normalize_identifiability, MatNormDensity, MatNormParams, SpdMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    MnCwm,
    MnFmr,
    MmnCwm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::MnCwm => "MN-CWM",
            ModelKind::MnFmr => "MN-FMR",
            ModelKind::MmnCwm => "MMN-CWM",
        }
    }
}

/// N pairs of covariate matrix X (q x r) and response matrix Y (p x r),
/// with optional generating labels (0-based).
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    x: Vec<DMatrix<T>>,
    y: Vec<DMatrix<T>>,
    labels: Option<Vec<usize>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        x: Vec<DMatrix<T>>,
        y: Vec<DMatrix<T>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvariantViolation(format!(
                "{} covariate matrices but {} response matrices",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Ok(Self { x, y, labels });
        }
        let (q, r) = (x[0].nrows(), x[0].ncols());
        let (p, ry) = (y[0].nrows(), y[0].ncols());
        if ry != r {
            return Err(Error::InvariantViolation(
                "X and Y must share the column dimension r".into(),
            ));
        }
        for (i, xi) in x.iter().enumerate() {
            if xi.nrows() != q || xi.ncols() != r {
                return Err(Error::InvariantViolation(format!(
                    "covariate matrix {i} has inconsistent dimensions"
                )));
            }
        }
        for (i, yi) in y.iter().enumerate() {
            if yi.nrows() != p || yi.ncols() != r {
                return Err(Error::InvariantViolation(format!(
                    "response matrix {i} has inconsistent dimensions"
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != x.len() {
                return Err(Error::InvariantViolation(
                    "label count does not match the number of units".into(),
                ));
            }
        }
        Ok(Self { x, y, labels })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
    pub fn p(&self) -> usize {
        self.y[0].nrows()
    }
    pub fn q(&self) -> usize {
        self.x[0].nrows()
    }
    pub fn r(&self) -> usize {
        self.x[0].ncols()
    }
    pub fn x(&self) -> &[DMatrix<T>] {
        &self.x
    }
    pub fn y(&self) -> &[DMatrix<T>] {
        &self.y
    }
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
    pub fn set_labels(&mut self, labels: Option<Vec<usize>>) {
        self.labels = labels;
    }

    /// Design matrices X* = [1; X], computed once per fit.
    pub fn designs(&self) -> Vec<DMatrix<T>> {
        self.x.iter().map(augment_design).collect()
    }
}

/// Prepends a row of ones: X (q x r) -> X* ((1+q) x r).
pub fn augment_design<T: Scalar>(x: &DMatrix<T>) -> DMatrix<T> {
    let (q, r) = (x.nrows(), x.ncols());
    let mut out = DMatrix::zeros(q + 1, r);
    for j in 0..r {
        out[(0, j)] = T::one();
        for i in 0..q {
            out[(i + 1, j)] = x[(i, j)];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ComponentParams<T: Scalar> {
    pub pi: T,
    pub m: DMatrix<T>,
    pub phi_x: SpdMatrix<T>,
    pub psi_x: SpdMatrix<T>,
    pub bstar: DMatrix<T>,
    pub phi_y: SpdMatrix<T>,
    pub psi_y: SpdMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct CwmParams<T: Scalar> {
    pub components: Vec<ComponentParams<T>>,
}

impl<T: Scalar> CwmParams<T> {
    pub fn new(components: Vec<ComponentParams<T>>) -> Result<Self> {
        let total = components
            .iter()
            .fold(T::zero(), |acc, c| acc + c.pi);
        if (total - T::one()).abs() > T::of_f64(1e-12) {
            return Err(Error::InvariantViolation(format!(
                "mixing weights sum to {} instead of 1",
                total.to_f64()
            )));
        }
        for c in &components {
            if c.pi <= T::zero() {
                return Err(Error::InvariantViolation(
                    "mixing weights must be positive".into(),
                ));
            }
        }
        Ok(Self { components })
    }

    pub fn g(&self) -> usize {
        self.components.len()
    }
    pub fn p(&self) -> usize {
        self.components[0].bstar.nrows()
    }
    pub fn q(&self) -> usize {
        self.components[0].m.nrows()
    }
    pub fn r(&self) -> usize {
        self.components[0].m.ncols()
    }

    /// Applies the Phi[0,0] = 1 normalization to both covariance pairs of
    /// every component. Leaves the likelihood unchanged.
    pub fn normalized(&self) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| {
                let (phi_x, psi_x) = normalize_identifiability(&c.phi_x, &c.psi_x)?;
                let (phi_y, psi_y) = normalize_identifiability(&c.phi_y, &c.psi_y)?;
                Ok(ComponentParams {
                    pi: c.pi,
                    m: c.m.clone(),
                    phi_x,
                    psi_x,
                    bstar: c.bstar.clone(),
                    phi_y,
                    psi_y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }
}

/// Posterior component-membership probabilities, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<T: Scalar> {
    pub z: DMatrix<T>,
}

impl<T: Scalar> Responsibilities<T> {
    pub fn new(z: DMatrix<T>) -> Result<Self> {
        let tol = T::of_f64(1e-12);
        for i in 0..z.nrows() {
            let mut sum = T::zero();
            for g in 0..z.ncols() {
                let v = z[(i, g)];
                if v < T::zero() || v > T::one() + tol {
                    return Err(Error::InvariantViolation(format!(
                        "responsibility out of range at ({i},{g})"
                    )));
                }
                sum += v;
            }
            if (sum - T::one()).abs() > T::of_f64(1e-9) {
                return Err(Error::InvariantViolation(format!(
                    "responsibility row {i} sums to {}",
                    sum.to_f64()
                )));
            }
        }
        Ok(Self { z })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }
    pub fn g(&self) -> usize {
        self.z.ncols()
    }

    pub fn map_labels(&self) -> Vec<usize> {
        (0..self.z.nrows())
            .map(|i| {
                let mut best = 0;
                for g in 1..self.z.ncols() {
                    if self.z[(i, g)] > self.z[(i, best)] {
                        best = g;
                    }
                }
                best
            })
            .collect()
    }

    /// One-hot version keeping the MAP component of each row.
    pub fn hardened(&self) -> Self {
        let mut z = DMatrix::zeros(self.z.nrows(), self.z.ncols());
        for (i, g) in self.map_labels().into_iter().enumerate() {
            z[(i, g)] = T::one();
        }
        Self { z }
    }

    pub fn column_masses(&self) -> Vec<T> {
        (0..self.z.ncols())
            .map(|g| (0..self.z.nrows()).fold(T::zero(), |acc, i| acc + self.z[(i, g)]))
            .collect()
    }

    /// Builds hard responsibilities from 0-based labels.
    pub fn from_labels(labels: &[usize], g: usize) -> Self {
        let mut z = DMatrix::zeros(labels.len(), g);
        for (i, &l) in labels.iter().enumerate() {
            z[(i, l)] = T::one();
        }
        Self { z }
    }
}

/// Fitted parameters of any of the three estimators.
#[derive(Debug, Clone)]
pub enum FitParams<T: Scalar> {
    Cwm(CwmParams<T>),
    Fmr(Vec<FmrComponentParams<T>>),
    Mmn(MmnCwmParams<T>),
}

impl<T: Scalar> FitParams<T> {
    pub fn g(&self) -> usize {
        match self {
            FitParams::Cwm(p) => p.g(),
            FitParams::Fmr(p) => p.len(),
            FitParams::Mmn(p) => p.components.len(),
        }
    }

    pub fn weights(&self) -> Vec<T> {
        match self {
            FitParams::Cwm(p) => p.components.iter().map(|c| c.pi).collect(),
            FitParams::Fmr(p) => p.iter().map(|c| c.pi).collect(),
            FitParams::Mmn(p) => p.components.iter().map(|c| c.pi).collect(),
        }
    }

    pub fn covariances(&self) -> Vec<&SpdMatrix<T>> {
        match self {
            FitParams::Cwm(p) => p
                .components
                .iter()
                .flat_map(|c| [&c.phi_x, &c.psi_x, &c.phi_y, &c.psi_y])
                .collect(),
            FitParams::Fmr(p) => p.iter().flat_map(|c| [&c.phi_y, &c.psi_y]).collect(),
            FitParams::Mmn(p) => p
                .components
                .iter()
                .flat_map(|c| [&c.sigma_x, &c.sigma_y])
                .collect(),
        }
    }

    pub fn as_cwm(&self) -> Option<&CwmParams<T>> {
        match self {
            FitParams::Cwm(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FittedModel<T: Scalar> {
    pub params: FitParams<T>,
    pub responsibilities: Responsibilities<T>,
    pub map_labels: Vec<usize>,
    pub loglik_trace: Vec<T>,
    pub loglik: T,
    pub bic: T,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
    pub model_kind: ModelKind,
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

/// Initial values for one ECM run: soft assignments plus the column
/// covariances needed by the first CM-step.
#[derive(Debug, Clone)]
pub struct EcmInit<T: Scalar> {
    pub z0: Responsibilities<T>,
    pub psi_x0: Vec<SpdMatrix<T>>,
    pub psi_y0: Vec<SpdMatrix<T>>,
}

/// Per-component precomputed densities for the E-step and likelihood.
pub(crate) struct CwmDensities<T: Scalar> {
    pub log_pi: Vec<T>,
    pub dens_x: Vec<MatNormDensity<T>>,
    pub dens_y: Vec<MatNormDensity<T>>,
    pub bstar: Vec<DMatrix<T>>,
}

impl<T: Scalar> CwmDensities<T> {
    pub fn new(params: &CwmParams<T>) -> Result<Self> {
        let mut log_pi = Vec::new();
        let mut dens_x = Vec::new();
        let mut dens_y = Vec::new();
        let mut bstar = Vec::new();
        let (p, r) = (params.p(), params.r());
        for c in &params.components {
            log_pi.push(c.pi.ln());
            dens_x.push(MatNormDensity::new(&MatNormParams::new(
                c.m.clone(),
                c.phi_x.clone(),
                c.psi_x.clone(),
            )?));
            dens_y.push(MatNormDensity::new(&MatNormParams::new(
                DMatrix::zeros(p, r),
                c.phi_y.clone(),
                c.psi_y.clone(),
            )?));
            bstar.push(c.bstar.clone());
        }
        Ok(Self {
            log_pi,
            dens_x,
            dens_y,
            bstar,
        })
    }

    /// ln pi_g + ln phi(Y | X*) + ln phi(X) for one unit and component.
    pub fn component_log_density(
        &self,
        g: usize,
        x: &DMatrix<T>,
        xstar: &DMatrix<T>,
        y: &DMatrix<T>,
    ) -> T {
        let resid = y - &self.bstar[g] * xstar;
        self.log_pi[g] + self.dens_y[g].log_density_of_residual(&resid) + self.dens_x[g].log_density(x)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(vals: &[T]) -> T {
    let mut max = vals[0];
    for &v in vals.iter().skip(1) {
        max = max.max(v);
    }
    if !max.is_finite() {
        return max;
    }
    let sum = vals
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Log of the mixture joint density at a single (X, Y) pair.
pub fn joint_log_density<T: Scalar>(
    x: &DMatrix<T>,
    y: &DMatrix<T>,
    params: &CwmParams<T>,
) -> Result<T> {
    let dens = CwmDensities::new(params)?;
    let xstar = augment_design(x);
    let vals: Vec<T> = (0..params.g())
        .map(|g| dens.component_log_density(g, x, &xstar, y))
        .collect();
    Ok(log_sum_exp(&vals))
}

/// Sum of the joint log-density over the sample.
pub fn observed_loglik<T: Scalar>(data: &Dataset<T>, params: &CwmParams<T>) -> Result<T> {
    let dens = CwmDensities::new(params)?;
    let designs = data.designs();
    let mut total = T::zero();
    for i in 0..data.n() {
        let vals: Vec<T> = (0..params.g())
            .map(|g| dens.component_log_density(g, &data.x()[i], &designs[i], &data.y()[i]))
            .collect();
        total += log_sum_exp(&vals);
    }
    Ok(total)
}

/// Posterior membership probabilities, computed in log space.
pub fn e_step<T: Scalar>(data: &Dataset<T>, params: &CwmParams<T>) -> Result<Responsibilities<T>> {
    let dens = CwmDensities::new(params)?;
    let designs = data.designs();
    e_step_with(data, &designs, &dens)
}

pub(crate) fn e_step_with<T: Scalar>(
    data: &Dataset<T>,
    designs: &[DMatrix<T>],
    dens: &CwmDensities<T>,
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

/// Output of the first conditional maximization step.
pub struct CmStep1<T: Scalar> {
    pub pi: Vec<T>,
    pub m: Vec<DMatrix<T>>,
    pub bstar: Vec<DMatrix<T>>,
    pub phi_x: Vec<SpdMatrix<T>>,
    pub phi_y: Vec<SpdMatrix<T>>,
}

/// Minimum responsibility mass a component must carry.
fn min_cluster_mass<T: Scalar>(data: &Dataset<T>) -> f64 {
    (data.p().max(data.q()) + 1) as f64
}

/// Updates pi, M, B*, Phi_X and Phi_Y with the column covariances held at
/// their previous values.
pub fn cm_step1<T: Scalar>(
    data: &Dataset<T>,
    designs: &[DMatrix<T>],
    z: &Responsibilities<T>,
    psi_x_prev: &[SpdMatrix<T>],
    psi_y_prev: &[SpdMatrix<T>],
) -> Result<CmStep1<T>> {
    let (n, g_count) = (data.n(), z.g());
    let (p, q, r) = (data.p(), data.q(), data.r());
    let min_mass = min_cluster_mass(data);
    let masses = z.column_masses();

    let mut out = CmStep1 {
        pi: Vec::new(),
        m: Vec::new(),
        bstar: Vec::new(),
        phi_x: Vec::new(),
        phi_y: Vec::new(),
    };
    for g in 0..g_count {
        let mass = masses[g];
        if mass.to_f64() < min_mass {
            return Err(Error::EmptyCluster {
                g,
                mass: mass.to_f64(),
                min: min_mass,
            });
        }
        out.pi.push(mass / T::of_f64(n as f64));

        let mut m = DMatrix::<T>::zeros(q, r);
        for i in 0..n {
            m += &data.x()[i] * z.z[(i, g)];
        }
        m /= mass;

        let (psi_y_inv, _) = crate::matnorm::chol_inv_logdet(&psi_y_prev[g]);
        let mut num = DMatrix::<T>::zeros(p, q + 1);
        let mut gram = DMatrix::<T>::zeros(q + 1, q + 1);
        for i in 0..n {
            let w = z.z[(i, g)];
            let xpsi = &designs[i] * &psi_y_inv;
            num += &data.y()[i] * xpsi.transpose() * w;
            gram += &xpsi * designs[i].transpose() * w;
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or(Error::SingularGram { g })?;
        let bstar = num * gram_inv;

        let (psi_x_inv, _) = crate::matnorm::chol_inv_logdet(&psi_x_prev[g]);
        let mut phi_x_acc = DMatrix::<T>::zeros(q, q);
        let mut phi_y_acc = DMatrix::<T>::zeros(p, p);
        for i in 0..n {
            let w = z.z[(i, g)];
            let rx = &data.x()[i] - &m;
            phi_x_acc += &rx * &psi_x_inv * rx.transpose() * w;
            let ry = &data.y()[i] - &bstar * &designs[i];
            phi_y_acc += &ry * &psi_y_inv * ry.transpose() * w;
        }
        phi_x_acc /= T::of_f64(r as f64) * mass;
        phi_y_acc /= T::of_f64(r as f64) * mass;
        out.phi_x
            .push(SpdMatrix::from_estimate(phi_x_acc, "Phi_X update")?);
        out.phi_y
            .push(SpdMatrix::from_estimate(phi_y_acc, "Phi_Y update")?);
        out.m.push(m);
        out.bstar.push(bstar);
    }
    Ok(out)
}

/// Updates Psi_X and Psi_Y given the freshly updated first block.
pub fn cm_step2<T: Scalar>(
    data: &Dataset<T>,
    designs: &[DMatrix<T>],
    z: &Responsibilities<T>,
    step1: &CmStep1<T>,
) -> Result<(Vec<SpdMatrix<T>>, Vec<SpdMatrix<T>>)> {
    let (n, g_count) = (data.n(), z.g());
    let (p, q, r) = (data.p(), data.q(), data.r());
    let masses = z.column_masses();
    let mut psi_x = Vec::new();
    let mut psi_y = Vec::new();
    for g in 0..g_count {
        let (phi_x_inv, _) = crate::matnorm::chol_inv_logdet(&step1.phi_x[g]);
        let (phi_y_inv, _) = crate::matnorm::chol_inv_logdet(&step1.phi_y[g]);
        let mut px = DMatrix::<T>::zeros(r, r);
        let mut py = DMatrix::<T>::zeros(r, r);
        for i in 0..n {
            let w = z.z[(i, g)];
            let rx = &data.x()[i] - &step1.m[g];
            px += rx.transpose() * &phi_x_inv * rx * w;
            let ry = &data.y()[i] - &step1.bstar[g] * &designs[i];
            py += ry.transpose() * &phi_y_inv * ry * w;
        }
        px /= T::of_f64(q as f64) * masses[g];
        py /= T::of_f64(p as f64) * masses[g];
        psi_x.push(
            SpdMatrix::from_estimate(px, "Psi_X update")
                .map_err(|_| Error::DegenerateData("degenerate Psi_X scatter".into()))?,
        );
        psi_y.push(
            SpdMatrix::from_estimate(py, "Psi_Y update")
                .map_err(|_| Error::DegenerateData("degenerate Psi_Y scatter".into()))?,
        );
    }
    Ok((psi_x, psi_y))
}

/// Fits the MN-CWM by ECM from the given initialization.
pub fn fit_ecm<T: Scalar>(
    data: &Dataset<T>,
    g: usize,
    init: &EcmInit<T>,
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    assert!(g >= 1, "G must be at least 1");
    assert!(data.n() > g, "need more observations than components");
    assert_eq!(init.z0.g(), g);

    let designs = data.designs();
    let mut z = init.z0.clone();
    let mut psi_x = init.psi_x0.clone();
    let mut psi_y = init.psi_y0.clone();
    let mut trace: Vec<T> = Vec::new();
    let mut params: Option<CwmParams<T>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iter {
        let step1 = cm_step1(data, &designs, &z, &psi_x, &psi_y)?;
        let (new_psi_x, new_psi_y) = cm_step2(data, &designs, &z, &step1)?;
        psi_x = new_psi_x;
        psi_y = new_psi_y;
        let components = (0..g)
            .map(|k| ComponentParams {
                pi: step1.pi[k],
                m: step1.m[k].clone(),
                phi_x: step1.phi_x[k].clone(),
                psi_x: psi_x[k].clone(),
                bstar: step1.bstar[k].clone(),
                phi_y: step1.phi_y[k].clone(),
                psi_y: psi_y[k].clone(),
            })
            .collect();
        let current = CwmParams::new(components)?;
        let dens = CwmDensities::new(&current)?;
        let mut ll = T::zero();
        for i in 0..data.n() {
            let vals: Vec<T> = (0..g)
                .map(|k| dens.component_log_density(k, &data.x()[i], &designs[i], &data.y()[i]))
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
        z = e_step_with(data, &designs, &dens)?;
    }

    let params = params.expect("at least one ECM iteration");
    let final_z = e_step(data, &params)?;
    let normalized = params.normalized()?;
    let loglik = *trace.last().expect("non-empty trace");
    let (p, q, r) = (data.p(), data.q(), data.r());
    let n_params = count_free_params(p, q, r, g, ModelKind::MnCwm);
    let bic_val = bic(loglik.to_f64(), n_params, data.n());
    Ok(FittedModel {
        map_labels: final_z.map_labels(),
        responsibilities: final_z,
        params: FitParams::Cwm(normalized),
        loglik_trace: trace,
        loglik,
        bic: T::of_f64(bic_val),
        n_params,
        converged,
        iterations,
        model_kind: ModelKind::MnCwm,
    })
}

/// Number of free parameters under the identifiability normalization.
pub fn count_free_params(p: usize, q: usize, r: usize, g: usize, kind: ModelKind) -> usize {
    let tri = |d: usize| d * (d + 1) / 2;
    let per_component = match kind {
        ModelKind::MnCwm => {
            q * r + (tri(q) - 1) + tri(r) + p * (q + 1) + (tri(p) - 1) + tri(r)
        }
        ModelKind::MnFmr => p * (q + 1) + (tri(p) - 1) + tri(r),
        ModelKind::MmnCwm => {
            let (qr, pr) = (q * r, p * r);
            qr + tri(qr) + pr * (1 + qr) + tri(pr)
        }
    };
    (g - 1) + g * per_component
}

/// BIC as 2 loglik - m ln N; larger is better.
pub fn bic(loglik: f64, n_params: usize, n: usize) -> f64 {
    2.0 * loglik - n_params as f64 * (n as f64).ln()
}
