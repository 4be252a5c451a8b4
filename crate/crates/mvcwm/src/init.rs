//! ECM initialization: random SPD draws for the column covariances, three
//! strategies for the starting responsibilities, and the driver that keeps
//! the strategy whose converged fit has the highest log-likelihood.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_fmr, fit_mmn_cwm, vectorize_dataset};
use crate::cwm::{fit_ecm, Dataset, EcmInit, FitConfig, FittedModel, ModelKind, Responsibilities};
use crate::error::{Error, Result};
use crate::matnorm::{log_density, MatNormParams, SpdMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    SoftRandom,
    KMeans,
    MatnormMixture,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::SoftRandom => "random",
            Strategy::KMeans => "k-means",
            Strategy::MatnormMixture => "mixture",
        }
    }
}

pub const SOFT_RANDOM_REPEATS: usize = 15;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;
const MIXTURE_RESTARTS: usize = 3;

/// Q diag(lambda) Q^T with lambda uniform on [1, 10] and Q from the QR
/// decomposition of a standard Gaussian matrix.
pub fn random_spd<T: Scalar>(dim: usize, seed: u64) -> SpdMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_spd_with_rng(dim, &mut rng)
}

pub fn random_spd_with_rng<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> SpdMatrix<T> {
    let gauss = DMatrix::from_fn(dim, dim, |_, _| T::standard_normal(rng));
    let q = gauss.qr().q();
    let one = T::one();
    let nine = T::of_f64(9.0);
    let lambda: Vec<T> = (0..dim).map(|_| one + nine * T::uniform_01(rng)).collect();
    let mut scaled = q.clone();
    for (j, &l) in lambda.iter().enumerate() {
        for i in 0..dim {
            scaled[(i, j)] *= l;
        }
    }
    SpdMatrix::from_estimate(scaled * q.transpose(), "random SPD").expect("construction is SPD")
}

/// Each row i.i.d. uniform on [0,1], normalized to sum to one.
pub fn init_soft_random<T: Scalar>(n: usize, g: usize, seed: u64) -> Responsibilities<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_soft_random_with_rng(n, g, &mut rng)
}

pub fn init_soft_random_with_rng<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    g: usize,
    rng: &mut R,
) -> Responsibilities<T> {
    let mut z = DMatrix::zeros(n, g);
    for i in 0..n {
        let mut sum = T::zero();
        for k in 0..g {
            let v = T::uniform_01(rng) + T::of_f64(1e-12);
            z[(i, k)] = v;
            sum += v;
        }
        for k in 0..g {
            z[(i, k)] /= sum;
        }
    }
    Responsibilities::new(z).expect("rows normalized by construction")
}

fn merged_vectors<T: Scalar>(data: &Dataset<T>) -> Vec<Vec<T>> {
    (0..data.n())
        .map(|i| {
            let mut v: Vec<T> = data.x()[i].iter().copied().collect();
            v.extend(data.y()[i].iter().copied());
            v
        })
        .collect()
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Lloyd's algorithm with k-means++ seeding on the merged vec(X)/vec(Y)
/// data; hard one-hot assignments.
pub fn init_kmeans<T: Scalar>(data: &Dataset<T>, g: usize, seed: u64) -> Result<Responsibilities<T>> {
    assert!(data.n() > g);
    let points = merged_vectors(data);
    let n = points.len();
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<(T, Vec<usize>)> = None;
    'restart: for _ in 0..KMEANS_RESTARTS {
        // k-means++ seeding
        let mut centers: Vec<Vec<T>> = Vec::with_capacity(g);
        centers.push(points[rng.random_range(0..n)].clone());
        while centers.len() < g {
            let d2: Vec<T> = points
                .iter()
                .map(|p| {
                    centers
                        .iter()
                        .map(|c| sq_dist(p, c))
                        .fold(T::of_f64(f64::INFINITY), |a, b| a.min(b))
                })
                .collect();
            let total = d2.iter().fold(T::zero(), |a, &b| a + b);
            if total <= T::zero() {
                centers.push(points[rng.random_range(0..n)].clone());
                continue;
            }
            let mut target = T::uniform_01(&mut rng) * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target <= d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            centers.push(points[chosen].clone());
        }

        let mut assign = vec![0usize; n];
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best_k = 0;
                let mut best_d = sq_dist(p, &centers[0]);
                for (k, c) in centers.iter().enumerate().skip(1) {
                    let d = sq_dist(p, c);
                    if d < best_d {
                        best_d = d;
                        best_k = k;
                    }
                }
                if assign[i] != best_k {
                    assign[i] = best_k;
                    changed = true;
                }
            }
            let mut counts = vec![0usize; g];
            let mut sums = vec![vec![T::zero(); dim]; g];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, &v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            if counts.iter().any(|&c| c == 0) {
                continue 'restart;
            }
            for k in 0..g {
                for s in sums[k].iter_mut() {
                    *s /= T::of_f64(counts[k] as f64);
                }
                centers[k] = sums[k].clone();
            }
            if !changed {
                break;
            }
        }
        let inertia = points
            .iter()
            .zip(&assign)
            .fold(T::zero(), |acc, (p, &k)| acc + sq_dist(p, &centers[k]));
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    let (_, assign) = best.ok_or(Error::DegenerateClustering)?;
    Ok(Responsibilities::from_labels(&assign, g))
}

/// Hard classification from a G-component mixture of matrix normals fitted
/// on the stacked [X; Y] matrices via EM with flip-flop M-steps.
pub fn init_matnorm_mixture<T: Scalar>(
    data: &Dataset<T>,
    g: usize,
    seed: u64,
) -> Result<Responsibilities<T>> {
    assert!(data.n() > g);
    let n = data.n();
    let (p, q, r) = (data.p(), data.q(), data.r());
    let stacked: Vec<DMatrix<T>> = (0..n)
        .map(|i| {
            let mut s = DMatrix::zeros(p + q, r);
            s.view_mut((0, 0), (q, r)).copy_from(&data.x()[i]);
            s.view_mut((q, 0), (p, r)).copy_from(&data.y()[i]);
            s
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(T, Responsibilities<T>)> = None;
    let mut last_err: Option<Error> = None;
    for _ in 0..MIXTURE_RESTARTS {
        let z0 = init_soft_random_with_rng(n, g, &mut rng);
        match matnorm_mixture_em(&stacked, g, z0) {
            Ok((ll, z)) => {
                if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                    best = Some((ll, z));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, z)) => Ok(z.hardened()),
        None => Err(last_err.unwrap_or(Error::DegenerateClustering)),
    }
}

fn matnorm_mixture_em<T: Scalar>(
    samples: &[DMatrix<T>],
    g: usize,
    z0: Responsibilities<T>,
) -> Result<(T, Responsibilities<T>)> {
    let n = samples.len();
    let mut z = z0;
    let mut prev_ll = T::of_f64(f64::NEG_INFINITY);
    for _ in 0..200 {
        let masses = z.column_masses();
        let mut comps: Vec<(T, MatNormParams<T>)> = Vec::with_capacity(g);
        for k in 0..g {
            if masses[k].to_f64() < 2.0 {
                return Err(Error::EmptyCluster {
                    g: k,
                    mass: masses[k].to_f64(),
                    min: 2.0,
                });
            }
            let weights: Vec<T> = (0..n).map(|i| z.z[(i, k)]).collect();
            let params = crate::matnorm::weighted_flipflop_mle(samples, &weights)?;
            comps.push((masses[k] / T::of_f64(n as f64), params));
        }
        let mut ll = T::zero();
        let mut new_z = DMatrix::zeros(n, g);
        for i in 0..n {
            let vals: Vec<T> = comps
                .iter()
                .map(|(pi, params)| pi.ln() + log_density(&samples[i], params))
                .collect();
            let lse = crate::cwm::log_sum_exp(&vals);
            if !lse.is_finite() {
                return Err(Error::AllZeroRow { i });
            }
            ll += lse;
            for k in 0..g {
                new_z[(i, k)] = (vals[k] - lse).exp();
            }
        }
        z = Responsibilities { z: new_z };
        if (ll - prev_ll).abs() < T::of_f64(1e-8) * (T::one() + ll.abs()) {
            return Ok((ll, z));
        }
        prev_ll = ll;
    }
    Ok((prev_ll, z))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub attempts: usize,
    pub failures: usize,
    /// Best converged observed-data log-likelihood this strategy reached.
    pub best_loglik: Option<f64>,
}

#[derive(Debug)]
pub struct BestInit<T: Scalar> {
    pub fit: FittedModel<T>,
    pub strategy: Strategy,
    pub report: Vec<StrategyReport>,
}

fn fit_for_kind<T: Scalar>(
    data: &Dataset<T>,
    vec_data: &Dataset<T>,
    g: usize,
    kind: ModelKind,
    z0: Responsibilities<T>,
    psi_x0: &[SpdMatrix<T>],
    psi_y0: &[SpdMatrix<T>],
    config: &FitConfig,
) -> Result<FittedModel<T>> {
    match kind {
        ModelKind::MnCwm => fit_ecm(
            data,
            g,
            &EcmInit {
                z0,
                psi_x0: psi_x0.to_vec(),
                psi_y0: psi_y0.to_vec(),
            },
            config,
        ),
        ModelKind::MnFmr => fit_fmr(
            data,
            g,
            &EcmInit {
                z0,
                psi_x0: psi_x0.to_vec(),
                psi_y0: psi_y0.to_vec(),
            },
            config,
        ),
        ModelKind::MmnCwm => fit_mmn_cwm(vec_data, g, &z0, config),
    }
}

/// Runs all three strategies (sharing the same random column-covariance
/// draws), fits the requested model from each candidate and keeps the fit
/// with the highest observed log-likelihood. Ties break toward the earlier
/// strategy in the fixed order (random, k-means, mixture).
pub fn best_initialization<T: Scalar>(
    data: &Dataset<T>,
    g: usize,
    kind: ModelKind,
    seed: u64,
    config: &FitConfig,
) -> Result<BestInit<T>> {
    let n = data.n();
    let r = data.r();
    let mut psi_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let psi_x0: Vec<SpdMatrix<T>> = (0..g).map(|_| random_spd_with_rng(r, &mut psi_rng)).collect();
    let psi_y0: Vec<SpdMatrix<T>> = (0..g).map(|_| random_spd_with_rng(r, &mut psi_rng)).collect();
    let vec_data = vectorize_dataset(data);

    let mut best: Option<(T, Strategy, FittedModel<T>)> = None;
    let mut report = Vec::new();
    let mut last_err: Option<Error> = None;

    let consider = |strategy: Strategy,
                        best: &mut Option<(T, Strategy, FittedModel<T>)>,
                        fit: FittedModel<T>| {
        let ll = fit.loglik;
        if best.as_ref().is_none_or(|(b, _, _)| ll > *b) {
            *best = Some((ll, strategy, fit));
        }
        ll
    };

    // soft random, repeated
    {
        let mut failures = 0;
        let mut best_ll: Option<f64> = None;
        for rep in 0..SOFT_RANDOM_REPEATS {
            let z0 = init_soft_random(n, g, derive_seed(seed, 1, rep as u64));
            match fit_for_kind(data, &vec_data, g, kind, z0, &psi_x0, &psi_y0, config) {
                Ok(fit) => {
                    let ll = consider(Strategy::SoftRandom, &mut best, fit).to_f64();
                    if best_ll.is_none_or(|b| ll > b) {
                        best_ll = Some(ll);
                    }
                }
                Err(e) => {
                    failures += 1;
                    last_err = Some(e);
                }
            }
        }
        report.push(StrategyReport {
            strategy: Strategy::SoftRandom,
            attempts: SOFT_RANDOM_REPEATS,
            failures,
            best_loglik: best_ll,
        });
    }

    // k-means
    {
        let outcome = init_kmeans(data, g, derive_seed(seed, 2, 0)).and_then(|z0| {
            fit_for_kind(data, &vec_data, g, kind, z0, &psi_x0, &psi_y0, config)
        });
        let (failures, best_ll) = match outcome {
            Ok(fit) => (0, Some(consider(Strategy::KMeans, &mut best, fit).to_f64())),
            Err(e) => {
                last_err = Some(e);
                (1, None)
            }
        };
        report.push(StrategyReport {
            strategy: Strategy::KMeans,
            attempts: 1,
            failures,
            best_loglik: best_ll,
        });
    }

    // matrix-normal mixture
    {
        let outcome = init_matnorm_mixture(data, g, derive_seed(seed, 3, 0)).and_then(|z0| {
            fit_for_kind(data, &vec_data, g, kind, z0, &psi_x0, &psi_y0, config)
        });
        let (failures, best_ll) = match outcome {
            Ok(fit) => (
                0,
                Some(consider(Strategy::MatnormMixture, &mut best, fit).to_f64()),
            ),
            Err(e) => {
                last_err = Some(e);
                (1, None)
            }
        };
        report.push(StrategyReport {
            strategy: Strategy::MatnormMixture,
            attempts: 1,
            failures,
            best_loglik: best_ll,
        });
    }

    match best {
        Some((_, strategy, fit)) => Ok(BestInit {
            fit,
            strategy,
            report,
        }),
        None => Err(Error::AllStrategiesFailed(
            last_err.map(|e| e.to_string()).unwrap_or_default(),
        )),
    }
}

/// Counter-based derivation of independent RNG streams.
pub fn derive_seed(master: u64, stream: u64, counter: u64) -> u64 {
    // SplitMix64 finalizer over the packed inputs
    let mut x = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(counter.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}
