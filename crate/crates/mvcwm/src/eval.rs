//! Model selection, spurious-solution screening, classification metrics,
//! label alignment and bias/MSE aggregation.

use std::collections::HashMap;

use itertools::Itertools;
use nalgebra::DMatrix;

use crate::cwm::{CwmParams, Dataset, FitConfig, FittedModel, ModelKind};
use crate::error::{Error, Result};
use crate::init::{best_initialization, derive_seed, StrategyReport};
use crate::scalar::Scalar;

/// Adjusted Rand index (Hubert-Arabie) from the contingency table.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2);
    let n = a.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut row: HashMap<usize, usize> = HashMap::new();
    let mut col: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *row.entry(x).or_default() += 1;
        *col.entry(y).or_default() += 1;
    }
    let c2 = |k: usize| (k * k.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = row.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = col.values().map(|&v| c2(v)).sum();
    let total = c2(n);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < f64::EPSILON {
        // both partitions trivial: treat agreement-at-chance as 0
        return if sum_ij == max_index && sum_a == sum_b {
            1.0
        } else {
            0.0
        };
    }
    (sum_ij - expected) / (max_index - expected)
}

/// Minimum-cost assignment on a square cost matrix (Hungarian algorithm,
/// potentials formulation). Returns the column matched to each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Percentage of units misclassified after the optimal matching of
/// predicted labels to true labels.
pub fn misclassification_rate(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let n = truth.len();
    let t_labels: Vec<usize> = truth.iter().copied().unique().sorted().collect();
    let p_labels: Vec<usize> = pred.iter().copied().unique().sorted().collect();
    let k = t_labels.len().max(p_labels.len());
    let t_index: HashMap<usize, usize> = t_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let p_index: HashMap<usize, usize> = p_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut confusion = vec![vec![0.0f64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t_index[&t]][p_index[&p]] += 1.0;
    }
    // maximize matches == minimize (n - matches)
    let cost: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&v| n as f64 - v).collect())
        .collect();
    let assignment = hungarian_min(&cost);
    let matches: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| confusion[i][j])
        .sum();
    100.0 * (n as f64 - matches) / n as f64
}

/// Thresholds of the spurious-solution screen.
pub const SPURIOUS_WEIGHT: f64 = 0.05;
pub const SPURIOUS_EIG_RATIO: f64 = 1e-8;
pub const SPURIOUS_MIN_POINTS: f64 = 5.0;

/// Flags converged fits that look like degenerate local maximizers: a tiny
/// mixing weight, a near-singular covariance, or a cluster with fewer than
/// five effective observations.
pub fn detect_spurious<T: Scalar>(fit: &FittedModel<T>) -> (bool, Vec<String>) {
    let mut reasons = Vec::new();
    for (g, w) in fit.params.weights().iter().enumerate() {
        if w.to_f64() <= SPURIOUS_WEIGHT {
            reasons.push(format!("component {g} weight {:.4} <= {SPURIOUS_WEIGHT}", w.to_f64()));
        }
    }
    for (k, cov) in fit.params.covariances().iter().enumerate() {
        let ratio = cov.eigenvalue_ratio().to_f64();
        if ratio < SPURIOUS_EIG_RATIO {
            reasons.push(format!(
                "covariance {k} eigenvalue ratio {ratio:.3e} < {SPURIOUS_EIG_RATIO:.0e}"
            ));
        }
    }
    for (g, mass) in fit.responsibilities.column_masses().iter().enumerate() {
        if mass.to_f64() < SPURIOUS_MIN_POINTS {
            reasons.push(format!(
                "component {g} holds {:.2} < {SPURIOUS_MIN_POINTS} effective points",
                mass.to_f64()
            ));
        }
    }
    (!reasons.is_empty(), reasons)
}

pub struct GCandidate<T: Scalar> {
    pub g: usize,
    pub loglik: f64,
    pub n_params: usize,
    pub bic: f64,
    pub spurious: bool,
    pub reasons: Vec<String>,
    pub strategy_report: Vec<StrategyReport>,
    pub fit: FittedModel<T>,
}

pub struct SelectionResult<T: Scalar> {
    pub best_g: usize,
    /// True when every candidate was screened as spurious and the returned
    /// choice is only the least-spurious one.
    pub all_spurious: bool,
    pub per_g: Vec<GCandidate<T>>,
    /// G values whose every initialization failed outright.
    pub failed_g: Vec<(usize, String)>,
}

impl<T: Scalar> SelectionResult<T> {
    pub fn best(&self) -> &GCandidate<T> {
        self.per_g
            .iter()
            .find(|c| c.g == self.best_g)
            .expect("best_g refers to a candidate")
    }
}

/// Fits every G in the range with the best-of-strategies initialization,
/// screens for spurious solutions and returns the argmax-BIC survivor.
pub fn select_model<T: Scalar>(
    data: &Dataset<T>,
    g_range: &[usize],
    kind: ModelKind,
    config: &FitConfig,
    seed: u64,
) -> Result<SelectionResult<T>> {
    assert!(!g_range.is_empty());
    let mut per_g = Vec::new();
    let mut failed_g = Vec::new();
    for &g in g_range {
        match best_initialization(data, g, kind, derive_seed(seed, 10, g as u64), config) {
            Ok(best) => {
                let (spurious, reasons) = detect_spurious(&best.fit);
                per_g.push(GCandidate {
                    g,
                    loglik: best.fit.loglik.to_f64(),
                    n_params: best.fit.n_params,
                    bic: best.fit.bic.to_f64(),
                    spurious,
                    reasons,
                    strategy_report: best.report,
                    fit: best.fit,
                });
            }
            Err(e) => failed_g.push((g, e.to_string())),
        }
    }
    if per_g.is_empty() {
        let detail = failed_g
            .iter()
            .map(|(g, e)| format!("G={g}: {e}"))
            .join("; ");
        return Err(Error::AllStrategiesFailed(detail));
    }
    let non_spurious: Vec<&GCandidate<T>> = per_g.iter().filter(|c| !c.spurious).collect();
    let (best_g, all_spurious) = if non_spurious.is_empty() {
        // least spurious: fewest trigger reasons, ties by BIC
        let best = per_g
            .iter()
            .min_by(|a, b| {
                a.reasons
                    .len()
                    .cmp(&b.reasons.len())
                    .then(b.bic.partial_cmp(&a.bic).unwrap())
            })
            .unwrap();
        (best.g, true)
    } else {
        let best = non_spurious
            .iter()
            .max_by(|a, b| a.bic.partial_cmp(&b.bic).unwrap())
            .unwrap();
        (best.g, false)
    };
    Ok(SelectionResult {
        best_g,
        all_spurious,
        per_g,
        failed_g,
    })
}

/// Permutation sigma (true index -> estimated index) minimizing the summed
/// Frobenius distances of B* and M. Exhaustive search; G is small here.
pub fn align_labels_to_truth<T: Scalar>(
    fitted: &CwmParams<T>,
    truth: &CwmParams<T>,
) -> Result<Vec<usize>> {
    if fitted.g() != truth.g() {
        return Err(Error::GMismatch {
            fitted: fitted.g(),
            truth: truth.g(),
        });
    }
    let g = truth.g();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..g).permutations(g) {
        let mut cost = 0.0;
        for (t, &e) in perm.iter().enumerate() {
            let db = (&fitted.components[e].bstar - &truth.components[t].bstar).norm();
            let dm = (&fitted.components[e].m - &truth.components[t].m).norm();
            cost += db.to_f64() + dm.to_f64();
        }
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, perm));
        }
    }
    Ok(best.unwrap().1)
}

/// Entrywise bias and MSE of aligned estimates across replications.
pub fn bias_mse<T: Scalar>(
    estimates: &[Vec<DMatrix<T>>],
    truth: &[DMatrix<T>],
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    assert!(estimates.len() >= 2, "need at least two replications");
    let g = truth.len();
    let r = estimates.len() as f64;
    let mut bias = Vec::with_capacity(g);
    let mut mse = Vec::with_capacity(g);
    for k in 0..g {
        let (rows, cols) = (truth[k].nrows(), truth[k].ncols());
        let mut mean = DMatrix::<f64>::zeros(rows, cols);
        let mut sq = DMatrix::<f64>::zeros(rows, cols);
        for rep in estimates {
            for i in 0..rows {
                for j in 0..cols {
                    let diff = rep[k][(i, j)].to_f64() - truth[k][(i, j)].to_f64();
                    mean[(i, j)] += diff;
                    sq[(i, j)] += diff * diff;
                }
            }
        }
        bias.push(mean / r);
        mse.push(sq / r);
    }
    (bias, mse)
}

/// Aggregate outcome of a replicated study.
#[derive(Debug, Clone)]
pub struct ReplicationSummary {
    pub replicates: usize,
    pub failures: usize,
    pub mean_ari: f64,
    /// Mean misclassification percentage after optimal matching.
    pub mean_eta: f64,
    /// Times BIC selected the generating G (selection plans only).
    pub true_g_hits: Option<usize>,
    pub bias: Option<Vec<DMatrix<f64>>>,
    pub mse: Option<Vec<DMatrix<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use itertools::Itertools;

    #[test]
    fn ari_basics() {
        assert_abs_diff_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0, epsilon = 0.0);
        // all-same-label vs anything: index equals its expectation
        assert_abs_diff_eq!(ari(&[0, 0, 0, 0], &[0, 1, 0, 1]), 0.0, epsilon = 0.0);
        // brute-force pair count over the 6 pairs gives -0.5
        assert_abs_diff_eq!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]), -0.5, epsilon = 1e-12);
        // symmetry
        let a = [0, 1, 1, 2, 2, 2, 0];
        let b = [1, 1, 0, 2, 0, 2, 0];
        assert_abs_diff_eq!(ari(&a, &b), ari(&b, &a), epsilon = 1e-15);
    }

    /// Brute-force ARI over all element pairs, used as the exhaustive oracle.
    pub fn ari_pair_counting(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut n11, mut n00, mut n10, mut n01) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            for j in (i + 1)..n {
                let same_a = a[i] == a[j];
                let same_b = b[i] == b[j];
                match (same_a, same_b) {
                    (true, true) => n11 += 1.0,
                    (false, false) => n00 += 1.0,
                    (true, false) => n10 += 1.0,
                    (false, true) => n01 += 1.0,
                }
            }
        }
        let total = n11 + n00 + n10 + n01;
        let expected = (n11 + n10) * (n11 + n01) / total;
        let max_index = 0.5 * ((n11 + n10) + (n11 + n01));
        if (max_index - expected).abs() < f64::EPSILON {
            return if n10 == 0.0 && n01 == 0.0 { 1.0 } else { 0.0 };
        }
        (n11 - expected) / (max_index - expected)
    }

    #[test]
    fn ari_matches_pair_counting_oracle() {
        // exhaustive over partitions of n <= 8 into <= 3 blocks
        for n in 2..=8usize {
            for labels_a in (0..n).map(|_| 0..3usize).multi_cartesian_product() {
                // compare against a fixed second partition to bound cost
                let labels_b: Vec<usize> = (0..n).map(|i| i % 2).collect();
                let fast = ari(&labels_a, &labels_b);
                let slow = ari_pair_counting(&labels_a, &labels_b);
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
            }
            // stop the blow-up early; the 8-element case is already 6561
            if n >= 6 {
                break;
            }
        }
    }

    #[test]
    fn misclassification_basics() {
        assert_abs_diff_eq!(
            misclassification_rate(&[0, 0, 1, 1], &[0, 0, 1, 1]),
            0.0,
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            misclassification_rate(&[0, 0, 1, 1], &[1, 1, 0, 0]),
            0.0,
            epsilon = 0.0
        );
        // 1 of 20 wrong after matching -> 5%
        let truth: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let mut pred = truth.clone();
        pred[0] = 1;
        assert_abs_diff_eq!(misclassification_rate(&truth, &pred), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn misclassification_matches_exhaustive_permutations() {
        // G <= 4, n <= 12: compare the Hungarian result against the
        // exhaustive-permutation minimum
        let cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
            ((0..12).map(|i| i % 4).collect(), (0..12).map(|i| (i + 1) % 4).collect()),
            ((0..12).map(|i| i / 3).collect(), (0..12).map(|i| (i / 4) % 3).collect()),
            (vec![0, 0, 1, 1, 2, 2, 3, 3], vec![3, 3, 2, 0, 1, 1, 0, 2]),
            (vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 3], vec![1, 2, 0, 1, 2, 0, 1, 2, 0, 0]),
        ];
        for (truth, pred) in cases {
            let n = truth.len();
            let k = 4usize;
            let mut best = f64::INFINITY;
            for perm in (0..k).permutations(k) {
                let wrong = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&t, &p)| perm[p] != t)
                    .count();
                best = best.min(100.0 * wrong as f64 / n as f64);
            }
            assert_abs_diff_eq!(misclassification_rate(&truth, &pred), best, epsilon = 1e-9);
        }
    }

    #[test]
    fn bias_mse_basics() {
        let truth = vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0])];
        let same = vec![
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0])],
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0])],
        ];
        let (bias, mse) = bias_mse(&same, &truth);
        assert_eq!(bias[0], DMatrix::zeros(1, 2));
        assert_eq!(mse[0], DMatrix::zeros(1, 2));
        let alternating = vec![
            vec![DMatrix::from_row_slice(1, 2, &[2.0, 3.0])],
            vec![DMatrix::from_row_slice(1, 2, &[0.0, 1.0])],
        ];
        let (bias, mse) = bias_mse(&alternating, &truth);
        assert_eq!(bias[0], DMatrix::zeros(1, 2));
        assert_eq!(mse[0], DMatrix::from_element(1, 2, 1.0));
    }
}
