//! Sequential K-fold cross-fitting: fold bookkeeping, the DML1 and DML2 solves, the
//! sandwich variance and identification diagnostics.
//!
//! DML2 solves the pooled moment equation
//! `(1/K) Σ_k (1/|I_k|) Σ_{i∈I_k} (ψᵃ_i θ + ψᵇ_i) = 0`; DML1 solves each fold separately
//! and averages the K solutions. Pooled means use the printed double average, which
//! differs from a flat `1/n` mean only when folds are unequal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scores::LinearScore;
use crate::summation::CompensatedVec;
use crate::{Error, Result};

/// Smallest singular value below which a Jacobian is treated as singular.
pub const SINGULAR_THRESHOLD: f64 = 1e-10;

/// `index mod k_folds`.
pub fn assign_fold(index: usize, k_folds: usize) -> Result<usize> {
    if k_folds < 2 {
        return Err(Error::Parameter(format!(
            "cross-fitting needs at least 2 folds, got {k_folds}"
        )));
    }
    Ok(index % k_folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldRule {
    RoundRobin,
    SeededRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    Dml1,
    #[default]
    Dml2,
}

/// Fold membership for a growing sample.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    k_folds: usize,
    rule: FoldRule,
    assignments: Vec<usize>,
    rng: Option<ChaCha8Rng>,
}

impl FoldPlan {
    pub fn new(k_folds: usize, rule: FoldRule) -> Result<Self> {
        assign_fold(0, k_folds)?;
        let rng = match rule {
            FoldRule::RoundRobin => None,
            FoldRule::SeededRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(Self {
            k_folds,
            rule,
            assignments: Vec::new(),
            rng,
        })
    }

    /// Plan with the first `n` indices already assigned.
    pub fn with_len(k_folds: usize, rule: FoldRule, n: usize) -> Result<Self> {
        let mut plan = Self::new(k_folds, rule)?;
        for _ in 0..n {
            plan.push();
        }
        Ok(plan)
    }

    /// Plan from explicit assignments (fold ids must be `< k_folds`).
    pub fn from_assignments(k_folds: usize, assignments: Vec<usize>) -> Result<Self> {
        assign_fold(0, k_folds)?;
        if let Some(&bad) = assignments.iter().find(|&&f| f >= k_folds) {
            return Err(Error::Parameter(format!(
                "fold id {bad} out of range for {k_folds} folds"
            )));
        }
        Ok(Self {
            k_folds,
            rule: FoldRule::RoundRobin,
            assignments,
            rng: None,
        })
    }

    /// Assign the next arrival and return its fold.
    pub fn push(&mut self) -> usize {
        let index = self.assignments.len();
        let fold = match self.rng.as_mut() {
            None => index % self.k_folds,
            Some(rng) => rng.random_range(0..self.k_folds),
        };
        self.assignments.push(fold);
        fold
    }

    pub fn k_folds(&self) -> usize {
        self.k_folds
    }

    pub fn rule(&self) -> FoldRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn fold_of(&self, index: usize) -> usize {
        self.assignments[index]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Indices belonging to each fold, in arrival order.
    pub fn fold_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.k_folds];
        for (i, &f) in self.assignments.iter().enumerate() {
            members[f].push(i);
        }
        members
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub count: usize,
    /// Fold-level solve; `None` when the fold Jacobian is singular.
    pub theta: Option<Vec<f64>>,
    pub sigma_sq: Option<Vec<f64>>,
}

/// Cross-fitted estimate with its sandwich variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlFit {
    pub theta_hat: DVector<f64>,
    /// Pooled mean of ψᵃ.
    pub j_hat: DMatrix<f64>,
    pub sigma_sq_hat: DMatrix<f64>,
    /// Pooled mean of ψψᵀ at θ̂ (the "meat" of the sandwich).
    pub score_second_moment: DMatrix<f64>,
    pub n: usize,
    pub per_fold: Vec<FoldSummary>,
    pub aggregation: Aggregation,
    /// Magnitude of the most negative eigenvalue clamped away by the PSD projection.
    pub psd_clamp: f64,
}

impl DmlFit {
    /// Scalar estimate (first coordinate).
    pub fn theta(&self) -> f64 {
        self.theta_hat[0]
    }

    /// Scalar standard deviation `σ̂` (first diagonal entry of σ̂², square-rooted).
    pub fn sigma(&self) -> f64 {
        self.sigma_sq_hat[(0, 0)].max(0.0).sqrt()
    }
}

struct FoldMoments {
    count: usize,
    mean_a: DMatrix<f64>,
    mean_b: DVector<f64>,
}

fn check_inputs(scores: &[LinearScore], plan: &FoldPlan) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Parameter("no scores to solve".into()));
    }
    if scores.len() != plan.len() {
        return Err(Error::Parameter(format!(
            "{} scores but the fold plan covers {} observations",
            scores.len(),
            plan.len()
        )));
    }
    let d = scores[0].dim();
    if scores
        .iter()
        .any(|s| s.dim() != d || s.psi_a.nrows() != d || s.psi_a.ncols() != d)
    {
        return Err(Error::Parameter("inconsistent score dimensions".into()));
    }
    if let Some(k) = plan.fold_sizes().iter().position(|&c| c == 0) {
        return Err(Error::NotReady(format!("fold {k} is empty")));
    }
    Ok(d)
}

fn fold_moments(scores: &[LinearScore], members: &[usize], d: usize) -> FoldMoments {
    let mut acc_a = CompensatedVec::zeros(d * d);
    let mut acc_b = CompensatedVec::zeros(d);
    for &i in members {
        acc_a.add_slice(scores[i].psi_a.as_slice());
        acc_b.add_slice(scores[i].psi_b.as_slice());
    }
    FoldMoments {
        count: acc_a.count(),
        mean_a: DMatrix::from_vec(d, d, acc_a.mean()),
        mean_b: DVector::from_vec(acc_b.mean()),
    }
}

fn all_fold_moments(scores: &[LinearScore], plan: &FoldPlan, d: usize) -> Vec<FoldMoments> {
    plan.fold_members()
        .par_iter()
        .map(|m| fold_moments(scores, m, d))
        .collect()
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

/// `−J⁻¹ b`, or an identification error if `J` is numerically singular.
fn linear_solve(j: &DMatrix<f64>, b: &DVector<f64>, fold: Option<usize>) -> Result<DVector<f64>> {
    let smin = smallest_singular_value(j);
    if !(smin > SINGULAR_THRESHOLD) {
        return Err(Error::Identification {
            smallest_singular_value: smin,
            fold,
        });
    }
    let inv = j.clone().try_inverse().ok_or(Error::Identification {
        smallest_singular_value: smin,
        fold,
    })?;
    Ok(-(inv * b))
}

fn pooled_mean<'a, T>(parts: impl Iterator<Item = &'a T>, k: usize, zero: T) -> T
where
    T: 'a + Clone + std::ops::AddAssign<&'a T> + std::ops::DivAssign<f64>,
{
    let mut acc = zero;
    for p in parts {
        acc += p;
    }
    acc /= k as f64;
    acc
}

/// DML2: solve the pooled moment equation.
pub fn solve_dml2(scores: &[LinearScore], plan: &FoldPlan) -> Result<DmlFit> {
    let d = check_inputs(scores, plan)?;
    let k = plan.k_folds();
    let moments = all_fold_moments(scores, plan, d);
    let j_hat = pooled_mean(moments.iter().map(|m| &m.mean_a), k, DMatrix::zeros(d, d));
    let b_hat = pooled_mean(moments.iter().map(|m| &m.mean_b), k, DVector::zeros(d));
    let theta_hat = linear_solve(&j_hat, &b_hat, None)?;
    finish(scores, plan, d, theta_hat, j_hat, moments, Aggregation::Dml2)
}

/// DML1: solve each fold separately and average the solutions with weight 1/K.
pub fn solve_dml1(scores: &[LinearScore], plan: &FoldPlan) -> Result<DmlFit> {
    let d = check_inputs(scores, plan)?;
    let k = plan.k_folds();
    let moments = all_fold_moments(scores, plan, d);
    let mut thetas = Vec::with_capacity(k);
    for (f, m) in moments.iter().enumerate() {
        thetas.push(linear_solve(&m.mean_a, &m.mean_b, Some(f))?);
    }
    let theta_hat = pooled_mean(thetas.iter(), k, DVector::zeros(d));
    let j_hat = pooled_mean(moments.iter().map(|m| &m.mean_a), k, DMatrix::zeros(d, d));
    finish(scores, plan, d, theta_hat, j_hat, moments, Aggregation::Dml1)
}

fn finish(
    scores: &[LinearScore],
    plan: &FoldPlan,
    d: usize,
    theta_hat: DVector<f64>,
    j_hat: DMatrix<f64>,
    moments: Vec<FoldMoments>,
    aggregation: Aggregation,
) -> Result<DmlFit> {
    let members = plan.fold_members();
    let per_fold_raw: Vec<(Option<DVector<f64>>, Option<DMatrix<f64>>)> = moments
        .iter()
        .zip(&members)
        .map(|(m, idx)| match linear_solve(&m.mean_a, &m.mean_b, None) {
            Ok(theta_k) => {
                let omega = second_moment(scores, idx, &theta_k, d);
                let sigma = sandwich(&m.mean_a, &omega).ok().map(|(s, _)| s);
                (Some(theta_k), sigma)
            }
            Err(_) => (None, None),
        })
        .collect();

    let (sigma_sq_hat, score_second_moment, psd_clamp) = match aggregation {
        Aggregation::Dml2 => {
            let omega = pooled_second_moment(scores, &members, &theta_hat, d);
            let (s, clamp) = sandwich(&j_hat, &omega)?;
            (s, omega, clamp)
        }
        Aggregation::Dml1 => {
            let mut acc = DMatrix::zeros(d, d);
            for (f, (theta_k, _)) in per_fold_raw.iter().enumerate() {
                let theta_k = theta_k.as_ref().expect("dml1 solved every fold");
                let omega_k = second_moment(scores, &members[f], theta_k, d);
                let (s, _) = sandwich(&moments[f].mean_a, &omega_k)?;
                acc += s;
            }
            acc /= plan.k_folds() as f64;
            let (s, clamp) = project_psd(acc);
            let omega = pooled_second_moment(scores, &members, &theta_hat, d);
            (s, omega, clamp)
        }
    };

    let per_fold = moments
        .iter()
        .zip(per_fold_raw)
        .map(|(m, (theta, sigma))| FoldSummary {
            count: m.count,
            theta: theta.map(|t| t.as_slice().to_vec()),
            sigma_sq: sigma.map(|s| s.as_slice().to_vec()),
        })
        .collect();

    Ok(DmlFit {
        theta_hat,
        j_hat,
        sigma_sq_hat,
        score_second_moment,
        n: scores.len(),
        per_fold,
        aggregation,
        psd_clamp,
    })
}

fn second_moment(scores: &[LinearScore], idx: &[usize], theta: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut acc = CompensatedVec::zeros(d * d);
    for &i in idx {
        let psi = scores[i].eval(theta);
        let outer = &psi * psi.transpose();
        acc.add_slice(outer.as_slice());
    }
    DMatrix::from_vec(d, d, acc.mean())
}

fn pooled_second_moment(
    scores: &[LinearScore],
    members: &[Vec<usize>],
    theta: &DVector<f64>,
    d: usize,
) -> DMatrix<f64> {
    let parts: Vec<DMatrix<f64>> = members
        .par_iter()
        .map(|idx| second_moment(scores, idx, theta, d))
        .collect();
    pooled_mean(parts.iter(), members.len(), DMatrix::zeros(d, d))
}

/// `J⁻¹ Ω J⁻ᵀ`, symmetrised and projected onto the PSD cone.
fn sandwich(j: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let smin = smallest_singular_value(j);
    let inv = if smin > SINGULAR_THRESHOLD {
        j.clone().try_inverse()
    } else {
        None
    }
    .ok_or(Error::Identification {
        smallest_singular_value: smin,
        fold: None,
    })?;
    let s = &inv * omega * inv.transpose();
    Ok(project_psd(s))
}

fn project_psd(s: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (&s + s.transpose()) * 0.5;
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return if v < 0.0 {
            (DMatrix::zeros(1, 1), -v)
        } else {
            (sym, 0.0)
        };
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, 0.0);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((&rebuilt + rebuilt.transpose()) * 0.5, -min)
}

/// Sandwich variance for a given estimate, computed as for the chosen aggregation.
///
/// For DML2 this is `Ĵ⁻¹ · mean_k mean_{I_k}(ψψᵀ at θ̂) · Ĵ⁻ᵀ` with the supplied `j_hat`.
/// For DML1 each fold contributes its own sandwich built from the fold's Jacobian and
/// fold-level solution, and the K sandwiches are averaged; `theta_hat`/`j_hat` are only
/// used to validate dimensions there.
pub fn estimate_variance(
    scores: &[LinearScore],
    theta_hat: &DVector<f64>,
    j_hat: &DMatrix<f64>,
    plan: &FoldPlan,
    variant: Aggregation,
) -> Result<DMatrix<f64>> {
    let d = check_inputs(scores, plan)?;
    if theta_hat.len() != d || j_hat.nrows() != d || j_hat.ncols() != d {
        return Err(Error::Parameter("estimate dimensions do not match scores".into()));
    }
    let members = plan.fold_members();
    match variant {
        Aggregation::Dml2 => {
            let omega = pooled_second_moment(scores, &members, theta_hat, d);
            Ok(sandwich(j_hat, &omega)?.0)
        }
        Aggregation::Dml1 => {
            let mut acc = DMatrix::zeros(d, d);
            for (f, idx) in members.iter().enumerate() {
                let m = fold_moments(scores, idx, d);
                let theta_k = linear_solve(&m.mean_a, &m.mean_b, Some(f))?;
                let omega = second_moment(scores, idx, &theta_k, d);
                acc += sandwich(&m.mean_a, &omega)?.0;
            }
            acc /= plan.k_folds() as f64;
            Ok(project_psd(acc).0)
        }
    }
}

/// Checks on the identification and non-degeneracy conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub jacobian_min_singular_value: f64,
    pub jacobian_max_singular_value: f64,
    pub score_min_eigenvalue: f64,
    pub c0: f64,
    pub c1: f64,
    pub jacobian_pass: bool,
    pub nondegenerate_pass: bool,
}

impl IdentificationReport {
    pub fn pass(&self) -> bool {
        self.jacobian_pass && self.nondegenerate_pass
    }
}

/// Singular values of Ĵ must lie in `[c0, c1]`; the smallest eigenvalue of the score
/// second-moment matrix must be at least `c0`.
pub fn identification_diagnostics(fit: &DmlFit, c0: f64, c1: f64) -> IdentificationReport {
    let sv = fit.j_hat.singular_values();
    let (smin, smax) = (sv.min(), sv.max());
    let omega = &fit.score_second_moment;
    let eig_min = if omega.nrows() == 0 {
        f64::NAN
    } else {
        SymmetricEigen::new((omega + omega.transpose()) * 0.5)
            .eigenvalues
            .min()
    };
    IdentificationReport {
        jacobian_min_singular_value: smin,
        jacobian_max_singular_value: smax,
        score_min_eigenvalue: eig_min,
        c0,
        c1,
        jacobian_pass: smin >= c0 && smax <= c1,
        nondegenerate_pass: eig_min >= c0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(a: f64, b: f64) -> LinearScore {
        LinearScore::scalar(a, b)
    }

    /// Two folds given as (ψᵃ, ψᵇ) lists, interleaved into a round-robin plan.
    fn two_folds(f0: &[(f64, f64)], f1: &[(f64, f64)]) -> (Vec<LinearScore>, FoldPlan) {
        let mut scores = Vec::new();
        let mut assign = Vec::new();
        for (i, pair) in f0.iter().zip(f1).enumerate() {
            let _ = i;
            scores.push(s(pair.0 .0, pair.0 .1));
            assign.push(0);
            scores.push(s(pair.1 .0, pair.1 .1));
            assign.push(1);
        }
        (scores, FoldPlan::from_assignments(2, assign).unwrap())
    }

    #[test]
    fn assign_fold_examples() {
        assert_eq!(assign_fold(0, 4).unwrap(), 0);
        assert_eq!(assign_fold(5, 4).unwrap(), 1);
        assert!(assign_fold(3, 1).is_err());
        let plan = FoldPlan::with_len(4, FoldRule::RoundRobin, 8).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2, 2, 2, 2]);
        let plan = FoldPlan::with_len(4, FoldRule::RoundRobin, 10).unwrap();
        assert_eq!(plan.fold_sizes(), vec![3, 3, 2, 2]);
        assert!(FoldPlan::new(1, FoldRule::RoundRobin).is_err());
    }

    #[test]
    fn seeded_random_plan_is_reproducible() {
        let a = FoldPlan::with_len(5, FoldRule::SeededRandom { seed: 9 }, 200).unwrap();
        let b = FoldPlan::with_len(5, FoldRule::SeededRandom { seed: 9 }, 200).unwrap();
        assert_eq!(a.assignments(), b.assignments());
        assert!(a.fold_sizes().iter().all(|&c| c > 20));
    }

    #[test]
    fn dml2_sample_mean_reduction() {
        let (scores, plan) = two_folds(&[(-1.0, 1.0), (-1.0, 3.0)], &[(-1.0, 2.0), (-1.0, 2.0)]);
        let fit = solve_dml2(&scores, &plan).unwrap();
        assert_eq!(fit.theta(), 2.0);
    }

    #[test]
    fn dml2_hand_solved() {
        // fold means (−1.5, 2) and (−1, 3); pooled (−1.25, 2.5) → θ = 2
        let (scores, plan) = two_folds(&[(-1.0, 1.0), (-2.0, 3.0)], &[(-1.0, 2.0), (-1.0, 4.0)]);
        let fit = solve_dml2(&scores, &plan).unwrap();
        assert!((fit.theta() - 2.0).abs() < 1e-15);
        assert!((fit.j_hat[(0, 0)] + 1.25).abs() < 1e-15);
    }

    #[test]
    fn dml1_hand_solved() {
        let (scores, plan) = two_folds(&[(-1.0, 1.0), (-2.0, 3.0)], &[(-1.0, 2.0), (-1.0, 4.0)]);
        let fit = solve_dml1(&scores, &plan).unwrap();
        assert!((fit.theta() - 13.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn constant_scores_and_homogeneous_folds() {
        let scores: Vec<_> = (0..12).map(|_| s(-1.0, 4.5)).collect();
        let plan = FoldPlan::with_len(3, FoldRule::RoundRobin, 12).unwrap();
        let d2 = solve_dml2(&scores, &plan).unwrap();
        let d1 = solve_dml1(&scores, &plan).unwrap();
        assert_eq!(d2.theta(), 4.5);
        assert_eq!(d1.theta(), 4.5);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let scores: Vec<_> = (0..6).map(|i| s(0.0, i as f64)).collect();
        let plan = FoldPlan::with_len(2, FoldRule::RoundRobin, 6).unwrap();
        match solve_dml2(&scores, &plan) {
            Err(Error::Identification {
                smallest_singular_value,
                fold: None,
            }) => assert_eq!(smallest_singular_value, 0.0),
            other => panic!("{other:?}"),
        }
        let mut scores: Vec<_> = (0..6).map(|_| s(-1.0, 1.0)).collect();
        scores[1] = s(0.0, 1.0);
        scores[3] = s(0.0, 1.0);
        scores[5] = s(0.0, 1.0);
        assert!(matches!(
            solve_dml1(&scores, &plan),
            Err(Error::Identification { fold: Some(1), .. })
        ));
    }

    #[test]
    fn empty_fold_is_not_ready() {
        let scores = vec![s(-1.0, 1.0)];
        let plan = FoldPlan::with_len(2, FoldRule::RoundRobin, 1).unwrap();
        assert!(matches!(solve_dml2(&scores, &plan), Err(Error::NotReady(_))));
    }

    #[test]
    fn variance_examples() {
        let plan = FoldPlan::with_len(2, FoldRule::RoundRobin, 2).unwrap();
        let theta = DVector::from_element(1, 0.0);

        let scores = vec![s(-1.0, 1.0), s(-1.0, -1.0)];
        let v = estimate_variance(&scores, &theta, &DMatrix::from_element(1, 1, -1.0), &plan, Aggregation::Dml2).unwrap();
        assert_eq!(v[(0, 0)], 1.0);

        let scores = vec![s(-1.0, 0.0), s(-1.0, 0.0)];
        let v = estimate_variance(&scores, &theta, &DMatrix::from_element(1, 1, -1.0), &plan, Aggregation::Dml2).unwrap();
        assert_eq!(v[(0, 0)], 0.0);

        let scores = vec![s(-2.0, 2.0), s(-2.0, -2.0)];
        let v = estimate_variance(&scores, &theta, &DMatrix::from_element(1, 1, -2.0), &plan, Aggregation::Dml2).unwrap();
        assert_eq!(v[(0, 0)], 1.0);

        assert!(estimate_variance(&scores, &theta, &DMatrix::zeros(1, 1), &plan, Aggregation::Dml2).is_err());
    }

    #[test]
    fn dml1_variance_averages_fold_sandwiches() {
        // fold 0: ψᵃ ≡ −1, ψᵇ ∈ {0, 2} → θ₀ = 1, σ² = 1; fold 1: ψᵃ ≡ −2, ψᵇ ∈ {0, 4} → θ₁ = 1, σ² = 1
        let (scores, plan) = two_folds(&[(-1.0, 0.0), (-1.0, 2.0)], &[(-2.0, 0.0), (-2.0, 4.0)]);
        let fit = solve_dml1(&scores, &plan).unwrap();
        assert!((fit.theta() - 1.0).abs() < 1e-15);
        assert!((fit.sigma_sq_hat[(0, 0)] - 1.0).abs() < 1e-15);
        let v = estimate_variance(&scores, &fit.theta_hat, &fit.j_hat, &plan, Aggregation::Dml1).unwrap();
        assert!((v[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vector_parameter_solve() {
        // ψᵃ = −I, ψᵇ = (1, 2) → θ = (1, 2)
        let score = LinearScore {
            psi_a: -DMatrix::identity(2, 2),
            psi_b: DVector::from_vec(vec![1.0, 2.0]),
        };
        let scores = vec![score; 6];
        let plan = FoldPlan::with_len(3, FoldRule::RoundRobin, 6).unwrap();
        let fit = solve_dml2(&scores, &plan).unwrap();
        assert_eq!(fit.theta_hat.as_slice(), &[1.0, 2.0]);
        assert_eq!(fit.sigma_sq_hat, DMatrix::zeros(2, 2));
    }

    #[test]
    fn diagnostics_examples() {
        let mk = |j: DMatrix<f64>| DmlFit {
            theta_hat: DVector::zeros(j.nrows()),
            score_second_moment: DMatrix::identity(j.nrows(), j.nrows()),
            sigma_sq_hat: DMatrix::identity(j.nrows(), j.nrows()),
            j_hat: j,
            n: 10,
            per_fold: vec![],
            aggregation: Aggregation::Dml2,
            psd_clamp: 0.0,
        };
        let r = identification_diagnostics(&mk(DMatrix::from_element(1, 1, -1.0)), 0.1, 10.0);
        assert!(r.pass());
        assert_eq!(r.jacobian_min_singular_value, 1.0);

        let r = identification_diagnostics(&mk(DMatrix::zeros(1, 1)), 0.1, 10.0);
        assert!(!r.pass());
        assert_eq!(r.jacobian_min_singular_value, 0.0);

        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -3.0]));
        let r = identification_diagnostics(&mk(j), 0.5, 2.0);
        assert!(!r.jacobian_pass);
        assert!((r.jacobian_max_singular_value - 3.0).abs() < 1e-12);
    }

    fn arb_scores() -> impl Strategy<Value = (Vec<(f64, f64)>, usize)> {
        (proptest::collection::vec((-3.0f64..-0.2, -10.0f64..10.0), 6..60), 2usize..6)
    }

    proptest! {
        #[test]
        fn negative_identity_gives_grand_mean(bs in proptest::collection::vec(-10.0f64..10.0, 2..50), k in 2usize..6) {
            prop_assume!(bs.len() >= k);
            let scores: Vec<_> = bs.iter().map(|&b| s(-1.0, b)).collect();
            let plan = FoldPlan::with_len(k, FoldRule::RoundRobin, bs.len()).unwrap();
            // with unequal folds the double average differs from the flat mean, so compare
            // against the mean of fold means
            let sizes = plan.fold_sizes();
            let mut fold_means = vec![0.0; k];
            for (i, b) in bs.iter().enumerate() { fold_means[i % k] += b / sizes[i % k] as f64; }
            let expected = fold_means.iter().sum::<f64>() / k as f64;
            let d2 = solve_dml2(&scores, &plan).unwrap().theta();
            let d1 = solve_dml1(&scores, &plan).unwrap().theta();
            prop_assert!((d2 - expected).abs() < 1e-12);
            prop_assert!((d1 - expected).abs() < 1e-12);
        }

        #[test]
        fn dml2_solves_pooled_moment((pairs, k) in arb_scores()) {
            prop_assume!(pairs.len() >= k);
            let scores: Vec<_> = pairs.iter().map(|&(a, b)| s(a, b)).collect();
            let plan = FoldPlan::with_len(k, FoldRule::RoundRobin, scores.len()).unwrap();
            let fit = solve_dml2(&scores, &plan).unwrap();
            let members = plan.fold_members();
            let resid: f64 = members.iter().map(|idx| {
                idx.iter().map(|&i| scores[i].eval_scalar(fit.theta())).sum::<f64>() / idx.len() as f64
            }).sum::<f64>() / k as f64;
            prop_assert!(resid.abs() <= 1e-10);
            let v = &fit.sigma_sq_hat;
            prop_assert!((v - v.transpose()).abs().max() <= 1e-12);
            prop_assert!(v[(0, 0)] >= -1e-12);
        }

        #[test]
        fn within_fold_permutation_invariance((pairs, k) in arb_scores(), seed in 0u64..1000) {
            prop_assume!(pairs.len() >= 2 * k);
            let scores: Vec<_> = pairs.iter().map(|&(a, b)| s(a, b)).collect();
            let plan = FoldPlan::with_len(k, FoldRule::RoundRobin, scores.len()).unwrap();
            // rotate members within each fold
            let mut permuted = scores.clone();
            for idx in plan.fold_members() {
                let shift = (seed as usize) % idx.len();
                for (j, &i) in idx.iter().enumerate() {
                    permuted[i] = scores[idx[(j + shift) % idx.len()]].clone();
                }
            }
            let a = solve_dml2(&scores, &plan).unwrap();
            let b = solve_dml2(&permuted, &plan).unwrap();
            prop_assert!((a.theta() - b.theta()).abs() <= 1e-12 * (1.0 + a.theta().abs()));
            prop_assert!((a.sigma_sq_hat[(0,0)] - b.sigma_sq_hat[(0,0)]).abs() <= 1e-12 * (1.0 + a.sigma_sq_hat[(0,0)]));
        }
    }
}
