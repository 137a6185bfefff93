//! Normal-mixture (Robbins) confidence-sequence boundaries.
//!
//! For an asymptotically linear estimator with standard deviation `σ̂`, the interval
//!
//! ```text
//! θ̂ ± σ̂ · sqrt( 2(nρ²+1)/(n²ρ²) · log( sqrt(nρ²+1)/α ) )
//! ```
//!
//! holds simultaneously for every `n ≥ 1` with asymptotic probability `1-α`. The
//! d-dimensional region version bounds the squared standardized norm by
//! `2(nρ²+1)/(n²ρ²) · log((nρ²+1)^{d/2}/α)`. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mixture scale ρ, error level α and parameter dimension d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    rho: f64,
    alpha: f64,
    dim: usize,
}

impl MixtureParams {
    pub fn new(rho: f64, alpha: f64, dim: usize) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
        }
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::Parameter("dimension must be at least 1".into()));
        }
        Ok(Self { rho, alpha, dim })
    }

    /// Scalar (d = 1) parameters.
    pub fn scalar(rho: f64, alpha: f64) -> Result<Self> {
        Self::new(rho, alpha, 1)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// Which algebraic form of the scalar boundary to evaluate.
///
/// `Mixture` is the d = 1 specialisation of the region threshold and is the default.
/// `Printed` reproduces the variant `(2nρ²+1)/(n²ρ²) · log((nρ²+1)/α)` that appears in
/// some published statements of the scalar interval; it is wider and kept only for
/// comparison with results computed that way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BoundaryForm {
    #[default]
    Mixture,
    Printed,
}

/// A closed interval. `lower > upper` marks an empty interval, which only arises from
/// running intersections; see [`Interval::is_empty`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower > upper {
            return Err(Error::Parameter(format!(
                "interval bounds out of order: [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn centered(center: f64, radius: f64) -> Self {
        Self {
            lower: center - radius,
            upper: center + radius,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lower > self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        Interval {
            lower: self.lower.max(other.lower),
            upper: self.upper.min(other.upper),
        }
    }
}

/// Squared-radius threshold for the standardized d-dimensional confidence region at
/// sample size `n`.
pub fn region_threshold(n: u64, params: &MixtureParams) -> Result<f64> {
    if n == 0 {
        return Err(Error::Parameter("sample size must be at least 1".into()));
    }
    let n = n as f64;
    let rho_sq = params.rho * params.rho;
    let x = n * rho_sq;
    // log((1+x)^{d/2}/α) with log1p for accuracy when nρ² is small
    let log_term = 0.5 * params.dim as f64 * x.ln_1p() - params.alpha.ln();
    Ok(2.0 * (x + 1.0) / (n * n * rho_sq) * log_term)
}

/// Half-width of the scalar confidence sequence at sample size `n`.
pub fn scalar_radius(n: u64, params: &MixtureParams, sigma_hat: f64) -> Result<f64> {
    scalar_radius_with(n, params, sigma_hat, BoundaryForm::Mixture)
}

pub fn scalar_radius_with(
    n: u64,
    params: &MixtureParams,
    sigma_hat: f64,
    form: BoundaryForm,
) -> Result<f64> {
    if params.dim != 1 {
        return Err(Error::Parameter(format!(
            "scalar radius needs dim = 1, got {}",
            params.dim
        )));
    }
    if !(sigma_hat >= 0.0) || !sigma_hat.is_finite() {
        return Err(Error::Parameter(format!(
            "sigma_hat must be finite and nonnegative, got {sigma_hat}"
        )));
    }
    let threshold = match form {
        BoundaryForm::Mixture => region_threshold(n, params)?,
        BoundaryForm::Printed => {
            if n == 0 {
                return Err(Error::Parameter("sample size must be at least 1".into()));
            }
            let n = n as f64;
            let rho_sq = params.rho * params.rho;
            let x = n * rho_sq;
            (2.0 * x + 1.0) / (n * n * rho_sq) * (x.ln_1p() - params.alpha.ln())
        }
    };
    Ok(sigma_hat * threshold.sqrt())
}

/// Mixture scale tuned so the boundary is tight near the first peeking time `m`:
///
/// `ρ_m = sqrt( (−2 log α + log(−2 log α) + 1) / (σ̂²_m · m · log(max(m, e))) )`.
pub fn tune_rho(alpha: f64, m: u64, sigma_sq_m: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if m == 0 {
        return Err(Error::Parameter("peeking time m must be at least 1".into()));
    }
    if !(sigma_sq_m.is_finite() && sigma_sq_m > 0.0) {
        return Err(Error::Parameter(format!(
            "variance at the first peek must be positive, got {sigma_sq_m}"
        )));
    }
    let l = -2.0 * alpha.ln();
    let numerator = l + l.ln() + 1.0;
    if !(numerator > 0.0) {
        return Err(Error::Parameter(format!(
            "alpha = {alpha} is too large for rho tuning"
        )));
    }
    let mf = m as f64;
    // log(m ∨ e): m ≤ 2 falls below e
    let log_m = if m <= 2 { 1.0 } else { mf.ln() };
    Ok((numerator / (sigma_sq_m * mf * log_m)).sqrt())
}

/// Running intersection: element k is the intersection of `history[..=k]`.
///
/// Empty intersections are kept (with `lower > upper`) rather than dropped.
pub fn intersect(history: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc: Option<Interval> = None;
    for iv in history {
        let next = match acc {
            None => *iv,
            Some(prev) => prev.intersect(iv),
        };
        out.push(next);
        acc = Some(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(rho: f64, alpha: f64) -> MixtureParams {
        MixtureParams::scalar(rho, alpha).unwrap()
    }

    // Reference values below were evaluated at 40 significant digits.

    #[test]
    fn scalar_radius_reference_value() {
        let r = scalar_radius(100, &p(0.1, 0.05), 2.0).unwrap();
        assert!((r - 0.731_278_974_272_769_7).abs() < 1e-12, "{r}");
    }

    #[test]
    fn region_threshold_reference_value() {
        let params = MixtureParams::new(0.1, 0.05, 2).unwrap();
        let t = region_threshold(100, &params).unwrap();
        assert!((t - 0.147_555_178_164_557_45).abs() < 1e-12, "{t}");
    }

    #[test]
    fn zero_sigma_gives_zero_radius() {
        for n in [1, 7, 1000] {
            assert_eq!(scalar_radius(n, &p(0.3, 0.1), 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn scalar_is_root_of_one_dimensional_region() {
        let params = p(0.1, 0.05);
        let r = scalar_radius(100, &params, 1.0).unwrap();
        let t = region_threshold(100, &params).unwrap();
        assert!((r * r - t).abs() < 1e-15);
    }

    #[test]
    fn threshold_at_n1_rho1() {
        for alpha in [0.05, 0.5, 0.99] {
            let t = region_threshold(1, &p(1.0, alpha)).unwrap();
            let expected = 2.0 * 2.0 * (2f64.sqrt() / alpha).ln();
            assert!((t - expected).abs() < 1e-12);
            assert!(t > 0.0);
        }
    }

    #[test]
    fn tune_rho_reference_values() {
        let r = tune_rho(0.05, 100, 1.0).unwrap();
        assert!((r - 0.138_092_133_502_786_7).abs() < 1e-12, "{r}");
        let r1 = tune_rho(0.05, 1, 1.0).unwrap();
        assert!((r1 - 2.963_410_269_947_932).abs() < 1e-12, "{r1}");
        let r4 = tune_rho(0.05, 100, 4.0).unwrap();
        assert!((r4 - r / 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(MixtureParams::scalar(0.0, 0.05).is_err());
        assert!(MixtureParams::scalar(-1.0, 0.05).is_err());
        assert!(MixtureParams::scalar(0.1, 0.0).is_err());
        assert!(MixtureParams::scalar(0.1, 1.0).is_err());
        assert!(MixtureParams::new(0.1, 0.05, 0).is_err());
        assert!(tune_rho(1.0, 10, 1.0).is_err());
        assert!(tune_rho(0.05, 10, 0.0).is_err());
        assert!(tune_rho(0.05, 0, 1.0).is_err());
        assert!(scalar_radius(0, &p(0.1, 0.05), 1.0).is_err());
        assert!(scalar_radius(5, &p(0.1, 0.05), -1.0).is_err());
        let d2 = MixtureParams::new(0.1, 0.05, 2).unwrap();
        assert!(scalar_radius(5, &d2, 1.0).is_err());
    }

    #[test]
    fn printed_form_is_wider_for_large_n_rho_sq() {
        // the printed form carries log(nρ²+1) where the mixture has half of it, so it is
        // looser once nρ² is large; at nρ² = 1 it is actually tighter
        let params = p(0.1, 0.05);
        let radius = |n, form| scalar_radius_with(n, &params, 1.0, form).unwrap();
        assert!(radius(10_000, BoundaryForm::Printed) > radius(10_000, BoundaryForm::Mixture));
        assert!(radius(100, BoundaryForm::Printed) < radius(100, BoundaryForm::Mixture));
    }

    #[test]
    fn intersect_examples() {
        let iv = |l, u| Interval { lower: l, upper: u };
        let out = intersect(&[iv(0.0, 10.0), iv(1.0, 9.0), iv(2.0, 11.0)]);
        assert_eq!(out, vec![iv(0.0, 10.0), iv(1.0, 9.0), iv(2.0, 9.0)]);

        assert_eq!(intersect(&[iv(-1.0, 1.0)]), vec![iv(-1.0, 1.0)]);

        let out = intersect(&[iv(0.0, 1.0), iv(2.0, 3.0)]);
        assert_eq!(out[1], iv(2.0, 1.0));
        assert!(out[1].is_empty());
        assert!(!out[0].is_empty());
    }

    #[test]
    fn tuned_rho_beats_neighbours_near_target() {
        // ρ_m is tuned for the boundary at n ≈ m log m; it should beat ρ/2 and 2ρ there
        for &alpha in &[0.01, 0.05, 0.1] {
            for &m in &[50u64, 100, 500, 2000] {
                let rho = tune_rho(alpha, m, 1.0).unwrap();
                let n = (m as f64 * (m as f64).ln()).round() as u64;
                let at = |r: f64| scalar_radius(n, &p(r, alpha), 1.0).unwrap();
                let best = at(rho);
                assert!(best < at(rho * 0.5), "alpha={alpha} m={m}");
                assert!(best < at(rho * 2.0), "alpha={alpha} m={m}");
            }
        }
    }

    proptest! {
        #[test]
        fn radius_strictly_decreasing(n in 1u64..100_000, rho in 1e-3f64..10.0, alpha in 1e-4f64..0.9, s in 1e-3f64..100.0) {
            let params = p(rho, alpha);
            let a = scalar_radius(n, &params, s).unwrap();
            let b = scalar_radius(n + 1, &params, s).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn threshold_increasing_in_dim(n in 1u64..10_000, rho in 1e-3f64..10.0, alpha in 1e-4f64..0.9, d in 1usize..10) {
            let lo = region_threshold(n, &MixtureParams::new(rho, alpha, d).unwrap()).unwrap();
            let hi = region_threshold(n, &MixtureParams::new(rho, alpha, d + 1).unwrap()).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn scalar_matches_region(n in 1u64..1_000_000, rho in 1e-3f64..10.0, alpha in 1e-4f64..0.99) {
            let params = p(rho, alpha);
            let r = scalar_radius(n, &params, 1.0).unwrap();
            let t = region_threshold(n, &params).unwrap();
            prop_assert!((r * r - t).abs() <= 1e-12 * t.max(1.0));
        }

        #[test]
        fn radius_linear_in_sigma(n in 1u64..10_000, s in 0.0f64..50.0, k in 0.0f64..10.0) {
            let params = p(0.2, 0.05);
            let a = scalar_radius(n, &params, s).unwrap();
            let b = scalar_radius(n, &params, k * s).unwrap();
            prop_assert!((b - k * a).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        #[test]
        fn intersect_idempotent_and_nested(raw in proptest::collection::vec((-10.0f64..10.0, 0.0f64..10.0), 1..40)) {
            let hist: Vec<Interval> = raw.iter().map(|&(c, w)| Interval::centered(c, w)).collect();
            let once = intersect(&hist);
            prop_assert_eq!(intersect(&once), once.clone());
            for w in once.windows(2) {
                prop_assert!(w[1].lower >= w[0].lower && w[1].upper <= w[0].upper);
            }
        }
    }
}
