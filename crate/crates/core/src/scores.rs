//! Linear Neyman-orthogonal scores `ψ(W; θ, η) = ψᵃ(W; η) θ + ψᵇ(W; η)`.
//!
//! Every built-in estimand is scalar, but [`LinearScore`] carries a general d×d / d
//! pair so the cross-fitting algebra works for vector parameters too.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One record `W = (Y, A, Z, X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub a: bool,
    pub z: Option<bool>,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, a: bool, x: Vec<f64>) -> Self {
        Self { y, a, z: None, x }
    }

    pub fn with_instrument(y: f64, a: bool, z: bool, x: Vec<f64>) -> Self {
        Self {
            y,
            a,
            z: Some(z),
            x,
        }
    }

    /// Treatment as 0.0 or 1.0.
    pub fn a_f64(&self) -> f64 {
        if self.a {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore {
    pub psi_a: DMatrix<f64>,
    pub psi_b: DVector<f64>,
}

impl LinearScore {
    pub fn scalar(psi_a: f64, psi_b: f64) -> Self {
        Self {
            psi_a: DMatrix::from_element(1, 1, psi_a),
            psi_b: DVector::from_element(1, psi_b),
        }
    }

    pub fn dim(&self) -> usize {
        self.psi_b.len()
    }

    /// `ψᵃ θ + ψᵇ`.
    pub fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.psi_a * theta + &self.psi_b
    }

    pub fn eval_scalar(&self, theta: f64) -> f64 {
        self.psi_a[(0, 0)] * theta + self.psi_b[0]
    }

    pub fn is_finite(&self) -> bool {
        self.psi_a.iter().chain(self.psi_b.iter()).all(|v| v.is_finite())
    }
}

/// Nuisance functions evaluated at a single observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NuisanceEval {
    /// Outcome regressions by arm and the propensity `e(x) = P(A=1|x)`.
    Ate { g1: f64, g0: f64, e: f64 },
    /// Outcome and treatment regressions by instrument arm and `e(x) = P(Z=1|x)`.
    Late {
        g_t: f64,
        g_c: f64,
        m_t: f64,
        m_c: f64,
        e: f64,
    },
    /// One arm of the Γ-sensitivity bound: the arm's Γ-regression `g`, the treatment
    /// propensity `e(x) = P(A=1|x)` and the arm's `ν(x)`.
    PartialId { g: f64, e: f64, nu: f64 },
    /// Both arms at once, for the ATE bound scores.
    PateBand {
        g1: f64,
        nu1: f64,
        g0: f64,
        nu0: f64,
        e: f64,
    },
    /// `m(x) = E[Y|x]` and `e(x) = E[A|x]` for the partialled-out partially linear score.
    Plr { m: f64, e: f64 },
}

impl NuisanceEval {
    fn values(&self) -> Vec<f64> {
        match *self {
            Self::Ate { g1, g0, e } => vec![g1, g0, e],
            Self::Late {
                g_t,
                g_c,
                m_t,
                m_c,
                e,
            } => vec![g_t, g_c, m_t, m_c, e],
            Self::PartialId { g, e, nu } => vec![g, e, nu],
            Self::PateBand {
                g1,
                nu1,
                g0,
                nu0,
                e,
            } => vec![g1, nu1, g0, nu0, e],
            Self::Plr { m, e } => vec![m, e],
        }
    }

    fn with_values(&self, v: &[f64]) -> Self {
        match self {
            Self::Ate { .. } => Self::Ate {
                g1: v[0],
                g0: v[1],
                e: v[2],
            },
            Self::Late { .. } => Self::Late {
                g_t: v[0],
                g_c: v[1],
                m_t: v[2],
                m_c: v[3],
                e: v[4],
            },
            Self::PartialId { .. } => Self::PartialId {
                g: v[0],
                e: v[1],
                nu: v[2],
            },
            Self::PateBand { .. } => Self::PateBand {
                g1: v[0],
                nu1: v[1],
                g0: v[2],
                nu0: v[3],
                e: v[4],
            },
            Self::Plr { .. } => Self::Plr { m: v[0], e: v[1] },
        }
    }

    /// `self + r · direction`, coordinate-wise. Both must be the same variant.
    pub fn perturbed(&self, direction: &NuisanceEval, r: f64) -> Result<NuisanceEval> {
        if std::mem::discriminant(self) != std::mem::discriminant(direction) {
            return Err(Error::EstimandMismatch(
                "perturbation direction has a different nuisance layout".into(),
            ));
        }
        let base = self.values();
        let dir = direction.values();
        let v: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + r * d).collect();
        Ok(self.with_values(&v))
    }

    /// Number of nuisance coordinates.
    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unit vector along coordinate `i` in this variant's layout, scaled by `scale`.
    pub fn unit(&self, i: usize, scale: f64) -> NuisanceEval {
        let mut v = vec![0.0; self.len()];
        v[i] = scale;
        self.with_values(&v)
    }
}

/// Sensitivity parameter Γ ≥ 1 bounding the odds ratio of treatment between units with
/// the same covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParam(f64);

impl GammaParam {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma >= 1.0 {
            Ok(Self(gamma))
        } else {
            Err(Error::Parameter(format!("gamma must be >= 1, got {gamma}")))
        }
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Loss weight for a given bound side: Γ for lower bounds, Γ⁻¹ for upper bounds.
    pub fn weight(&self, side: Side) -> f64 {
        match side {
            Side::Lower => self.0,
            Side::Upper => 1.0 / self.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Treated,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Lower,
    Upper,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Lower => Side::Upper,
            Side::Upper => Side::Lower,
        }
    }
}

fn check_open_unit(e: f64, what: &str) -> Result<()> {
    if e > 0.0 && e < 1.0 {
        Ok(())
    } else {
        Err(Error::Nuisance(format!("{what} must lie in (0,1), got {e}")))
    }
}

fn mismatch(score: &str, nuis: &NuisanceEval) -> Error {
    Error::EstimandMismatch(format!("{score} score cannot use nuisances {nuis:?}"))
}

/// Augmented inverse-probability-weighted score for the ATE.
pub fn aipw_score(obs: &Observation, nuis: &NuisanceEval) -> Result<LinearScore> {
    let NuisanceEval::Ate { g1, g0, e } = *nuis else {
        return Err(mismatch("aipw", nuis));
    };
    check_open_unit(e, "propensity")?;
    let a = obs.a_f64();
    let psi_b = g1 - g0 + a * (obs.y - g1) / e - (1.0 - a) * (obs.y - g0) / (1.0 - e);
    Ok(LinearScore::scalar(-1.0, psi_b))
}

/// Partialled-out score for the partially linear model:
/// `ψ = (y − m(x) − θ(a − e(x)))(a − e(x))`.
pub fn plr_score(obs: &Observation, nuis: &NuisanceEval) -> Result<LinearScore> {
    let NuisanceEval::Plr { m, e } = *nuis else {
        return Err(mismatch("plr", nuis));
    };
    let v = obs.a_f64() - e;
    let score = LinearScore::scalar(-v * v, (obs.y - m) * v);
    if !score.is_finite() {
        return Err(Error::Nuisance("non-finite partially linear score".into()));
    }
    Ok(score)
}

/// Instrumental-variable score for the LATE (ratio of two AIPW contrasts).
pub fn late_score(obs: &Observation, nuis: &NuisanceEval) -> Result<LinearScore> {
    let NuisanceEval::Late {
        g_t,
        g_c,
        m_t,
        m_c,
        e,
    } = *nuis
    else {
        return Err(mismatch("late", nuis));
    };
    let z = obs
        .z
        .ok_or_else(|| Error::EstimandMismatch("LATE score needs an instrument z".into()))?;
    check_open_unit(e, "instrument propensity")?;
    let z = if z { 1.0 } else { 0.0 };
    let a = obs.a_f64();
    let psi_b = g_t - g_c + z * (obs.y - g_t) / e - (1.0 - z) * (obs.y - g_c) / (1.0 - e);
    let psi_a = -(m_t - m_c + z * (a - m_t) / e - (1.0 - z) * (a - m_c) / (1.0 - e));
    Ok(LinearScore::scalar(psi_a, psi_b))
}

/// Score for one arm/side of the Γ-sensitivity bound on `E[Y(arm)]`.
///
/// For the treated arm and lower side:
/// `ψᵇ = a·y + (1−a)·g + a·[(y−g)₊ − Γ(y−g)₋]/ν · (1−e)/e`, `ψᵃ = −1`.
/// The control arm swaps `a ↔ 1−a` and `e ↔ 1−e`; upper bounds use Γ⁻¹ in place of Γ.
pub fn partial_id_score(
    obs: &Observation,
    nuis: &NuisanceEval,
    gamma: GammaParam,
    arm: Arm,
    side: Side,
) -> Result<LinearScore> {
    let NuisanceEval::PartialId { g, e, nu } = *nuis else {
        return Err(mismatch("partial-id", nuis));
    };
    Ok(LinearScore::scalar(
        -1.0,
        partial_id_component(obs, g, e, nu, gamma.weight(side), arm)?,
    ))
}

fn partial_id_component(
    obs: &Observation,
    g: f64,
    e: f64,
    nu: f64,
    weight: f64,
    arm: Arm,
) -> Result<f64> {
    check_open_unit(e, "propensity")?;
    let (lo, hi) = (weight.min(1.0), weight.max(1.0));
    if !(nu >= lo && nu <= hi) {
        return Err(Error::Nuisance(format!(
            "nu = {nu} outside [{lo}, {hi}] for effective gamma {weight}"
        )));
    }
    let (t, p) = match arm {
        Arm::Treated => (obs.a_f64(), e),
        Arm::Control => (1.0 - obs.a_f64(), 1.0 - e),
    };
    let r = obs.y - g;
    let tilted = r.max(0.0) - weight * (-r).max(0.0);
    Ok(t * obs.y + (1.0 - t) * g + t * tilted / nu * (1.0 - p) / p)
}

/// Score for a bound on the ATE under the Γ model, as a single scalar functional.
///
/// The lower side is `μ₁⁻ − μ₀⁺`, the upper side `μ₁⁺ − μ₀⁻`. `g1`/`nu1` and `g0`/`nu0`
/// must have been fitted with the loss weights matching `side` (see [`GammaParam::weight`]).
pub fn pate_score(
    obs: &Observation,
    nuis: &NuisanceEval,
    gamma: GammaParam,
    side: Side,
) -> Result<LinearScore> {
    let NuisanceEval::PateBand {
        g1,
        nu1,
        g0,
        nu0,
        e,
    } = *nuis
    else {
        return Err(mismatch("ate-bound", nuis));
    };
    let treated = partial_id_component(obs, g1, e, nu1, gamma.weight(side), Arm::Treated)?;
    let control = partial_id_component(obs, g0, e, nu0, gamma.weight(side.flip()), Arm::Control)?;
    Ok(LinearScore::scalar(-1.0, treated - control))
}

/// Asymmetric squared loss `(y−g)₊² + Γ(y−g)₋²` and its derivative in `g`.
///
/// `weight` is any positive number; upper bounds pass Γ⁻¹.
pub fn gamma_loss(y: f64, g: f64, weight: f64) -> (f64, f64) {
    let r = y - g;
    let pos = r.max(0.0);
    let neg = (-r).max(0.0);
    (pos * pos + weight * neg * neg, -2.0 * pos + 2.0 * weight * neg)
}

/// `ν = P(Y ≥ g) + Γ·P(Y < g)` from the exceedance probability `p_geq`.
pub fn nu_value(p_geq: f64, weight: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_geq) {
        return Err(Error::Parameter(format!(
            "exceedance probability must lie in [0,1], got {p_geq}"
        )));
    }
    let nu = p_geq + weight * (1.0 - p_geq);
    Ok(nu.clamp(weight.min(1.0), weight.max(1.0)))
}

/// A support point of a finite discrete distribution over observations.
#[derive(Debug, Clone)]
pub struct SupportPoint {
    pub obs: Observation,
    pub prob: f64,
}

/// Central finite-difference estimate of the Gateaux derivative
/// `d/dr E[ψ(W; θ₀, η₀ + r·direction)]` at `r = 0`, with the expectation taken exactly
/// over a finite-support distribution. Orthogonal scores give 0 up to O(h²).
pub fn gateaux_orthogonality_check<S, E, D>(
    score: S,
    support: &[SupportPoint],
    eta0: E,
    direction: D,
    theta0: f64,
) -> Result<f64>
where
    S: Fn(&Observation, &NuisanceEval) -> Result<LinearScore>,
    E: Fn(&Observation) -> NuisanceEval,
    D: Fn(&Observation) -> NuisanceEval,
{
    const STEP: f64 = 1e-5;
    let expect = |r: f64| -> Result<f64> {
        let mut acc = crate::summation::CompensatedSum::default();
        for point in support {
            let eta = eta0(&point.obs).perturbed(&direction(&point.obs), r)?;
            let psi = score(&point.obs, &eta)?.eval_scalar(theta0);
            acc.add(point.prob * psi);
        }
        let v = acc.value();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Dgp("non-finite score expectation".into()))
        }
    };
    Ok((expect(STEP)? - expect(-STEP)?) / (2.0 * STEP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(y: f64, a: bool) -> Observation {
        Observation::new(y, a, vec![])
    }

    #[test]
    fn aipw_examples() {
        let n = NuisanceEval::Ate {
            g1: 0.0,
            g0: 0.0,
            e: 0.5,
        };
        let s = aipw_score(&obs(1.0, true), &n).unwrap();
        assert_eq!((s.psi_a[(0, 0)], s.psi_b[0]), (-1.0, 2.0));
        let s = aipw_score(&obs(1.0, false), &n).unwrap();
        assert_eq!((s.psi_a[(0, 0)], s.psi_b[0]), (-1.0, -2.0));
        // residuals vanish
        let n = NuisanceEval::Ate {
            g1: 3.0,
            g0: 1.5,
            e: 0.2,
        };
        assert_eq!(aipw_score(&obs(3.0, true), &n).unwrap().psi_b[0], 1.5);
        assert_eq!(aipw_score(&obs(1.5, false), &n).unwrap().psi_b[0], 1.5);
    }

    #[test]
    fn aipw_rejects_degenerate_propensity() {
        for e in [0.0, 1.0, -0.1] {
            let n = NuisanceEval::Ate { g1: 0.0, g0: 0.0, e };
            assert!(matches!(aipw_score(&obs(1.0, true), &n), Err(Error::Nuisance(_))));
        }
        let wrong = NuisanceEval::Plr { m: 0.0, e: 0.5 };
        assert!(matches!(
            aipw_score(&obs(1.0, true), &wrong),
            Err(Error::EstimandMismatch(_))
        ));
    }

    #[test]
    fn plr_examples() {
        let s = plr_score(&obs(3.0, true), &NuisanceEval::Plr { m: 1.0, e: 0.5 }).unwrap();
        assert_eq!((s.psi_a[(0, 0)], s.psi_b[0]), (-0.25, 1.0));
        let s = plr_score(&obs(3.0, true), &NuisanceEval::Plr { m: 1.0, e: 1.0 }).unwrap();
        assert_eq!((s.psi_a[(0, 0)], s.psi_b[0]), (0.0, 0.0));

        // two-point moment equation: θ = mean(ψᵇ) / −mean(ψᵃ) = 0.25 / 0.25
        let n = NuisanceEval::Plr { m: 0.0, e: 0.5 };
        let s1 = plr_score(&obs(1.0, true), &n).unwrap();
        let s2 = plr_score(&obs(0.0, false), &n).unwrap();
        let theta = (s1.psi_b[0] + s2.psi_b[0]) / -(s1.psi_a[(0, 0)] + s2.psi_a[(0, 0)]);
        assert_eq!(theta, 1.0);
    }

    #[test]
    fn late_examples() {
        let zero = NuisanceEval::Late {
            g_t: 0.0,
            g_c: 0.0,
            m_t: 0.0,
            m_c: 0.0,
            e: 0.5,
        };
        let s = late_score(&Observation::with_instrument(1.0, true, true, vec![]), &zero).unwrap();
        assert_eq!((s.psi_a[(0, 0)], s.psi_b[0]), (-2.0, 2.0));

        let n = NuisanceEval::Late {
            g_t: 0.0,
            g_c: 1.0,
            m_t: 0.0,
            m_c: 0.0,
            e: 0.5,
        };
        let s = late_score(&Observation::with_instrument(2.0, false, false, vec![]), &n).unwrap();
        assert_eq!(s.psi_b[0], -3.0);
        assert_eq!(s.psi_a[(0, 0)], 0.0);

        assert!(matches!(
            late_score(&obs(1.0, true), &zero),
            Err(Error::EstimandMismatch(_))
        ));
    }

    #[test]
    fn late_perfect_compliance_reduces_to_aipw() {
        let (g_t, g_c, e) = (1.3, -0.4, 0.35);
        let n = NuisanceEval::Late {
            g_t,
            g_c,
            m_t: 1.0,
            m_c: 0.0,
            e,
        };
        for (y, z) in [(2.0, true), (-1.0, false), (0.5, true)] {
            let o = Observation::with_instrument(y, z, z, vec![]);
            let s = late_score(&o, &n).unwrap();
            assert_eq!(s.psi_a[(0, 0)], -1.0);
            let aipw = aipw_score(&obs(y, z), &NuisanceEval::Ate { g1: g_t, g0: g_c, e }).unwrap();
            assert!((s.psi_b[0] - aipw.psi_b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_id_examples() {
        let g1 = GammaParam::new(1.0).unwrap();
        let n = NuisanceEval::PartialId {
            g: 1.0,
            e: 0.5,
            nu: 1.0,
        };
        let s = partial_id_score(&obs(2.0, true), &n, g1, Arm::Treated, Side::Lower).unwrap();
        assert_eq!(s.psi_b[0], 3.0);
        assert_eq!(s.psi_a[(0, 0)], -1.0);

        let g2 = GammaParam::new(2.0).unwrap();
        let n = NuisanceEval::PartialId {
            g: 1.0,
            e: 0.5,
            nu: 1.5,
        };
        let s = partial_id_score(&obs(0.0, true), &n, g2, Arm::Treated, Side::Lower).unwrap();
        assert!((s.psi_b[0] + 4.0 / 3.0).abs() < 1e-15);

        let n = NuisanceEval::PartialId {
            g: 5.0,
            e: 0.3,
            nu: 1.5,
        };
        for y in [-3.0, 0.0, 17.0] {
            let s = partial_id_score(&obs(y, false), &n, g2, Arm::Treated, Side::Lower).unwrap();
            assert_eq!(s.psi_b[0], 5.0);
        }
    }

    #[test]
    fn partial_id_rejects_nu_out_of_range() {
        let g2 = GammaParam::new(2.0).unwrap();
        let bad = NuisanceEval::PartialId {
            g: 0.0,
            e: 0.5,
            nu: 2.5,
        };
        assert!(matches!(
            partial_id_score(&obs(0.0, true), &bad, g2, Arm::Treated, Side::Lower),
            Err(Error::Nuisance(_))
        ));
        // upper side uses Γ⁻¹, so ν must lie in [1/2, 1]
        let ok = NuisanceEval::PartialId {
            g: 0.0,
            e: 0.5,
            nu: 0.75,
        };
        assert!(partial_id_score(&obs(0.0, true), &ok, g2, Arm::Treated, Side::Upper).is_ok());
        assert!(partial_id_score(&obs(0.0, true), &ok, g2, Arm::Treated, Side::Lower).is_err());
        assert!(GammaParam::new(0.9).is_err());
    }

    #[test]
    fn control_arm_mirrors_treated_arm() {
        // a control unit under the control arm with propensity e behaves like a treated
        // unit under the treated arm with propensity 1 − e
        let g = GammaParam::new(1.7).unwrap();
        let c = NuisanceEval::PartialId {
            g: 0.4,
            e: 0.3,
            nu: 0.8,
        };
        let t = NuisanceEval::PartialId {
            g: 0.4,
            e: 0.7,
            nu: 0.8,
        };
        let sc = partial_id_score(&obs(1.1, false), &c, g, Arm::Control, Side::Upper).unwrap();
        let st = partial_id_score(&obs(1.1, true), &t, g, Arm::Treated, Side::Upper).unwrap();
        assert!((sc.psi_b[0] - st.psi_b[0]).abs() < 1e-15);
    }

    #[test]
    fn gamma_loss_examples() {
        assert_eq!(gamma_loss(2.0, 0.0, 3.0), (4.0, -4.0));
        assert_eq!(gamma_loss(0.0, 2.0, 3.0), (12.0, 12.0));
        assert_eq!(gamma_loss(1.5, 1.5, 3.0), (0.0, 0.0));
    }

    #[test]
    fn nu_value_examples() {
        assert!((nu_value(0.7, 2.0).unwrap() - 1.3).abs() < 1e-15);
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(nu_value(p, 1.0).unwrap(), 1.0);
        }
        assert_eq!(nu_value(0.0, 5.0).unwrap(), 5.0);
        assert!(nu_value(1.1, 2.0).is_err());
        assert!(nu_value(-0.1, 2.0).is_err());
    }

    #[test]
    fn zero_direction_has_zero_derivative() {
        let support = vec![
            SupportPoint {
                obs: obs(1.0, true),
                prob: 0.5,
            },
            SupportPoint {
                obs: obs(-1.0, false),
                prob: 0.5,
            },
        ];
        let eta = |_: &Observation| NuisanceEval::Ate {
            g1: 0.2,
            g0: 0.1,
            e: 0.4,
        };
        let dir = |_: &Observation| NuisanceEval::Ate {
            g1: 0.0,
            g0: 0.0,
            e: 0.0,
        };
        let d = gateaux_orthogonality_check(aipw_score, &support, eta, dir, 0.0).unwrap();
        assert_eq!(d, 0.0);
    }

    proptest! {
        #[test]
        fn scores_are_linear_in_theta(y in -10.0f64..10.0, a: bool, z: bool, theta in -100.0f64..100.0,
                                      g in -3.0f64..3.0, e in 0.05f64..0.95) {
            let o = Observation::with_instrument(y, a, z, vec![]);
            let scores = [
                aipw_score(&o, &NuisanceEval::Ate { g1: g, g0: -g, e }).unwrap(),
                plr_score(&o, &NuisanceEval::Plr { m: g, e }).unwrap(),
                late_score(&o, &NuisanceEval::Late { g_t: g, g_c: 0.5, m_t: 0.8, m_c: 0.1, e }).unwrap(),
            ];
            for s in scores {
                let via_eval = s.eval(&DVector::from_element(1, theta))[0];
                prop_assert_eq!(via_eval, s.psi_a[(0, 0)] * theta + s.psi_b[0]);
            }
        }

        #[test]
        fn gamma_loss_gradient_matches_central_difference(y in -5.0f64..5.0, g in -5.0f64..5.0, w in 0.2f64..10.0) {
            prop_assume!((y - g).abs() > 1e-3);
            let h = 1e-6;
            let fd = (gamma_loss(y, g + h, w).0 - gamma_loss(y, g - h, w).0) / (2.0 * h);
            let (_, d) = gamma_loss(y, g, w);
            prop_assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()));
        }

        #[test]
        fn nu_stays_in_range(p in 0.0f64..=1.0, w in 0.05f64..20.0) {
            let nu = nu_value(p, w).unwrap();
            prop_assert!(nu >= w.min(1.0) && nu <= w.max(1.0));
        }
    }

    #[test]
    fn gamma_loss_one_sided_derivatives_vanish_at_kink() {
        let h = 1e-7;
        for w in [0.5, 1.0, 4.0] {
            let right = (gamma_loss(1.0, 1.0 + h, w).0 - gamma_loss(1.0, 1.0, w).0) / h;
            let left = (gamma_loss(1.0, 1.0, w).0 - gamma_loss(1.0, 1.0 - h, w).0) / h;
            assert!(right.abs() < 1e-5 && left.abs() < 1e-5);
        }
    }
}
