//! Simulation designs and coverage experiments.
//!
//! Two data-generating processes: a Γ-confounded observational design for the
//! partially identified ATE ([`gen_partial_id`]) and a binary-instrument design with a
//! constant effect for the LATE ([`gen_late`]). [`run_coverage`] replays many seeded
//! streams through the engine and compares the confidence sequence with a per-n batch
//! interval under identical peeking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::{pate_band, BandPoint, CsPoint, Estimand, StreamConfig, StreamState};
use crate::scores::{GammaParam, Observation};
use crate::{Error, Result};

/// Deterministic child seed for replicate `index` of an experiment seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn standard_normals(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialIdDgpParams {
    pub d: usize,
    pub tau: f64,
    pub gamma_data: f64,
    pub alpha0: f64,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    /// Seed for the unit-level draws (μ and β are fixed per experiment).
    pub seed: u64,
}

impl PartialIdDgpParams {
    /// Defaults `d = 4`, `τ = −0.5`, `Γ_data = e^0.6`, `α₀ = 0`; μ, β ~ N(0, I_d) drawn from
    /// `hyper_seed`, which also seeds the unit draws until [`Self::with_seed`] changes it.
    pub fn draw(hyper_seed: u64) -> Self {
        Self::draw_with(4, -0.5, 0.6f64.exp(), 0.0, hyper_seed)
    }

    pub fn draw_with(d: usize, tau: f64, gamma_data: f64, alpha0: f64, hyper_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper_seed, u64::MAX));
        let mu = standard_normals(&mut rng, d, 1.0);
        let beta = standard_normals(&mut rng, d, 1.0);
        Self {
            d,
            tau,
            gamma_data,
            alpha0,
            mu,
            beta,
            seed: hyper_seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma_data.is_finite() && self.gamma_data >= 1.0) {
            return Err(Error::Dgp(format!("gamma_data must be >= 1, got {}", self.gamma_data)));
        }
        if self.mu.len() != self.d || self.beta.len() != self.d {
            return Err(Error::Dgp("mu and beta must have length d".into()));
        }
        Ok(())
    }

    /// `P(A = 1 | X = x, U)` as a function of `1(U > 0)`.
    pub fn assignment_probability(&self, x: &[f64], u_positive: bool) -> f64 {
        let bump = if u_positive { self.gamma_data.ln() } else { 0.0 };
        let t = self.alpha0 + dot(x, &self.mu) + bump;
        1.0 / (1.0 + (-t).exp())
    }
}

/// Units from [`gen_partial_id`] with their unobserved quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialIdDraw {
    pub observations: Vec<Observation>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub u: Vec<f64>,
    pub propensity: Vec<f64>,
    pub tau: f64,
    pub gamma_data: f64,
}

pub fn gen_partial_id(n: usize, params: &PartialIdDgpParams) -> Result<PartialIdDraw> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Dgp("need n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = PartialIdDraw {
        observations: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        propensity: Vec::with_capacity(n),
        tau: params.tau,
        gamma_data: params.gamma_data,
    };
    for _ in 0..n {
        let x: Vec<f64> = (0..params.d).map(|_| rng.random::<f64>()).collect();
        let sd = 1.0 + 0.5 * (2.5 * x[0]).sin();
        let z: f64 = StandardNormal.sample(&mut rng);
        let u = sd * z;
        let y0 = dot(&params.beta, &x) + 5.0 * u;
        let y1 = y0 + params.tau;
        let p = params.assignment_probability(&x, u > 0.0);
        let a = rng.random::<f64>() < p;
        out.observations.push(Observation::new(if a { y1 } else { y0 }, a, x));
        out.y0.push(y0);
        out.y1.push(y1);
        out.u.push(u);
        out.propensity.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateDgpParams {
    pub d: usize,
    pub theta: f64,
    pub alpha_z: f64,
    pub p_instrument: f64,
    pub beta: Vec<f64>,
    pub seed: u64,
}

impl LateDgpParams {
    /// Defaults `d = 2`, `θ = 3`, `α_z = 2`, `p = 0.4`; β ~ N(0, 0.5·I_d) from `hyper_seed`.
    pub fn draw(hyper_seed: u64) -> Self {
        Self::draw_with(2, 3.0, 2.0, 0.4, hyper_seed)
    }

    pub fn draw_with(d: usize, theta: f64, alpha_z: f64, p_instrument: f64, hyper_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper_seed, u64::MAX));
        let beta = standard_normals(&mut rng, d, 0.5f64.sqrt());
        Self {
            d,
            theta,
            alpha_z,
            p_instrument,
            beta,
            seed: hyper_seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        // α_z = 0 is accepted on purpose: it simulates an irrelevant instrument
        if !(self.alpha_z.is_finite() && self.alpha_z >= 0.0) {
            return Err(Error::Dgp(format!("alpha_z must be >= 0, got {}", self.alpha_z)));
        }
        if !(self.p_instrument > 0.0 && self.p_instrument < 1.0) {
            return Err(Error::Dgp("instrument probability must lie in (0, 1)".into()));
        }
        if self.d == 0 || self.beta.len() != self.d {
            return Err(Error::Dgp("beta must have length d >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateDraw {
    pub observations: Vec<Observation>,
    /// Potential treatments `A(0) = 1(U > 0)` and `A(1) = 1(α_z + U > 0)`.
    pub a0: Vec<bool>,
    pub a1: Vec<bool>,
    pub complier: Vec<bool>,
    /// Potential outcomes `Y(0)` and `Y(1)`.
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub theta: f64,
}

pub fn gen_late(n: usize, params: &LateDgpParams) -> Result<LateDraw> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Dgp("need n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut out = LateDraw {
        observations: Vec::with_capacity(n),
        a0: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        complier: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        theta: params.theta,
    };
    for _ in 0..n {
        let x = standard_normals(&mut rng, params.d, 1.0);
        let e: f64 = StandardNormal.sample(&mut rng);
        let u = (0.5 + x[0].sin()) * e;
        let z = rng.random::<f64>() < params.p_instrument;
        let a0 = u > 0.0;
        let a1 = params.alpha_z + u > 0.0;
        let a = if z { a1 } else { a0 };
        let y0 = u.cos() * (dot(&params.beta, &x) + u);
        let y1 = params.theta + y0;
        out.observations.push(Observation::with_instrument(if a { y1 } else { y0 }, a, z, x));
        out.y0.push(y0);
        out.y1.push(y1);
        out.a0.push(a0);
        out.a1.push(a1);
        out.complier.push(a1 && !a0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dgp {
    Late(LateDgpParams),
    PartialId(PartialIdDgpParams),
}

impl Dgp {
    fn with_seed(&self, seed: u64) -> Dgp {
        match self {
            Dgp::Late(p) => Dgp::Late(p.with_seed(seed)),
            Dgp::PartialId(p) => Dgp::PartialId(p.with_seed(seed)),
        }
    }

    fn generate(&self, n: usize) -> Result<Vec<Observation>> {
        Ok(match self {
            Dgp::Late(p) => gen_late(n, p)?.observations,
            Dgp::PartialId(p) => gen_partial_id(n, p)?.observations,
        })
    }

    /// Point-identified target for `estimand`, if any.
    fn truth(&self, estimand: Estimand) -> Result<f64> {
        match (self, estimand) {
            (Dgp::Late(p), Estimand::Late) => Ok(p.theta),
            (Dgp::PartialId(p), Estimand::Ate | Estimand::Plr) if p.gamma_data == 1.0 => Ok(p.tau),
            _ => Err(Error::Parameter(format!(
                "no point-identified truth for estimand {} under this design",
                estimand.name()
            ))),
        }
    }
}

/// Multiples of `every` between `burn_in` and `n_max` (inclusive).
pub fn peek_grid(burn_in: usize, every: usize, n_max: usize) -> Vec<usize> {
    if every == 0 {
        return Vec::new();
    }
    (1..=n_max / every).map(|j| j * every).filter(|&n| n >= burn_in).collect()
}

#[derive(Debug, Clone)]
pub struct CoverageConfig {
    pub dgp: Dgp,
    pub stream: StreamConfig,
    pub reps: usize,
    pub n_max: usize,
    pub peek_grid: Vec<usize>,
    /// Base seed; replicate `r` uses `derive_seed(seed, r)` for data and learners.
    pub seed: u64,
}

/// One replicate of a coverage experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    /// One entry per grid point; `None` where the engine was not ready.
    pub points: Vec<Option<CsPoint>>,
    /// Cumulative "truth missed at some peek so far" indicators per grid point.
    pub cs_missed: Vec<bool>,
    pub batch_missed: Vec<bool>,
    pub batch_width: Vec<Option<f64>>,
    /// Running intersections were nested across all peeks of this replicate.
    pub nested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub cum_miscoverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageResult {
    pub truth: f64,
    pub reps: Vec<RepOutcome>,
    /// Confidence-sequence curve (running-intersection widths).
    pub cs_curve: Vec<CurvePoint>,
    pub batch_curve: Vec<CurvePoint>,
}

impl CoverageResult {
    pub fn final_cs_miscoverage(&self) -> f64 {
        self.cs_curve.last().map_or(0.0, |c| c.cum_miscoverage)
    }

    pub fn final_batch_miscoverage(&self) -> f64 {
        self.batch_curve.last().map_or(0.0, |c| c.cum_miscoverage)
    }

    pub fn all_nested(&self) -> bool {
        self.reps.iter().all(|r| r.nested)
    }
}

fn nested(points: &[Option<CsPoint>]) -> bool {
    let seen: Vec<&CsPoint> = points.iter().flatten().collect();
    seen.windows(2)
        .all(|w| w[1].lower_int >= w[0].lower_int && w[1].upper_int <= w[0].upper_int)
}

fn run_rep(cfg: &CoverageConfig, truth: f64, z: f64, rep: usize) -> Result<RepOutcome> {
    let seed = derive_seed(cfg.seed, rep as u64);
    let data = cfg.dgp.with_seed(seed).generate(cfg.n_max)?;
    let mut state = StreamState::new(StreamConfig {
        seed,
        ..cfg.stream.clone()
    })?;
    let mut points = Vec::with_capacity(cfg.peek_grid.len());
    let mut cs_missed = Vec::with_capacity(cfg.peek_grid.len());
    let mut batch_missed = Vec::with_capacity(cfg.peek_grid.len());
    let mut batch_width = Vec::with_capacity(cfg.peek_grid.len());
    let (mut cs_miss, mut batch_miss) = (false, false);
    let mut fed = 0;
    for &n in &cfg.peek_grid {
        while fed < n.min(data.len()) {
            state.push(data[fed].clone())?;
            fed += 1;
        }
        match state.peek() {
            Ok(p) => {
                cs_miss |= !(p.lower_int <= truth && truth <= p.upper_int);
                let half = z * p.sigma_hat / (p.n as f64).sqrt();
                batch_miss |= (p.theta_hat - truth).abs() > half;
                points.push(Some(p));
                batch_width.push(Some(2.0 * half));
            }
            Err(Error::NotReady(_)) => {
                points.push(None);
                batch_width.push(None);
            }
            Err(e) => return Err(e),
        }
        cs_missed.push(cs_miss);
        batch_missed.push(batch_miss);
    }
    let nested = nested(&points);
    Ok(RepOutcome {
        rep,
        seed,
        points,
        cs_missed,
        batch_missed,
        batch_width,
        nested,
    })
}

/// Two-sided standard-normal critical value `z_{1−α/2}`.
pub fn normal_critical_value(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0)
}

pub fn run_coverage(cfg: &CoverageConfig) -> Result<CoverageResult> {
    if cfg.reps == 0 {
        return Err(Error::Parameter("need at least one replicate".into()));
    }
    if cfg.peek_grid.iter().any(|&n| n > cfg.n_max) || cfg.peek_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("peek grid must be increasing and within n_max".into()));
    }
    cfg.stream.validate()?;
    let truth = cfg.dgp.truth(cfg.stream.estimand)?;
    let z = normal_critical_value(cfg.stream.alpha);
    let reps: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_rep(cfg, truth, z, r))
        .collect::<Result<_>>()?;
    let reps_f = cfg.reps as f64;
    let mut cs_curve = Vec::new();
    let mut batch_curve = Vec::new();
    for (g, &n) in cfg.peek_grid.iter().enumerate() {
        let cs_miss = reps.iter().filter(|r| r.cs_missed[g]).count() as f64 / reps_f;
        let batch_miss = reps.iter().filter(|r| r.batch_missed[g]).count() as f64 / reps_f;
        let cs_widths: Vec<f64> = reps
            .iter()
            .filter_map(|r| r.points[g].map(|p| p.upper_int - p.lower_int))
            .collect();
        let batch_widths: Vec<f64> = reps.iter().filter_map(|r| r.batch_width[g]).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        cs_curve.push(CurvePoint {
            n,
            cum_miscoverage: cs_miss,
            mean_width: mean(&cs_widths),
        });
        batch_curve.push(CurvePoint {
            n,
            cum_miscoverage: batch_miss,
            mean_width: mean(&batch_widths),
        });
    }
    Ok(CoverageResult {
        truth,
        reps,
        cs_curve,
        batch_curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRun {
    pub seed: u64,
    pub tau: f64,
    pub points: Vec<BandPoint>,
}

impl BandRun {
    pub fn contains_tau_throughout(&self) -> bool {
        self.points.iter().all(|p| p.contains(self.tau))
    }

    pub fn final_width(&self) -> Option<f64> {
        self.points.last().map(BandPoint::width)
    }
}

/// Single run of the partial-identification band on the confounded design.
///
/// `stream` supplies everything except estimand and Γ.
pub fn run_band(
    params: &PartialIdDgpParams,
    gamma: GammaParam,
    stream: &StreamConfig,
    n_max: usize,
    grid: &[usize],
) -> Result<BandRun> {
    let data = gen_partial_id(n_max, params)?;
    let make = |estimand| {
        StreamState::new(StreamConfig {
            estimand,
            gamma: Some(gamma),
            ..stream.clone()
        })
    };
    let mut lower = make(Estimand::PateLower)?;
    let mut upper = make(Estimand::PateUpper)?;
    let mut fed = 0;
    let mut points = Vec::new();
    for &n in grid {
        while fed < n.min(n_max) {
            lower.push(data.observations[fed].clone())?;
            upper.push(data.observations[fed].clone())?;
            fed += 1;
        }
        match (lower.peek(), upper.peek()) {
            (Ok(_), Ok(_)) => points.push(pate_band(&lower, &upper)?),
            (Err(Error::NotReady(_)), _) | (_, Err(Error::NotReady(_))) => {}
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(BandRun {
        seed: params.seed,
        tau: params.tau,
        points,
    })
}
