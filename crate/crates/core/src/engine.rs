//! Streaming orchestration.
//!
//! A [`StreamState`] buffers observations, assigns folds on arrival, refits cross-fitted
//! nuisances on a geometric schedule and, at each [`StreamState::peek`], solves the DML
//! moment equation and reports the confidence-sequence interval together with its
//! running intersection.
//!
//! Nuisance version `j` is trained on the first `⌊m·fʲ⌋` observations (out of fold), so
//! the fitted models never depend on how often the caller peeks.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{scalar_radius_with, tune_rho, BoundaryForm, Interval, MixtureParams};
use crate::crossfit::{solve_dml1, solve_dml2, Aggregation, DmlFit, FoldPlan, FoldRule};
use crate::nuisance::{fit_gamma_regression, fit_nu, fit_outcome, fit_probability, FittedNuisance, LearnerKind, LearnerSpec};
use crate::scores::{
    aipw_score, late_score, pate_score, plr_score, GammaParam, LinearScore, NuisanceEval, Observation, Side,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Ate,
    Late,
    PateLower,
    PateUpper,
    Plr,
}

impl Estimand {
    pub fn needs_instrument(self) -> bool {
        matches!(self, Estimand::Late)
    }

    pub fn needs_gamma(self) -> bool {
        matches!(self, Estimand::PateLower | Estimand::PateUpper)
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Ate => "ate",
            Estimand::Late => "late",
            Estimand::PateLower => "pate_lower",
            Estimand::PateUpper => "pate_upper",
            Estimand::Plr => "plr",
        }
    }
}

impl std::str::FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ate" => Ok(Estimand::Ate),
            "late" => Ok(Estimand::Late),
            "pate_lower" => Ok(Estimand::PateLower),
            "pate_upper" => Ok(Estimand::PateUpper),
            "plr" => Ok(Estimand::Plr),
            _ => Err(Error::Parameter(format!("unknown estimand '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RhoChoice {
    Fixed(f64),
    /// `ρ = tune_rho(α, m, σ̂²_m)` at the first peek, then frozen.
    TuneAtBurnIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub estimand: Estimand,
    pub alpha: f64,
    pub k_folds: usize,
    /// First peeking time `m`.
    pub burn_in: usize,
    pub rho: RhoChoice,
    pub gamma: Option<GammaParam>,
    /// Propensity clipping: predictions lie in `[ε, 1 − ε]`.
    pub clip_eps: f64,
    /// Geometric refit factor `f > 1`: nuisances refit at `⌊m·fʲ⌋`.
    pub refit_factor: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub fold_rule: FoldRule,
    pub boundary: BoundaryForm,
    /// Learner for outcome regressions; Γ-regressions always boost with its hyperparameters.
    pub outcome_learner: LearnerSpec,
    /// Learner for propensities and other probabilities.
    pub propensity_learner: LearnerSpec,
}

impl StreamConfig {
    pub fn new(estimand: Estimand) -> Self {
        Self {
            estimand,
            alpha: 0.05,
            k_folds: 5,
            burn_in: 500,
            rho: RhoChoice::TuneAtBurnIn,
            gamma: None,
            clip_eps: 0.01,
            refit_factor: 2.0,
            seed: 0,
            aggregation: Aggregation::Dml2,
            fold_rule: FoldRule::RoundRobin,
            boundary: BoundaryForm::Mixture,
            outcome_learner: LearnerSpec::gbt(),
            propensity_learner: LearnerSpec::logistic(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k_folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.k_folds));
        }
        if self.burn_in < self.k_folds {
            return bad(format!(
                "burn-in {} must be at least the number of folds {}",
                self.burn_in, self.k_folds
            ));
        }
        if let RhoChoice::Fixed(rho) = self.rho {
            if !(rho.is_finite() && rho > 0.0) {
                return bad(format!("rho must be positive, got {rho}"));
            }
        }
        if self.estimand.needs_gamma() && self.gamma.is_none() {
            return bad(format!("estimand {} needs gamma", self.estimand.name()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return bad(format!("clip epsilon must lie in (0, 0.5), got {}", self.clip_eps));
        }
        if !(self.refit_factor.is_finite() && self.refit_factor > 1.0) {
            return bad(format!("refit factor must exceed 1, got {}", self.refit_factor));
        }
        Ok(())
    }
}

/// One reported confidence-sequence point. Serialises to the NDJSON peek-log schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsPoint {
    pub n: usize,
    #[serde(rename = "estimate")]
    pub theta_hat: f64,
    #[serde(rename = "sigma")]
    pub sigma_hat: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_int: f64,
    pub upper_int: f64,
    pub stopped: bool,
}

impl CsPoint {
    pub fn interval(&self) -> Interval {
        Interval {
            lower: self.lower,
            upper: self.upper,
        }
    }

    pub fn intersected(&self) -> Interval {
        Interval {
            lower: self.lower_int,
            upper: self.upper_int,
        }
    }

    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("plain struct serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once the running intersection lies strictly on one side of zero.
    ExcludesZero,
    /// Stop once the running intersection is narrower than the given width.
    WidthBelow(f64),
    /// Stop once no point of the running intersection has the opposite sign to another,
    /// i.e. `lower ≥ 0` or `upper ≤ 0` (zero itself may remain as an endpoint).
    SignDetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Oracle nuisance source, mainly for tests: maps an observation to its nuisances.
pub type OracleFn = Arc<dyn Fn(&Observation) -> NuisanceEval + Send + Sync>;

#[derive(Clone)]
enum NuisanceSource {
    Learned,
    Oracle(OracleFn),
}

/// Cross-fitted models of one fold, trained on the other folds.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub version: usize,
    /// Observations with index below this prefix (and outside the fold) were used.
    pub train_prefix: usize,
    pub models: Vec<(&'static str, FittedNuisance)>,
}

impl FoldModels {
    fn get(&self, name: &str) -> &FittedNuisance {
        &self
            .models
            .iter()
            .find(|(k, _)| *k == name)
            .expect("model present for estimand")
            .1
    }
}

/// Holdout summary recorded at each refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    pub version: usize,
    pub train_prefix: usize,
    /// Out-of-fold RMSE of each nuisance on the observations it can be checked against.
    pub holdout_rmse: Vec<(String, f64)>,
}

pub struct StreamState {
    config: StreamConfig,
    source: NuisanceSource,
    obs: Vec<Observation>,
    post_stop: Vec<bool>,
    plan: FoldPlan,
    dim: Option<usize>,
    has_z: Option<bool>,
    fold_models: Option<Vec<FoldModels>>,
    nuisance_cache: Vec<Option<NuisanceEval>>,
    log: Vec<CsPoint>,
    rho: Option<f64>,
    stopped: bool,
    refit_log: Vec<RefitRecord>,
    last_fit: Option<DmlFit>,
}

impl std::fmt::Debug for StreamState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamState")
            .field("config", &self.config)
            .field("n", &self.obs.len())
            .field("peeks", &self.log.len())
            .field("rho", &self.rho)
            .field("stopped", &self.stopped)
            .finish()
    }
}

impl StreamState {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        let plan = FoldPlan::new(config.k_folds, config.fold_rule)?;
        Ok(Self {
            config,
            source: NuisanceSource::Learned,
            obs: Vec::new(),
            post_stop: Vec::new(),
            plan,
            dim: None,
            has_z: None,
            fold_models: None,
            nuisance_cache: Vec::new(),
            log: Vec::new(),
            rho: None,
            stopped: false,
            refit_log: Vec::new(),
            last_fit: None,
        })
    }

    /// A stream whose nuisances come from a known function instead of learners.
    pub fn with_oracle(config: StreamConfig, oracle: OracleFn) -> Result<Self> {
        let mut state = Self::new(config)?;
        state.source = NuisanceSource::Oracle(oracle);
        Ok(state)
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn log(&self) -> &[CsPoint] {
        &self.log
    }

    pub fn last(&self) -> Option<&CsPoint> {
        self.log.last()
    }

    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Number of observations accepted after a stop decision.
    pub fn post_stop_count(&self) -> usize {
        self.post_stop.iter().filter(|&&p| p).count()
    }

    pub fn refit_log(&self) -> &[RefitRecord] {
        &self.refit_log
    }

    pub fn fold_models(&self) -> Option<&[FoldModels]> {
        self.fold_models.as_deref()
    }

    /// The DML fit behind the most recent new peek.
    pub fn last_fit(&self) -> Option<&DmlFit> {
        self.last_fit.as_ref()
    }

    /// Cached nuisance evaluations (populated at peeks).
    pub fn nuisance_evals(&self) -> &[Option<NuisanceEval>] {
        &self.nuisance_cache
    }

    pub fn push(&mut self, obs: Observation) -> Result<()> {
        if obs.x.iter().any(|v| !v.is_finite()) || !obs.y.is_finite() {
            return Err(Error::Ingest(format!("observation {} has non-finite values", self.obs.len() + 1)));
        }
        if self.config.estimand.needs_instrument() && obs.z.is_none() {
            return Err(Error::Ingest(format!(
                "estimand {} needs an instrument z",
                self.config.estimand.name()
            )));
        }
        if let Some(d) = self.dim {
            if obs.x.len() != d {
                return Err(Error::Ingest(format!(
                    "covariate dimension {} does not match stream dimension {d}",
                    obs.x.len()
                )));
            }
        }
        if let Some(has_z) = self.has_z {
            if obs.z.is_some() != has_z {
                return Err(Error::Ingest("instrument presence differs from earlier rows".into()));
            }
        }
        self.dim = Some(obs.x.len());
        self.has_z = Some(obs.z.is_some());
        self.plan.push();
        self.obs.push(obs);
        self.post_stop.push(self.stopped);
        self.nuisance_cache.push(None);
        Ok(())
    }

    /// Nuisance version due at sample size `n` and its training prefix.
    fn due_version(&self, n: usize) -> (usize, usize) {
        let m = self.config.burn_in as f64;
        let mut j = 0;
        loop {
            let next = (m * self.config.refit_factor.powi(j as i32 + 1)).floor() as usize;
            if next > n {
                let prefix = (m * self.config.refit_factor.powi(j as i32)).floor() as usize;
                return (j, prefix);
            }
            j += 1;
        }
    }

    pub fn peek(&mut self) -> Result<CsPoint> {
        let n = self.obs.len();
        if n < self.config.burn_in {
            return Err(Error::NotReady(format!(
                "{n} observations, burn-in is {}",
                self.config.burn_in
            )));
        }
        if let Some(last) = self.log.last() {
            if last.n == n {
                return Ok(*last);
            }
        }
        if self.plan.fold_sizes().contains(&0) {
            return Err(Error::NotReady("a fold is still empty".into()));
        }
        if let NuisanceSource::Learned = self.source {
            let (version, prefix) = self.due_version(n);
            if self.fold_models.as_ref().is_none_or(|f| f[0].version != version) {
                self.refit(version, prefix)?;
            }
        }
        self.fill_cache();
        let scores = self.scores()?;
        let fit = match self.config.aggregation {
            Aggregation::Dml2 => solve_dml2(&scores, &self.plan)?,
            Aggregation::Dml1 => solve_dml1(&scores, &self.plan)?,
        };
        let theta = fit.theta();
        let sigma = fit.sigma();
        let rho = match self.rho {
            Some(r) => r,
            None => match self.config.rho {
                RhoChoice::Fixed(r) => r,
                RhoChoice::TuneAtBurnIn => tune_rho(self.config.alpha, n as u64, sigma * sigma)?,
            },
        };
        let params = MixtureParams::scalar(rho, self.config.alpha)?;
        let radius = scalar_radius_with(n as u64, &params, sigma, self.config.boundary)?;
        let raw = Interval::centered(theta, radius);
        let int = match self.log.last() {
            Some(prev) => prev.intersected().intersect(&raw),
            None => raw,
        };
        self.rho = Some(rho);
        let point = CsPoint {
            n,
            theta_hat: theta,
            sigma_hat: sigma,
            lower: raw.lower,
            upper: raw.upper,
            lower_int: int.lower,
            upper_int: int.upper,
            stopped: self.stopped,
        };
        self.log.push(point);
        self.last_fit = Some(fit);
        Ok(point)
    }

    /// Evaluates `rule` on the latest running intersection; a stop is sticky.
    pub fn check_stop(&mut self, rule: StopRule) -> Result<StopDecision> {
        let last = self
            .log
            .last_mut()
            .ok_or_else(|| Error::NotReady("no peek recorded yet".into()))?;
        let decision = if stop_rule_holds(rule, last.lower_int, last.upper_int) {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        if decision == StopDecision::Stop {
            self.stopped = true;
            last.stopped = true;
        }
        Ok(decision)
    }

    /// `true` when no observation was scored with a model trained on its own fold.
    pub fn verify_out_of_fold(&self) -> bool {
        let Some(folds) = &self.fold_models else {
            return true;
        };
        folds.iter().enumerate().all(|(k, fm)| {
            fm.models
                .iter()
                .all(|(_, m)| !m.training_folds.contains(&k) && m.training_rows <= fm.train_prefix)
        })
    }

    fn refit(&mut self, version: usize, prefix: usize) -> Result<()> {
        let k = self.config.k_folds;
        let folds: Vec<usize> = (0..k).collect();
        let fitted: Vec<Result<FoldModels>> = folds
            .par_iter()
            .map(|&fold| self.fit_fold(fold, version, prefix))
            .collect();
        let fitted: Vec<FoldModels> = fitted.into_iter().collect::<Result<_>>()?;
        self.fold_models = Some(fitted);
        self.nuisance_cache.iter_mut().for_each(|c| *c = None);
        self.fill_cache();
        let record = self.holdout_record(version, prefix);
        self.refit_log.push(record);
        Ok(())
    }

    fn learner_seed(&self, fold: usize, role: usize, version: usize) -> u64 {
        // splitmix64 over (seed, fold, role, version)
        let mut z = self
            .config
            .seed
            .wrapping_add((fold as u64) << 40 ^ (role as u64) << 20 ^ version as u64)
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn fit_fold(&self, fold: usize, version: usize, prefix: usize) -> Result<FoldModels> {
        let rows: Vec<usize> = (0..prefix.min(self.obs.len()))
            .filter(|&i| self.plan.fold_of(i) != fold)
            .collect();
        let training_folds: Vec<usize> = (0..self.config.k_folds).filter(|&f| f != fold).collect();
        let outcome = |role: usize| LearnerSpec {
            seed: self.learner_seed(fold, role, version),
            ..self.config.outcome_learner
        };
        let boosted = |role: usize| {
            let base = if self.config.outcome_learner.kind == LearnerKind::Gbt {
                self.config.outcome_learner
            } else {
                LearnerSpec::gbt()
            };
            LearnerSpec {
                seed: self.learner_seed(fold, role, version),
                ..base
            }
        };
        let prob = |role: usize| LearnerSpec {
            seed: self.learner_seed(fold, role, version),
            clip_eps: self.config.clip_eps,
            ..self.config.propensity_learner
        };
        let subset = |pred: &dyn Fn(&Observation) -> bool| -> (Vec<&[f64]>, Vec<f64>, Vec<f64>) {
            let mut x = Vec::new();
            let mut y = Vec::new();
            let mut a = Vec::new();
            for &i in &rows {
                let o = &self.obs[i];
                if pred(o) {
                    x.push(o.x.as_slice());
                    y.push(o.y);
                    a.push(o.a_f64());
                }
            }
            (x, y, a)
        };
        let need = |count: usize, what: &str| -> Result<()> {
            if count < 2 {
                Err(Error::NotReady(format!(
                    "fold {fold}: only {count} out-of-fold {what} observations"
                )))
            } else {
                Ok(())
            }
        };
        let (x_all, y_all, a_all) = subset(&|_| true);
        let mut models: Vec<(&'static str, FittedNuisance)> = Vec::new();
        match self.config.estimand {
            Estimand::Ate => {
                let (x1, y1, _) = subset(&|o| o.a);
                let (x0, y0, _) = subset(&|o| !o.a);
                need(x1.len(), "treated")?;
                need(x0.len(), "control")?;
                models.push(("g1", fit_outcome(&x1, &y1, &outcome(0))?));
                models.push(("g0", fit_outcome(&x0, &y0, &outcome(1))?));
                models.push(("e", fit_probability(&x_all, &a_all, &prob(2))?));
            }
            Estimand::PateLower | Estimand::PateUpper => {
                let gamma = self.config.gamma.expect("validated");
                let side = if self.config.estimand == Estimand::PateLower {
                    Side::Lower
                } else {
                    Side::Upper
                };
                let (w1, w0) = (gamma.weight(side), gamma.weight(side.flip()));
                let (x1, y1, _) = subset(&|o| o.a);
                let (x0, y0, _) = subset(&|o| !o.a);
                need(x1.len(), "treated")?;
                need(x0.len(), "control")?;
                let g1 = fit_gamma_regression(&x1, &y1, w1, &boosted(0))?;
                let g0 = fit_gamma_regression(&x0, &y0, w0, &boosted(1))?;
                let nu1 = fit_nu(&x1, &y1, &g1, w1, &prob(3))?;
                let nu0 = fit_nu(&x0, &y0, &g0, w0, &prob(4))?;
                models.push(("g1", g1));
                models.push(("g0", g0));
                models.push(("e", fit_probability(&x_all, &a_all, &prob(2))?));
                models.push(("nu1", nu1));
                models.push(("nu0", nu0));
            }
            Estimand::Late => {
                let z_of = |o: &Observation| o.z.unwrap_or(false);
                let (xt, yt, at) = subset(&|o| z_of(o));
                let (xc, yc, ac) = subset(&|o| !z_of(o));
                need(xt.len(), "instrument-on")?;
                need(xc.len(), "instrument-off")?;
                let z_all: Vec<f64> = rows
                    .iter()
                    .map(|&i| if z_of(&self.obs[i]) { 1.0 } else { 0.0 })
                    .collect();
                models.push(("g_t", fit_outcome(&xt, &yt, &outcome(0))?));
                models.push(("g_c", fit_outcome(&xc, &yc, &outcome(1))?));
                models.push(("m_t", fit_probability(&xt, &at, &prob(5))?));
                models.push(("m_c", fit_probability(&xc, &ac, &prob(6))?));
                models.push(("e", fit_probability(&x_all, &z_all, &prob(2))?));
            }
            Estimand::Plr => {
                need(x_all.len(), "")?;
                models.push(("m", fit_outcome(&x_all, &y_all, &outcome(0))?));
                models.push(("e", fit_probability(&x_all, &a_all, &prob(2))?));
            }
        }
        let models = models
            .into_iter()
            .map(|(name, m)| (name, m.with_training_folds(training_folds.clone())))
            .collect();
        Ok(FoldModels {
            version,
            train_prefix: prefix,
            models,
        })
    }

    fn eval_learned(&self, fm: &FoldModels, x: &[f64]) -> NuisanceEval {
        let p = |name: &str| fm.get(name).predict(x);
        match self.config.estimand {
            Estimand::Ate => NuisanceEval::Ate {
                g1: p("g1"),
                g0: p("g0"),
                e: p("e"),
            },
            Estimand::PateLower | Estimand::PateUpper => NuisanceEval::PateBand {
                g1: p("g1"),
                nu1: p("nu1"),
                g0: p("g0"),
                nu0: p("nu0"),
                e: p("e"),
            },
            Estimand::Late => NuisanceEval::Late {
                g_t: p("g_t"),
                g_c: p("g_c"),
                m_t: p("m_t"),
                m_c: p("m_c"),
                e: p("e"),
            },
            Estimand::Plr => NuisanceEval::Plr { m: p("m"), e: p("e") },
        }
    }

    fn fill_cache(&mut self) {
        let missing: Vec<usize> = (0..self.obs.len()).filter(|&i| self.nuisance_cache[i].is_none()).collect();
        if missing.is_empty() {
            return;
        }
        let evals: Vec<NuisanceEval> = match &self.source {
            NuisanceSource::Oracle(f) => missing.iter().map(|&i| f(&self.obs[i])).collect(),
            NuisanceSource::Learned => {
                let Some(folds) = &self.fold_models else {
                    return;
                };
                missing
                    .par_iter()
                    .map(|&i| self.eval_learned(&folds[self.plan.fold_of(i)], &self.obs[i].x))
                    .collect()
            }
        };
        for (i, e) in missing.into_iter().zip(evals) {
            self.nuisance_cache[i] = Some(e);
        }
    }

    fn scores(&self) -> Result<Vec<LinearScore>> {
        self.obs
            .iter()
            .zip(&self.nuisance_cache)
            .map(|(o, e)| {
                let e = e.as_ref().ok_or_else(|| Error::NotReady("nuisances not fitted".into()))?;
                match self.config.estimand {
                    Estimand::Ate => aipw_score(o, e),
                    Estimand::Late => late_score(o, e),
                    Estimand::Plr => plr_score(o, e),
                    Estimand::PateLower => pate_score(o, e, self.config.gamma.expect("validated"), Side::Lower),
                    Estimand::PateUpper => pate_score(o, e, self.config.gamma.expect("validated"), Side::Upper),
                }
            })
            .collect()
    }

    fn holdout_record(&self, version: usize, prefix: usize) -> RefitRecord {
        let mut acc: Vec<(String, f64, usize)> = Vec::new();
        let mut add = |name: &str, err: f64| match acc.iter_mut().find(|(k, _, _)| k == name) {
            Some(slot) => {
                slot.1 += err * err;
                slot.2 += 1;
            }
            None => acc.push((name.to_string(), err * err, 1)),
        };
        for (o, e) in self.obs.iter().zip(&self.nuisance_cache) {
            let Some(e) = e else { continue };
            let a = o.a_f64();
            match *e {
                NuisanceEval::Ate { g1, g0, e } | NuisanceEval::PateBand { g1, g0, e, .. } => {
                    add(if o.a { "g1" } else { "g0" }, o.y - if o.a { g1 } else { g0 });
                    add("e", a - e);
                }
                NuisanceEval::Late { g_t, g_c, m_t, m_c, e } => {
                    let z = o.z.unwrap_or(false);
                    add(if z { "g_t" } else { "g_c" }, o.y - if z { g_t } else { g_c });
                    add(if z { "m_t" } else { "m_c" }, a - if z { m_t } else { m_c });
                    add("e", if z { 1.0 } else { 0.0 } - e);
                }
                NuisanceEval::Plr { m, e } => {
                    add("m", o.y - m);
                    add("e", a - e);
                }
                NuisanceEval::PartialId { .. } => {}
            }
        }
        RefitRecord {
            version,
            train_prefix: prefix,
            holdout_rmse: acc
                .into_iter()
                .map(|(k, s, c)| (k, (s / c as f64).sqrt()))
                .collect(),
        }
    }
}

fn stop_rule_holds(rule: StopRule, lower: f64, upper: f64) -> bool {
    match rule {
        StopRule::ExcludesZero => lower > 0.0 || upper < 0.0,
        StopRule::WidthBelow(w) => upper - lower < w,
        StopRule::SignDetermined => lower >= 0.0 || upper <= 0.0,
    }
}

/// Band for the partially identified ATE at a common sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub n: usize,
    pub lower_estimate: f64,
    pub upper_estimate: f64,
    pub lower_band: f64,
    pub upper_band: f64,
}

impl BandPoint {
    pub fn width(&self) -> f64 {
        self.upper_band - self.lower_band
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower_band <= value && value <= self.upper_band
    }
}

/// `[lower CS of μ₁⁻ − μ₀⁺, upper CS of μ₁⁺ − μ₀⁻]`, using each stream's running intersection.
pub fn pate_band(lower_state: &StreamState, upper_state: &StreamState) -> Result<BandPoint> {
    if lower_state.config.estimand != Estimand::PateLower || upper_state.config.estimand != Estimand::PateUpper {
        return Err(Error::EstimandMismatch(
            "band needs a pate_lower stream and a pate_upper stream".into(),
        ));
    }
    let (lo, hi) = match (lower_state.last(), upper_state.last()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(Error::NotReady("both streams need a peek".into())),
    };
    if lo.n != hi.n {
        return Err(Error::Synchronization(format!(
            "lower stream peeked at n = {}, upper at n = {}",
            lo.n, hi.n
        )));
    }
    Ok(BandPoint {
        n: lo.n,
        lower_estimate: lo.theta_hat,
        upper_estimate: hi.theta_hat,
        lower_band: lo.lower_int,
        upper_band: hi.upper_int,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(estimand: Estimand) -> StreamConfig {
        StreamConfig {
            burn_in: 10,
            ..StreamConfig::new(estimand)
        }
    }

    #[test]
    fn push_assigns_round_robin() {
        let mut s = StreamState::new(cfg(Estimand::Ate)).unwrap();
        for i in 0..10 {
            s.push(Observation::new(i as f64, i % 2 == 0, vec![0.0])).unwrap();
        }
        assert_eq!(s.plan().fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn push_schema_checks() {
        let mut s = StreamState::new(cfg(Estimand::Late)).unwrap();
        assert!(matches!(
            s.push(Observation::new(1.0, true, vec![0.0])),
            Err(Error::Ingest(_))
        ));
        let mut s = StreamState::new(cfg(Estimand::Ate)).unwrap();
        s.push(Observation::new(1.0, true, vec![0.0])).unwrap();
        assert!(matches!(
            s.push(Observation::new(1.0, true, vec![0.0, 1.0])),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Estimand::Ate);
        c.burn_in = 3;
        assert!(StreamState::new(c).is_err());
        assert!(StreamState::new(cfg(Estimand::PateLower)).is_err());
        let mut c = cfg(Estimand::Ate);
        c.alpha = 1.0;
        assert!(StreamState::new(c).is_err());
    }

    #[test]
    fn stop_rules() {
        assert!(stop_rule_holds(StopRule::ExcludesZero, 0.2, 0.9));
        assert!(!stop_rule_holds(StopRule::ExcludesZero, -0.1, 0.9));
        assert!(stop_rule_holds(StopRule::WidthBelow(0.6), 0.0, 0.5));
        assert!(!stop_rule_holds(StopRule::WidthBelow(0.4), 0.0, 0.5));
        assert!(stop_rule_holds(StopRule::SignDetermined, 0.0, 0.5));
        assert!(!stop_rule_holds(StopRule::ExcludesZero, 0.0, 0.5));
    }

    #[test]
    fn due_version_schedule() {
        let s = StreamState::new(StreamConfig {
            burn_in: 100,
            ..StreamConfig::new(Estimand::Ate)
        })
        .unwrap();
        assert_eq!(s.due_version(100), (0, 100));
        assert_eq!(s.due_version(199), (0, 100));
        assert_eq!(s.due_version(200), (1, 200));
        assert_eq!(s.due_version(850), (3, 800));
    }
}
