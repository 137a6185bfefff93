//! In-tree nuisance learners.
//!
//! * [`fit_ridge`]: centred ridge regression with an unpenalised intercept.
//! * [`fit_logistic`]: ridge-penalised logistic regression by damped Newton iterations.
//! * [`fit_gbt`]: gradient-boosted depth-limited regression trees over quantile bins,
//!   with any convex [`BoostLoss`] (squared, logistic, or the asymmetric Γ-loss).
//! * [`fit_g1_gamma`] / [`fit_nu`]: the two extra nuisances of the Γ-sensitivity bounds.
//!
//! Every fit is deterministic given its data, [`LearnerSpec`] and seed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scores::{gamma_loss, nu_value, GammaParam};
use crate::summation::compensated_mean;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerKind {
    Ridge,
    Logistic,
    Gbt,
}

impl std::str::FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(Self::Ridge),
            "logistic" => Ok(Self::Logistic),
            "gbt" => Ok(Self::Gbt),
            other => Err(Error::Parameter(format!("unknown learner '{other}'"))),
        }
    }
}

/// Learner choice and hyperparameters. Unused fields are ignored by a given kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Ridge penalty λ (ridge and logistic).
    pub lambda: f64,
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    pub max_bins: usize,
    /// Fraction of rows drawn (without replacement, per tree) for each boosting round.
    pub subsample: f64,
    /// Probability outputs are clipped to `[clip_eps, 1 − clip_eps]`.
    pub clip_eps: f64,
    pub seed: u64,
}

impl LearnerSpec {
    pub fn ridge() -> Self {
        Self {
            kind: LearnerKind::Ridge,
            lambda: 1e-3,
            ..Self::gbt()
        }
    }

    pub fn logistic() -> Self {
        Self {
            kind: LearnerKind::Logistic,
            lambda: 1e-4,
            ..Self::gbt()
        }
    }

    pub fn gbt() -> Self {
        Self {
            kind: LearnerKind::Gbt,
            lambda: 0.0,
            n_rounds: 200,
            max_depth: 2,
            learning_rate: 0.1,
            min_leaf: 20,
            max_bins: 255,
            subsample: 1.0,
            clip_eps: 0.01,
            seed: 0,
        }
    }

    pub fn of_kind(kind: LearnerKind) -> Self {
        match kind {
            LearnerKind::Ridge => Self::ridge(),
            LearnerKind::Logistic => Self::logistic(),
            LearnerKind::Gbt => Self::gbt(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(format!("learner spec: {m}")));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate <= 1.0) {
            return bad("learning rate must lie in [0, 1]");
        }
        if self.max_depth == 0 || self.min_leaf == 0 || self.max_bins < 2 {
            return bad("depth, min leaf and bins must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.clip_eps >= 0.0 && self.clip_eps < 0.5) {
            return bad("clip epsilon must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// A convex loss `ℓ(y, f)` for boosting, with its derivative in `f`.
pub trait BoostLoss: Sync {
    fn value(&self, y: f64, f: f64) -> f64;
    fn gradient(&self, y: f64, f: f64) -> f64;

    /// `argmin_c Σ ℓ(yᵢ, offsetᵢ + c)` by bisection on the (nondecreasing) derivative.
    fn best_constant(&self, y: &[f64], offset: &[f64]) -> Result<f64> {
        bisect_constant(self, y, offset)
    }
}

fn bisect_constant<L: BoostLoss + ?Sized>(loss: &L, y: &[f64], offset: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Fit("cannot fit a constant to no data".into()));
    }
    let deriv = |c: f64| -> f64 { y.iter().zip(offset).map(|(&y, &o)| loss.gradient(y, o + c)).sum() };
    let (mut lo, mut hi) = y
        .iter()
        .zip(offset)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&y, &o)| {
            (lo.min(y - o), hi.max(y - o))
        });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Fit("non-finite targets".into()));
    }
    let mut width = (hi - lo).max(1.0);
    let mut expansions = 0;
    while deriv(lo) > 0.0 || deriv(hi) < 0.0 {
        lo -= width;
        hi += width;
        width *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Fit("could not bracket the loss minimiser".into()));
        }
    }
    for _ in 0..300 {
        let tol = 1e-9 * lo.abs().max(hi.abs()).max(1.0);
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let d = deriv(mid);
        if !d.is_finite() {
            return Err(Error::Fit("non-finite loss gradient".into()));
        }
        if d > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLoss;

impl BoostLoss for SquaredLoss {
    fn value(&self, y: f64, f: f64) -> f64 {
        (y - f) * (y - f)
    }

    fn gradient(&self, y: f64, f: f64) -> f64 {
        -2.0 * (y - f)
    }

    fn best_constant(&self, y: &[f64], offset: &[f64]) -> Result<f64> {
        if y.is_empty() {
            return Err(Error::Fit("cannot fit a constant to no data".into()));
        }
        Ok(compensated_mean(y.iter().zip(offset).map(|(y, o)| y - o)))
    }
}

/// `(y−f)₊² + w·(y−f)₋²`; `w = Γ` for lower bounds, `Γ⁻¹` for upper bounds.
#[derive(Debug, Clone, Copy)]
pub struct GammaLoss {
    pub weight: f64,
}

impl BoostLoss for GammaLoss {
    fn value(&self, y: f64, f: f64) -> f64 {
        gamma_loss(y, f, self.weight).0
    }

    fn gradient(&self, y: f64, f: f64) -> f64 {
        gamma_loss(y, f, self.weight).1
    }
}

/// Bernoulli deviance on the log-odds scale, for boosted propensity models.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticLoss;

impl BoostLoss for LogisticLoss {
    fn value(&self, y: f64, f: f64) -> f64 {
        softplus(f) - y * f
    }

    fn gradient(&self, y: f64, f: f64) -> f64 {
        sigmoid(f) - y
    }

    fn best_constant(&self, y: &[f64], offset: &[f64]) -> Result<f64> {
        let c = bisect_constant(self, y, offset)?;
        Ok(c.clamp(-30.0, 30.0))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Constant(f64),
    Linear {
        intercept: f64,
        coef: Vec<f64>,
    },
    Logistic {
        intercept: f64,
        coef: Vec<f64>,
    },
    Boosted {
        base: f64,
        link: Link,
        trees: Vec<Tree>,
    },
    /// `ν(x) = p(x) + w·(1 − p(x))` on top of an exceedance-probability model.
    Nu {
        prob: Box<FittedNuisance>,
        weight: f64,
    },
}

/// A fitted nuisance function together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedNuisance {
    pub model: Model,
    /// Output clipping range (probability models).
    pub clip: Option<(f64, f64)>,
    /// Folds whose observations were used for training (set by the caller).
    pub training_folds: Vec<usize>,
    pub training_rows: usize,
}

impl FittedNuisance {
    fn new(model: Model, clip: Option<(f64, f64)>, rows: usize) -> Self {
        Self {
            model,
            clip,
            training_folds: Vec::new(),
            training_rows: rows,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(Model::Constant(value), None, 0)
    }

    pub fn with_training_folds(mut self, folds: Vec<usize>) -> Self {
        self.training_folds = folds;
        self
    }

    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        self.clip = Some((lo, hi));
        self
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw = match &self.model {
            Model::Constant(c) => *c,
            Model::Linear { intercept, coef } => intercept + dot(coef, x),
            Model::Logistic { intercept, coef } => sigmoid(intercept + dot(coef, x)),
            Model::Boosted { base, link, trees } => {
                let f = base + trees.iter().map(|t| t.predict(x)).sum::<f64>();
                match link {
                    Link::Identity => f,
                    Link::Logit => sigmoid(f),
                }
            }
            Model::Nu { prob, weight } => {
                let p = prob.predict(x).clamp(0.0, 1.0);
                nu_value(p, *weight).expect("probability clamped to [0, 1]")
            }
        };
        match self.clip {
            Some((lo, hi)) => raw.clamp(lo, hi),
            None => raw,
        }
    }

    /// Initial constant of a boosted model (or the constant of a constant model).
    pub fn init_constant(&self) -> Option<f64> {
        match &self.model {
            Model::Boosted { base, .. } => Some(*base),
            Model::Constant(c) => Some(*c),
            _ => None,
        }
    }

    pub fn n_trees(&self) -> usize {
        match &self.model {
            Model::Boosted { trees, .. } => trees.len(),
            _ => 0,
        }
    }

    /// Model truncated to its first `rounds` trees (for training curves).
    pub fn truncated(&self, rounds: usize) -> FittedNuisance {
        let mut out = self.clone();
        if let Model::Boosted { trees, .. } = &mut out.model {
            trees.truncate(rounds);
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn check_data(x: &[&[f64]], y: &[f64]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Fit("empty training data".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Fit(format!("{} rows but {} targets", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Fit("ragged covariate rows".into()));
    }
    if x.iter().flat_map(|r| r.iter()).chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite training data".into()));
    }
    Ok(d)
}

/// Ridge regression minimising `mean (y − b − xᵀβ)² + λ‖β‖²` (intercept unpenalised).
pub fn fit_ridge(x: &[&[f64]], y: &[f64], spec: &LearnerSpec) -> Result<FittedNuisance> {
    spec.validate()?;
    let d = check_data(x, y)?;
    let n = y.len() as f64;
    let y_mean = compensated_mean(y.iter().copied());
    if d == 0 {
        return Ok(FittedNuisance::new(
            Model::Linear {
                intercept: y_mean,
                coef: vec![],
            },
            None,
            y.len(),
        ));
    }
    let x_mean: Vec<f64> = (0..d).map(|j| compensated_mean(x.iter().map(|r| r[j]))).collect();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (row, &yi) in x.iter().zip(y) {
        let xc: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            rhs[a] += xc[a] * (yi - y_mean);
            for b in 0..d {
                gram[(a, b)] += xc[a] * xc[b];
            }
        }
    }
    gram /= n;
    rhs /= n;
    for a in 0..d {
        gram[(a, a)] += spec.lambda;
    }
    let beta = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Fit("ridge system is singular; use lambda > 0".into()))?;
    let coef: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - dot(&coef, &x_mean);
    Ok(FittedNuisance::new(Model::Linear { intercept, coef }, None, y.len()))
}

/// Logistic regression maximising `mean log-likelihood − λ‖(b, β)‖²`.
///
/// The intercept is penalised too, so one-class data still has a finite solution when
/// `λ > 0`. Predictions are clipped to `[ε, 1 − ε]`.
pub fn fit_logistic(x: &[&[f64]], labels: &[f64], spec: &LearnerSpec) -> Result<FittedNuisance> {
    spec.validate()?;
    let d = check_data(x, labels)?;
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Fit("logistic labels must be 0 or 1".into()));
    }
    let n = labels.len() as f64;
    let p = d + 1;
    let design = |row: &[f64], j: usize| if j == 0 { 1.0 } else { row[j - 1] };
    let objective = |w: &DVector<f64>| -> f64 {
        let nll: f64 = x
            .iter()
            .zip(labels)
            .map(|(row, &l)| {
                let t = w[0] + (1..p).map(|j| w[j] * row[j - 1]).sum::<f64>();
                softplus(t) - l * t
            })
            .sum::<f64>()
            / n;
        nll + spec.lambda * w.norm_squared()
    };

    let mut w = DVector::<f64>::zeros(p);
    let mut converged = false;
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (row, &l) in x.iter().zip(labels) {
            let t = w[0] + (1..p).map(|j| w[j] * row[j - 1]).sum::<f64>();
            let mu = sigmoid(t);
            let wt = mu * (1.0 - mu);
            for a in 0..p {
                let xa = design(row, a);
                grad[a] += (mu - l) * xa;
                for b in 0..p {
                    hess[(a, b)] += wt * xa * design(row, b);
                }
            }
        }
        grad /= n;
        hess /= n;
        grad += &w * (2.0 * spec.lambda);
        for a in 0..p {
            hess[(a, a)] += 2.0 * spec.lambda;
        }
        if grad.norm() <= 1e-8 {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                if spec.lambda == 0.0 {
                    return Err(separation_error());
                }
                return Err(Error::Fit("logistic Hessian is not positive definite".into()));
            }
        };
        // backtracking keeps every iterate a descent step
        let f0 = objective(&w);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut next = &w - &step * t;
        while objective(&next) > f0 - 1e-4 * t * slope && t > 1e-10 {
            t *= 0.5;
            next = &w - &step * t;
        }
        w = next;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(separation_error());
        }
    }
    if spec.lambda == 0.0 {
        // a predictor that classifies every point strictly correctly proves the sample is
        // separable, in which case scaling it up always helps and no finite MLE exists
        let separated = x.iter().zip(labels).all(|(row, &l)| {
            let t = w[0] + (1..p).map(|j| w[j] * row[j - 1]).sum::<f64>();
            (l == 1.0 && t > 0.0) || (l == 0.0 && t < 0.0)
        });
        if !converged || separated {
            return Err(separation_error());
        }
    }
    let eps = spec.clip_eps;
    Ok(FittedNuisance::new(
        Model::Logistic {
            intercept: w[0],
            coef: w.iter().skip(1).copied().collect(),
        },
        Some((eps, 1.0 - eps)),
        labels.len(),
    ))
}

fn separation_error() -> Error {
    Error::Fit("logistic fit did not converge (complete separation?); use lambda > 0".into())
}

/// Quantile bin edges per feature; value `v` falls in bin `#{edges < v}`.
struct Binner {
    edges: Vec<Vec<f64>>,
}

impl Binner {
    fn new(x: &[&[f64]], d: usize, max_bins: usize) -> Self {
        let edges = (0..d)
            .map(|j| {
                let mut vals: Vec<f64> = x.iter().map(|r| r[j]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                if vals.len() <= max_bins {
                    vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
                } else {
                    let mut e: Vec<f64> = (1..max_bins)
                        .map(|b| {
                            let pos = b * (vals.len() - 1) / max_bins;
                            0.5 * (vals[pos] + vals[pos + 1])
                        })
                        .collect();
                    e.dedup();
                    e
                }
            })
            .collect();
        Self { edges }
    }

    fn bin(&self, j: usize, v: f64) -> usize {
        self.edges[j].partition_point(|&e| e < v)
    }

    fn n_bins(&self, j: usize) -> usize {
        self.edges[j].len() + 1
    }
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

/// Gradient boosting: each round fits a depth-limited least-squares tree to the negative
/// gradient, then sets each leaf by a one-dimensional line search on the loss.
pub fn fit_gbt<L: BoostLoss + ?Sized>(
    x: &[&[f64]],
    y: &[f64],
    loss: &L,
    spec: &LearnerSpec,
) -> Result<FittedNuisance> {
    fit_gbt_linked(x, y, loss, spec, Link::Identity)
}

fn fit_gbt_linked<L: BoostLoss + ?Sized>(
    x: &[&[f64]],
    y: &[f64],
    loss: &L,
    spec: &LearnerSpec,
    link: Link,
) -> Result<FittedNuisance> {
    spec.validate()?;
    let d = check_data(x, y)?;
    let n = y.len();
    let base = loss.best_constant(y, &vec![0.0; n])?;
    let mut f = vec![base; n];
    let mut trees = Vec::new();
    if spec.learning_rate > 0.0 && d > 0 {
        let binner = Binner::new(x, d, spec.max_bins);
        let bins: Vec<Vec<u16>> = x
            .iter()
            .map(|r| (0..d).map(|j| binner.bin(j, r[j]) as u16).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut residual = vec![0.0; n];
        for _ in 0..spec.n_rounds {
            for i in 0..n {
                let g = loss.gradient(y[i], f[i]);
                if !g.is_finite() {
                    return Err(Error::Fit("non-finite loss gradient during boosting".into()));
                }
                residual[i] = -g;
            }
            let rows: Vec<usize> = if spec.subsample < 1.0 {
                (0..n).filter(|_| rng.random::<f64>() < spec.subsample).collect()
            } else {
                (0..n).collect()
            };
            let tree = grow_tree(&rows, &bins, &binner, &residual, y, &f, loss, spec)?;
            if tree.nodes.len() == 1 && matches!(tree.nodes[0], TreeNode::Leaf { value } if value == 0.0) {
                break;
            }
            for i in 0..n {
                f[i] += tree.predict(x[i]);
            }
            trees.push(tree);
        }
    }
    let clip = match link {
        Link::Logit => Some((spec.clip_eps, 1.0 - spec.clip_eps)),
        Link::Identity => None,
    };
    Ok(FittedNuisance::new(Model::Boosted { base, link, trees }, clip, n))
}

#[allow(clippy::too_many_arguments)]
fn grow_tree<L: BoostLoss + ?Sized>(
    rows: &[usize],
    bins: &[Vec<u16>],
    binner: &Binner,
    residual: &[f64],
    y: &[f64],
    f: &[f64],
    loss: &L,
    spec: &LearnerSpec,
) -> Result<Tree> {
    let d = binner.edges.len();
    // (node index in `nodes`, member rows)
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut frontier: Vec<(usize, Vec<usize>)> = vec![(0, rows.to_vec())];
    let mut leaves: Vec<(usize, Vec<usize>)> = Vec::new();
    for _depth in 0..spec.max_depth {
        let mut next = Vec::new();
        for (node, members) in frontier {
            match best_split(&members, bins, binner, residual, d, spec.min_leaf) {
                Some(split) => {
                    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = members
                        .iter()
                        .partition(|&&i| (bins[i][split.feature] as usize) <= split.bin);
                    let left = nodes.len();
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes.push(TreeNode::Leaf { value: 0.0 });
                    nodes[node] = TreeNode::Split {
                        feature: split.feature,
                        threshold: binner.edges[split.feature][split.bin],
                        left,
                        right: left + 1,
                    };
                    next.push((left, left_rows));
                    next.push((left + 1, right_rows));
                }
                None => leaves.push((node, members)),
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    leaves.extend(frontier);
    for (node, members) in leaves {
        let value = if members.is_empty() {
            0.0
        } else {
            let ys: Vec<f64> = members.iter().map(|&i| y[i]).collect();
            let fs: Vec<f64> = members.iter().map(|&i| f[i]).collect();
            loss.best_constant(&ys, &fs)? * spec.learning_rate
        };
        if !value.is_finite() {
            return Err(Error::Fit("non-finite leaf value".into()));
        }
        nodes[node] = TreeNode::Leaf { value };
    }
    Ok(Tree { nodes })
}

fn best_split(
    members: &[usize],
    bins: &[Vec<u16>],
    binner: &Binner,
    residual: &[f64],
    d: usize,
    min_leaf: usize,
) -> Option<SplitChoice> {
    if members.len() < 2 * min_leaf {
        return None;
    }
    let total: f64 = members.iter().map(|&i| residual[i]).sum();
    let n = members.len() as f64;
    let parent = total * total / n;
    let mut best: Option<SplitChoice> = None;
    for j in 0..d {
        let nb = binner.n_bins(j);
        if nb < 2 {
            continue;
        }
        let mut sum = vec![0.0; nb];
        let mut cnt = vec![0usize; nb];
        for &i in members {
            let b = bins[i][j] as usize;
            sum[b] += residual[i];
            cnt[b] += 1;
        }
        let (mut sl, mut cl) = (0.0, 0usize);
        for b in 0..nb - 1 {
            sl += sum[b];
            cl += cnt[b];
            let cr = members.len() - cl;
            if cl < min_leaf {
                continue;
            }
            if cr < min_leaf {
                break;
            }
            let sr = total - sl;
            let gain = sl * sl / cl as f64 + sr * sr / cr as f64 - parent;
            if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                best = Some(SplitChoice {
                    feature: j,
                    bin: b,
                    gain,
                });
            }
        }
    }
    best
}

/// Regression `E[y|x]`-style fit with the learner kind in `spec`.
///
/// `Logistic` treats `y` as 0/1 labels.
pub fn fit_outcome(x: &[&[f64]], y: &[f64], spec: &LearnerSpec) -> Result<FittedNuisance> {
    match spec.kind {
        LearnerKind::Ridge => fit_ridge(x, y, spec),
        LearnerKind::Gbt => fit_gbt(x, y, &SquaredLoss, spec),
        LearnerKind::Logistic => fit_logistic(x, y, spec),
    }
}

/// Probability model for 0/1 labels, clipped to `[ε, 1 − ε]`.
pub fn fit_probability(x: &[&[f64]], labels: &[f64], spec: &LearnerSpec) -> Result<FittedNuisance> {
    let eps = spec.clip_eps;
    match spec.kind {
        LearnerKind::Logistic => fit_logistic(x, labels, spec),
        LearnerKind::Gbt => fit_gbt_linked(x, labels, &LogisticLoss, spec, Link::Logit),
        LearnerKind::Ridge => Ok(fit_ridge(x, labels, spec)?.with_clip(eps, 1.0 - eps)),
    }
}

/// Γ-regression: boosted fit of `argmin_g E[(y−g)₊² + w(y−g)₋²]` for any weight `w > 0`.
pub fn fit_gamma_regression(x: &[&[f64]], y: &[f64], weight: f64, spec: &LearnerSpec) -> Result<FittedNuisance> {
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::Parameter(format!("loss weight must be positive, got {weight}")));
    }
    fit_gbt(x, y, &GammaLoss { weight }, spec)
}

/// `g₁` for the lower bound on `E[Y(1)]`, fitted on treated rows.
pub fn fit_g1_gamma(x: &[&[f64]], y: &[f64], gamma: GammaParam, spec: &LearnerSpec) -> Result<FittedNuisance> {
    fit_gamma_regression(x, y, gamma.value(), spec)
}

/// `ν(x) = P(Y ≥ g(x) | x) + w·P(Y < g(x) | x)` via a probability model on the induced
/// labels `1{y ≥ g(x)}`; outputs lie in `[min(1,w), max(1,w)]`.
pub fn fit_nu(
    x: &[&[f64]],
    y: &[f64],
    g: &FittedNuisance,
    weight: f64,
    spec: &LearnerSpec,
) -> Result<FittedNuisance> {
    check_data(x, y)?;
    let labels: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(r, &yi)| if yi >= g.predict(r) { 1.0 } else { 0.0 })
        .collect();
    let prob = fit_probability(x, &labels, spec)?;
    Ok(FittedNuisance::new(
        Model::Nu {
            prob: Box::new(prob),
            weight,
        },
        Some((weight.min(1.0), weight.max(1.0))),
        y.len(),
    ))
}

// ---------------------------------------------------------------------------
// Text model format
// ---------------------------------------------------------------------------
//
//   anytime-dml-model v1
//   clip = <lo> <hi> | none
//   training_rows = <n>
//   training_folds = <k> <k> ...
//   kind = constant|linear|logistic|boosted|nu
//   ... kind-specific keys ...
//   end
//
// linear/logistic: `intercept = v`, `coef = v v ...`.
// boosted: `base = v`, `link = identity|logit`, `trees = T`, then per tree
// `tree <nodes>` followed by one line per node: `split <feature> <threshold> <left> <right>`
// or `leaf <value>`. nu: `weight = v` followed by a nested model block.
// Floats use Rust's shortest round-trip formatting, so a load reproduces predictions
// bit for bit.

const MAGIC: &str = "anytime-dml-model v1";

impl FittedNuisance {
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_into(&mut out);
        out
    }

    fn dump_into(&self, out: &mut String) {
        let _ = writeln!(out, "{MAGIC}");
        match self.clip {
            Some((lo, hi)) => {
                let _ = writeln!(out, "clip = {lo:?} {hi:?}");
            }
            None => {
                let _ = writeln!(out, "clip = none");
            }
        }
        let _ = writeln!(out, "training_rows = {}", self.training_rows);
        let folds: Vec<String> = self.training_folds.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(out, "training_folds = {}", folds.join(" "));
        match &self.model {
            Model::Constant(c) => {
                let _ = writeln!(out, "kind = constant\nvalue = {c:?}");
            }
            Model::Linear { intercept, coef } | Model::Logistic { intercept, coef } => {
                let kind = if matches!(self.model, Model::Linear { .. }) {
                    "linear"
                } else {
                    "logistic"
                };
                let coef: Vec<String> = coef.iter().map(|c| format!("{c:?}")).collect();
                let _ = writeln!(out, "kind = {kind}\nintercept = {intercept:?}\ncoef = {}", coef.join(" "));
            }
            Model::Boosted { base, link, trees } => {
                let link = match link {
                    Link::Identity => "identity",
                    Link::Logit => "logit",
                };
                let _ = writeln!(out, "kind = boosted\nbase = {base:?}\nlink = {link}\ntrees = {}", trees.len());
                for tree in trees {
                    let _ = writeln!(out, "tree {}", tree.nodes.len());
                    for node in &tree.nodes {
                        match node {
                            TreeNode::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            } => {
                                let _ = writeln!(out, "split {feature} {threshold:?} {left} {right}");
                            }
                            TreeNode::Leaf { value } => {
                                let _ = writeln!(out, "leaf {value:?}");
                            }
                        }
                    }
                }
            }
            Model::Nu { prob, weight } => {
                let _ = writeln!(out, "kind = nu\nweight = {weight:?}");
                prob.dump_into(out);
            }
        }
        let _ = writeln!(out, "end");
    }

    pub fn load(text: &str) -> Result<FittedNuisance> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let model = parse_model(&mut lines)?;
        if let Some(extra) = lines.next() {
            return Err(Error::Format(format!("trailing content: '{extra}'")));
        }
        Ok(model)
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| fmt_err(format!("bad number '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| fmt_err(format!("bad integer '{s}'")))
}

fn key_value<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| fmt_err(format!("missing '{key}'")))?;
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| fmt_err(format!("expected '{key} = ...', got '{line}'")))?;
    if k.trim() != key {
        return Err(fmt_err(format!("expected key '{key}', got '{}'", k.trim())));
    }
    Ok(v.trim())
}

fn parse_floats(v: &str) -> Result<Vec<f64>> {
    v.split_whitespace().map(parse_f64).collect()
}

fn parse_model<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<FittedNuisance> {
    match lines.next() {
        Some(MAGIC) => {}
        other => return Err(fmt_err(format!("expected header '{MAGIC}', got {other:?}"))),
    }
    let clip = match key_value(lines, "clip")? {
        "none" => None,
        v => match parse_floats(v)?.as_slice() {
            [lo, hi] => Some((*lo, *hi)),
            _ => return Err(fmt_err("clip needs two values")),
        },
    };
    let training_rows = parse_usize(key_value(lines, "training_rows")?)?;
    let training_folds = key_value(lines, "training_folds")?
        .split_whitespace()
        .map(parse_usize)
        .collect::<Result<Vec<_>>>()?;
    let model = match key_value(lines, "kind")? {
        "constant" => Model::Constant(parse_f64(key_value(lines, "value")?)?),
        kind @ ("linear" | "logistic") => {
            let intercept = parse_f64(key_value(lines, "intercept")?)?;
            let coef = parse_floats(key_value(lines, "coef")?)?;
            if kind == "linear" {
                Model::Linear { intercept, coef }
            } else {
                Model::Logistic { intercept, coef }
            }
        }
        "boosted" => {
            let base = parse_f64(key_value(lines, "base")?)?;
            let link = match key_value(lines, "link")? {
                "identity" => Link::Identity,
                "logit" => Link::Logit,
                other => return Err(fmt_err(format!("unknown link '{other}'"))),
            };
            let n_trees = parse_usize(key_value(lines, "trees")?)?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let header = lines.next().ok_or_else(|| fmt_err("missing tree"))?;
                let n_nodes = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
                    ["tree", n] => parse_usize(n)?,
                    _ => return Err(fmt_err(format!("expected 'tree <n>', got '{header}'"))),
                };
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    let line = lines.next().ok_or_else(|| fmt_err("missing node"))?;
                    let node = match line.split_whitespace().collect::<Vec<_>>().as_slice() {
                        ["leaf", v] => TreeNode::Leaf { value: parse_f64(v)? },
                        ["split", f, t, l, r] => TreeNode::Split {
                            feature: parse_usize(f)?,
                            threshold: parse_f64(t)?,
                            left: parse_usize(l)?,
                            right: parse_usize(r)?,
                        },
                        _ => return Err(fmt_err(format!("bad node line '{line}'"))),
                    };
                    nodes.push(node);
                }
                for node in &nodes {
                    if let TreeNode::Split { left, right, .. } = node {
                        if *left >= n_nodes || *right >= n_nodes {
                            return Err(fmt_err("node index out of range"));
                        }
                    }
                }
                trees.push(Tree { nodes });
            }
            Model::Boosted { base, link, trees }
        }
        "nu" => {
            let weight = parse_f64(key_value(lines, "weight")?)?;
            let prob = parse_model(lines)?;
            Model::Nu {
                prob: Box::new(prob),
                weight,
            }
        }
        other => return Err(fmt_err(format!("unknown model kind '{other}'"))),
    };
    match lines.next() {
        Some("end") => {}
        other => return Err(fmt_err(format!("expected 'end', got {other:?}"))),
    }
    Ok(FittedNuisance {
        model,
        clip,
        training_folds,
        training_rows,
    })
}
