//! Finite-support distributions and their exact nuisance functions.

use anytime_dml::scores::{NuisanceEval, Observation, SupportPoint};

/// Deterministic pseudo-random weights in (0.5, 1.5) so every cell has mass.
fn weight(i: usize) -> f64 {
    let v = ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
    0.5 + v
}

fn normalise(mut pts: Vec<SupportPoint>) -> Vec<SupportPoint> {
    let total: f64 = pts.iter().map(|p| p.prob).sum();
    for p in &mut pts {
        p.prob /= total;
    }
    pts
}

/// Covariate x ∈ {0, 1, 2}, binary a, y from a small per-cell set.
pub fn observational() -> Vec<SupportPoint> {
    let mut pts = Vec::new();
    let mut i = 0;
    for x in [0.0, 1.0, 2.0] {
        for a in [false, true] {
            for y in [-1.5, 0.25, 2.0 + x] {
                pts.push(SupportPoint {
                    obs: Observation::new(y + if a { 0.7 } else { 0.0 }, a, vec![x]),
                    prob: weight(i),
                });
                i += 1;
            }
        }
    }
    normalise(pts)
}

/// Instrument design: x ∈ {0, 1}, binary z, a, and y; monotone in the sense that the
/// treatment rate is higher under z = 1.
pub fn instrumental() -> Vec<SupportPoint> {
    let mut pts = Vec::new();
    let mut i = 0;
    for x in [0.0, 1.0] {
        for z in [false, true] {
            for a in [false, true] {
                for y in [-1.0, 0.5, 3.0 + x] {
                    let boost = if z && a { 2.0 } else { 1.0 };
                    pts.push(SupportPoint {
                        obs: Observation::with_instrument(y + if a { 1.0 } else { 0.0 }, a, z, vec![x]),
                        prob: weight(i) * boost,
                    });
                    i += 1;
                }
            }
        }
    }
    normalise(pts)
}

pub fn expect(support: &[SupportPoint], f: impl Fn(&Observation) -> f64) -> f64 {
    support.iter().map(|p| p.prob * f(&p.obs)).sum()
}

/// `E[f | cond]` over the support.
pub fn cond_mean(
    support: &[SupportPoint],
    cond: impl Fn(&Observation) -> bool,
    f: impl Fn(&Observation) -> f64,
) -> f64 {
    let mass: f64 = support.iter().filter(|p| cond(&p.obs)).map(|p| p.prob).sum();
    assert!(mass > 0.0, "conditioning event has no mass");
    support
        .iter()
        .filter(|p| cond(&p.obs))
        .map(|p| p.prob * f(&p.obs))
        .sum::<f64>()
        / mass
}

fn same_x(o: &Observation, x: &[f64]) -> bool {
    o.x == x
}

pub fn ate_truth(support: &[SupportPoint], x: &[f64]) -> NuisanceEval {
    NuisanceEval::Ate {
        g1: cond_mean(support, |o| same_x(o, x) && o.a, |o| o.y),
        g0: cond_mean(support, |o| same_x(o, x) && !o.a, |o| o.y),
        e: cond_mean(support, |o| same_x(o, x), |o| o.a_f64()),
    }
}

pub fn plr_truth(support: &[SupportPoint], x: &[f64]) -> NuisanceEval {
    NuisanceEval::Plr {
        m: cond_mean(support, |o| same_x(o, x), |o| o.y),
        e: cond_mean(support, |o| same_x(o, x), |o| o.a_f64()),
    }
}

pub fn late_truth(support: &[SupportPoint], x: &[f64]) -> NuisanceEval {
    let z = |o: &Observation| o.z.unwrap();
    NuisanceEval::Late {
        g_t: cond_mean(support, |o| same_x(o, x) && z(o), |o| o.y),
        g_c: cond_mean(support, |o| same_x(o, x) && !z(o), |o| o.y),
        m_t: cond_mean(support, |o| same_x(o, x) && z(o), |o| o.a_f64()),
        m_c: cond_mean(support, |o| same_x(o, x) && !z(o), |o| o.a_f64()),
        e: cond_mean(support, |o| same_x(o, x), |o| if z(o) { 1.0 } else { 0.0 }),
    }
}

/// Exact minimiser of `E[(Y−g)₊² + w(Y−g)₋²]` for a discrete law, by solving the
/// first-order condition `E(Y−g)₊ = w·E(g−Y)₊` on each segment between support points.
pub fn expectile(values: &[(f64, f64)], w: f64) -> f64 {
    let mut v: Vec<(f64, f64)> = values.to_vec();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for j in 0..v.len() {
        // candidate with v[..=j] below g and v[j+1..] above
        let (below, above) = v.split_at(j + 1);
        let num: f64 = above.iter().map(|(y, p)| p * y).sum::<f64>() + w * below.iter().map(|(y, p)| p * y).sum::<f64>();
        let den: f64 = above.iter().map(|(_, p)| p).sum::<f64>() + w * below.iter().map(|(_, p)| p).sum::<f64>();
        let g = num / den;
        let hi = above.first().map_or(f64::INFINITY, |a| a.0);
        if g >= v[j].0 && g <= hi {
            return g;
        }
    }
    unreachable!("the first-order condition always has a root")
}

/// Γ-bound nuisances for one arm: `g` (expectile with weight w), `ν = P(Y ≥ g) + w P(Y < g)`
/// conditional on the arm and x, plus the treatment propensity.
pub fn arm_truth(support: &[SupportPoint], x: &[f64], treated: bool, w: f64) -> (f64, f64, f64) {
    let cell: Vec<(f64, f64)> = support
        .iter()
        .filter(|p| same_x(&p.obs, x) && p.obs.a == treated)
        .map(|p| (p.obs.y, p.prob))
        .collect();
    let mass: f64 = cell.iter().map(|c| c.1).sum();
    let cell: Vec<(f64, f64)> = cell.into_iter().map(|(y, p)| (y, p / mass)).collect();
    let g = expectile(&cell, w);
    let nu = cell
        .iter()
        .map(|(y, p)| if *y >= g { *p } else { w * p })
        .sum();
    let e = cond_mean(support, |o| same_x(o, x), |o| o.a_f64());
    (g, nu, e)
}
