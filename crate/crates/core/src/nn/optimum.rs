//! Closed-form properties of the source/target minimax game on discrete supports.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_EPS: f64 = 1e-7;

const SUM_TOL: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Domain loss in the minimax convention where the discriminator scores source
/// membership: `-(mean ln D(source) + mean ln(1 - D(target)))`.
///
/// Minimizing it trains the discriminator. Callers whose discriminator outputs target
/// membership pass `1 - score` for both arguments.
pub fn bce_domain_loss(d_on_source: &[f64], d_on_target: &[f64]) -> Result<f64> {
    if d_on_source.is_empty() || d_on_target.is_empty() {
        return Err(Error::Contract("domain loss needs non-empty batches".into()));
    }
    let src = d_on_source.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / d_on_source.len() as f64;
    let tgt = d_on_target
        .iter()
        .map(|&p| (1.0 - clamp_prob(p)).ln())
        .sum::<f64>()
        / d_on_target.len() as f64;
    Ok(-(src + tgt))
}

/// Source and target marginals over a finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDistribution {
    pub support: Vec<Vec<f64>>,
    pub p_s: Vec<f64>,
    pub p_t: Vec<f64>,
}

impl ToyDistribution {
    pub fn new(support: Vec<Vec<f64>>, p_s: Vec<f64>, p_t: Vec<f64>) -> Result<Self> {
        let dist = Self { support, p_s, p_t };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.support.len();
        if self.p_s.len() != n || self.p_t.len() != n {
            return Err(Error::Config(format!(
                "support has {n} points but p_s/p_t have {}/{} entries",
                self.p_s.len(),
                self.p_t.len()
            )));
        }
        for (name, p) in [("p_s", &self.p_s), ("p_t", &self.p_t)] {
            if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} has a negative or non-finite entry")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::Config(format!("{name} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// `D*(z) = p_s(z) / (p_s(z) + p_t(z))` per support point; `None` where both vanish.
pub fn optimal_discriminator(dist: &ToyDistribution) -> Vec<Option<f64>> {
    dist.p_s
        .iter()
        .zip(&dist.p_t)
        .map(|(&s, &t)| (s + t > 0.0).then(|| s / (s + t)))
        .collect()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (xlogy(a, a / m) + xlogy(b, b / m))
        })
        .sum()
}

/// Evaluates the objective at the optimal discriminator on the discrete support,
/// `sum_z p_s ln D* + p_t ln(1 - D*)`, next to its closed form `2 JS(p_s||p_t) - 2 ln 2`.
pub fn js_objective_check(dist: &ToyDistribution) -> (f64, f64) {
    let lhs = optimal_discriminator(dist)
        .iter()
        .zip(dist.p_s.iter().zip(&dist.p_t))
        .filter_map(|(d, (&s, &t))| d.map(|d| xlogy(s, d) + xlogy(t, 1.0 - d)))
        .sum();
    let rhs = 2.0 * js_divergence(&dist.p_s, &dist.p_t) - 2.0 * std::f64::consts::LN_2;
    (lhs, rhs)
}
