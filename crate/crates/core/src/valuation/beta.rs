//! Monte Carlo Beta Shapley.
//!
//! Each round visits every point `j` once: draw a cardinality `k` uniformly
//! from `1..=n`, draw `S` of size `k - 1` uniformly from the other points,
//! and fold `w_k * (v(S + j) - v(S))` into a running mean.
//!
//! With `k` drawn uniformly the weight has to carry the binomial factor,
//! `w_k = n C(n-1, k-1) B(k+beta-1, n-k+alpha) / B(alpha, beta)`, for
//! `alpha = beta = 1` to reduce to plain Data Shapley. Setting
//! `paper_literal_weights` uses the inverse binomial instead, which does
//! not have that property and is kept only for comparison.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::tmc::{Convergence, ConvergenceTracker};
use super::{task_rng, ConvergencePoint, Method, Utility, ValuationResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = BetaParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config(format!(
                "Beta parameters must be positive, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for BetaParams {
    fn default() -> Self {
        BetaParams { alpha: 16.0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    pub params: BetaParams,
    /// Maximum number of rounds (each round updates every point once).
    pub iterations: usize,
    /// Optional early stop, same rule as TMC.
    #[serde(default)]
    pub convergence: Option<Convergence>,
    #[serde(default)]
    pub paper_literal_weights: bool,
    pub seed: u64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        BetaConfig {
            params: BetaParams::default(),
            iterations: 100,
            convergence: None,
            paper_literal_weights: false,
            seed: 0,
        }
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Cardinality weights `w_1..w_n` (index 0 holds `w_1`), computed in
/// log-gamma space.
pub fn beta_weights(n: usize, params: BetaParams, paper_literal: bool) -> Result<Vec<f64>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::config("weights need n >= 1"));
    }
    let (a, b) = (params.alpha, params.beta);
    let norm = ln_beta(a, b);
    Ok((1..=n)
        .map(|k| {
            let binom = ln_binomial(n - 1, k - 1);
            let signed = if paper_literal { -binom } else { binom };
            let ln = (n as f64).ln() + signed + ln_beta(k as f64 + b - 1.0, (n - k) as f64 + a) - norm;
            ln.exp()
        })
        .collect())
}

pub fn beta_shapley<U: Utility>(utility: &U, cfg: &BetaConfig) -> Result<ValuationResult> {
    let n = utility.size();
    if n == 0 {
        return Err(Error::data("cannot value an empty training set"));
    }
    if cfg.iterations == 0 {
        return Err(Error::config("Beta Shapley needs at least one iteration"));
    }
    let weights = beta_weights(n, cfg.params, cfg.paper_literal_weights)?;
    let mut tracker = ConvergenceTracker::new(cfg.convergence, n)?;
    let mut values = vec![0.0; n];
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut rounds = 0usize;

    for round in 1..=cfg.iterations {
        let deltas = (0..n)
            .into_par_iter()
            .map(|j| {
                let stream = ((round - 1) * n + j) as u64;
                let mut rng = task_rng(cfg.seed, stream);
                let k = rng.random_range(1..=n);
                let mut s: Vec<usize> = sample(&mut rng, n - 1, k - 1)
                    .into_iter()
                    .map(|i| if i >= j { i + 1 } else { i })
                    .collect();
                s.sort_unstable();
                let without = utility.evaluate(&s)?;
                let at = s.partition_point(|&x| x < j);
                s.insert(at, j);
                let with = utility.evaluate(&s)?;
                Ok(weights[k - 1] * (with - without))
            })
            .collect::<Result<Vec<f64>>>()?;

        let b = round as f64;
        let mut max_change = 0.0f64;
        for (v, d) in values.iter_mut().zip(&deltas) {
            let next = ((b - 1.0) / b) * *v + d / b;
            max_change = max_change.max((next - *v).abs());
            *v = next;
        }
        history.push(ConvergencePoint {
            iteration: round,
            max_change,
        });
        rounds = round;
        if tracker.push(&values) {
            break;
        }
    }

    let mut out = ValuationResult::from_vec(Method::Beta, utility.ids(), &values);
    out.seed = Some(cfg.seed);
    out.permutations_used = rounds;
    out.convergence_history = history;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{exact_shapley, CachedUtility};
    use super::*;

    #[test]
    fn uniform_parameters_give_unit_weights() {
        for n in [1, 2, 5, 17, 300] {
            let w = beta_weights(n, BetaParams::new(1.0, 1.0).unwrap(), false).unwrap();
            for x in w {
                assert!((x - 1.0).abs() < 1e-9, "n={n}: {x}");
            }
        }
    }

    #[test]
    fn small_cardinalities_dominate_for_alpha_16() {
        let n = 10;
        let w = beta_weights(n, BetaParams::new(16.0, 1.0).unwrap(), false).unwrap();
        assert!(w[0] > w[n - 1]);
        // Direct evaluation: w_1 = n * B(1, n + 15) / B(16, 1) = 16 n / (n + 15).
        assert!((w[0] - 16.0 * n as f64 / (n as f64 + 15.0)).abs() < 1e-9);
        // Expected weight under uniform k is one.
        let mean: f64 = w.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_stay_finite_for_large_n() {
        let w = beta_weights(800, BetaParams::new(16.0, 1.0).unwrap(), false).unwrap();
        assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
        let lit = beta_weights(800, BetaParams::new(16.0, 1.0).unwrap(), true).unwrap();
        assert!(lit.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn single_point_is_exact_after_one_round() {
        let u = table(vec![0.25, 1.0]);
        let cfg = BetaConfig {
            params: BetaParams::new(4.0, 2.0).unwrap(),
            iterations: 1,
            ..Default::default()
        };
        let r = beta_shapley(&u, &cfg).unwrap();
        assert!((r.values["z0"] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn matches_exact_shapley_at_alpha_beta_one() {
        let u = CachedUtility::new(table(random_table(6, 13)));
        let exact = exact_shapley(&u, 12).unwrap();
        let cfg = BetaConfig {
            params: BetaParams::new(1.0, 1.0).unwrap(),
            iterations: 20000,
            seed: 3,
            ..Default::default()
        };
        let r = beta_shapley(&u, &cfg).unwrap();
        let vals: Vec<f64> = exact.values.values().copied().collect();
        let range = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        for (id, e) in &exact.values {
            assert!((r.values[id] - e).abs() <= 0.05 * range, "{id}: {} vs {e}", r.values[id]);
        }
    }

    #[test]
    fn reproducible_and_rejects_bad_params() {
        let u = table(random_table(4, 2));
        let cfg = BetaConfig {
            iterations: 30,
            seed: 5,
            ..Default::default()
        };
        assert_eq!(beta_shapley(&u, &cfg).unwrap(), beta_shapley(&u, &cfg).unwrap());
        assert!(BetaParams::new(0.0, 1.0).is_err());
        assert!(BetaParams::new(1.0, -2.0).is_err());
    }
}
