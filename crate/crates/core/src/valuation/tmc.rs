//! Truncated Monte Carlo Shapley.
//!
//! Each iteration draws a random permutation and walks it, adding one point
//! at a time. Once the running utility is within the performance tolerance
//! of the full-data utility, the remaining positions reuse the previous
//! utility instead of refitting. Values are running means of the marginal
//! contributions.
//!
//! Permutation `t` uses its own ChaCha stream, and permutations are
//! evaluated in parallel batches but folded into the running mean in order,
//! so results are identical to a serial run.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{relative_change, task_rng, ConvergencePoint, Method, Utility, ValuationResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Tolerance {
    Absolute(f64),
    /// Multiple of `|v(D)|`.
    RelativeToFull(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::RelativeToFull(0.01)
    }
}

impl Tolerance {
    fn resolve(self, full: f64) -> f64 {
        match self {
            Tolerance::Absolute(t) => t,
            Tolerance::RelativeToFull(f) => f * full.abs(),
        }
    }
}

/// Stop once the value vector moved by less than `rel_change` (mean
/// absolute change over mean absolute value) across the last `window`
/// iterations. `window = None` uses N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub window: Option<usize>,
    pub rel_change: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            window: None,
            rel_change: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmcConfig {
    pub tolerance: Tolerance,
    /// `None` runs the full permutation budget.
    pub convergence: Option<Convergence>,
    /// `None` means 3N.
    pub max_permutations: Option<usize>,
    pub seed: u64,
}

impl Default for TmcConfig {
    fn default() -> Self {
        TmcConfig {
            tolerance: Tolerance::default(),
            convergence: Some(Convergence::default()),
            max_permutations: None,
            seed: 0,
        }
    }
}

/// Tracks the stopping rule across iterations.
pub(crate) struct ConvergenceTracker {
    rule: Option<(usize, f64)>,
    snapshots: std::collections::VecDeque<Vec<f64>>,
}

impl ConvergenceTracker {
    pub(crate) fn new(rule: Option<Convergence>, n: usize) -> Result<Self> {
        let rule = match rule {
            None => None,
            Some(c) => {
                let w = c.window.unwrap_or(n).max(1);
                if !(c.rel_change >= 0.0) {
                    return Err(Error::config("convergence rel_change must be non-negative"));
                }
                Some((w, c.rel_change))
            }
        };
        let mut snapshots = std::collections::VecDeque::new();
        snapshots.push_back(vec![0.0; n]);
        Ok(ConvergenceTracker { rule, snapshots })
    }

    /// Record the values after an iteration; true when converged.
    pub(crate) fn push(&mut self, values: &[f64]) -> bool {
        let Some((window, rel)) = self.rule else {
            return false;
        };
        self.snapshots.push_back(values.to_vec());
        if self.snapshots.len() <= window {
            return false;
        }
        let old = self.snapshots.pop_front().expect("window is non-empty");
        relative_change(values, &old) < rel
    }
}

/// Marginal contributions along one permutation.
fn walk_permutation<U: Utility>(
    utility: &U,
    perm: &[usize],
    v_full: f64,
    v_empty: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let n = perm.len();
    let mut marginal = vec![0.0; n];
    let mut prefix: Vec<usize> = Vec::with_capacity(n);
    let mut prev = v_empty;
    for &p in perm {
        let insert_at = prefix.partition_point(|&x| x < p);
        prefix.insert(insert_at, p);
        let cur = if (v_full - prev).abs() < tol {
            prev
        } else {
            utility.evaluate(&prefix)?
        };
        marginal[p] = cur - prev;
        prev = cur;
    }
    Ok(marginal)
}

pub fn tmc_shapley<U: Utility>(utility: &U, cfg: &TmcConfig) -> Result<ValuationResult> {
    let n = utility.size();
    if n == 0 {
        return Err(Error::data("cannot value an empty training set"));
    }
    let max_perms = cfg.max_permutations.unwrap_or(3 * n);
    if max_perms == 0 {
        return Err(Error::config("max_permutations must be >= 1"));
    }
    let all: Vec<usize> = (0..n).collect();
    let v_full = utility.evaluate(&all)?;
    let v_empty = utility.evaluate(&[])?;
    let tol = cfg.tolerance.resolve(v_full);
    if !(tol >= 0.0) {
        return Err(Error::config(format!("performance tolerance must be >= 0, got {tol}")));
    }

    let mut tracker = ConvergenceTracker::new(cfg.convergence, n)?;
    let mut values = vec![0.0; n];
    let mut history = Vec::new();
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut t = 0usize;
    'outer: while t < max_perms {
        let upto = (t + batch).min(max_perms);
        let marginals = (t + 1..=upto)
            .into_par_iter()
            .map(|iter| {
                let mut perm = all.clone();
                perm.shuffle(&mut task_rng(cfg.seed, iter as u64));
                walk_permutation(utility, &perm, v_full, v_empty, tol)
            })
            .collect::<Result<Vec<_>>>()?;
        for m in marginals {
            t += 1;
            let tf = t as f64;
            let mut max_change = 0.0f64;
            for (v, d) in values.iter_mut().zip(&m) {
                let next = ((tf - 1.0) / tf) * *v + d / tf;
                max_change = max_change.max((next - *v).abs());
                *v = next;
            }
            history.push(ConvergencePoint {
                iteration: t,
                max_change,
            });
            if tracker.push(&values) {
                break 'outer;
            }
        }
    }

    let mut out = ValuationResult::from_vec(Method::Tmc, utility.ids(), &values);
    out.seed = Some(cfg.seed);
    out.permutations_used = t;
    out.convergence_history = history;
    out.utility_full = Some(v_full);
    out.utility_empty = Some(v_empty);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{exact_shapley, CachedUtility};
    use super::*;

    fn fixed(perms: usize, seed: u64) -> TmcConfig {
        TmcConfig {
            tolerance: Tolerance::Absolute(0.0),
            convergence: None,
            max_permutations: Some(perms),
            seed,
        }
    }

    #[test]
    fn infinite_tolerance_truncates_everything() {
        let u = table(random_table(5, 3));
        let cfg = TmcConfig {
            tolerance: Tolerance::Absolute(f64::INFINITY),
            ..fixed(20, 1)
        };
        let r = tmc_shapley(&u, &cfg).unwrap();
        assert!(r.values.values().all(|v| *v == 0.0));
    }

    #[test]
    fn bookkeeping() {
        let u = table(random_table(5, 4));
        let r = tmc_shapley(&u, &fixed(37, 2)).unwrap();
        assert_eq!(r.permutations_used, 37);
        assert_eq!(r.convergence_history.len(), 37);
        for (k, p) in r.convergence_history.iter().enumerate() {
            assert_eq!(p.iteration, k + 1);
        }
    }

    #[test]
    fn default_budget_is_three_n() {
        let u = table(random_table(4, 8));
        let cfg = TmcConfig {
            convergence: None,
            ..TmcConfig::default()
        };
        assert_eq!(tmc_shapley(&u, &cfg).unwrap().permutations_used, 12);
        let r = tmc_shapley(&u, &TmcConfig::default()).unwrap();
        assert!(r.permutations_used <= 12);
    }

    #[test]
    fn reproducible_given_seed() {
        let u = table(random_table(6, 5));
        let a = tmc_shapley(&u, &fixed(50, 9)).unwrap();
        let b = tmc_shapley(&u, &fixed(50, 9)).unwrap();
        assert_eq!(a, b);
        let c = tmc_shapley(&u, &fixed(50, 10)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn one_permutation_is_efficient() {
        // Without truncation every permutation's marginals telescope.
        let t = random_table(6, 6);
        let full = t[t.len() - 1];
        let r = tmc_shapley(&table(t), &fixed(1, 3)).unwrap();
        assert!((r.total() - full).abs() < 1e-12);
    }

    #[test]
    fn matches_exact_with_many_permutations() {
        let u = CachedUtility::new(table(random_table(6, 11)));
        let exact = exact_shapley(&u, 12).unwrap();
        let r = tmc_shapley(&u, &fixed(20000, 5)).unwrap();
        let vals: Vec<f64> = exact.values.values().copied().collect();
        let range = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        for (id, e) in &exact.values {
            assert!((r.values[id] - e).abs() <= 0.05 * range, "{id}: {} vs {e}", r.values[id]);
        }
    }

    #[test]
    fn unbiased_at_zero_tolerance() {
        // Mean of many short independent runs sits within 3 standard errors
        // of the exact value.
        let u = CachedUtility::new(table(random_table(5, 21)));
        let exact = exact_shapley(&u, 12).unwrap();
        let runs: Vec<ValuationResult> = (0..400).map(|s| tmc_shapley(&u, &fixed(3, 1000 + s)).unwrap()).collect();
        for (id, e) in &exact.values {
            let xs: Vec<f64> = runs.iter().map(|r| r.values[id]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let se = (var / xs.len() as f64).sqrt();
            assert!((m - e).abs() <= 3.0 * se + 1e-12, "{id}: mean {m}, exact {e}, se {se}");
        }
    }

    #[test]
    fn converges_early_on_stable_values() {
        // Additive utility: every permutation gives the same marginals.
        let u = super::super::FnUtility::new(ids(4), |s: &[usize]| s.iter().map(|&i| (i + 1) as f64).sum());
        let cfg = TmcConfig {
            tolerance: Tolerance::Absolute(0.0),
            convergence: Some(Convergence {
                window: Some(3),
                rel_change: 0.01,
            }),
            max_permutations: Some(1000),
            seed: 0,
        };
        let r = tmc_shapley(&u, &cfg).unwrap();
        assert!(r.permutations_used < 1000);
        assert!((r.values["z2"] - 3.0).abs() < 1e-12);
    }
}
