//! Data valuation: utilities over training subsets and the estimators that
//! turn them into per-sample values.
//!
//! A [`Utility`] scores any subset of a fixed training universe, with
//! "higher is better" (the model utilities return negative RMSE). Every
//! estimator returns a [`ValuationResult`] keyed by sample id.

mod baselines;
mod beta;
mod exact;
mod model;
mod tmc;

use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::Direction;

pub use baselines::{loo_values, random_values};
pub use beta::{beta_shapley, beta_weights, BetaConfig, BetaParams};
pub use exact::{exact_shapley, DEFAULT_EXACT_CAP};
pub use model::{ModelKind, ModelUtility, UtilitySpec};
pub use tmc::{tmc_shapley, Convergence, Tolerance, TmcConfig};

/// Scores subsets of a fixed universe of training samples.
///
/// Subsets are passed as ascending universe indices. Implementations must
/// be deterministic: the same subset always yields the same value.
pub trait Utility: Sync {
    fn ids(&self) -> &[String];

    fn evaluate(&self, subset: &[usize]) -> Result<f64>;

    fn size(&self) -> usize {
        self.ids().len()
    }

    /// Prediction direction of the underlying model, if there is one.
    fn direction(&self) -> Option<Direction> {
        None
    }
}

impl<U: Utility + ?Sized> Utility for &U {
    fn ids(&self) -> &[String] {
        (**self).ids()
    }

    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        (**self).evaluate(subset)
    }

    fn direction(&self) -> Option<Direction> {
        (**self).direction()
    }
}

/// Utility defined by a closure; handy for hand-written utility tables.
pub struct FnUtility<F> {
    ids: Vec<String>,
    f: F,
}

impl<F> FnUtility<F>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    pub fn new(ids: Vec<String>, f: F) -> Self {
        FnUtility { ids, f }
    }
}

impl<F> Utility for FnUtility<F>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    fn ids(&self) -> &[String] {
        &self.ids
    }

    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        Ok((self.f)(subset))
    }
}

/// Memoises another utility by subset.
pub struct CachedUtility<U> {
    inner: U,
    cache: Mutex<HashMap<Vec<usize>, f64>>,
}

impl<U: Utility> CachedUtility<U> {
    pub fn new(inner: U) -> Self {
        CachedUtility {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &U {
        &self.inner
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().len()
    }
}

impl<U: Utility> Utility for CachedUtility<U> {
    fn ids(&self) -> &[String] {
        self.inner.ids()
    }

    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        if let Some(v) = self.cache.lock().get(subset) {
            return Ok(*v);
        }
        let v = self.inner.evaluate(subset)?;
        self.cache.lock().insert(subset.to_vec(), v);
        Ok(v)
    }

    fn direction(&self) -> Option<Direction> {
        self.inner.direction()
    }
}

/// View of a utility restricted to some of its members. Local index `i`
/// maps to universe index `members[i]`.
pub struct RestrictedUtility<'a, U: ?Sized> {
    inner: &'a U,
    members: Vec<usize>,
    ids: Vec<String>,
}

impl<'a, U: Utility + ?Sized> RestrictedUtility<'a, U> {
    /// `members` must be ascending universe indices.
    pub fn new(inner: &'a U, members: Vec<usize>) -> Self {
        let ids = members.iter().map(|&i| inner.ids()[i].clone()).collect();
        RestrictedUtility { inner, members, ids }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }
}

impl<U: Utility + ?Sized> Utility for RestrictedUtility<'_, U> {
    fn ids(&self) -> &[String] {
        &self.ids
    }

    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        let mapped: Vec<usize> = subset.iter().map(|&i| self.members[i]).collect();
        self.inner.evaluate(&mapped)
    }

    fn direction(&self) -> Option<Direction> {
        self.inner.direction()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Tmc,
    Beta,
    Loo,
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Exact => "Exact",
            Method::Tmc => "TMC",
            Method::Beta => "Beta",
            Method::Loo => "LOO",
            Method::Random => "Random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub iteration: usize,
    /// Largest absolute change of any value during this iteration.
    pub max_change: f64,
}

/// Per-sample values plus bookkeeping from the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationResult {
    pub method: Method,
    pub seed: Option<u64>,
    pub permutations_used: usize,
    pub values: BTreeMap<String, f64>,
    pub convergence_history: Vec<ConvergencePoint>,
    /// Utility of the full training set, when the estimator computed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_full: Option<f64>,
    /// Utility of the empty set, when the estimator computed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_empty: Option<f64>,
}

impl ValuationResult {
    pub(crate) fn from_vec(method: Method, ids: &[String], values: &[f64]) -> Self {
        ValuationResult {
            method,
            seed: None,
            permutations_used: 0,
            values: ids.iter().cloned().zip(values.iter().copied()).collect(),
            convergence_history: Vec::new(),
            utility_full: None,
            utility_empty: None,
        }
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.values.get(id).copied()
    }

    /// Values in the order of `ids`; fails if any id is missing.
    pub fn aligned(&self, ids: &[String]) -> Result<Vec<f64>> {
        ids.iter()
            .map(|id| {
                self.get(id).ok_or_else(|| {
                    crate::Error::data(format!("valuation has no value for sample {id:?}"))
                })
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.values.values().sum::<f64>() / self.values.len() as f64
    }

    pub fn total(&self) -> f64 {
        self.values.values().sum()
    }

    /// Ids sorted by ascending value, ties by ascending id.
    pub fn ascending_ids(&self) -> Vec<String> {
        let mut v: Vec<(&String, f64)> = self.values.iter().map(|(k, v)| (k, *v)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Independent RNG for task `stream` under a master seed.
pub(crate) fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mean of |a - b| over mean of |a|; zero when both are zero.
pub(crate) fn relative_change(current: &[f64], previous: &[f64]) -> f64 {
    let num: f64 = current.iter().zip(previous).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = current.iter().map(|a| a.abs()).sum();
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn cache_returns_identical_values() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let u = FnUtility::new(ids(3), |s: &[usize]| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            s.len() as f64
        });
        let c = CachedUtility::new(u);
        assert_eq!(c.evaluate(&[0, 2]).unwrap(), 2.0);
        assert_eq!(c.evaluate(&[0, 2]).unwrap(), 2.0);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert_eq!(c.cached_len(), 1);
    }

    #[test]
    fn restriction_maps_indices() {
        let u = FnUtility::new(ids(5), |s: &[usize]| s.iter().sum::<usize>() as f64);
        let r = RestrictedUtility::new(&u, vec![1, 3, 4]);
        assert_eq!(r.ids(), &["z1".to_string(), "z3".into(), "z4".into()]);
        assert_eq!(r.evaluate(&[0, 2]).unwrap(), 5.0);
    }

    #[test]
    fn ascending_ids_break_ties_by_id() {
        let r = ValuationResult::from_vec(Method::Loo, &ids(4), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.ascending_ids(), vec!["z1", "z3", "z0", "z2"]);
    }

    #[test]
    fn json_shape() {
        let mut r = ValuationResult::from_vec(Method::Tmc, &ids(2), &[0.5, -0.25]);
        r.seed = Some(7);
        r.permutations_used = 3;
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["method"], "tmc");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["permutations_used"], 3);
        assert_eq!(v["values"]["z1"], -0.25);
        assert!(v["convergence_history"].is_array());
        let back: ValuationResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
