//! Value-guided data selection experiments.
//!
//! A trace starts from the full training set and repeatedly removes the
//! lowest (or highest) valued remaining sample, re-scoring the model on the
//! test set after every removal. Values come from one upfront valuation
//! unless revaluation is requested explicitly. Ties break by ascending id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{median, Dataset, UNLABELED_SPECIES};
use crate::error::{Error, Result};
use crate::geo::{great_circle_distance, Location};
use crate::valuation::{
    loo_values, random_values, tmc_shapley, Method, RestrictedUtility, TmcConfig, Utility,
    ValuationResult,
};
use crate::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    RemoveLow,
    RemoveHigh,
}

/// When a trace stops. `patience` counts consecutive steps that fail to
/// beat the best RMSE so far; `max_removals` caps the number of removed
/// points (`None` = half the training set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    pub patience: Option<usize>,
    pub max_removals: Option<usize>,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            patience: Some(5),
            max_removals: None,
        }
    }
}

impl StopRule {
    /// Run for exactly `n` removals unless the set runs out first.
    pub fn fixed(n: usize) -> Self {
        StopRule {
            patience: None,
            max_removals: Some(n),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patience == Some(0) {
            return Err(Error::config("patience must be >= 1 (omit it to disable)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub removed_ids: BTreeSet<String>,
    pub train_size: usize,
    pub rmse_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
    pub direction: Option<Direction>,
    pub valuation_method: Method,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_radius_km: Option<f64>,
    /// Set when the trace stopped because the next removal would have
    /// emptied the training set.
    pub exhausted: bool,
}

impl SelectionTrace {
    pub fn initial_rmse(&self) -> f64 {
        self.steps[0].rmse_after
    }

    /// Index of the first step reaching the minimum RMSE.
    pub fn best_step(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.steps.iter().enumerate() {
            if s.rmse_after < self.steps[best].rmse_after {
                best = i;
            }
        }
        best
    }

    pub fn best_rmse(&self) -> f64 {
        self.steps[self.best_step()].rmse_after
    }

    /// Number of points removed up to and including step `k`.
    pub fn removed_through(&self, k: usize) -> usize {
        self.steps[0].train_size - self.steps[k].train_size
    }

    /// Every removed id, in removal order.
    pub fn removed_ids(&self) -> Vec<&str> {
        self.steps
            .iter()
            .flat_map(|s| s.removed_ids.iter().map(String::as_str))
            .collect()
    }

    /// `(step, rmse)` pairs for plotting.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        self.steps.iter().enumerate().map(|(i, s)| (i, s.rmse_after)).collect()
    }
}

/// Removal order over `candidates` (universe indices): the next point to
/// remove comes first.
fn removal_order(ids: &[String], candidates: &[usize], values: &[f64], mode: Mode) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| {
        let by_value = match mode {
            Mode::RemoveLow => values[a].total_cmp(&values[b]),
            Mode::RemoveHigh => values[b].total_cmp(&values[a]),
        };
        by_value.then_with(|| ids[a].cmp(&ids[b]))
    });
    order
}

type Revaluer<'a, U> = &'a dyn Fn(&RestrictedUtility<'_, U>) -> Result<ValuationResult>;

struct Run<'a, U: Utility> {
    utility: &'a U,
    mode: Mode,
    stop: StopRule,
    cluster: Option<(&'a [Location], f64)>,
    revalue: Option<(usize, Revaluer<'a, U>)>,
}

impl<U: Utility> Run<'_, U> {
    fn execute(&self, values: &ValuationResult) -> Result<SelectionTrace> {
        self.stop.validate()?;
        let u = self.utility;
        let ids = u.ids();
        let n = ids.len();
        if n == 0 {
            return Err(Error::data("cannot run selection on an empty training set"));
        }
        if let Some((locs, radius)) = self.cluster {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(Error::config(format!("cluster radius must be > 0 km, got {radius}")));
            }
            if locs.len() != n {
                return Err(Error::data("one location per training sample is required"));
            }
        }
        let max_removals = self.stop.max_removals.unwrap_or(n / 2);

        let mut current = values.aligned(ids)?;
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut order = removal_order(ids, &remaining, &current, self.mode);
        let mut cursor = 0usize;

        let mut steps = vec![SelectionStep {
            removed_ids: BTreeSet::new(),
            train_size: n,
            rmse_after: -u.evaluate(&remaining)?,
        }];
        let mut best = steps[0].rmse_after;
        let mut stale = 0usize;
        let mut removed = 0usize;
        let mut exhausted = false;

        while removed < max_removals {
            if let Some((every, revalue)) = self.revalue {
                if steps.len() > 1 && (steps.len() - 1) % every == 0 {
                    let view = RestrictedUtility::new(u, remaining.clone());
                    let fresh = revalue(&view)?;
                    for &i in &remaining {
                        current[i] = fresh.get(&ids[i]).ok_or_else(|| {
                            Error::data(format!("revaluation has no value for sample {:?}", ids[i]))
                        })?;
                    }
                    order = removal_order(ids, &remaining, &current, self.mode);
                    cursor = 0;
                }
            }
            // Skip entries already swept away by an earlier cluster.
            while cursor < order.len() && remaining.binary_search(&order[cursor]).is_err() {
                cursor += 1;
            }
            let Some(&pick) = order.get(cursor) else {
                exhausted = true;
                break;
            };
            let batch: Vec<usize> = match self.cluster {
                None => vec![pick],
                Some((locs, radius)) => remaining
                    .iter()
                    .copied()
                    .filter(|&i| i == pick || great_circle_distance(&locs[pick], &locs[i]) <= radius)
                    .collect(),
            };
            if batch.len() >= remaining.len() {
                exhausted = true;
                break;
            }
            remaining.retain(|i| !batch.contains(i));
            removed += batch.len();
            let rmse = -u.evaluate(&remaining)?;
            steps.push(SelectionStep {
                removed_ids: batch.iter().map(|&i| ids[i].clone()).collect(),
                train_size: remaining.len(),
                rmse_after: rmse,
            });
            if rmse < best {
                best = rmse;
                stale = 0;
            } else {
                stale += 1;
                if self.stop.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }

        Ok(SelectionTrace {
            steps,
            direction: u.direction(),
            valuation_method: values.method,
            mode: self.mode,
            cluster_radius_km: self.cluster.map(|c| c.1),
            exhausted,
        })
    }
}

/// Pointwise removal guided by one upfront valuation.
pub fn iterative_select<U: Utility>(
    utility: &U,
    values: &ValuationResult,
    mode: Mode,
    stop: StopRule,
) -> Result<SelectionTrace> {
    Run {
        utility,
        mode,
        stop,
        cluster: None,
        revalue: None,
    }
    .execute(values)
}

/// Like [`iterative_select`], but each selected point takes every remaining
/// point within `radius_km` (great-circle) with it. `locations` is aligned
/// with the utility's ids.
pub fn cluster_select<U: Utility>(
    utility: &U,
    locations: &[Location],
    values: &ValuationResult,
    mode: Mode,
    radius_km: f64,
    stop: StopRule,
) -> Result<SelectionTrace> {
    Run {
        utility,
        mode,
        stop,
        cluster: Some((locations, radius_km)),
        revalue: None,
    }
    .execute(values)
}

/// Selection that re-values the remaining points every `every` steps.
/// `cluster` optionally turns on radius removal as in [`cluster_select`].
pub fn select_with_revaluation<U: Utility>(
    utility: &U,
    values: &ValuationResult,
    mode: Mode,
    stop: StopRule,
    cluster: Option<(&[Location], f64)>,
    every: usize,
    revalue: &dyn Fn(&RestrictedUtility<'_, U>) -> Result<ValuationResult>,
) -> Result<SelectionTrace> {
    if every == 0 {
        return Err(Error::config("revalue_every must be >= 1"));
    }
    Run {
        utility,
        mode,
        stop,
        cluster,
        revalue: Some((every, revalue)),
    }
    .execute(values)
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub initial_rmse: f64,
    pub best_rmse: f64,
    pub points_removed_at_best: usize,
    pub delta_rmse: f64,
}

impl ComparisonRow {
    pub fn from_trace(trace: &SelectionTrace) -> Self {
        let best = trace.best_step();
        ComparisonRow {
            method: trace.valuation_method,
            initial_rmse: trace.initial_rmse(),
            best_rmse: trace.steps[best].rmse_after,
            points_removed_at_best: trace.removed_through(best),
            delta_rmse: trace.initial_rmse() - trace.steps[best].rmse_after,
        }
    }

    /// Improvement as a percentage of the initial RMSE.
    pub fn percent_improvement(&self) -> f64 {
        100.0 * self.delta_rmse / self.initial_rmse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub traces: Vec<SelectionTrace>,
}

impl Comparison {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Maximum removals per strategy.
    pub budget: usize,
    /// Optional early stop; `None` runs the whole budget.
    pub patience: Option<usize>,
    pub tmc: TmcConfig,
}

/// Remove-low traces under random, leave-one-out and TMC values, reported
/// as initial RMSE, best RMSE, points removed at the best step and the
/// difference.
pub fn compare_strategies<U: Utility>(utility: &U, cfg: &CompareConfig) -> Result<Comparison> {
    let stop = StopRule {
        patience: cfg.patience,
        max_removals: Some(cfg.budget),
    };
    let valuations = [
        random_values(utility.ids(), cfg.tmc.seed),
        loo_values(utility)?,
        tmc_shapley(utility, &cfg.tmc)?,
    ];
    let traces = valuations
        .iter()
        .map(|v| iterative_select(utility, v, Mode::RemoveLow, stop))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        rows: traces.iter().map(ComparisonRow::from_trace).collect(),
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankComparison {
    /// `overlap_curve[k - 1]` = |top_k(a) ∩ top_k(b)| / k.
    pub overlap_curve: Vec<f64>,
    /// `jaccard_curve[k - 1]` = |∩| / |∪| over the same top-k sets.
    pub jaccard_curve: Vec<f64>,
    /// `(id, rank in a, rank in b)`, ranks starting at 1, in id order.
    pub rank_pairs: Vec<(String, usize, usize)>,
    pub spearman: f64,
}

/// Ids ordered by descending value, ties by ascending id.
pub fn descending_ids(v: &ValuationResult) -> Vec<String> {
    let mut pairs: Vec<(&String, f64)> = v.values.iter().map(|(k, x)| (k, *x)).collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    pairs.into_iter().map(|(k, _)| k.clone()).collect()
}

pub fn rank_compare(a: &ValuationResult, b: &ValuationResult) -> Result<RankComparison> {
    if a.values.len() != b.values.len() || a.values.keys().ne(b.values.keys()) {
        let only_a = a.values.keys().find(|k| !b.values.contains_key(*k));
        let only_b = b.values.keys().find(|k| !a.values.contains_key(*k));
        return Err(Error::data(format!(
            "valuations cover different samples (first only in A: {only_a:?}, first only in B: {only_b:?})"
        )));
    }
    let n = a.values.len();
    if n == 0 {
        return Err(Error::data("cannot compare empty valuations"));
    }
    let pos: BTreeMap<&String, usize> = a.values.keys().enumerate().map(|(i, k)| (k, i)).collect();
    let order_a: Vec<usize> = descending_ids(a).iter().map(|k| pos[k]).collect();
    let order_b: Vec<usize> = descending_ids(b).iter().map(|k| pos[k]).collect();

    let mut rank_a = vec![0usize; n];
    let mut rank_b = vec![0usize; n];
    let mut in_a = vec![false; n];
    let mut in_b = vec![false; n];
    let mut common = 0usize;
    let mut overlap_curve = Vec::with_capacity(n);
    let mut jaccard_curve = Vec::with_capacity(n);
    for k in 0..n {
        let (x, y) = (order_a[k], order_b[k]);
        rank_a[x] = k + 1;
        rank_b[y] = k + 1;
        in_a[x] = true;
        in_b[y] = true;
        if x == y {
            common += 1;
        } else {
            common += in_b[x] as usize + in_a[y] as usize;
        }
        let size = k + 1;
        overlap_curve.push(common as f64 / size as f64);
        jaccard_curve.push(common as f64 / (2 * size - common) as f64);
    }

    let spearman = if n == 1 {
        1.0
    } else {
        let d2: f64 = (0..n).map(|i| (rank_a[i] as f64 - rank_b[i] as f64).powi(2)).sum();
        let nf = n as f64;
        1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0))
    };
    let rank_pairs = a
        .values
        .keys()
        .enumerate()
        .map(|(i, k)| (k.clone(), rank_a[i], rank_b[i]))
        .collect();
    Ok(RankComparison {
        overlap_curve,
        jaccard_curve,
        rank_pairs,
        spearman,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSummary {
    pub species: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Value statistics per species label, highest mean first (ties by name).
/// Blank labels are grouped under `(unlabeled)`.
pub fn species_summary(values: &ValuationResult, train: &Dataset) -> Result<Vec<SpeciesSummary>> {
    let species: BTreeMap<&str, &str> = train
        .samples()
        .iter()
        .map(|s| (s.id.as_str(), s.species.as_str()))
        .collect();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, v) in &values.values {
        let label = species
            .get(id.as_str())
            .ok_or_else(|| Error::data(format!("valued sample {id:?} is not in the dataset")))?;
        let label = if label.trim().is_empty() { UNLABELED_SPECIES } else { label };
        groups.entry(label.to_string()).or_default().push(*v);
    }
    let mut out: Vec<SpeciesSummary> = groups
        .into_iter()
        .map(|(species, vals)| SpeciesSummary {
            count: vals.len(),
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            median: median(&vals).expect("groups are non-empty"),
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            species,
        })
        .collect();
    out.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.species.cmp(&b.species)));
    Ok(out)
}

fn comment_lines<W: Write>(out: &mut W, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    Ok(())
}

/// One row per step: `step,train_size,rmse_after,removed_ids` with ids
/// joined by `;`.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &SelectionTrace, comments: &[String]) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "train_size", "rmse_after", "removed_ids"])?;
    for (i, s) in trace.steps.iter().enumerate() {
        let removed: Vec<&str> = s.removed_ids.iter().map(String::as_str).collect();
        w.write_record([
            i.to_string(),
            s.train_size.to_string(),
            s.rmse_after.to_string(),
            removed.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `label,step,rmse` for any number of traces.
pub fn write_curves_csv<W: Write>(
    mut out: W,
    traces: &[(String, &SelectionTrace)],
    comments: &[String],
) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trace", "step", "rmse"])?;
    for (label, t) in traces {
        for (step, rmse) in t.curve() {
            w.write_record([label.clone(), step.to_string(), rmse.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const COMPARISON_COLUMNS: [&str; 5] = ["Method", "Initial RMSE", "Best RMSE", "Points Removed", "Delta RMSE"];

pub fn write_comparison_csv<W: Write>(mut out: W, rows: &[ComparisonRow], comments: &[String]) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.method.label().to_string(),
            format!("{:.4}", r.initial_rmse),
            format!("{:.4}", r.best_rmse),
            r.points_removed_at_best.to_string(),
            format!("{:.4}", r.delta_rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `id,lat,lon,removed` with `removed` = 1 for every point the trace
/// removed up to its best step.
pub fn write_removal_map_csv<W: Write>(
    mut out: W,
    train: &Dataset,
    trace: &SelectionTrace,
    comments: &[String],
) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let gone: BTreeSet<&str> = trace.steps[..=trace.best_step()]
        .iter()
        .flat_map(|s| s.removed_ids.iter().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "lat", "lon", "removed"])?;
    for s in train.samples() {
        w.write_record([
            s.id.clone(),
            s.location.lat().to_string(),
            s.location.lon().to_string(),
            u8::from(gone.contains(s.id.as_str())).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `k,overlap,jaccard`.
pub fn write_rank_curves_csv<W: Write>(mut out: W, cmp: &RankComparison, comments: &[String]) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "overlap", "jaccard"])?;
    for (k, (o, j)) in cmp.overlap_curve.iter().zip(&cmp.jaccard_curve).enumerate() {
        w.write_record([(k + 1).to_string(), o.to_string(), j.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `id,rank_a,rank_b` for the rank scatter.
pub fn write_rank_pairs_csv<W: Write>(mut out: W, cmp: &RankComparison, comments: &[String]) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "rank_a", "rank_b"])?;
    for (id, a, b) in &cmp.rank_pairs {
        w.write_record([id.clone(), a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_species_csv<W: Write>(mut out: W, rows: &[SpeciesSummary], comments: &[String]) -> Result<()> {
    comment_lines(&mut out, comments)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["species", "count", "mean", "median", "min", "max"])?;
    for r in rows {
        w.write_record([
            r.species.clone(),
            r.count.to_string(),
            r.mean.to_string(),
            r.median.to_string(),
            r.min.to_string(),
            r.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::valuation::FnUtility;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:02}")).collect()
    }

    fn values(method: Method, vals: &[f64]) -> ValuationResult {
        ValuationResult {
            method,
            seed: None,
            permutations_used: 0,
            values: ids(vals.len()).into_iter().zip(vals.iter().copied()).collect(),
            convergence_history: vec![],
            utility_full: None,
            utility_empty: None,
        }
    }

    /// Utility = -(number of "bad" points kept) - 0.1 * (points missing).
    fn bad_points(n: usize, bad: &'static [usize]) -> FnUtility<impl Fn(&[usize]) -> f64 + Sync> {
        FnUtility::new(ids(n), move |s: &[usize]| {
            let kept_bad = s.iter().filter(|i| bad.contains(i)).count() as f64;
            -(kept_bad + 0.1 * (n - s.len()) as f64)
        })
    }

    #[test]
    fn removes_lowest_first_and_tracks_rmse() {
        let u = bad_points(6, &[4, 5]);
        let v = values(Method::Tmc, &[0.5, 0.4, 0.3, 0.2, -1.0, -0.9]);
        let t = iterative_select(&u, &v, Mode::RemoveLow, StopRule::fixed(3)).unwrap();
        assert_eq!(t.steps.len(), 4);
        assert!(t.steps[0].removed_ids.is_empty());
        assert_eq!(t.steps[0].rmse_after, 2.0);
        assert_eq!(t.removed_ids(), vec!["p04", "p05", "p03"]);
        assert!((t.steps[2].rmse_after - 0.2).abs() < 1e-12);
        assert_eq!(t.best_step(), 2);
        let row = ComparisonRow::from_trace(&t);
        assert_eq!(row.points_removed_at_best, 2);
        assert!((row.delta_rmse - 1.8).abs() < 1e-12);
        let sizes: Vec<usize> = t.steps.iter().map(|s| s.train_size).collect();
        assert_eq!(sizes, vec![6, 5, 4, 3]);
    }

    #[test]
    fn equal_values_remove_in_id_order() {
        let u = bad_points(5, &[]);
        let v = values(Method::Random, &[1.0; 5]);
        let low = iterative_select(&u, &v, Mode::RemoveLow, StopRule::fixed(3)).unwrap();
        let high = iterative_select(&u, &v, Mode::RemoveHigh, StopRule::fixed(3)).unwrap();
        assert_eq!(low.removed_ids(), vec!["p00", "p01", "p02"]);
        assert_eq!(high.removed_ids(), low.removed_ids());
    }

    #[test]
    fn patience_and_default_budget() {
        // Every removal makes things worse.
        let u = bad_points(20, &[]);
        let v = values(Method::Loo, &(0..20).map(f64::from).collect::<Vec<_>>());
        let t = iterative_select(&u, &v, Mode::RemoveHigh, StopRule::default()).unwrap();
        assert_eq!(t.steps.len(), 6);
        let t = iterative_select(
            &u,
            &v,
            Mode::RemoveHigh,
            StopRule {
                patience: None,
                max_removals: None,
            },
        )
        .unwrap();
        assert_eq!(t.steps.len(), 11);
        assert!(!t.exhausted);
        assert!(iterative_select(
            &u,
            &v,
            Mode::RemoveLow,
            StopRule {
                patience: Some(0),
                max_removals: None
            }
        )
        .is_err());
    }

    #[test]
    fn stops_before_emptying() {
        let u = bad_points(3, &[]);
        let v = values(Method::Loo, &[1.0, 2.0, 3.0]);
        let t = iterative_select(&u, &v, Mode::RemoveLow, StopRule::fixed(10)).unwrap();
        assert!(t.exhausted);
        assert_eq!(t.steps.last().unwrap().train_size, 1);
    }

    #[test]
    fn budget_zero_reports_initial() {
        let u = bad_points(4, &[1]);
        let v = values(Method::Tmc, &[1.0, -1.0, 0.0, 2.0]);
        let t = iterative_select(&u, &v, Mode::RemoveLow, StopRule::fixed(0)).unwrap();
        let row = ComparisonRow::from_trace(&t);
        assert_eq!(row.best_rmse, row.initial_rmse);
        assert_eq!(row.delta_rmse, 0.0);
        assert_eq!(row.points_removed_at_best, 0);
    }

    fn line(n: usize, spacing_deg: f64) -> Vec<Location> {
        (0..n).map(|i| Location::new(45.0, i as f64 * spacing_deg).unwrap()).collect()
    }

    #[test]
    fn colocated_pair_goes_in_one_step() {
        let mut locs = line(6, 1.0);
        locs[5] = locs[4];
        let u = bad_points(6, &[4, 5]);
        let v = values(Method::Tmc, &[0.5, 0.4, 0.3, 0.2, -1.0, 0.9]);
        let t = cluster_select(&u, &locs, &v, Mode::RemoveLow, 10.0, StopRule::fixed(2)).unwrap();
        assert_eq!(t.steps[1].removed_ids, ["p04", "p05"].iter().map(|s| s.to_string()).collect());
        assert_eq!(t.steps[1].rmse_after, 0.2);
        assert_eq!(t.cluster_radius_km, Some(10.0));
        assert!(cluster_select(&u, &locs, &v, Mode::RemoveLow, 0.0, StopRule::fixed(2)).is_err());
    }

    #[test]
    fn cluster_covering_everything_is_flagged() {
        let locs = line(4, 0.01);
        let u = bad_points(4, &[]);
        let v = values(Method::Tmc, &[1.0, 2.0, 3.0, 4.0]);
        let t = cluster_select(&u, &locs, &v, Mode::RemoveLow, 100.0, StopRule::fixed(4)).unwrap();
        assert!(t.exhausted);
        assert_eq!(t.steps.len(), 1);
    }

    #[test]
    fn revaluation_uses_fresh_values() {
        let u = bad_points(5, &[]);
        let v = values(Method::Tmc, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        // Fresh values reverse the order, so removal switches to the top.
        let revalue = |r: &RestrictedUtility<'_, _>| -> Result<ValuationResult> {
            let n = r.ids().len();
            let vals: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
            Ok(ValuationResult {
                values: r.ids().iter().cloned().zip(vals).collect(),
                ..values(Method::Tmc, &[])
            })
        };
        let t = select_with_revaluation(&u, &v, Mode::RemoveLow, StopRule::fixed(3), None, 1, &revalue).unwrap();
        assert_eq!(t.removed_ids(), vec!["p00", "p04", "p03"]);
    }

    #[test]
    fn compare_rows_in_table_order() {
        let u = bad_points(8, &[2, 6]);
        let cfg = CompareConfig {
            budget: 4,
            patience: None,
            tmc: TmcConfig {
                seed: 1,
                ..Default::default()
            },
        };
        let c = compare_strategies(&u, &cfg).unwrap();
        let methods: Vec<Method> = c.rows.iter().map(|r| r.method).collect();
        assert_eq!(methods, vec![Method::Random, Method::Loo, Method::Tmc]);
        // Both informed strategies find the two bad points.
        assert!((c.row(Method::Loo).unwrap().delta_rmse - 1.8).abs() < 1e-12);
        assert!((c.row(Method::Tmc).unwrap().delta_rmse - 1.8).abs() < 1e-12);
        let mut buf = Vec::new();
        write_comparison_csv(&mut buf, &c.rows, &["hash: x".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# hash: x\nMethod,Initial RMSE,Best RMSE,Points Removed,Delta RMSE\n"));
    }

    #[test]
    fn rank_self_comparison() {
        let v = values(Method::Tmc, &[0.3, -1.0, 2.0, 0.3, 5.0]);
        let r = rank_compare(&v, &v).unwrap();
        assert!(r.overlap_curve.iter().all(|x| *x == 1.0));
        assert!(r.jaccard_curve.iter().all(|x| *x == 1.0));
        assert_eq!(r.spearman, 1.0);
    }

    #[test]
    fn rank_reversed_four() {
        let a = values(Method::Tmc, &[4.0, 3.0, 2.0, 1.0]);
        let b = values(Method::Loo, &[1.0, 2.0, 3.0, 4.0]);
        let r = rank_compare(&a, &b).unwrap();
        assert_eq!(r.spearman, -1.0);
        assert_eq!(r.overlap_curve, vec![0.0, 0.0, 2.0 / 3.0, 1.0]);
        // k = 3: two shared of four distinct.
        assert_eq!(r.jaccard_curve, vec![0.0, 0.0, 0.5, 1.0]);
        assert_eq!(r.rank_pairs[0], ("p00".to_string(), 1, 4));
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let a = values(Method::Tmc, &[1.0, 2.0]);
        let mut b = values(Method::Tmc, &[1.0, 2.0]);
        b.values.insert("zz".into(), 0.0);
        assert!(matches!(rank_compare(&a, &b), Err(Error::Data(_))));
        b.values.remove("p01");
        assert!(rank_compare(&a, &b).is_err());
    }

    fn species_ds(labels: &[&str]) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, s)| Sample {
                id: format!("p{i:02}"),
                location: Location::new(50.0, 10.0).unwrap(),
                species: s.to_string(),
                values: vec![Some(1.0)],
            })
            .collect();
        Dataset::new(samples, vec!["f".into()]).unwrap()
    }

    #[test]
    fn species_groups() {
        let d = species_ds(&["A", "A", "B", "B", ""]);
        let v = values(Method::Tmc, &[1.0, 1.0, 3.0, 3.0, 2.0]);
        let s = species_summary(&v, &d).unwrap();
        let names: Vec<&str> = s.iter().map(|r| r.species.as_str()).collect();
        assert_eq!(names, vec!["B", UNLABELED_SPECIES, "A"]);
        assert_eq!((s[0].mean, s[2].mean, s[0].count), (3.0, 1.0, 2));

        let one = species_summary(&values(Method::Tmc, &[1.0, 4.0, 2.0]), &species_ds(&["Q", "Q", "Q"])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].median, one[0].min, one[0].max), (2.0, 1.0, 4.0));
    }

    #[test]
    fn csv_exports() {
        let u = bad_points(4, &[3]);
        let v = values(Method::Tmc, &[1.0, 2.0, 3.0, -5.0]);
        let t = iterative_select(&u, &v, Mode::RemoveLow, StopRule::fixed(2)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,3,0.1,p03");

        let d = species_ds(&["A", "A", "A", "A"]);
        let mut buf = Vec::new();
        write_removal_map_csv(&mut buf, &d, &t, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("p03,50,10,1"));
        assert!(text.contains("p00,50,10,0"));
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_trace(
            raw in prop::collection::vec(-20i32..20, 3..12),
            mode_high in any::<bool>(),
        ) {
            let n = raw.len();
            let vals: Vec<f64> = raw.iter().map(|&x| f64::from(x) * 0.25).collect();
            let u = FnUtility::new(ids(n), |s: &[usize]| {
                s.iter().map(|&i| ((i * 7919) % 13) as f64 - 6.0).sum::<f64>()
            });
            let mode = if mode_high { Mode::RemoveHigh } else { Mode::RemoveLow };
            let stop = StopRule::fixed(n);
            let a = iterative_select(&u, &values(Method::Tmc, &vals), mode, stop).unwrap();
            let warped: Vec<f64> = vals.iter().map(|x| x.powi(3) + (x / 4.0).exp()).collect();
            let b = iterative_select(&u, &values(Method::Tmc, &warped), mode, stop).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tiny_radius_equals_pointwise(
            raw in prop::collection::vec(-1000.0f64..1000.0, 3..10),
            spacing in 0.05f64..3.0,
        ) {
            let n = raw.len();
            let locs = line(n, spacing);
            let u = FnUtility::new(ids(n), |s: &[usize]| -(s.len() as f64).sqrt());
            let v = values(Method::Tmc, &raw);
            let stop = StopRule { patience: Some(2), max_removals: None };
            let mut a = iterative_select(&u, &v, Mode::RemoveLow, stop).unwrap();
            let b = cluster_select(&u, &locs, &v, Mode::RemoveLow, 1e-6, stop).unwrap();
            a.cluster_radius_km = Some(1e-6);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn rank_compare_ignores_input_order(
            raw in prop::collection::vec(-5i32..5, 2..15),
            other in prop::collection::vec(-5i32..5, 15),
            rot in 0usize..15,
        ) {
            let n = raw.len();
            let a_vals: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
            let b_vals: Vec<f64> = other[..n].iter().map(|&x| f64::from(x)).collect();
            let a = values(Method::Tmc, &a_vals);
            let b = values(Method::Loo, &b_vals);
            let base = rank_compare(&a, &b).unwrap();
            // Rebuild both maps from rotated insertion orders.
            let rebuild = |v: &ValuationResult| {
                let mut pairs: Vec<(String, f64)> = v.values.clone().into_iter().collect();
                pairs.rotate_left(rot % n);
                ValuationResult { values: pairs.into_iter().collect(), ..v.clone() }
            };
            prop_assert_eq!(&rank_compare(&rebuild(&a), &rebuild(&b)).unwrap(), &base);
            prop_assert!((-1.0..=1.0).contains(&base.spearman));
            prop_assert_eq!(*base.overlap_curve.last().unwrap(), 1.0);
            prop_assert_eq!(*base.jaccard_curve.last().unwrap(), 1.0);
        }
    }
}
