use std::io::Write;

use isoshap::dataset::{
    apply_missing_policy, apply_missing_policy_split, generate_synthetic, load_csv, split, write_csv,
    CsvSchema, Dataset, SyntheticConfig,
};
use isoshap::forest::ForestConfig;
use isoshap::geo::{build_grid, BoundingBox};
use isoshap::isoscape::{select_hyperparameters, GpSpec, HyperGrid};
use isoshap::selection::{
    cluster_select, compare_strategies, iterative_select, rank_compare, select_with_revaluation,
    species_summary, write_comparison_csv, write_curves_csv, write_rank_curves_csv, write_rank_pairs_csv,
    write_removal_map_csv, write_species_csv, write_trace_csv, CompareConfig, SelectionTrace, StopRule,
};
use isoshap::valuation::{
    beta_shapley, exact_shapley, loo_values, random_values, tmc_shapley, BetaConfig, CachedUtility,
    Convergence, Method, ModelKind, ModelUtility, RestrictedUtility, TmcConfig, Utility, UtilitySpec,
    ValuationResult,
};
use isoshap::Direction;
use serde::Serialize;

use crate::config::{ModelChoice, RunConfig, ValuationConfig};
use crate::output::{Emitter, Meta};
use crate::CliError;

fn emitter(cfg: &RunConfig, command: &'static str) -> Result<Emitter, CliError> {
    Emitter::new(
        cfg.out_dir(),
        Meta {
            tool: "isoshap",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: cfg.hash(),
            seed: cfg.seed,
        },
    )
}

fn synthetic_config(cfg: &RunConfig) -> SyntheticConfig {
    let s = &cfg.data.synthetic;
    let mut out = SyntheticConfig::europe(s.n_samples, cfg.seed);
    if let Some(b) = s.bbox {
        out.bbox = b;
    }
    out.corrupt_fraction = s.corrupt_fraction;
    out.corrupt_magnitude = s.corrupt_magnitude;
    out.corrupt_cluster_size = s.corrupt_cluster_size;
    out.missing_fraction = s.missing_fraction;
    out
}

/// Clean companion test set: same field, different seed and id prefix.
fn synthetic_test_config(cfg: &RunConfig, n: usize) -> SyntheticConfig {
    let mut out = synthetic_config(cfg);
    out.n_samples = n;
    out.seed = cfg.seed.wrapping_add(1);
    out.corrupt_fraction = 0.0;
    out.missing_fraction = 0.0;
    out.id_prefix = "t".into();
    out
}

struct Loaded {
    /// Every sample before splitting (missing values untouched).
    full: Dataset,
    train: Dataset,
    test: Dataset,
    corrupted_ids: Vec<String>,
    bbox: Option<BoundingBox>,
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let d = &cfg.data;
    let schema = CsvSchema {
        features: d.features.clone(),
    };
    let (full, test, corrupted_ids, bbox) = match &d.csv {
        Some(path) => {
            let full = load_csv(path, &schema)?;
            let test = d.test_csv.as_ref().map(|p| load_csv(p, &schema)).transpose()?;
            (full, test, Vec::new(), None)
        }
        None => {
            let syn = synthetic_config(cfg);
            let data = generate_synthetic(&syn)?;
            let test = match d.synthetic.test_samples {
                Some(n) => Some(generate_synthetic(&synthetic_test_config(cfg, n))?.dataset),
                None => None,
            };
            (data.dataset, test, data.corrupted_ids, Some(syn.bbox))
        }
    };
    let (train, test) = match test {
        Some(test) => (full.clone(), test),
        None => split(&full, d.test_fraction, cfg.seed)?,
    };
    let (train, test) = apply_missing_policy_split(&train, &test, d.missing)?;
    Ok(Loaded {
        full,
        train,
        test,
        corrupted_ids,
        bbox,
    })
}

fn grid_bbox(cfg: &RunConfig, data: &Loaded) -> BoundingBox {
    if let Some(b) = cfg.grid.bbox.or(data.bbox) {
        return b;
    }
    let pad = cfg.grid.resolution_deg;
    let locs = data.train.locations().into_iter().chain(data.test.locations());
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (90.0f64, -90.0f64, 180.0f64, -180.0f64);
    for l in locs {
        lat0 = lat0.min(l.lat());
        lat1 = lat1.max(l.lat());
        lon0 = lon0.min(l.lon());
        lon1 = lon1.max(l.lon());
    }
    BoundingBox {
        lat_min: (lat0 - pad).max(-90.0),
        lat_max: (lat1 + pad).min(90.0),
        lon_min: (lon0 - pad).max(-180.0),
        lon_max: (lon1 + pad).min(180.0),
    }
}

fn build_utility(cfg: &RunConfig, data: &Loaded) -> Result<ModelUtility, CliError> {
    let m = &cfg.model;
    let model = match m.kind {
        ModelChoice::Gp => {
            let spec = if m.optimize {
                select_hyperparameters(
                    &data.train,
                    &HyperGrid {
                        family: m.kernel,
                        ..HyperGrid::default()
                    },
                )?
            } else {
                GpSpec::scaled_to(&data.train, m.kernel, m.lengthscale_km, m.noise_fraction)?
            };
            ModelKind::Gp(spec)
        }
        ModelChoice::Forest => ModelKind::Forest(ForestConfig {
            seed: cfg.seed,
            ..m.forest
        }),
    };
    let grid = match (m.kind, m.direction) {
        (ModelChoice::Gp, Direction::Backward) => Some(build_grid(&grid_bbox(cfg, data), cfg.grid.resolution_deg)?),
        _ => None,
    };
    Ok(ModelUtility::new(
        data.train.clone(),
        UtilitySpec {
            model,
            direction: m.direction,
            test: data.test.clone(),
            grid,
            prior: None,
        },
    )?)
}

fn run_valuation<U: Utility>(u: &U, v: &ValuationConfig, seed: u64) -> isoshap::Result<ValuationResult> {
    let convergence = v.converge.then_some(Convergence {
        window: v.window,
        rel_change: v.rel_change,
    });
    match v.method {
        Method::Exact => exact_shapley(u, v.exact_cap),
        Method::Tmc => tmc_shapley(
            u,
            &TmcConfig {
                tolerance: v.tolerance,
                convergence,
                max_permutations: v.max_permutations,
                seed,
            },
        ),
        Method::Beta => beta_shapley(
            u,
            &BetaConfig {
                params: v.beta,
                iterations: v.iterations,
                convergence,
                paper_literal_weights: v.paper_literal_weights,
                seed,
            },
        ),
        Method::Loo => loo_values(u),
        Method::Random => Ok(random_values(u.ids(), seed)),
    }
}

#[derive(Serialize)]
struct ValuesFile<'a> {
    #[serde(flatten)]
    result: &'a ValuationResult,
    n_samples: usize,
    mean_value: f64,
    sum_values: f64,
}

fn write_values(out: &mut Emitter, name: &str, r: &ValuationResult) -> Result<(), CliError> {
    out.json(
        name,
        &ValuesFile {
            result: r,
            n_samples: r.values.len(),
            mean_value: r.mean(),
            sum_values: r.total(),
        },
    )
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![(lo, hi, values.len())];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let start = lo + i as f64 * width;
            let end = if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width };
            (start, end, c)
        })
        .collect()
}

fn write_histogram(out: &mut Emitter, r: &ValuationResult, bins: usize) -> Result<(), CliError> {
    let values: Vec<f64> = r.values.values().copied().collect();
    let mean = r.mean();
    out.csv("histogram.csv", |buf, comments| {
        for c in comments {
            writeln!(buf, "# {c}")?;
        }
        writeln!(buf, "# mean_value: {mean}")?;
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["bin_start", "bin_end", "count"])?;
        for (s, e, c) in histogram(&values, bins) {
            w.write_record([s.to_string(), e.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn finish(out: &Emitter) {
    for p in out.written() {
        println!("wrote {}", p.display());
    }
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.data.csv.is_some() {
        return Err(CliError::config(
            "generate writes synthetic data; remove data.csv or use the [data.synthetic] section",
        ));
    }
    let syn = synthetic_config(cfg);
    let data = generate_synthetic(&syn)?;
    let mut out = emitter(cfg, "generate")?;
    out.csv("synthetic.csv", |buf, comments| write_csv(buf, &data.dataset, comments))?;
    if let Some(n) = cfg.data.synthetic.test_samples {
        let test = generate_synthetic(&synthetic_test_config(cfg, n))?;
        out.csv("synthetic_test.csv", |buf, comments| write_csv(buf, &test.dataset, comments))?;
    }

    #[derive(Serialize)]
    struct Manifest<'a> {
        n_samples: usize,
        n_corrupted: usize,
        corrupted_ids: &'a [String],
        generator: &'a SyntheticConfig,
    }
    out.json(
        "manifest.json",
        &Manifest {
            n_samples: data.dataset.len(),
            n_corrupted: data.corrupted_ids.len(),
            corrupted_ids: &data.corrupted_ids,
            generator: &syn,
        },
    )?;
    println!(
        "generated {} samples ({} corrupted), {} features",
        data.dataset.len(),
        data.corrupted_ids.len(),
        data.dataset.n_features()
    );
    finish(&out);
    Ok(())
}

pub fn value(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load(cfg)?;
    let u = CachedUtility::new(build_utility(cfg, &data)?);
    let r = run_valuation(&u, &cfg.valuation, cfg.seed)?;
    let mut out = emitter(cfg, "value")?;
    write_values(&mut out, "values.json", &r)?;
    write_histogram(&mut out, &r, cfg.valuation.histogram_bins)?;

    println!("method: {}", r.method.label());
    println!("training samples: {}", r.values.len());
    if r.permutations_used > 0 {
        println!("iterations used: {}", r.permutations_used);
    }
    println!("mean value: {:.6}", r.mean());
    println!("sum of values: {:.6}", r.total());
    if let (Some(full), Some(empty)) = (r.utility_full, r.utility_empty) {
        println!("v(D) - v(empty): {:.6}", full - empty);
    }
    finish(&out);
    Ok(())
}

fn stop_rule(cfg: &RunConfig) -> StopRule {
    StopRule {
        patience: (cfg.selection.patience > 0).then_some(cfg.selection.patience),
        max_removals: cfg.selection.max_removals,
    }
}

fn trace_label(t: &SelectionTrace) -> String {
    let mode = match t.mode {
        isoshap::selection::Mode::RemoveLow => "remove_low",
        isoshap::selection::Mode::RemoveHigh => "remove_high",
    };
    format!("{}_{mode}", t.valuation_method.label())
}

pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load(cfg)?;
    let u = CachedUtility::new(build_utility(cfg, &data)?);
    let values = run_valuation(&u, &cfg.valuation, cfg.seed)?;
    let s = &cfg.selection;
    let stop = stop_rule(cfg);
    let locs = data.train.locations();
    let cluster = s.cluster_radius_km.map(|r| (locs.as_slice(), r));

    let trace = match (s.revalue_every, cluster) {
        (Some(every), _) => {
            let revalue = |view: &RestrictedUtility<'_, CachedUtility<ModelUtility>>| run_valuation(view, &cfg.valuation, cfg.seed);
            select_with_revaluation(&u, &values, s.mode, stop, cluster, every, &revalue)?
        }
        (None, Some((l, r))) => cluster_select(&u, l, &values, s.mode, r, stop)?,
        (None, None) => iterative_select(&u, &values, s.mode, stop)?,
    };

    let mut out = emitter(cfg, "select")?;
    write_values(&mut out, "values.json", &values)?;
    out.json("trace.json", &trace)?;
    out.csv("trace.csv", |buf, c| write_trace_csv(buf, &trace, c))?;
    out.csv("curves.csv", |buf, c| write_curves_csv(buf, &[(trace_label(&trace), &trace)], c))?;
    out.csv("removal_map.csv", |buf, c| write_removal_map_csv(buf, &data.train, &trace, c))?;

    let best = trace.best_step();
    println!(
        "{}: initial RMSE {:.4}, best {:.4} after removing {} points ({} steps{})",
        trace_label(&trace),
        trace.initial_rmse(),
        trace.best_rmse(),
        trace.removed_through(best),
        trace.steps.len() - 1,
        if trace.exhausted { ", stopped: training set exhausted" } else { "" }
    );
    if !data.corrupted_ids.is_empty() {
        let removed: Vec<&str> = trace.steps[..=best]
            .iter()
            .flat_map(|st| st.removed_ids.iter().map(String::as_str))
            .collect();
        let hits = data.corrupted_ids.iter().filter(|c| removed.contains(&c.as_str())).count();
        println!("corrupted samples removed by the best step: {hits}/{}", data.corrupted_ids.len());
    }

    if s.compare {
        let budget = s.budget.unwrap_or(data.train.len() / 2);
        let vc = &cfg.valuation;
        let cmp = compare_strategies(
            &u,
            &CompareConfig {
                budget,
                patience: stop.patience,
                tmc: TmcConfig {
                    tolerance: vc.tolerance,
                    convergence: vc.converge.then_some(Convergence {
                        window: vc.window,
                        rel_change: vc.rel_change,
                    }),
                    max_permutations: vc.max_permutations,
                    seed: cfg.seed,
                },
            },
        )?;
        out.csv("comparison.csv", |buf, c| write_comparison_csv(buf, &cmp.rows, c))?;
        out.json("comparison.json", &cmp)?;
        let labelled: Vec<(String, &SelectionTrace)> = cmp.traces.iter().map(|t| (trace_label(t), t)).collect();
        out.csv("comparison_curves.csv", |buf, c| write_curves_csv(buf, &labelled, c))?;
        println!("{:<8} {:>12} {:>10} {:>14} {:>11} {:>8}", "Method", "Initial RMSE", "Best RMSE", "Points Removed", "Delta RMSE", "Percent");
        for r in &cmp.rows {
            println!(
                "{:<8} {:>12.4} {:>10.4} {:>14} {:>11.4} {:>7.2}%",
                r.method.label(),
                r.initial_rmse,
                r.best_rmse,
                r.points_removed_at_best,
                r.delta_rmse,
                r.percent_improvement()
            );
        }
    }
    finish(&out);
    Ok(())
}

fn read_values(path: &std::path::Path) -> Result<ValuationResult, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{} is not a valuation file: {e}", path.display())))
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let r = &cfg.report;
    let Some(a_path) = &r.a else {
        return Err(CliError::config("report needs report.a (and report.b for a rank comparison)"));
    };
    let a = read_values(a_path)?;
    let b = r.b.as_ref().map(|p| read_values(p)).transpose()?;
    let dataset = match &r.dataset {
        Some(p) => load_csv(p, &CsvSchema { features: cfg.data.features.clone() })?,
        None => load(cfg)?.full,
    };
    let dataset = apply_missing_policy(&dataset, cfg.data.missing)?;

    let mut out = emitter(cfg, "report")?;
    if let Some(b) = &b {
        let cmp = rank_compare(&a, b)?;
        #[derive(Serialize)]
        struct RankFile<'a> {
            method_a: &'static str,
            method_b: &'static str,
            #[serde(flatten)]
            comparison: &'a isoshap::selection::RankComparison,
        }
        out.json(
            "rank.json",
            &RankFile {
                method_a: a.method.label(),
                method_b: b.method.label(),
                comparison: &cmp,
            },
        )?;
        out.csv("rank_curves.csv", |buf, c| write_rank_curves_csv(buf, &cmp, c))?;
        out.csv("rank_pairs.csv", |buf, c| write_rank_pairs_csv(buf, &cmp, c))?;
        let n = cmp.overlap_curve.len();
        let k = (n / 10).max(1);
        println!(
            "{} vs {}: spearman {:.4}, top-{k} overlap {:.3}, top-{k} jaccard {:.3}",
            a.method.label(),
            b.method.label(),
            cmp.spearman,
            cmp.overlap_curve[k - 1],
            cmp.jaccard_curve[k - 1]
        );
    }
    let species = species_summary(&a, &dataset)?;
    out.csv("species.csv", |buf, c| write_species_csv(buf, &species, c))?;
    println!("species groups: {}", species.len());
    for s in &species {
        println!("  {:<24} n={:<4} mean {:.6}", s.species, s.count, s.mean);
    }
    finish(&out);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_value() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[3], (0.75, 1.0, 2));
        assert_eq!(histogram(&[2.0, 2.0], 5), vec![(2.0, 2.0, 2)]);
    }
}
