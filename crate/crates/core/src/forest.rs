//! Bagged CART regression forests for both prediction directions.
//!
//! Forward forests map `(lat, lon)` to the feature vector; backward forests
//! map features to `(lat, lon)`. Trees are multi-output: a split is scored by
//! the summed reduction in squared error over all outputs, after each output
//! has been divided by its training standard deviation so that no single
//! feature dominates the criterion.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geo::{great_circle_distance, Location};
use crate::isoscape::{sample_variance, standardized_rmse, FeatureScale};
use crate::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    All,
    /// `ceil(p / 3)` candidate inputs per split.
    Third,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeaturesPerSplit {
    Count(usize),
    Rule(SplitRule),
}

impl FeaturesPerSplit {
    fn resolve(self, p: usize) -> usize {
        match self {
            FeaturesPerSplit::Count(k) => k.clamp(1, p),
            FeaturesPerSplit::Rule(SplitRule::All) => p,
            FeaturesPerSplit::Rule(SplitRule::Third) => p.div_ceil(3).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until `min_leaf` stops it.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub features_per_split: FeaturesPerSplit,
    /// Train each tree on a bootstrap resample (size N, with replacement).
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 200,
            max_depth: None,
            min_leaf: 2,
            features_per_split: FeaturesPerSplit::Rule(SplitRule::Third),
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::config("forest needs n_trees >= 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("forest needs min_leaf >= 1"));
        }
        if let FeaturesPerSplit::Count(0) = self.features_per_split {
            return Err(Error::config("features_per_split must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(Vec<f64>),
    Split {
        input: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A fitted regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    input,
                    threshold,
                    left,
                    right,
                } => at = if x[*input] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [Vec<f64>],
    /// Per-output weights for the split criterion.
    output_weight: &'a [f64],
    cfg: &'a ForestConfig,
    candidates: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> Vec<f64> {
        let m = self.y[0].len();
        let mut out = vec![0.0; m];
        for &i in idx {
            for (o, v) in out.iter_mut().zip(&self.y[i]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= idx.len() as f64);
        out
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(idx)));
        let depth_ok = self.cfg.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || idx.len() < 2 * self.cfg.min_leaf {
            return at;
        }
        let Some((input, threshold)) = self.best_split(idx, rng) else {
            return at;
        };
        let mid = partition(idx, |&i| self.x[i][input] <= threshold);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            input,
            threshold,
            left,
            right,
        };
        at
    }

    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let p = self.x[0].len();
        let m = self.y[0].len();
        let n = idx.len();
        let mut inputs: Vec<usize> = sample(rng, p, self.candidates).into_vec();
        inputs.sort_unstable();

        let mut total = vec![0.0; m];
        let mut total_sq = vec![0.0; m];
        for &i in idx {
            for o in 0..m {
                total[o] += self.y[i][o];
                total_sq[o] += self.y[i][o] * self.y[i][o];
            }
        }
        let sse = |sum: &[f64], sq: &[f64], count: f64| -> f64 {
            (0..m)
                .map(|o| self.output_weight[o] * (sq[o] - sum[o] * sum[o] / count))
                .sum()
        };
        let parent = sse(&total, &total_sq, n as f64);
        if parent <= 1e-12 * (1.0 + total_sq.iter().sum::<f64>()) {
            return None;
        }

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for &input in &inputs {
            order.sort_by(|a, b| self.x[*a][input].total_cmp(&self.x[*b][input]).then(a.cmp(b)));
            let mut left = vec![0.0; m];
            let mut left_sq = vec![0.0; m];
            for k in 0..n - 1 {
                let i = order[k];
                for o in 0..m {
                    left[o] += self.y[i][o];
                    left_sq[o] += self.y[i][o] * self.y[i][o];
                }
                let n_left = k + 1;
                if n_left < self.cfg.min_leaf || n - n_left < self.cfg.min_leaf {
                    continue;
                }
                let (a, b) = (self.x[i][input], self.x[order[k + 1]][input]);
                if a == b {
                    continue;
                }
                let right: Vec<f64> = (0..m).map(|o| total[o] - left[o]).collect();
                let right_sq: Vec<f64> = (0..m).map(|o| total_sq[o] - left_sq[o]).collect();
                let child = sse(&left, &left_sq, n_left as f64) + sse(&right, &right_sq, (n - n_left) as f64);
                let gain = parent - child;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, input, 0.5 * (a + b)));
                }
            }
        }
        best.map(|(_, input, t)| (input, t))
    }
}

/// Stable in-place partition; returns the number of elements satisfying
/// `pred`.
fn partition(idx: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = idx.iter().partition(|i| pred(i));
    let mid = yes.len();
    for (slot, v) in idx.iter_mut().zip(yes.into_iter().chain(no)) {
        *slot = v;
    }
    mid
}

fn fit_tree(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    output_weight: &[f64],
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> RegressionTree {
    let n = x.len();
    let mut idx: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut builder = TreeBuilder {
        x,
        y,
        output_weight,
        cfg,
        candidates: cfg.features_per_split.resolve(x[0].len()),
        nodes: Vec::new(),
    };
    builder.build(&mut idx, 0, rng);
    RegressionTree {
        nodes: builder.nodes,
    }
}

/// Fit a forest on raw inputs and targets. Each tree draws from its own
/// ChaCha stream of `cfg.seed`, so parallel and serial fits agree.
pub fn fit_trees(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &ForestConfig) -> Result<Vec<RegressionTree>> {
    cfg.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::data("forest needs matching, non-empty inputs and targets"));
    }
    let m = y[0].len();
    let output_weight: Vec<f64> = (0..m)
        .map(|o| {
            let col: Vec<f64> = y.iter().map(|r| r[o]).collect();
            match sample_variance(&col) {
                Some(v) if v > 0.0 => 1.0 / v,
                _ => 1.0,
            }
        })
        .collect();
    Ok((0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            fit_tree(x, y, &output_weight, cfg, &mut rng)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ForestModel {
    pub direction: Direction,
    pub trees: Vec<RegressionTree>,
    /// Feature names (forward) or `["lat", "lon"]` (backward).
    pub output_names: Vec<String>,
    feature_names: Vec<String>,
    train_sd: Vec<Option<f64>>,
}

fn location_row(l: &Location) -> Vec<f64> {
    vec![l.lat(), l.lon()]
}

pub fn fit_forest(train: &Dataset, direction: Direction, cfg: &ForestConfig) -> Result<ForestModel> {
    let features = train.complete_rows()?;
    let locs: Vec<Vec<f64>> = train.samples().iter().map(|s| location_row(&s.location)).collect();
    let (x, y, output_names) = match direction {
        Direction::Forward => (locs, features.clone(), train.feature_names().to_vec()),
        Direction::Backward => (features.clone(), locs, vec!["lat".into(), "lon".into()]),
    };
    let trees = fit_trees(&x, &y, cfg)?;
    let train_sd = (0..train.n_features())
        .map(|j| {
            let col: Vec<f64> = features.iter().map(|r| r[j]).collect();
            sample_variance(&col).map(f64::sqrt)
        })
        .collect();
    Ok(ForestModel {
        direction,
        trees,
        output_names,
        feature_names: train.feature_names().to_vec(),
        train_sd,
    })
}

impl ForestModel {
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn train_sd(&self) -> &[Option<f64>] {
        &self.train_sd
    }

    fn expected_inputs(&self) -> usize {
        match self.direction {
            Direction::Forward => 2,
            Direction::Backward => self.feature_names.len(),
        }
    }

    /// Location predicted by a backward forest.
    pub fn predict_location(&self, features: &[f64]) -> Result<Location> {
        if self.direction != Direction::Backward {
            return Err(Error::config("predict_location needs a backward forest"));
        }
        let out = predict_forest(self, features)?;
        Ok(Location::clamped(out[0], out[1]))
    }

    /// Feature vector predicted by a forward forest.
    pub fn predict_features(&self, x: &Location) -> Result<Vec<f64>> {
        if self.direction != Direction::Forward {
            return Err(Error::config("predict_features needs a forward forest"));
        }
        predict_forest(self, &location_row(x))
    }
}

/// Mean of the tree outputs. Backward outputs are clamped to valid
/// latitude/longitude ranges.
pub fn predict_forest(model: &ForestModel, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != model.expected_inputs() {
        return Err(Error::data(format!(
            "forest expects {} inputs, got {}",
            model.expected_inputs(),
            input.len()
        )));
    }
    let m = model.output_names.len();
    let mut out = vec![0.0; m];
    for t in &model.trees {
        for (o, v) in out.iter_mut().zip(t.predict(input)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= model.trees.len() as f64);
    if model.direction == Direction::Backward {
        let loc = Location::clamped(out[0], out[1]);
        out = vec![loc.lat(), loc.lon()];
    }
    Ok(out)
}

/// Root mean square of great-circle errors, km.
pub fn location_rmse(predicted: &[Location], truth: &[Location]) -> f64 {
    let sum: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| great_circle_distance(p, t).powi(2))
        .sum();
    (sum / predicted.len() as f64).sqrt()
}

/// Forward: standardised-feature RMSE (training SDs). Backward: great-circle
/// RMSE in km.
pub fn forest_rmse(model: &ForestModel, test: &Dataset) -> Result<f64> {
    match model.direction {
        Direction::Forward => {
            let sds = model
                .train_sd
                .iter()
                .zip(&model.feature_names)
                .map(|(sd, name)| match sd {
                    Some(s) if *s > 0.0 => Ok(*s),
                    _ => Err(Error::data(format!(
                        "feature {name:?} has zero training standard deviation"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            forest_rmse_scaled(model, test, &FeatureScale(sds))
        }
        Direction::Backward => forest_rmse_scaled(model, test, &FeatureScale(vec![])),
    }
}

/// As [`forest_rmse`] with an explicit forward scale (ignored backward).
pub fn forest_rmse_scaled(model: &ForestModel, test: &Dataset, scale: &FeatureScale) -> Result<f64> {
    let rows = test.complete_rows()?;
    match model.direction {
        Direction::Forward => {
            let preds = test
                .samples()
                .iter()
                .map(|s| model.predict_features(&s.location))
                .collect::<Result<Vec<_>>>()?;
            Ok(standardized_rmse(&preds, &rows, scale))
        }
        Direction::Backward => {
            let preds = rows
                .iter()
                .map(|r| model.predict_location(r))
                .collect::<Result<Vec<_>>>()?;
            Ok(location_rmse(&preds, &test.locations()))
        }
    }
}
