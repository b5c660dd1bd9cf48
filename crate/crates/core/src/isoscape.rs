//! Forward isoscape model: one independent Gaussian process per feature over
//! great-circle distance, plus Bayesian inversion onto a spatial grid.
//!
//! The predictive equations are the textbook ones:
//!
//! ```text
//! E[y_j | x*] = mu_j + k*^T (K + s_j^2 I)^-1 (y_j - mu_j)
//! V[y_j | x*] = k(x*, x*) + s_j^2 - k*^T (K + s_j^2 I)^-1 k*
//! ```
//!
//! so the predictive variance includes the observation noise. The backward
//! direction multiplies the per-feature Gaussian densities (features are
//! treated as independent), weights by a prior and normalises over the grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geo::{great_circle_distance, Location, SpatialGrid, EARTH_RADIUS_KM};

/// Diagonal jitter tried, in order, when a covariance factorisation fails.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Negative variances down to this value are treated as roundoff and
/// clamped to zero.
pub const VARIANCE_CLAMP: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `s^2 exp(-d / l)` on great-circle distance.
    Exponential,
    /// Matérn 3/2 on chordal distance.
    Matern32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lengthscale_km: f64,
    pub signal_variance: f64,
}

impl KernelConfig {
    pub fn exponential(lengthscale_km: f64, signal_variance: f64) -> Self {
        KernelConfig {
            family: KernelFamily::Exponential,
            lengthscale_km,
            signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale_km.is_finite() && self.lengthscale_km > 0.0) {
            return Err(Error::config(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale_km
            )));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::config(format!(
                "kernel signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        Ok(())
    }

    /// Covariance as a function of great-circle distance in km.
    pub fn covariance(&self, gc_km: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => self.signal_variance * (-gc_km / self.lengthscale_km).exp(),
            KernelFamily::Matern32 => {
                let chord = 2.0 * EARTH_RADIUS_KM * (gc_km / (2.0 * EARTH_RADIUS_KM)).sin();
                let r = 3f64.sqrt() * chord / self.lengthscale_km;
                self.signal_variance * (1.0 + r) * (-r).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureGpParams {
    pub kernel: KernelConfig,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum MeanPolicy {
    /// Mean of the training values of each feature.
    #[default]
    TrainingMean,
    Zero,
    /// One constant per feature.
    Fixed(Vec<f64>),
}

/// Hyperparameters for every feature plus the baseline-mean rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSpec {
    pub features: Vec<FeatureGpParams>,
    #[serde(default)]
    pub mean_policy: MeanPolicy,
}

impl GpSpec {
    /// Same kernel and noise for every feature.
    pub fn uniform(n_features: usize, kernel: KernelConfig, noise_variance: f64) -> Self {
        GpSpec {
            features: vec![
                FeatureGpParams {
                    kernel,
                    noise_variance
                };
                n_features
            ],
            mean_policy: MeanPolicy::TrainingMean,
        }
    }

    /// Scale each feature's hyperparameters to its empirical variance:
    /// signal variance = var_j, noise variance = `noise_fraction * var_j`.
    pub fn scaled_to(
        train: &Dataset,
        family: KernelFamily,
        lengthscale_km: f64,
        noise_fraction: f64,
    ) -> Result<Self> {
        let features = (0..train.n_features())
            .map(|j| {
                let col = train.column(j)?;
                let var = sample_variance(&col).filter(|v| *v > 0.0).ok_or_else(|| {
                    Error::data(format!(
                        "feature {:?} has no spread; cannot scale GP hyperparameters",
                        train.feature_names()[j]
                    ))
                })?;
                Ok(FeatureGpParams {
                    kernel: KernelConfig {
                        family,
                        lengthscale_km,
                        signal_variance: var,
                    },
                    noise_variance: noise_fraction * var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpSpec {
            features,
            mean_policy: MeanPolicy::TrainingMean,
        })
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.features.len() != n_features {
            return Err(Error::config(format!(
                "GP spec has {} feature entries, dataset has {n_features} features",
                self.features.len()
            )));
        }
        for p in &self.features {
            p.kernel.validate()?;
            if !(p.noise_variance.is_finite() && p.noise_variance >= 0.0) {
                return Err(Error::config(format!(
                    "noise variance must be non-negative, got {}",
                    p.noise_variance
                )));
            }
        }
        if let MeanPolicy::Fixed(v) = &self.mean_policy {
            if v.len() != n_features {
                return Err(Error::config("fixed mean policy needs one value per feature"));
            }
        }
        Ok(())
    }
}

/// Coarse grid of candidate hyperparameters for [`select_hyperparameters`].
/// Signal and noise candidates are multiples of each feature's empirical
/// variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub family: KernelFamily,
    pub lengthscales_km: Vec<f64>,
    pub signal_scales: Vec<f64>,
    pub noise_fractions: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            family: KernelFamily::Exponential,
            lengthscales_km: vec![250.0, 500.0, 1000.0, 2000.0, 4000.0],
            signal_scales: vec![0.5, 1.0, 2.0],
            noise_fractions: vec![0.01, 0.05, 0.1, 0.25],
        }
    }
}

/// Per-feature grid search maximising the log marginal likelihood. Ties keep
/// the first candidate in grid order.
pub fn select_hyperparameters(train: &Dataset, grid: &HyperGrid) -> Result<GpSpec> {
    let locs = train.locations();
    let dists = distance_matrix(&locs);
    let features = (0..train.n_features())
        .map(|j| {
            let y = train.column(j)?;
            let var = sample_variance(&y).filter(|v| *v > 0.0).unwrap_or(1.0);
            let mu = mean(&y);
            let mut best: Option<(f64, FeatureGpParams)> = None;
            for &l in &grid.lengthscales_km {
                for &s in &grid.signal_scales {
                    for &nf in &grid.noise_fractions {
                        let params = FeatureGpParams {
                            kernel: KernelConfig {
                                family: grid.family,
                                lengthscale_km: l,
                                signal_variance: s * var,
                            },
                            noise_variance: nf * var,
                        };
                        params.kernel.validate()?;
                        let all: Vec<usize> = (0..locs.len()).collect();
                        let Ok(gp) = FeatureGp::fit_indexed(&dists, &all, &y, params, mu) else {
                            continue;
                        };
                        let lml = gp.log_marginal_likelihood(&y);
                        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                            best = Some((lml, params));
                        }
                    }
                }
            }
            best.map(|(_, p)| p).ok_or_else(|| {
                Error::numerical(format!(
                    "no hyperparameter candidate could be fitted for feature {:?}",
                    train.feature_names()[j]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GpSpec {
        features,
        mean_policy: MeanPolicy::TrainingMean,
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance; `None` for fewer than two values.
pub fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Pairwise great-circle distances.
pub fn distance_matrix(locs: &[Location]) -> DMatrix<f64> {
    let n = locs.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..i {
            let v = great_circle_distance(&locs[i], &locs[k]);
            d[(i, k)] = v;
            d[(k, i)] = v;
        }
    }
    d
}

/// Distances from each of `from` (rows) to each of `to` (columns).
pub fn cross_distances(from: &[Location], to: &[Location]) -> DMatrix<f64> {
    DMatrix::from_fn(from.len(), to.len(), |r, c| great_circle_distance(&from[r], &to[c]))
}

/// Cholesky with the jitter ladder. Returns the factor and the jitter that
/// was needed (zero when none).
pub fn factorize(matrix: DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(matrix.clone()) {
        return Some((c, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Some((c, jitter));
        }
    }
    None
}

/// A fitted single-feature GP.
#[derive(Debug, Clone)]
pub struct FeatureGp {
    pub params: FeatureGpParams,
    pub mu: f64,
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl FeatureGp {
    /// Fit on the training points `idx` of a precomputed distance matrix.
    /// `y` holds the targets for `idx`, in the same order.
    pub(crate) fn fit_indexed(
        dists: &DMatrix<f64>,
        idx: &[usize],
        y: &[f64],
        params: FeatureGpParams,
        mu: f64,
    ) -> std::result::Result<Self, ()> {
        let n = idx.len();
        let mut k = DMatrix::from_fn(n, n, |r, c| params.kernel.covariance(dists[(idx[r], idx[c])]));
        for i in 0..n {
            k[(i, i)] += params.noise_variance;
        }
        let (chol, jitter) = factorize(k).ok_or(())?;
        let centered = DVector::from_iterator(n, y.iter().map(|v| v - mu));
        let weights = chol.solve(&centered);
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(());
        }
        Ok(FeatureGp {
            params,
            mu,
            jitter,
            chol,
            weights,
        })
    }

    /// Lower-triangular factor of `K + s^2 I` (plus any jitter).
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn log_marginal_likelihood(&self, y: &[f64]) -> f64 {
        let n = y.len() as f64;
        let fit: f64 = y
            .iter()
            .zip(self.weights.iter())
            .map(|(yi, w)| (yi - self.mu) * w)
            .sum();
        let l = self.chol.l_dirty();
        let logdet: f64 = (0..y.len()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    fn mean_from_cov(&self, kstar: &DVector<f64>) -> f64 {
        self.mu + kstar.dot(&self.weights)
    }

    fn prediction_from_cov(&self, kstar: &DVector<f64>) -> Result<Prediction> {
        let mean = self.mean_from_cov(kstar);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(kstar)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let raw = self.params.kernel.signal_variance + self.params.noise_variance - v.norm_squared();
        let variance = clamp_variance(raw)?;
        Ok(Prediction { mean, variance })
    }
}

pub(crate) fn clamp_variance(raw: f64) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= VARIANCE_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::numerical(format!("negative predictive variance {raw}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Per-feature GPs sharing one set of training locations.
#[derive(Debug, Clone)]
pub struct IsoscapeModel {
    feature_names: Vec<String>,
    train_locations: Vec<Location>,
    features: Vec<FeatureGp>,
    train_sd: Vec<Option<f64>>,
}

/// Fit one independent GP per feature. Needs a complete dataset.
pub fn fit_gp(train: &Dataset, spec: &GpSpec) -> Result<IsoscapeModel> {
    spec.validate(train.n_features())?;
    let ys = (0..train.n_features())
        .map(|j| train.column(j))
        .collect::<Result<Vec<_>>>()?;
    let locs = train.locations();
    let dists = distance_matrix(&locs);
    let idx: Vec<usize> = (0..locs.len()).collect();
    fit_indexed(train.feature_names(), &locs, &dists, &ys, &idx, spec)
}

/// Fit on a subset of a larger universe whose pairwise distances are
/// already known. `ys[j]` holds feature `j` for every universe point.
pub(crate) fn fit_indexed(
    feature_names: &[String],
    universe_locs: &[Location],
    dists: &DMatrix<f64>,
    ys: &[Vec<f64>],
    idx: &[usize],
    spec: &GpSpec,
) -> Result<IsoscapeModel> {
    if idx.is_empty() {
        return Err(Error::data("cannot fit a GP on zero samples"));
    }
    let features = ys
        .par_iter()
        .enumerate()
        .map(|(j, y_all)| {
            let y: Vec<f64> = idx.iter().map(|&i| y_all[i]).collect();
            let mu = match &spec.mean_policy {
                MeanPolicy::TrainingMean => mean(&y),
                MeanPolicy::Zero => 0.0,
                MeanPolicy::Fixed(v) => v[j],
            };
            FeatureGp::fit_indexed(dists, idx, &y, spec.features[j], mu).map_err(|_| {
                Error::numerical(format!(
                    "covariance for feature {:?} is not positive definite after jitter up to {:e}",
                    feature_names[j],
                    JITTER_LADDER[JITTER_LADDER.len() - 1]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train_sd = ys
        .iter()
        .map(|y_all| {
            let y: Vec<f64> = idx.iter().map(|&i| y_all[i]).collect();
            sample_variance(&y).map(f64::sqrt)
        })
        .collect();
    Ok(IsoscapeModel {
        feature_names: feature_names.to_vec(),
        train_locations: idx.iter().map(|&i| universe_locs[i]).collect(),
        features,
        train_sd,
    })
}

impl IsoscapeModel {
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn train_locations(&self) -> &[Location] {
        &self.train_locations
    }

    pub fn features(&self) -> &[FeatureGp] {
        &self.features
    }

    /// Training standard deviation per feature (`None` below two samples).
    pub fn train_sd(&self) -> &[Option<f64>] {
        &self.train_sd
    }

    fn kstar(&self, j: usize, dists: &[f64]) -> DVector<f64> {
        let kernel = self.features[j].params.kernel;
        DVector::from_iterator(dists.len(), dists.iter().map(|d| kernel.covariance(*d)))
    }

    /// Predictive means only, from distances to the training points.
    pub(crate) fn predict_means_from_distances(&self, dists: &[f64]) -> Vec<f64> {
        (0..self.features.len())
            .map(|j| self.features[j].mean_from_cov(&self.kstar(j, dists)))
            .collect()
    }

    pub(crate) fn predict_from_distances(&self, dists: &[f64]) -> Result<Vec<Prediction>> {
        (0..self.features.len())
            .map(|j| self.features[j].prediction_from_cov(&self.kstar(j, dists)))
            .collect()
    }

    fn distances_to(&self, x: &Location) -> Vec<f64> {
        self.train_locations
            .iter()
            .map(|t| great_circle_distance(x, t))
            .collect()
    }
}

/// Predictive mean and variance of every feature at `x_star`.
pub fn predict_forward(model: &IsoscapeModel, x_star: &Location) -> Result<Vec<Prediction>> {
    model.predict_from_distances(&model.distances_to(x_star))
}

fn observed(model: &IsoscapeModel, y_star: &[Option<f64>]) -> Result<Vec<f64>> {
    if y_star.len() != model.feature_names.len() {
        return Err(Error::data(format!(
            "observation has {} features, model has {}",
            y_star.len(),
            model.feature_names.len()
        )));
    }
    y_star
        .iter()
        .zip(&model.feature_names)
        .map(|(v, name)| {
            v.ok_or_else(|| {
                Error::data(format!(
                    "observation is missing feature {name:?}; apply a missing-value policy first"
                ))
            })
        })
        .collect()
}

fn gaussian_log_density(y: f64, p: &Prediction) -> Result<f64> {
    if p.variance <= 0.0 {
        return Err(Error::numerical(
            "zero predictive variance; the likelihood is degenerate",
        ));
    }
    let r = y - p.mean;
    Ok(-0.5 * (2.0 * std::f64::consts::PI * p.variance).ln() - r * r / (2.0 * p.variance))
}

fn log_likelihood_from(y: &[f64], preds: &[Prediction]) -> Result<f64> {
    y.iter()
        .zip(preds)
        .map(|(v, p)| gaussian_log_density(*v, p))
        .sum()
}

/// Log of the product of per-feature Gaussian densities at `x`.
pub fn log_likelihood(model: &IsoscapeModel, y_star: &[Option<f64>], x: &Location) -> Result<f64> {
    let y = observed(model, y_star)?;
    log_likelihood_from(&y, &predict_forward(model, x)?)
}

pub fn likelihood(model: &IsoscapeModel, y_star: &[Option<f64>], x: &Location) -> Result<f64> {
    log_likelihood(model, y_star, x).map(f64::exp)
}

/// Normalised probability mass over grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGrid {
    pub grid: SpatialGrid,
    pub probs: Vec<f64>,
}

impl PosteriorGrid {
    /// Prior mass as a posterior (used as the no-data baseline).
    pub fn from_prior(grid: &SpatialGrid, prior: &[f64]) -> Result<Self> {
        let logs = prior_logs(grid, prior)?;
        normalize_logs(grid, logs)
    }

    /// Cell with the highest probability; earliest cell wins ties.
    pub fn mode(&self) -> Location {
        let mut best = 0;
        for (c, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = c;
            }
        }
        self.grid.cells()[best]
    }
}

fn prior_logs(grid: &SpatialGrid, prior: &[f64]) -> Result<Vec<f64>> {
    if prior.len() != grid.len() {
        return Err(Error::config(format!(
            "prior has {} weights for {} grid cells",
            prior.len(),
            grid.len()
        )));
    }
    if prior.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::config("prior weights must be finite and non-negative"));
    }
    if prior.iter().all(|p| *p == 0.0) {
        return Err(Error::config("prior weights are all zero"));
    }
    Ok(prior.iter().map(|p| p.ln()).collect())
}

fn normalize_logs(grid: &SpatialGrid, logs: Vec<f64>) -> Result<PosteriorGrid> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical(
            "no support on grid: every cell has zero posterior density (check grid bbox)",
        ));
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(PosteriorGrid {
        grid: grid.clone(),
        probs: unnorm.iter().map(|u| u / total).collect(),
    })
}

/// Forward predictions at every grid cell, reusable across observations.
#[derive(Debug, Clone)]
pub struct GridPredictions {
    grid: SpatialGrid,
    per_cell: Vec<Vec<Prediction>>,
}

pub fn predict_grid(model: &IsoscapeModel, grid: &SpatialGrid) -> Result<GridPredictions> {
    let per_cell = grid
        .cells()
        .par_iter()
        .map(|c| predict_forward(model, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridPredictions {
        grid: grid.clone(),
        per_cell,
    })
}

pub(crate) fn predict_grid_from_distances(
    model: &IsoscapeModel,
    grid: &SpatialGrid,
    cell_dists: &[Vec<f64>],
) -> Result<GridPredictions> {
    let per_cell = cell_dists
        .par_iter()
        .map(|d| model.predict_from_distances(d))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridPredictions {
        grid: grid.clone(),
        per_cell,
    })
}

impl GridPredictions {
    pub fn posterior(&self, y_star: &[f64], prior: &[f64]) -> Result<PosteriorGrid> {
        let logs = prior_logs(&self.grid, prior)?;
        let logs = logs
            .into_iter()
            .zip(&self.per_cell)
            .map(|(lp, preds)| {
                if lp == f64::NEG_INFINITY {
                    Ok(lp)
                } else {
                    Ok(lp + log_likelihood_from(y_star, preds)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        normalize_logs(&self.grid, logs)
    }
}

/// Posterior over `grid` for observation `y_star`:
/// `p(c) ∝ likelihood(y_star, c) * prior[c]`, normalised over the cells.
pub fn posterior(
    model: &IsoscapeModel,
    y_star: &[Option<f64>],
    grid: &SpatialGrid,
    prior: &[f64],
) -> Result<PosteriorGrid> {
    let y = observed(model, y_star)?;
    prior_logs(grid, prior)?;
    predict_grid(model, grid)?.posterior(&y, prior)
}

/// `sqrt(sum_c p_c d(x_true, c)^2)` in km.
pub fn posterior_rmse(pg: &PosteriorGrid, x_true: &Location) -> f64 {
    pg.grid
        .cells()
        .iter()
        .zip(&pg.probs)
        .map(|(c, p)| {
            let d = great_circle_distance(x_true, c);
            p * d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `lat,lon,prob` per grid cell, for maps.
pub fn write_posterior_csv<W: std::io::Write>(mut out: W, pg: &PosteriorGrid, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lat", "lon", "prob"])?;
    for (cell, p) in pg.grid.cells().iter().zip(&pg.probs) {
        w.write_record([cell.lat().to_string(), cell.lon().to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean posterior RMSE over a test set.
pub fn backward_rmse(
    model: &IsoscapeModel,
    test: &Dataset,
    grid: &SpatialGrid,
    prior: &[f64],
) -> Result<f64> {
    let preds = predict_grid(model, grid)?;
    let rows = test.complete_rows()?;
    let total = test
        .samples()
        .iter()
        .zip(&rows)
        .map(|(s, y)| Ok(posterior_rmse(&preds.posterior(y, prior)?, &s.location)))
        .sum::<Result<f64>>()?;
    Ok(total / test.len() as f64)
}

/// Per-feature divisors used to put residuals of different features on a
/// common scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale(pub Vec<f64>);

impl FeatureScale {
    /// Training standard deviation of each feature.
    pub fn from_training(train: &Dataset) -> Result<Self> {
        let sds = (0..train.n_features())
            .map(|j| {
                let col = train.column(j)?;
                match sample_variance(&col).map(f64::sqrt) {
                    Some(sd) if sd > 0.0 => Ok(sd),
                    _ => Err(Error::data(format!(
                        "feature {:?} has zero training standard deviation",
                        train.feature_names()[j]
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureScale(sds))
    }
}

/// RMSE over all (sample, feature) residuals, each divided by its feature's
/// scale.
pub fn standardized_rmse(predictions: &[Vec<f64>], truth: &[Vec<f64>], scale: &FeatureScale) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p_row, t_row) in predictions.iter().zip(truth) {
        for ((p, t), s) in p_row.iter().zip(t_row).zip(&scale.0) {
            let r = (p - t) / s;
            sum += r * r;
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}

/// Forward RMSE with residuals standardised by the model's training
/// standard deviations.
pub fn forward_rmse(model: &IsoscapeModel, test: &Dataset) -> Result<f64> {
    let scale = model
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
    forward_rmse_scaled(model, test, &FeatureScale(scale))
}

pub fn forward_rmse_scaled(model: &IsoscapeModel, test: &Dataset, scale: &FeatureScale) -> Result<f64> {
    let truth = test.complete_rows()?;
    let preds = test
        .samples()
        .iter()
        .map(|s| model.predict_means_from_distances(&model.distances_to(&s.location)))
        .collect::<Vec<_>>();
    Ok(standardized_rmse(&preds, &truth, scale))
}
