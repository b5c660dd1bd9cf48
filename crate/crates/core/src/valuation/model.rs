use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Utility;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, forest_rmse_scaled, location_rmse, ForestConfig};
use crate::geo::{Location, SpatialGrid};
use crate::isoscape::{
    cross_distances, distance_matrix, fit_indexed, posterior_rmse, predict_grid_from_distances,
    standardized_rmse, FeatureScale, GpSpec, PosteriorGrid,
};
use crate::Direction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Gp(GpSpec),
    Forest(ForestConfig),
}

/// What a subset is scored on. The utility is `-RMSE` on `test`.
#[derive(Debug, Clone)]
pub struct UtilitySpec {
    pub model: ModelKind,
    pub direction: Direction,
    pub test: Dataset,
    /// Posterior grid; required for backward GP utilities.
    pub grid: Option<SpatialGrid>,
    /// Per-cell prior; defaults to the grid's area weights.
    pub prior: Option<Vec<f64>>,
}

/// Model-backed utility over a fixed training universe.
///
/// The empty subset is scored with a data-free baseline: the training mean
/// of each feature (forward), the prior as posterior (backward GP) or the
/// training centroid (backward forest). Forward residuals are always
/// standardised by the full training set's standard deviations so that
/// subsets of any size share one scale.
pub struct ModelUtility {
    spec: UtilitySpec,
    train: Dataset,
    ids: Vec<String>,
    locs: Vec<Location>,
    /// `ys[j][i]`: feature `j` of universe sample `i`.
    ys: Vec<Vec<f64>>,
    test_rows: Vec<Vec<f64>>,
    test_locs: Vec<Location>,
    scale: Option<FeatureScale>,
    train_means: Vec<f64>,
    centroid: Location,
    prior: Vec<f64>,
    dists: Option<DMatrix<f64>>,
    test_dists: Option<DMatrix<f64>>,
    /// Per grid cell, distances to every universe sample.
    cell_dists: Option<Vec<Vec<f64>>>,
}

impl ModelUtility {
    pub fn new(train: Dataset, spec: UtilitySpec) -> Result<Self> {
        if spec.test.is_empty() {
            return Err(Error::data("utility needs a non-empty test set"));
        }
        if spec.test.feature_names() != train.feature_names() {
            return Err(Error::data("train and test sets have different feature columns"));
        }
        let rows = train.complete_rows()?;
        let test_rows = spec.test.complete_rows()?;
        let n_feat = train.n_features();
        let ys: Vec<Vec<f64>> = (0..n_feat).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let train_means = ys.iter().map(|y| crate::isoscape::mean(y)).collect();
        let locs = train.locations();
        let centroid = Location::clamped(
            locs.iter().map(|l| l.lat()).sum::<f64>() / locs.len() as f64,
            locs.iter().map(|l| l.lon()).sum::<f64>() / locs.len() as f64,
        );
        let test_locs = spec.test.locations();

        let scale = match spec.direction {
            Direction::Forward => Some(FeatureScale::from_training(&train)?),
            Direction::Backward => None,
        };

        let mut prior = Vec::new();
        if let (Direction::Backward, ModelKind::Gp(_)) = (spec.direction, &spec.model) {
            let grid = spec
                .grid
                .as_ref()
                .ok_or_else(|| Error::config("backward GP utility needs a spatial grid"))?;
            prior = match &spec.prior {
                Some(p) => p.clone(),
                None => grid.weights().to_vec(),
            };
            // Validates the prior against the grid.
            PosteriorGrid::from_prior(grid, &prior)?;
        }

        let (dists, test_dists, cell_dists) = match (&spec.model, spec.direction) {
            (ModelKind::Gp(gp), dir) => {
                gp.validate(n_feat)?;
                let cells = match dir {
                    Direction::Backward => {
                        let grid = spec.grid.as_ref().expect("checked above");
                        let cd = cross_distances(grid.cells(), &locs);
                        Some((0..cd.nrows()).map(|r| cd.row(r).iter().copied().collect()).collect())
                    }
                    Direction::Forward => None,
                };
                (
                    Some(distance_matrix(&locs)),
                    Some(cross_distances(&test_locs, &locs)),
                    cells,
                )
            }
            (ModelKind::Forest(cfg), _) => {
                cfg.validate()?;
                (None, None, None)
            }
        };

        Ok(ModelUtility {
            ids: train.ids(),
            spec,
            train,
            locs,
            ys,
            test_rows,
            test_locs,
            scale,
            train_means,
            centroid,
            prior,
            dists,
            test_dists,
            cell_dists,
        })
    }

    pub fn spec(&self) -> &UtilitySpec {
        &self.spec
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    /// Test RMSE of the model trained on `subset` (forward: standardised,
    /// backward: km).
    pub fn rmse(&self, subset: &[usize]) -> Result<f64> {
        self.evaluate(subset).map(|v| -v)
    }

    fn empty_rmse(&self) -> Result<f64> {
        match (&self.spec.model, self.spec.direction) {
            (_, Direction::Forward) => {
                let preds = vec![self.train_means.clone(); self.test_rows.len()];
                Ok(standardized_rmse(&preds, &self.test_rows, self.scale.as_ref().expect("forward scale")))
            }
            (ModelKind::Gp(_), Direction::Backward) => {
                let grid = self.spec.grid.as_ref().expect("checked in new");
                let pg = PosteriorGrid::from_prior(grid, &self.prior)?;
                let total: f64 = self.test_locs.iter().map(|x| posterior_rmse(&pg, x)).sum();
                Ok(total / self.test_locs.len() as f64)
            }
            (ModelKind::Forest(_), Direction::Backward) => Ok(location_rmse(
                &vec![self.centroid; self.test_locs.len()],
                &self.test_locs,
            )),
        }
    }

    fn gp_rmse(&self, spec: &GpSpec, subset: &[usize]) -> Result<f64> {
        let dists = self.dists.as_ref().expect("GP utilities precompute distances");
        let model = fit_indexed(self.train.feature_names(), &self.locs, dists, &self.ys, subset, spec)?;
        match self.spec.direction {
            Direction::Forward => {
                let td = self.test_dists.as_ref().expect("GP utilities precompute distances");
                let preds: Vec<Vec<f64>> = (0..td.nrows())
                    .map(|r| {
                        let d: Vec<f64> = subset.iter().map(|&i| td[(r, i)]).collect();
                        model.predict_means_from_distances(&d)
                    })
                    .collect();
                Ok(standardized_rmse(&preds, &self.test_rows, self.scale.as_ref().expect("forward scale")))
            }
            Direction::Backward => {
                let grid = self.spec.grid.as_ref().expect("checked in new");
                let all_cells = self.cell_dists.as_ref().expect("backward GP precomputes cells");
                let cell_d: Vec<Vec<f64>> = all_cells
                    .iter()
                    .map(|row| subset.iter().map(|&i| row[i]).collect())
                    .collect();
                let preds = predict_grid_from_distances(&model, grid, &cell_d)?;
                let mut total = 0.0;
                for (y, x) in self.test_rows.iter().zip(&self.test_locs) {
                    total += posterior_rmse(&preds.posterior(y, &self.prior)?, x);
                }
                Ok(total / self.test_rows.len() as f64)
            }
        }
    }

    fn forest_rmse(&self, cfg: &ForestConfig, subset: &[usize]) -> Result<f64> {
        let sub = self.train.select(subset)?;
        let model = fit_forest(&sub, self.spec.direction, cfg)?;
        let scale = self.scale.clone().unwrap_or(FeatureScale(vec![]));
        forest_rmse_scaled(&model, &self.spec.test, &scale)
    }

    fn describe(&self, subset: &[usize]) -> String {
        let head: Vec<&str> = subset.iter().take(5).map(|&i| self.ids[i].as_str()).collect();
        let more = if subset.len() > 5 { ", ..." } else { "" };
        format!("subset of {} samples [{}{more}]", subset.len(), head.join(", "))
    }
}

impl Utility for ModelUtility {
    fn ids(&self) -> &[String] {
        &self.ids
    }

    fn direction(&self) -> Option<Direction> {
        Some(self.spec.direction)
    }

    fn evaluate(&self, subset: &[usize]) -> Result<f64> {
        if subset.iter().any(|&i| i >= self.ids.len()) {
            return Err(Error::data("subset index outside the training universe"));
        }
        let rmse = if subset.is_empty() {
            self.empty_rmse()
        } else {
            match &self.spec.model {
                ModelKind::Gp(spec) => self.gp_rmse(spec, subset),
                ModelKind::Forest(cfg) => self.forest_rmse(cfg, subset),
            }
        };
        rmse.map(|r| -r).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{}: {m}", self.describe(subset))),
            Error::Data(m) => Error::Data(format!("{}: {m}", self.describe(subset))),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split, SyntheticConfig};
    use crate::forest::forest_rmse;
    use crate::geo::build_grid;
    use crate::isoscape::{backward_rmse, fit_gp, forward_rmse, KernelFamily};
    use crate::valuation::{exact_shapley, CachedUtility};

    fn data(n: usize, seed: u64) -> (Dataset, Dataset, SyntheticConfig) {
        let cfg = SyntheticConfig::europe(n, seed);
        let d = generate_synthetic(&cfg).unwrap().dataset;
        let (tr, te) = split(&d, 0.3, seed).unwrap();
        (tr, te, cfg)
    }

    #[test]
    fn full_subset_matches_module_rmse_forward_gp() {
        let (train, test, _) = data(30, 1);
        let gp = GpSpec::scaled_to(&train, KernelFamily::Exponential, 800.0, 0.1).unwrap();
        let u = ModelUtility::new(
            train.clone(),
            UtilitySpec {
                model: ModelKind::Gp(gp.clone()),
                direction: Direction::Forward,
                test: test.clone(),
                grid: None,
                prior: None,
            },
        )
        .unwrap();
        let all: Vec<usize> = (0..train.len()).collect();
        let module = forward_rmse(&fit_gp(&train, &gp).unwrap(), &test).unwrap();
        assert_eq!(u.rmse(&all).unwrap(), module);
    }

    #[test]
    fn full_subset_matches_module_rmse_backward_gp() {
        let (train, test, cfg) = data(20, 2);
        let grid = build_grid(&cfg.bbox, 2.5).unwrap();
        let gp = GpSpec::scaled_to(&train, KernelFamily::Exponential, 800.0, 0.1).unwrap();
        let u = ModelUtility::new(
            train.clone(),
            UtilitySpec {
                model: ModelKind::Gp(gp.clone()),
                direction: Direction::Backward,
                test: test.clone(),
                grid: Some(grid.clone()),
                prior: None,
            },
        )
        .unwrap();
        let all: Vec<usize> = (0..train.len()).collect();
        let module = backward_rmse(&fit_gp(&train, &gp).unwrap(), &test, &grid, grid.weights()).unwrap();
        assert!((u.rmse(&all).unwrap() - module).abs() < 1e-12);

        // Empty subset: prior used as the posterior.
        let pg = PosteriorGrid::from_prior(&grid, grid.weights()).unwrap();
        let want: f64 = test.locations().iter().map(|x| posterior_rmse(&pg, x)).sum::<f64>() / test.len() as f64;
        assert!((u.rmse(&[]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn forest_utilities_match_module() {
        let (train, test, _) = data(30, 3);
        let cfg = ForestConfig {
            n_trees: 10,
            seed: 4,
            ..Default::default()
        };
        for dir in [Direction::Forward, Direction::Backward] {
            let u = ModelUtility::new(
                train.clone(),
                UtilitySpec {
                    model: ModelKind::Forest(cfg),
                    direction: dir,
                    test: test.clone(),
                    grid: None,
                    prior: None,
                },
            )
            .unwrap();
            let all: Vec<usize> = (0..train.len()).collect();
            let module = forest_rmse(&fit_forest(&train, dir, &cfg).unwrap(), &test).unwrap();
            assert_eq!(u.rmse(&all).unwrap(), module);
            assert!(u.rmse(&[]).unwrap() > 0.0);
        }
    }

    #[test]
    fn empty_forward_uses_training_means() {
        let (train, test, _) = data(20, 5);
        let gp = GpSpec::scaled_to(&train, KernelFamily::Exponential, 800.0, 0.1).unwrap();
        let u = ModelUtility::new(
            train.clone(),
            UtilitySpec {
                model: ModelKind::Gp(gp),
                direction: Direction::Forward,
                test: test.clone(),
                grid: None,
                prior: None,
            },
        )
        .unwrap();
        let scale = FeatureScale::from_training(&train).unwrap();
        let means: Vec<f64> = (0..3).map(|j| crate::isoscape::mean(&train.column(j).unwrap())).collect();
        let want = standardized_rmse(&vec![means; test.len()], &test.complete_rows().unwrap(), &scale);
        assert_eq!(u.rmse(&[]).unwrap(), want);
    }

    #[test]
    fn backward_gp_requires_grid() {
        let (train, test, _) = data(10, 6);
        let gp = GpSpec::scaled_to(&train, KernelFamily::Exponential, 800.0, 0.1).unwrap();
        let err = ModelUtility::new(
            train,
            UtilitySpec {
                model: ModelKind::Gp(gp),
                direction: Direction::Backward,
                test,
                grid: None,
                prior: None,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn exact_values_satisfy_efficiency_with_gp() {
        let (train, test, _) = data(11, 7);
        let train = train.select(&(0..6).collect::<Vec<_>>()).unwrap();
        let gp = GpSpec::scaled_to(&train, KernelFamily::Exponential, 800.0, 0.1).unwrap();
        let u = CachedUtility::new(
            ModelUtility::new(
                train,
                UtilitySpec {
                    model: ModelKind::Gp(gp),
                    direction: Direction::Forward,
                    test,
                    grid: None,
                    prior: None,
                },
            )
            .unwrap(),
        );
        let r = exact_shapley(&u, 12).unwrap();
        let want = r.utility_full.unwrap() - r.utility_empty.unwrap();
        assert!((r.total() - want).abs() < 1e-9);
    }
}
