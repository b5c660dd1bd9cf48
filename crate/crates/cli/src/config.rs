//! Run configuration: one TOML file, every key optional. Relative paths
//! resolve against the config file's directory.

use std::path::{Path, PathBuf};

use isoshap::dataset::MissingPolicy;
use isoshap::forest::ForestConfig;
use isoshap::geo::BoundingBox;
use isoshap::isoscape::KernelFamily;
use isoshap::selection::Mode;
use isoshap::valuation::{BetaParams, Method, Tolerance, DEFAULT_EXACT_CAP};
use isoshap::Direction;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every random choice.
    pub seed: u64,
    /// Output directory (default `out`). Not part of the config hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub valuation: ValuationConfig,
    pub selection: SelectionConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sample CSV; when absent the synthetic generator is used.
    pub csv: Option<PathBuf>,
    /// Separate test CSV; when absent the data is split.
    pub test_csv: Option<PathBuf>,
    pub features: Option<Vec<String>>,
    pub missing: MissingPolicy,
    pub test_fraction: f64,
    pub synthetic: SyntheticSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            csv: None,
            test_csv: None,
            features: None,
            missing: MissingPolicy::MedianImpute,
            test_fraction: 0.2,
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_samples: usize,
    pub corrupt_fraction: f64,
    pub corrupt_magnitude: f64,
    pub corrupt_cluster_size: usize,
    pub missing_fraction: f64,
    pub bbox: Option<BoundingBox>,
    /// Generate a separate clean test set of this size instead of splitting.
    pub test_samples: Option<usize>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_samples: 100,
            corrupt_fraction: 0.1,
            corrupt_magnitude: 8.0,
            corrupt_cluster_size: 1,
            missing_fraction: 0.0,
            bbox: None,
            test_samples: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Gp,
    Forest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub direction: Direction,
    pub kernel: KernelFamily,
    pub lengthscale_km: f64,
    /// Noise variance as a fraction of each feature's variance.
    pub noise_fraction: f64,
    /// Pick GP hyperparameters by marginal likelihood instead.
    pub optimize: bool,
    /// Forest settings; its seed is replaced by the master seed.
    pub forest: ForestConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelChoice::Gp,
            direction: Direction::Forward,
            kernel: KernelFamily::Exponential,
            lengthscale_km: 600.0,
            noise_fraction: 0.1,
            optimize: false,
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Defaults to the synthetic bbox, or the data extent padded by one
    /// resolution step.
    pub bbox: Option<BoundingBox>,
    pub resolution_deg: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            bbox: None,
            resolution_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValuationConfig {
    pub method: Method,
    pub tolerance: Tolerance,
    pub max_permutations: Option<usize>,
    /// Early stopping for TMC and Beta.
    pub converge: bool,
    pub window: Option<usize>,
    pub rel_change: f64,
    pub exact_cap: usize,
    pub beta: BetaParams,
    pub iterations: usize,
    pub paper_literal_weights: bool,
    pub histogram_bins: usize,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        ValuationConfig {
            method: Method::Tmc,
            tolerance: Tolerance::default(),
            max_permutations: None,
            converge: true,
            window: None,
            rel_change: 0.01,
            exact_cap: DEFAULT_EXACT_CAP,
            beta: BetaParams::default(),
            iterations: 100,
            paper_literal_weights: false,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: Mode,
    /// 0 disables the patience rule.
    pub patience: usize,
    pub max_removals: Option<usize>,
    pub cluster_radius_km: Option<f64>,
    pub revalue_every: Option<usize>,
    /// Also run the random / LOO / TMC comparison.
    pub compare: bool,
    /// Removals per strategy in the comparison (default N/2).
    pub budget: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: Mode::RemoveLow,
            patience: 5,
            max_removals: None,
            cluster_radius_km: None,
            revalue_every: None,
            compare: false,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Valuation JSON (from `value` or `select`).
    pub a: Option<PathBuf>,
    /// Second valuation JSON for the rank comparison.
    pub b: Option<PathBuf>,
    /// Dataset for the species summary; defaults to the `[data]` source.
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.out);
        fix(&mut self.data.csv);
        fix(&mut self.data.test_csv);
        fix(&mut self.report.a);
        fix(&mut self.report.b);
        fix(&mut self.report.dataset);
    }

    /// SHA-256 of the resolved configuration (output directory excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Checks that need more than one field.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.test_csv.is_some() && self.data.csv.is_none() {
            return Err(CliError::config("data.test_csv requires data.csv"));
        }
        if self.model.optimize && self.model.kind != ModelChoice::Gp {
            return Err(CliError::config("model.optimize applies to model.kind = \"gp\" only"));
        }
        if !(self.grid.resolution_deg > 0.0) {
            return Err(CliError::config("grid.resolution_deg must be > 0"));
        }
        if self.valuation.histogram_bins == 0 {
            return Err(CliError::config("valuation.histogram_bins must be >= 1"));
        }
        if self.selection.revalue_every == Some(0) {
            return Err(CliError::config("selection.revalue_every must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.selection.patience, 5);
        assert_eq!(cfg.data.test_fraction, 0.2);
    }

    #[test]
    fn parses_nested_sections() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 9
            [model]
            kind = "forest"
            direction = "backward"
            [model.forest]
            n_trees = 20
            [valuation]
            method = "beta"
            tolerance = { kind = "absolute", value = 0.5 }
            [valuation.beta]
            alpha = 4.0
            beta = 2.0
            [selection]
            mode = "remove_high"
            cluster_radius_km = 100.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.kind, ModelChoice::Forest);
        assert_eq!(cfg.model.forest.n_trees, 20);
        assert_eq!(cfg.valuation.tolerance, Tolerance::Absolute(0.5));
        assert_eq!(cfg.valuation.beta.alpha, 4.0);
        assert_eq!(cfg.selection.mode, Mode::RemoveHigh);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nkernal = \"exponential\"").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.out = Some("x".into());
        b.out = Some("y".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
