//! Reference samples: CSV ingestion, missing-value handling, train/test
//! splitting and a synthetic isoscape generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BoundingBox, Location};

/// Feature columns used when nothing else is configured.
pub const DEFAULT_FEATURES: [&str; 5] = ["d13C", "d2H", "d15N", "d18O", "d34S"];

/// Column names that every CSV must carry, in order.
pub const REQUIRED_COLUMNS: [&str; 4] = ["id", "latitude", "longitude", "species"];

/// Group label for samples without a species.
pub const UNLABELED_SPECIES: &str = "(unlabeled)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub location: Location,
    pub species: String,
    /// Values aligned with the owning dataset's `feature_names`.
    pub values: Vec<Option<f64>>,
}

impl Sample {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("dataset is empty"));
        }
        if feature_names.is_empty() {
            return Err(Error::data("dataset has no feature columns"));
        }
        let mut names = HashSet::new();
        for name in &feature_names {
            if !names.insert(name) {
                return Err(Error::data(format!("duplicate feature name {name:?}")));
            }
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::data(format!("duplicate sample id {:?}", s.id)));
            }
            if s.values.len() != feature_names.len() {
                return Err(Error::data(format!(
                    "sample {:?} has {} feature values, expected {}",
                    s.id,
                    s.values.len(),
                    feature_names.len()
                )));
            }
            if s.values.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("sample {:?} has a non-finite value", s.id)));
            }
        }
        Ok(Dataset {
            samples,
            feature_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn locations(&self) -> Vec<Location> {
        self.samples.iter().map(|s| s.location).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    pub fn has_missing(&self) -> bool {
        self.samples.iter().any(|s| !s.is_complete())
    }

    /// Column `j`, failing on the first missing value.
    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                s.values[j].ok_or_else(|| {
                    Error::data(format!(
                        "sample {:?} is missing feature {:?}; apply a missing-value policy first",
                        s.id, self.feature_names[j]
                    ))
                })
            })
            .collect()
    }

    /// Full feature matrix, row per sample.
    pub fn complete_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.samples
            .iter()
            .map(|s| {
                s.values
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| {
                            Error::data(format!(
                                "sample {:?} is missing feature {:?}; apply a missing-value policy first",
                                s.id, self.feature_names[j]
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn require_complete(&self) -> Result<()> {
        self.complete_rows().map(|_| ())
    }

    /// Samples at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::data(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.feature_names.clone())
    }
}

/// Which columns to keep when reading a CSV. `None` keeps every column
/// after the required ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Option<Vec<String>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema)
}

/// Parse the `id,latitude,longitude,species,<feature...>` format. Lines
/// starting with `#` are skipped and empty feature cells are missing values.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    for (pos, want) in REQUIRED_COLUMNS.iter().enumerate() {
        match header.get(pos) {
            Some(got) if got == want => {}
            got => {
                return Err(Error::data(format!(
                    "header column {} must be {want:?}, found {:?}",
                    pos + 1,
                    got
                )))
            }
        }
    }
    let available = &header[REQUIRED_COLUMNS.len()..];
    let feature_names: Vec<String> = match &schema.features {
        Some(f) => f.clone(),
        None => available.to_vec(),
    };
    if feature_names.is_empty() {
        return Err(Error::data("CSV has no feature columns"));
    }
    let feature_cols = feature_names
        .iter()
        .map(|name| {
            header
                .iter()
                .skip(REQUIRED_COLUMNS.len())
                .position(|h| h == name)
                .map(|p| p + REQUIRED_COLUMNS.len())
                .ok_or_else(|| Error::data(format!("feature column {name:?} not in header")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::data(format!(
                "row {row}: expected {} columns, found {}",
                header.len(),
                record.len()
            )));
        }
        let parse = |col: usize| -> Result<f64> {
            let raw = &record[col];
            raw.parse::<f64>().map_err(|_| {
                Error::data(format!("row {row}, column {:?}: cannot parse {raw:?}", header[col]))
            })
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::data(format!("row {row}, column \"id\": empty id")));
        }
        let lat = parse(1)?;
        let lon = parse(2)?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::data(format!(
                "row {row}, column \"latitude\": {lat} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::data(format!(
                "row {row}, column \"longitude\": {lon} outside [-180, 180]"
            )));
        }
        let location =
            Location::new(lat, lon).map_err(|e| Error::data(format!("row {row}: {e}")))?;
        let values = feature_cols
            .iter()
            .map(|&c| {
                if record[c].is_empty() {
                    Ok(None)
                } else {
                    parse(c).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            location,
            species: record[3].to_string(),
            values,
        });
    }
    Dataset::new(samples, feature_names)
}

/// Write in the format accepted by [`read_csv`]. `comments` become leading
/// `# ` lines.
pub fn write_csv<W: Write>(mut out: W, d: &Dataset, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(d.feature_names.iter().map(String::as_str));
    wtr.write_record(&header)?;
    for s in &d.samples {
        let mut rec = vec![
            s.id.clone(),
            format!("{}", s.location.lat()),
            format!("{}", s.location.lon()),
            s.species.clone(),
        ];
        rec.extend(s.values.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    MedianImpute,
    ListwiseDelete,
}

/// Median of a non-empty slice; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Per-feature medians over non-missing values.
pub fn feature_medians(d: &Dataset) -> Result<Vec<f64>> {
    (0..d.n_features())
        .map(|j| {
            let present: Vec<f64> = d.samples.iter().filter_map(|s| s.values[j]).collect();
            median(&present).ok_or_else(|| {
                Error::data(format!(
                    "feature {:?} is missing for every sample; cannot impute",
                    d.feature_names[j]
                ))
            })
        })
        .collect()
}

/// Fill missing values with the given per-feature medians.
pub fn impute_with(d: &Dataset, medians: &[f64]) -> Result<Dataset> {
    if medians.len() != d.n_features() {
        return Err(Error::data("median vector length does not match features"));
    }
    let samples = d
        .samples
        .iter()
        .map(|s| Sample {
            values: s
                .values
                .iter()
                .zip(medians)
                .map(|(v, m)| Some(v.unwrap_or(*m)))
                .collect(),
            ..s.clone()
        })
        .collect();
    Dataset::new(samples, d.feature_names.clone())
}

fn listwise_delete(d: &Dataset) -> Result<Dataset> {
    let samples: Vec<Sample> = d.samples.iter().filter(|s| s.is_complete()).cloned().collect();
    if samples.is_empty() {
        return Err(Error::data(
            "listwise deletion removed every sample (each has a missing feature)",
        ));
    }
    Dataset::new(samples, d.feature_names.clone())
}

/// Apply `policy` to a single dataset using its own medians.
pub fn apply_missing_policy(d: &Dataset, policy: MissingPolicy) -> Result<Dataset> {
    match policy {
        MissingPolicy::MedianImpute => {
            if !d.has_missing() {
                return Ok(d.clone());
            }
            impute_with(d, &feature_medians(d)?)
        }
        MissingPolicy::ListwiseDelete => listwise_delete(d),
    }
}

/// Apply `policy` to a train/test pair. Medians come from the training
/// split only and are applied to both.
pub fn apply_missing_policy_split(
    train: &Dataset,
    test: &Dataset,
    policy: MissingPolicy,
) -> Result<(Dataset, Dataset)> {
    match policy {
        MissingPolicy::MedianImpute => {
            if !train.has_missing() && !test.has_missing() {
                return Ok((train.clone(), test.clone()));
            }
            let medians = feature_medians(train)?;
            Ok((impute_with(train, &medians)?, impute_with(test, &medians)?))
        }
        MissingPolicy::ListwiseDelete => Ok((listwise_delete(train)?, listwise_delete(test)?)),
    }
}

/// Number of test samples for a split: `floor(n * fraction)` clamped to
/// `[1, n - 1]`.
pub fn test_size(n: usize, test_fraction: f64) -> Result<usize> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::data(format!(
            "cannot split {n} sample(s) into non-empty train and test sets"
        )));
    }
    let raw = (n as f64 * test_fraction).floor() as usize;
    Ok(raw.clamp(1, n - 1))
}

/// Seeded random partition. Both halves keep the original sample order.
pub fn split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_test = test_size(d.len(), test_fraction)?;
    let mut idx: Vec<usize> = (0..d.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((d.select(&train_idx)?, d.select(&test_idx)?))
}

/// One additive component of a synthetic ground-truth field, with
/// coordinates in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldTerm {
    /// `lat_coef * lat + lon_coef * lon`
    Linear { lat_coef: f64, lon_coef: f64 },
    /// `amplitude * sin(lat_freq * lat + lon_freq * lon + phase)`, frequencies
    /// in radians per degree.
    Sinusoid {
        amplitude: f64,
        lat_freq: f64,
        lon_freq: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl FieldTerm {
    fn eval(&self, loc: &Location) -> f64 {
        match *self {
            FieldTerm::Linear { lat_coef, lon_coef } => lat_coef * loc.lat() + lon_coef * loc.lon(),
            FieldTerm::Sinusoid {
                amplitude,
                lat_freq,
                lon_freq,
                phase,
            } => amplitude * (lat_freq * loc.lat() + lon_freq * loc.lon() + phase).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(default)]
    pub offset: f64,
    pub terms: Vec<FieldTerm>,
    pub noise_sd: f64,
}

impl FeatureSpec {
    pub fn ground_truth(&self, loc: &Location) -> f64 {
        self.offset + self.terms.iter().map(|t| t.eval(loc)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub bbox: BoundingBox,
    pub features: Vec<FeatureSpec>,
    #[serde(default)]
    pub corrupt_fraction: f64,
    #[serde(default = "default_corrupt_magnitude")]
    pub corrupt_magnitude: f64,
    /// Corrupted samples come in groups of this size. Members of a group
    /// are moved to within a few km of the first member and share its
    /// offset, like a mislabelled batch from one site. 1 = independent.
    #[serde(default = "default_cluster_size")]
    pub corrupt_cluster_size: usize,
    /// Fraction of feature cells blanked out after generation.
    #[serde(default)]
    pub missing_fraction: f64,
    #[serde(default = "default_species")]
    pub species: Vec<String>,
    /// Prefix for generated sample ids.
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
    pub seed: u64,
}

fn default_corrupt_magnitude() -> f64 {
    8.0
}

fn default_cluster_size() -> usize {
    1
}

fn default_species() -> Vec<String> {
    vec!["Quercus robur".into(), "Quercus petraea".into()]
}

fn default_id_prefix() -> String {
    "s".into()
}

/// Three smooth, low-frequency fields loosely shaped like European oak
/// isotope gradients.
pub fn default_feature_specs() -> Vec<FeatureSpec> {
    vec![
        FeatureSpec {
            name: "d13C".into(),
            offset: -27.0,
            terms: vec![
                FieldTerm::Linear {
                    lat_coef: 0.08,
                    lon_coef: -0.04,
                },
                FieldTerm::Sinusoid {
                    amplitude: 1.2,
                    lat_freq: 0.25,
                    lon_freq: 0.15,
                    phase: 0.3,
                },
            ],
            noise_sd: 0.3,
        },
        FeatureSpec {
            name: "d2H".into(),
            offset: -40.0,
            terms: vec![
                FieldTerm::Linear {
                    lat_coef: -1.5,
                    lon_coef: -0.6,
                },
                FieldTerm::Sinusoid {
                    amplitude: 8.0,
                    lat_freq: 0.2,
                    lon_freq: -0.22,
                    phase: 1.0,
                },
            ],
            noise_sd: 2.0,
        },
        FeatureSpec {
            name: "d18O".into(),
            offset: 28.0,
            terms: vec![
                FieldTerm::Linear {
                    lat_coef: -0.15,
                    lon_coef: 0.05,
                },
                FieldTerm::Sinusoid {
                    amplitude: 1.5,
                    lat_freq: -0.18,
                    lon_freq: 0.2,
                    phase: -0.5,
                },
            ],
            noise_sd: 0.4,
        },
    ]
}

impl SyntheticConfig {
    /// Europe-sized box with the default fields.
    pub fn europe(n_samples: usize, seed: u64) -> Self {
        SyntheticConfig {
            n_samples,
            bbox: BoundingBox {
                lat_min: 40.0,
                lat_max: 60.0,
                lon_min: -5.0,
                lon_max: 25.0,
            },
            features: default_feature_specs(),
            corrupt_fraction: 0.0,
            corrupt_magnitude: default_corrupt_magnitude(),
            corrupt_cluster_size: 1,
            missing_fraction: 0.0,
            species: default_species(),
            id_prefix: default_id_prefix(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("synthetic generator needs n_samples >= 2"));
        }
        self.bbox.validate()?;
        if self.features.is_empty() {
            return Err(Error::config("synthetic generator needs at least one feature"));
        }
        for f in &self.features {
            if !(2..=4).contains(&f.terms.len()) {
                return Err(Error::config(format!(
                    "feature {:?} must have 2 to 4 field terms, has {}",
                    f.name,
                    f.terms.len()
                )));
            }
            if !(f.noise_sd.is_finite() && f.noise_sd >= 0.0) {
                return Err(Error::config(format!(
                    "feature {:?} has invalid noise_sd {}",
                    f.name, f.noise_sd
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::config("corrupt_fraction must lie in [0, 1]"));
        }
        if !self.corrupt_magnitude.is_finite() {
            return Err(Error::config("corrupt_magnitude must be finite"));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::config("missing_fraction must lie in [0, 1)"));
        }
        if self.species.is_empty() {
            return Err(Error::config("species list must not be empty"));
        }
        Ok(())
    }

    pub fn n_corrupted(&self) -> usize {
        (self.n_samples as f64 * self.corrupt_fraction).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Ids of the samples that received the corruption offset, sorted.
    pub corrupted_ids: Vec<String>,
}

/// Uniform locations over the box, ground-truth field plus Gaussian noise,
/// and a fixed number of samples pushed off by `corrupt_magnitude * noise_sd`
/// with a random sign per feature.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.n_samples - 1).to_string().len().max(3);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let lat = rng.random_range(cfg.bbox.lat_min..cfg.bbox.lat_max);
        let lon = rng.random_range(cfg.bbox.lon_min..cfg.bbox.lon_max);
        let location = Location::new(lat, lon)?;
        let species = cfg.species[rng.random_range(0..cfg.species.len())].clone();
        let values = cfg
            .features
            .iter()
            .map(|f| {
                let noise = if f.noise_sd > 0.0 {
                    Normal::new(0.0, f.noise_sd)
                        .map_err(|e| Error::config(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                Ok(Some(f.ground_truth(&location) + noise))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: format!("{}{:0width$}", cfg.id_prefix, i),
            location,
            species,
            values,
        });
    }

    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut rng);
    let mut corrupted: Vec<usize> = order[..cfg.n_corrupted()].to_vec();
    corrupted.sort_unstable();
    let group = cfg.corrupt_cluster_size.max(1);
    for members in corrupted.chunks(group) {
        let anchor = samples[members[0]].location;
        for &i in &members[1..] {
            let loc = Location::clamped(
                anchor.lat() + rng.random_range(-0.02..0.02),
                anchor.lon() + rng.random_range(-0.02..0.02),
            );
            samples[i].location = loc;
            for (j, f) in cfg.features.iter().enumerate() {
                let noise = if f.noise_sd > 0.0 {
                    Normal::new(0.0, f.noise_sd)
                        .map_err(|e| Error::config(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                samples[i].values[j] = Some(f.ground_truth(&loc) + noise);
            }
        }
        let signs: Vec<f64> = cfg
            .features
            .iter()
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        for &i in members {
            for (j, f) in cfg.features.iter().enumerate() {
                if let Some(v) = samples[i].values[j].as_mut() {
                    *v += signs[j] * cfg.corrupt_magnitude * f.noise_sd;
                }
            }
        }
    }

    if cfg.missing_fraction > 0.0 {
        for s in samples.iter_mut() {
            for v in s.values.iter_mut() {
                if rng.random_bool(cfg.missing_fraction) {
                    *v = None;
                }
            }
        }
    }

    let corrupted_ids = corrupted.iter().map(|&i| samples[i].id.clone()).collect();
    let names = cfg.features.iter().map(|f| f.name.clone()).collect();
    Ok(SyntheticData {
        dataset: Dataset::new(samples, names)?,
        corrupted_ids,
    })
}

/// Count samples per species, in label order.
pub fn species_counts(d: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &d.samples {
        *out.entry(s.species.clone()).or_default() += 1;
    }
    out
}
