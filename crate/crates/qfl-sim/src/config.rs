//! Config files: a flat `key = value` format with `[section]` headers,
//! `#`/`;` comments, no environment overrides. Unknown keys are rejected so
//! a run is reproducible from the file alone.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;

use crate::analysis::BoundInputs;
use crate::client::{HessianMode, LocalConfig};
use crate::data::{block_average, load_mnist_idx, synthetic_digits, Dataset};
use crate::error::{QflError, Result};
use crate::privacy::PrivacyParams;
use crate::qnn::{qcnn_ansatz, Batch, QnnModel};
use crate::server::{stream, Problem, Sampling, TrainingConfig};

/// FNV-1a 64-bit hash; names output files after the exact config text.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parsed config: section -> key -> raw value, plus the canonical source
/// text used for hashing.
#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, BTreeMap<String, String>>,
    pub source_hash: u64,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut values: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(QflError::format(format!(
                        "line {}: malformed section header '{raw}'",
                        lineno + 1
                    )));
                }
                section = line[1..line.len() - 1].trim().to_string();
                values.entry(section.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(QflError::format(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            if section.is_empty() {
                return Err(QflError::format(format!(
                    "line {}: key '{}' appears before any [section]",
                    lineno + 1,
                    k.trim()
                )));
            }
            let prev = values
                .entry(section.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
            if prev.is_some() {
                return Err(QflError::format(format!(
                    "line {}: duplicate key '{}' in [{}]",
                    lineno + 1,
                    k.trim(),
                    section
                )));
            }
        }
        Ok(RawConfig { values, source_hash: fnv1a(text.as_bytes()) })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
    }

    /// Reject keys outside the allowed vocabulary; messages name the field.
    pub fn check_known(&self, allowed: &[(&str, &[&str])]) -> Result<()> {
        for (section, keys) in &self.values {
            let Some((_, known)) = allowed.iter().find(|(s, _)| s == section) else {
                return Err(QflError::config(format!("unknown section [{section}]")));
            };
            for key in keys.keys() {
                if !known.contains(&key.as_str()) {
                    return Err(QflError::config(format!(
                        "unknown key '{key}' in [{section}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse_f64(section: &str, key: &str, raw: &str) -> Result<f64> {
    if raw.eq_ignore_ascii_case("inf") || raw.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    raw.parse::<f64>().map_err(|_| {
        QflError::config(format!("[{section}] {key} = '{raw}' is not a number"))
    })
}

fn parse_usize(section: &str, key: &str, raw: &str) -> Result<usize> {
    raw.parse::<usize>().map_err(|_| {
        QflError::config(format!("[{section}] {key} = '{raw}' is not a non-negative integer"))
    })
}

fn parse_u64(section: &str, key: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>().map_err(|_| {
        QflError::config(format!("[{section}] {key} = '{raw}' is not a u64"))
    })
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(QflError::config(format!(
            "[{section}] {key} = '{raw}' is not a boolean"
        ))),
    }
}

fn parse_usize_list(section: &str, key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| parse_usize(section, key, p.trim()))
        .collect()
}

fn parse_f64_list(section: &str, key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|p| parse_f64(section, key, p.trim()))
        .collect()
}

macro_rules! getter {
    ($name:ident, $ty:ty, $parser:ident) => {
        fn $name(&self, section: &str, key: &str, default: $ty) -> Result<$ty> {
            match self.raw.get(section, key) {
                Some(v) => $parser(section, key, v),
                None => Ok(default),
            }
        }
    };
}

/// Validated run configuration assembled from a config file.
#[derive(Debug)]
pub struct RunConfig {
    raw: RawConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub workers: usize,
}

/// Sections and keys the parser accepts.
const ALLOWED: &[(&str, &[&str])] = &[
    ("run", &["seed", "out", "workers"]),
    (
        "federation",
        &["clients", "clients_per_round", "rounds", "sampling", "eta_g", "fim_subsample", "capture_trajectory"],
    ),
    (
        "local",
        &["eta", "beta", "tau", "support_fraction", "hessian_mode", "batch_size"],
    ),
    (
        "privacy",
        &["epsilon", "delta", "clip", "estimation_error", "lambda", "sigma0_sq", "alpha", "enforce_dp"],
    ),
    (
        "problem",
        &[
            "kind", "dim", "mu", "l_bound", "heterogeneity", "init", "train_samples", "test_samples",
            "train_images", "train_labels", "test_images", "test_labels", "block_rows", "block_cols",
            "class_zero", "class_one", "classes_per_client", "n_qubits", "conv_pool_pairs", "init_scale",
            "stretch_features",
        ],
    ),
    ("scan", &["n_qubits", "layers", "samples"]),
    (
        "variance",
        &["n_qubits", "layers", "dataset", "batch_size", "trials", "circuits"],
    ),
    (
        "bounds",
        &[
            "eta_l", "tau", "rounds", "smoothness", "mu", "sigma_star_sq", "sigma_sq", "sigma_g_sq",
            "n_qubits", "theta0_gap", "loss_drop", "kappa", "kappa_sweep",
        ],
    ),
];

impl RunConfig {
    getter!(f64_or, f64, parse_f64);
    getter!(usize_or, usize, parse_usize);
    getter!(bool_or, bool, parse_bool);

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let raw = RawConfig::parse(text)?;
        raw.check_known(ALLOWED)?;
        let seed = match raw.get("run", "seed") {
            Some(v) => parse_u64("run", "seed", v)?,
            None => 0,
        };
        let out_dir = raw.get("run", "out").map(PathBuf::from);
        let workers = match raw.get("run", "workers") {
            Some(v) => parse_usize("run", "workers", v)?,
            None => 0,
        };
        Ok(RunConfig { raw, seed, out_dir, workers })
    }

    pub fn source_hash(&self) -> u64 {
        self.raw.source_hash
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        let sampling = match self.raw.get("federation", "sampling").unwrap_or("uniform") {
            "uniform" => Sampling::Uniform,
            "fim" => Sampling::Fim,
            other => {
                return Err(QflError::config(format!(
                    "[federation] sampling = '{other}' (expected uniform or fim)"
                )))
            }
        };
        let hessian_mode = match self.raw.get("local", "hessian_mode").unwrap_or("first_order") {
            "first_order" => HessianMode::FirstOrder,
            "exact_hvp" => HessianMode::ExactHvp,
            other => {
                return Err(QflError::config(format!(
                    "[local] hessian_mode = '{other}' (expected first_order or exact_hvp)"
                )))
            }
        };
        let local = LocalConfig {
            eta: self.f64_or("local", "eta", 0.2)?,
            beta: self.f64_or("local", "beta", 0.8)?,
            tau: self.usize_or("local", "tau", 1)?,
            support_fraction: self.f64_or("local", "support_fraction", 0.5)?,
            hessian_mode,
            clip_norm: self.f64_or("privacy", "clip", f64::INFINITY)?,
            batch_size: self.usize_or("local", "batch_size", 0)?,
        };
        let cfg = TrainingConfig {
            total_clients: self.usize_or("federation", "clients", 4)?,
            clients_per_round: self.usize_or("federation", "clients_per_round", 2)?,
            rounds: self.usize_or("federation", "rounds", 10)?,
            local,
            eta_g: self.f64_or("federation", "eta_g", 1.0)?,
            sampling,
            seed: self.seed,
            capture_trajectory: self.bool_or("federation", "capture_trajectory", false)?,
            fim_subsample: self.usize_or("federation", "fim_subsample", 16)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn privacy_params(&self) -> Result<PrivacyParams> {
        let rounds = self.usize_or("federation", "rounds", 10)?;
        let k = self.usize_or("federation", "clients_per_round", 2)?;
        let clip = self.f64_or("privacy", "clip", f64::INFINITY)?;
        let p = PrivacyParams {
            epsilon: self.f64_or("privacy", "epsilon", 1.0)?,
            delta: self.f64_or("privacy", "delta", 1e-5)?,
            clip_bound: clip,
            estimation_error: self.f64_or("privacy", "estimation_error", 0.05)?,
            lambda: self.f64_or("privacy", "lambda", 1.0)?,
            sigma0_sq: self.f64_or("privacy", "sigma0_sq", 1e-3)?,
            alpha: self.f64_or("privacy", "alpha", 0.1)?,
            rounds,
            clients_per_round: k,
            enforce_dp: self.bool_or("privacy", "enforce_dp", false)?,
        };
        p.validate()?;
        if p.enforce_dp && !p.clip_bound.is_finite() {
            return Err(QflError::config(
                "[privacy] enforce_dp needs a finite clip bound".to_string(),
            ));
        }
        Ok(p)
    }

    /// Build the federated problem plus initial global parameters.
    pub fn build_problem(&self) -> Result<(Problem, Vec<f64>)> {
        let kind = self.raw.get("problem", "kind").unwrap_or("quadratic");
        let clients = self.usize_or("federation", "clients", 4)?;
        match kind {
            "quadratic" => {
                let dim = self.usize_or("problem", "dim", 4)?;
                let mu = self.f64_or("problem", "mu", 0.5)?;
                let l_bound = self.f64_or("problem", "l_bound", 2.0)?;
                let het = self.f64_or("problem", "heterogeneity", 1.0)?;
                let mut rng = stream(self.seed, &[0x9D0B]);
                let q = crate::data::make_quadratic_federation(clients, dim, mu, l_bound, het, &mut rng)?;
                let init = vec![self.f64_or("problem", "init", 2.0)?; dim];
                Ok((Problem::Quadratic(q), init))
            }
            "digits" | "mnist" => {
                let n_qubits = self.usize_or("problem", "n_qubits", 8)?;
                let pairs = self.usize_or("problem", "conv_pool_pairs", 3)?;
                let block_rows = self.usize_or("problem", "block_rows", 2)?;
                let block_cols = self.usize_or("problem", "block_cols", 4)?;
                if block_rows * block_cols > n_qubits {
                    return Err(QflError::config(format!(
                        "[problem] block grid {block_rows}x{block_cols} yields {} features, more than {n_qubits} qubits",
                        block_rows * block_cols
                    )));
                }
                let train_n = self.usize_or("problem", "train_samples", 500)?;
                let test_n = self.usize_or("problem", "test_samples", 200)?;
                let (mut train, mut test) = if kind == "digits" {
                    self.synthetic_digit_sets(train_n, test_n, block_rows, block_cols)?
                } else {
                    self.mnist_sets(train_n, test_n, block_rows, block_cols)?
                };
                if self.bool_or("problem", "stretch_features", true)? {
                    stretch_features(&mut train, &mut test);
                }
                let cpc = self.usize_or("problem", "classes_per_client", 2)?;
                let mut prng = stream(self.seed, &[0x9A27]);
                let parts = crate::data::partition_label_skew(&train, clients, cpc, &mut prng)?;
                let partitions: Vec<Batch> = parts
                    .iter()
                    .map(dataset_to_batch)
                    .collect::<Result<Vec<Batch>>>()?;
                let test_batch = dataset_to_batch(&test)?;
                let (circuit, readout) = qcnn_ansatz(n_qubits, pairs)?;
                let init_scale = self.f64_or("problem", "init_scale", 0.3)?;
                let mut irng = stream(self.seed, &[0x171F]);
                let init: Vec<f64> = (0..circuit.param_count())
                    .map(|_| irng.gen_range(-init_scale..init_scale))
                    .collect();
                let model = QnnModel::new(circuit, init.clone(), readout)?;
                Ok((Problem::Qnn { model, partitions, test: test_batch }, init))
            }
            other => Err(QflError::config(format!(
                "[problem] kind = '{other}' (expected quadratic, digits or mnist)"
            ))),
        }
    }

    fn synthetic_digit_sets(
        &self,
        train_n: usize,
        test_n: usize,
        block_rows: usize,
        block_cols: usize,
    ) -> Result<(Dataset, Dataset)> {
        let mut rng = stream(self.seed, &[0xD161]);
        let (images, labels) = synthetic_digits(train_n + test_n, &mut rng);
        let mut samples = Vec::with_capacity(images.len());
        for (img, &label) in images.iter().zip(&labels) {
            let features: Vec<f64> = block_average(img, 28, 28, block_rows, block_cols)?
                .iter()
                .map(|p| p * PI / 255.0)
                .collect();
            samples.push((features, label as usize));
        }
        let test = samples.split_off(train_n);
        Ok((Dataset::new(samples, 2)?, Dataset::new(test, 2)?))
    }

    fn mnist_sets(
        &self,
        train_n: usize,
        test_n: usize,
        block_rows: usize,
        block_cols: usize,
    ) -> Result<(Dataset, Dataset)> {
        let block = Some((block_rows, block_cols));
        let need = |key: &str| -> Result<PathBuf> {
            self.raw
                .get("problem", key)
                .map(PathBuf::from)
                .ok_or_else(|| QflError::config(format!("[problem] {key} is required for kind = mnist")))
        };
        let class_zero = self.usize_or("problem", "class_zero", 0)?;
        let class_one = self.usize_or("problem", "class_one", 1)?;
        let train = load_mnist_idx(&need("train_images")?, &need("train_labels")?, block)?
            .binary_subset(class_zero, class_one)?;
        let test = load_mnist_idx(&need("test_images")?, &need("test_labels")?, block)?
            .binary_subset(class_zero, class_one)?;
        let take = |ds: Dataset, n: usize| -> Result<Dataset> {
            if ds.len() < n {
                return Err(QflError::config(format!(
                    "dataset holds {} binary samples, {n} requested",
                    ds.len()
                )));
            }
            Dataset::new(ds.samples.into_iter().take(n).collect(), 2)
        };
        Ok((take(train, train_n)?, take(test, test_n)?))
    }

    /// Scan settings for the barren-plateau subcommand.
    pub fn scan_settings(&self) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let ns = match self.raw.get("scan", "n_qubits") {
            Some(v) => parse_usize_list("scan", "n_qubits", v)?,
            None => vec![2, 4, 6],
        };
        let layers = match self.raw.get("scan", "layers") {
            Some(v) => parse_usize_list("scan", "layers", v)?,
            None => vec![20],
        };
        let samples = self.usize_or("scan", "samples", 200)?;
        Ok((ns, layers, samples))
    }

    /// Settings for the variance-check subcommand.
    pub fn variance_settings(&self) -> Result<VarianceSettings> {
        Ok(VarianceSettings {
            n_qubits: match self.raw.get("variance", "n_qubits") {
                Some(v) => parse_usize_list("variance", "n_qubits", v)?,
                None => vec![2, 4],
            },
            layers: self.usize_or("variance", "layers", 20)?,
            dataset: self.usize_or("variance", "dataset", 64)?,
            batch_size: self.usize_or("variance", "batch_size", 8)?,
            trials: self.usize_or("variance", "trials", 200)?,
            circuits: self.usize_or("variance", "circuits", 5)?,
        })
    }

    /// Bound-evaluator inputs plus an optional κ sweep.
    pub fn bound_inputs(&self) -> Result<(BoundInputs, Vec<f64>)> {
        let inputs = BoundInputs {
            eta_l: self.f64_or("bounds", "eta_l", 0.01)?,
            tau: self.usize_or("bounds", "tau", 1)?,
            rounds: self.usize_or("bounds", "rounds", 100)?,
            smoothness: self.f64_or("bounds", "smoothness", 1.0)?,
            mu: self.f64_or("bounds", "mu", 0.1)?,
            sigma_star_sq: self.f64_or("bounds", "sigma_star_sq", 0.0)?,
            sigma_sq: self.f64_or("bounds", "sigma_sq", 0.0)?,
            sigma_g_sq: self.f64_or("bounds", "sigma_g_sq", 0.0)?,
            n_qubits: self.usize_or("bounds", "n_qubits", 1)?,
            theta0_gap: self.f64_or("bounds", "theta0_gap", 0.0)?,
            loss_drop: self.f64_or("bounds", "loss_drop", 0.0)?,
            kappa: self.f64_or("bounds", "kappa", 1.0)?,
            vartheta_sq: 0.0,
        };
        inputs.validate()?;
        let sweep = match self.raw.get("bounds", "kappa_sweep") {
            Some(v) => parse_f64_list("bounds", "kappa_sweep", v)?,
            None => Vec::new(),
        };
        Ok((inputs, sweep))
    }
}

/// Settings for the mini-batch variance experiment.
#[derive(Debug, Clone)]
pub struct VarianceSettings {
    pub n_qubits: Vec<usize>,
    pub layers: usize,
    pub dataset: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub circuits: usize,
}

/// Stretch each feature dimension to span the full [0, π] encoding range,
/// using the train set's per-dimension extent; test features are clamped
/// into range. Order-preserving per dimension.
fn stretch_features(train: &mut Dataset, test: &mut Dataset) {
    let dim = train.feature_dim;
    if dim == 0 || train.is_empty() {
        return;
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for (x, _) in &train.samples {
        for (d, v) in x.iter().enumerate() {
            lo[d] = lo[d].min(*v);
            hi[d] = hi[d].max(*v);
        }
    }
    let apply = |ds: &mut Dataset| {
        for (x, _) in ds.samples.iter_mut() {
            for (d, v) in x.iter_mut().enumerate() {
                let span = hi[d] - lo[d];
                *v = if span > 0.0 {
                    ((*v - lo[d]) / span * PI).clamp(0.0, PI)
                } else {
                    0.0
                };
            }
        }
    };
    apply(train);
    apply(test);
}

/// A per-client Dataset as a training batch: labels become {0, 1} targets.
pub fn dataset_to_batch(ds: &Dataset) -> Result<Batch> {
    Batch::new(
        ds.samples.iter().map(|(x, _)| x.clone()).collect(),
        ds.samples.iter().map(|(_, y)| *y as f64).collect(),
    )
}
