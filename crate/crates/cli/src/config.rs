//! Flat `key = value` experiment configuration.
//!
//! Every key has a default, so an empty file is a valid configuration. Unknown
//! keys are rejected by name. `sweep.<key> = a | b | c` turns any key into a grid axis.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use waffle_core::data::{multimodal_preset, SynthSpec};
use waffle_core::federation::{Algorithm, RoundConfig, UnqueriedEval};
use waffle_core::ibp::{PriorConfig, RelaxationConfig};
use waffle_core::mia::MiaConfig;
use waffle_core::model::PRESETS;

use crate::error::{CliError, Result};

/// Accepted keys and their defaults. `auto` defers to the data source or model preset.
pub const KEYS: &[(&str, &str)] = &[
    ("data.source", "synthetic"),
    ("data.dir", "data"),
    ("data.partition", "unimodal"),
    ("data.groups", "auto"),
    ("data.clients", "100"),
    ("data.majority_clients", "auto"),
    ("data.minority_clients", "auto"),
    ("data.z", "2"),
    ("data.test_fraction", "0.2"),
    ("data.synthetic.classes", "10"),
    ("data.synthetic.per_class", "100"),
    ("data.synthetic.dim", "20"),
    ("data.synthetic.separation", "6"),
    ("data.synthetic.seed", "0"),
    ("model.preset", "auto"),
    ("model.hidden", "200"),
    ("ibp.factors", "auto"),
    ("ibp.alpha", "auto"),
    ("ibp.alpha_ratio", "1.0"),
    ("ibp.temperature", "0.5"),
    ("ibp.hard_threshold", "0.5"),
    ("ibp.kl_weight", "1.0"),
    ("ibp.unqueried", "ones"),
    ("fed.rounds", "100"),
    ("fed.fraction", "0.1"),
    ("fed.local_epochs", "5"),
    ("fed.batch_size", "10"),
    ("fed.lr", "0.04"),
    ("fed.mu", "1.0"),
    ("fed.algorithm", "waffle"),
    ("fed.seed", "0"),
    ("fed.eval_every", "5"),
    ("mia.algorithms", "fedavg,waffle"),
    ("mia.shadows", "3"),
    ("mia.clients", "2"),
    ("mia.per_client", "200"),
    ("mia.completion", "ones"),
    ("output.plots", "true"),
];

/// Artifact directory. It does not influence results, so it stays out of the snapshot and hash.
pub const OUTPUT_DIR_KEY: &str = "output.dir";
pub const SWEEP_PREFIX: &str = "sweep.";
const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Mnist,
    Fmnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fmnist" => Ok(Self::Fmnist),
            "cifar10" => Ok(Self::Cifar10),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!(
                "unknown source `{other}` (expected mnist, fmnist, cifar10 or synthetic)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Unimodal,
    Multimodal,
}

impl FromStr for PartitionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unimodal" => Ok(Self::Unimodal),
            "multimodal" => Ok(Self::Multimodal),
            other => Err(format!("unknown partition `{other}` (expected unimodal or multimodal)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    pub dir: PathBuf,
    pub partition: PartitionMode,
    /// Name of the multimodal group preset.
    pub groups: String,
    pub clients: usize,
    pub majority_clients: Option<usize>,
    pub minority_clients: Option<usize>,
    pub z: usize,
    pub test_fraction: f64,
    pub synthetic: SynthSpec,
}

/// A configuration resolved into typed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: DataSettings,
    /// A preset name from [`PRESETS`] or `mlp`.
    pub model_preset: String,
    pub hidden: Vec<usize>,
    pub factors: Option<Vec<usize>>,
    pub round: RoundConfig,
    pub mia: MiaConfig,
    pub mia_algorithms: Vec<Algorithm>,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
    sweep: BTreeMap<String, Vec<String>>,
    out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
            sweep: BTreeMap::new(),
            out_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Syntax {
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(CliError::Syntax {
                    line: i + 1,
                    message: "missing key before `=`".into(),
                });
            }
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(CliError::key(key, "set more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key without validating the configuration as a whole.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == OUTPUT_DIR_KEY {
            if value.is_empty() {
                return Err(CliError::key(key, "empty directory"));
            }
            self.out_dir = PathBuf::from(value);
        } else if let Some(target) = key.strip_prefix(SWEEP_PREFIX) {
            if !self.values.contains_key(target) {
                return Err(CliError::key(key, format!("`{target}` is not a known key")));
            }
            let grid: Vec<String> = value.split('|').map(|v| v.trim().to_string()).collect();
            if grid.iter().any(String::is_empty) {
                return Err(CliError::key(key, "empty grid value"));
            }
            self.sweep.insert(target.to_string(), grid);
        } else if let Some(slot) = self.values.get_mut(key) {
            *slot = value.to_string();
        } else {
            return Err(CliError::key(key, "unknown key"));
        }
        Ok(())
    }

    /// Applies command-line overrides and revalidates.
    pub fn with_overrides(mut self, seed: Option<u64>, out_dir: Option<&Path>) -> Result<Self> {
        if let Some(seed) = seed {
            self.set("fed.seed", &seed.to_string())?;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir.to_path_buf();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn set_out_dir(&mut self, dir: impl Into<PathBuf>) {
        self.out_dir = dir.into();
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn is_sweep(&self) -> bool {
        !self.sweep.is_empty()
    }

    /// Canonical `key = value` text of every resolved key, sorted.
    pub fn snapshot_body(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, grid) in &self.sweep {
            out.push_str(&format!("{SWEEP_PREFIX}{k} = {}\n", grid.join(" | ")));
        }
        out
    }

    /// SHA-256 of the snapshot body, hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot_body().as_bytes()))
    }

    /// The snapshot with its hash on the first line.
    pub fn snapshot(&self) -> String {
        format!("# config_hash: {}\n{}", self.hash(), self.snapshot_body())
    }

    /// One configuration per grid cell, named after its swept values and
    /// writing into a subdirectory of the same name. A config without sweep
    /// keys yields itself under an empty name.
    pub fn cells(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut cells = vec![(
            Vec::<String>::new(),
            Self {
                sweep: BTreeMap::new(),
                ..self.clone()
            },
        )];
        for (key, grid) in &self.sweep {
            let mut next = Vec::with_capacity(cells.len() * grid.len());
            for (parts, cfg) in &cells {
                for value in grid {
                    let mut cfg = cfg.clone();
                    cfg.set(key, value)?;
                    let mut parts = parts.clone();
                    parts.push(format!("{key}={}", value.replace([',', ' '], "-")));
                    next.push((parts, cfg));
                }
            }
            cells = next;
        }
        cells
            .into_iter()
            .map(|(parts, mut cfg)| {
                let name = parts.join("__");
                if !name.is_empty() {
                    cfg.out_dir = self.out_dir.join(&name);
                }
                cfg.settings()?;
                Ok((name, cfg))
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        self.cells().map(|_| ())
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn parse_key<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::key(key, format!("cannot parse `{raw}`: {e}")))
    }

    fn auto_or<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.parse_key(key).map(Some)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| CliError::key(key, format!("cannot parse `{}` in `{raw}`: {e}", p.trim())))
            })
            .collect()
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_key(key)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::key(key, format!("must be positive, got {v}")))
        }
    }

    fn non_negative(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse_key(key)?;
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::key(key, format!("must be non-negative, got {v}")))
        }
    }

    fn at_least_one(&self, key: &str) -> Result<usize> {
        let v: usize = self.parse_key(key)?;
        if v >= 1 {
            Ok(v)
        } else {
            Err(CliError::key(key, "must be at least 1"))
        }
    }

    fn unit_interval(&self, key: &str, include_one: bool) -> Result<f64> {
        let v: f64 = self.parse_key(key)?;
        if v > 0.0 && (v < 1.0 || (include_one && v == 1.0)) {
            Ok(v)
        } else {
            let range = if include_one { "(0, 1]" } else { "(0, 1)" };
            Err(CliError::key(key, format!("must lie in {range}, got {v}")))
        }
    }

    fn completion(&self, key: &str) -> Result<UnqueriedEval> {
        match self.raw(key) {
            "ones" => Ok(UnqueriedEval::AllOnes),
            "prior" => Ok(UnqueriedEval::PriorSample),
            other => Err(CliError::key(key, format!("expected `ones` or `prior`, got `{other}`"))),
        }
    }

    /// Typed view of the configuration. Sweep keys are ignored; see [`ExperimentConfig::cells`].
    pub fn settings(&self) -> Result<Settings> {
        let source: DataSource = self.parse_key("data.source")?;
        let partition: PartitionMode = self.parse_key("data.partition")?;
        let groups = match self.raw("data.groups") {
            "auto" => match source {
                DataSource::Mnist | DataSource::Synthetic => "mnist",
                DataSource::Fmnist => "fmnist",
                DataSource::Cifar10 => "cifar10",
            }
            .to_string(),
            other => other.to_string(),
        };
        if partition == PartitionMode::Multimodal {
            multimodal_preset(&groups).map_err(|e| CliError::key("data.groups", e.to_string()))?;
        }
        let data = DataSettings {
            source,
            dir: PathBuf::from(self.raw("data.dir")),
            partition,
            groups,
            clients: self.at_least_one("data.clients")?,
            majority_clients: self.auto_or("data.majority_clients")?,
            minority_clients: self.auto_or("data.minority_clients")?,
            z: self.at_least_one("data.z")?,
            test_fraction: self.unit_interval("data.test_fraction", false)?,
            synthetic: SynthSpec {
                classes: self.at_least_one("data.synthetic.classes")?,
                per_class: self.at_least_one("data.synthetic.per_class")?,
                dim: self.at_least_one("data.synthetic.dim")?,
                separation: self.non_negative("data.synthetic.separation")?,
                seed: self.parse_key("data.synthetic.seed")?,
            },
        };
        for key in ["data.majority_clients", "data.minority_clients"] {
            if self.auto_or::<usize>(key)? == Some(0) {
                return Err(CliError::key(key, "must be at least 1"));
            }
        }

        let model_preset = match self.raw("model.preset") {
            "auto" => match source {
                DataSource::Mnist => "mnist-mlp",
                DataSource::Fmnist => "fmnist-conv",
                DataSource::Cifar10 => "cifar-conv",
                DataSource::Synthetic => "mlp",
            }
            .to_string(),
            other if other == "mlp" || PRESETS.contains(&other) => other.to_string(),
            other => {
                return Err(CliError::key(
                    "model.preset",
                    format!("unknown preset `{other}` (expected mlp, {})", PRESETS.join(", ")),
                ))
            }
        };
        let hidden: Vec<usize> = self.list("model.hidden")?;
        if hidden.contains(&0) {
            return Err(CliError::key("model.hidden", "layer widths must be at least 1"));
        }
        let factors = if self.raw("ibp.factors") == "auto" {
            None
        } else {
            let f: Vec<usize> = self.list("ibp.factors")?;
            if f.contains(&0) {
                return Err(CliError::key("ibp.factors", "factor counts must be at least 1"));
            }
            Some(f)
        };

        let prior = match self.raw("ibp.alpha") {
            "auto" => PriorConfig::per_factor(self.positive("ibp.alpha_ratio")?),
            _ => PriorConfig::fixed(self.positive("ibp.alpha")?),
        };
        let relaxation = RelaxationConfig {
            temperature: self.positive("ibp.temperature")?,
            hard_threshold: self.unit_interval("ibp.hard_threshold", false)?,
        };
        let round = RoundConfig {
            rounds: self.parse_key("fed.rounds")?,
            fraction: self.unit_interval("fed.fraction", true)?,
            local_epochs: self.parse_key("fed.local_epochs")?,
            batch_size: self.at_least_one("fed.batch_size")?,
            lr: self.non_negative("fed.lr")?,
            mu: self.non_negative("fed.mu")?,
            algorithm: self.parse_key("fed.algorithm")?,
            client_weights: None,
            seed: self.parse_key("fed.seed")?,
            prior,
            relaxation,
            unqueried: self.completion("ibp.unqueried")?,
            kl_weight: self.non_negative("ibp.kl_weight")?,
            eval_every: self.parse_key("fed.eval_every")?,
        };
        let mia = MiaConfig {
            shadows: self.at_least_one("mia.shadows")?,
            clients: self.at_least_one("mia.clients")?,
            per_client: self.at_least_one("mia.per_client")?,
            completion: self.completion("mia.completion")?,
            seed: round.seed,
        };
        Ok(Settings {
            data,
            model_preset,
            hidden,
            factors,
            round,
            mia,
            mia_algorithms: self.list("mia.algorithms")?,
            plots: self.parse_key("output.plots")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        let s = cfg.settings().unwrap();
        assert_eq!(s.round, RoundConfig::default());
        assert_eq!(s.model_preset, "mlp");
        assert_eq!(cfg.out_dir(), Path::new("runs"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("fed.rouns = 3").unwrap_err();
        assert!(matches!(&err, CliError::Key { key, .. } if key == "fed.rouns"), "{err}");
        let err = ExperimentConfig::parse("sweep.fed.lrr = 1 | 2").unwrap_err();
        assert!(matches!(&err, CliError::Key { key, .. } if key == "sweep.fed.lrr"));
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("fed.fraction = 0", "fed.fraction"),
            ("fed.fraction = 1.5", "fed.fraction"),
            ("fed.algorithm = sgd", "fed.algorithm"),
            ("model.preset = resnet", "model.preset"),
            ("ibp.alpha = -1", "ibp.alpha"),
            ("data.partition = multimodal\ndata.groups = imagenet", "data.groups"),
            ("sweep.fed.local_epochs = 1 | x", "fed.local_epochs"),
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(
                matches!(&err, CliError::Key { key: k, .. } if k == key),
                "{text}: {err}"
            );
        }
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let err = ExperimentConfig::parse("# ok\n\nfed.rounds 3").unwrap_err();
        assert!(matches!(err, CliError::Syntax { line: 3, .. }));
        assert!(matches!(
            ExperimentConfig::parse("fed.rounds = 1\nfed.rounds = 2").unwrap_err(),
            CliError::Key { .. }
        ));
    }

    #[test]
    fn hash_ignores_formatting_and_output_dir() {
        let a = ExperimentConfig::parse("fed.rounds = 3\noutput.dir = a").unwrap();
        let b = ExperimentConfig::parse("# comment\n  fed.rounds=3  \noutput.dir = b\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse("fed.rounds = 4").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert!(a.snapshot().starts_with(&format!("# config_hash: {}\n", a.hash())));
    }

    #[test]
    fn sweep_expands_to_a_grid() {
        let cfg = ExperimentConfig::parse(
            "output.dir = out\nsweep.fed.local_epochs = 10 | 20 | 30\nsweep.data.z = 2 | 3\nsweep.ibp.factors = 80 | 100",
        )
        .unwrap();
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.len(), 12);
        let (name, first) = &cells[0];
        assert_eq!(name, "data.z=2__fed.local_epochs=10__ibp.factors=80");
        assert_eq!(first.out_dir(), Path::new("out").join(name));
        assert_eq!(first.settings().unwrap().round.local_epochs, 10);
        assert!(!first.is_sweep());
        let mut names: Vec<&String> = cells.iter().map(|(n, _)| n).collect();
        names.dedup();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn overrides_replace_seed_and_directory() {
        let cfg = ExperimentConfig::parse("fed.seed = 1")
            .unwrap()
            .with_overrides(Some(9), Some(Path::new("elsewhere")))
            .unwrap();
        assert_eq!(cfg.settings().unwrap().round.seed, 9);
        assert_eq!(cfg.out_dir(), Path::new("elsewhere"));
    }

    #[test]
    fn alpha_modes() {
        let s = ExperimentConfig::parse("ibp.alpha_ratio = 0.4")
            .unwrap()
            .settings()
            .unwrap();
        assert!((s.round.prior.alpha_for(100) - 40.0).abs() < 1e-12);
        let s = ExperimentConfig::parse("ibp.alpha = 3").unwrap().settings().unwrap();
        assert_eq!(s.round.prior.alpha_for(100), 3.0);
    }
}
