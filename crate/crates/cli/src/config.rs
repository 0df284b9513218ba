//! Run configuration: a TOML file with a root `seed`, an `output_dir` and
//! one section per stage. Every section defaults to the standard rotated
//! benchmark, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use privada_core::accountant::SamplingScheme;
use privada_core::benchmark::StandardBenchmark;
use privada_core::data::{DomainShift, DomainSpec, LabelMode};
use privada_core::pipeline::{GmmSettings, PretrainConfig, Projection};
use privada_core::uda::AdaptConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Synthetic domain pair; the seed comes from the root `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub radius: f64,
    pub spread: f64,
    pub shift: DomainShift,
    pub label_mode: LabelMode,
    pub label_noise_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = StandardBenchmark::new(0).spec;
        Self {
            n_classes: spec.n_classes,
            dim: spec.dim,
            samples_per_class: spec.samples_per_class,
            radius: spec.radius,
            spread: spec.spread,
            shift: spec.shift,
            label_mode: spec.label_mode,
            label_noise_rate: spec.label_noise_rate,
        }
    }
}

impl DataSection {
    pub fn spec(&self, seed: u64) -> DomainSpec {
        DomainSpec {
            n_classes: self.n_classes,
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            radius: self.radius,
            spread: self.spread,
            shift: self.shift.clone(),
            label_mode: self.label_mode,
            label_noise_rate: self.label_noise_rate,
            seed,
        }
    }
}

/// Membership-inference runs. With `packages` empty the built-in benchmark
/// is attacked: a non-private model plus one DP model per entry of
/// `epsilons`. Otherwise every listed package is attacked with the given
/// candidate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub packages: Vec<PathBuf>,
    pub members: Option<PathBuf>,
    pub nonmembers: Option<PathBuf>,
    /// Enables the mixture-shift attack in file mode.
    pub reference: Option<PathBuf>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { epsilons: vec![2.5], packages: Vec::new(), members: None, nonmembers: None, reference: None }
    }
}

/// Privacy report for `steps` releases at `(q, sigma)`. Unset values are
/// derived from the `pretrain` and `data` sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountantSection {
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub steps: Option<u64>,
    pub delta: f64,
    /// RDP orders; empty means the default grid.
    pub orders: Vec<f64>,
    /// Calibrates `sigma` when it is unset, and sets the ε of the bound.
    pub target_epsilon: Option<f64>,
    pub scheme: SamplingScheme,
    pub c1: f64,
    pub c2: f64,
}

impl Default for AccountantSection {
    fn default() -> Self {
        Self {
            q: None,
            sigma: None,
            steps: None,
            delta: 1e-5,
            orders: Vec::new(),
            target_epsilon: None,
            scheme: SamplingScheme::Poisson,
            c1: privada_core::accountant::DEFAULT_C1,
            c2: privada_core::accountant::DEFAULT_C2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub projection: Projection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub gmm: GmmSettings,
    pub adapt: AdaptConfig,
    pub attack: AttackSection,
    pub accountant: AccountantSection,
    pub embeddings: EmbeddingSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = StandardBenchmark::new(0);
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            pretrain: bench.pretrain,
            gmm: bench.gmm,
            adapt: bench.adapt,
            attack: AttackSection::default(),
            accountant: AccountantSection::default(),
            embeddings: EmbeddingSection::default(),
        }
    }
}

/// Sections whose core settings carry a seed of their own.
const SEEDED_SECTIONS: [&str; 3] = ["pretrain", "gmm", "adapt"];

impl RunConfig {
    /// Defaults, then `path`, then `overrides` (dotted key, value), in that
    /// order of precedence from lowest to highest.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut tree = without_section_seeds(Value::try_from(RunConfig::default()).map_err(internal)?);
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            let user: Table =
                toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            reject_section_seeds(&user, &path.display().to_string())?;
            merge(&mut tree, user);
        }
        for (key, value) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(CliError::config(format!("malformed key `{key}`")));
            }
            if parts.len() > 1 && parts[parts.len() - 1] == "seed" {
                return Err(CliError::config(format!("`{key}` is not settable; use the root `seed`")));
            }
            set_path(&mut tree, &parts, value.clone(), key)?;
        }
        let mut config: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
            let path = e.path().to_string();
            let origin = if path == "." { String::new() } else { format!("`{path}`: ") };
            let inner = e.inner().to_string();
            CliError::config(format!("{origin}{}", inner.lines().next().unwrap_or_default()))
        })?;
        config.pretrain.seed = config.seed;
        config.gmm.seed = config.seed;
        config.adapt.seed = config.seed;
        config.data.spec(config.seed).validate()?;
        config.adapt.validate()?;
        Ok(config)
    }

    /// TOML text that [`RunConfig::load`] reads back to the same config.
    pub fn to_toml(&self) -> Result<String> {
        let tree = without_section_seeds(Value::try_from(self).map_err(internal)?);
        toml::to_string(&tree).map_err(internal)
    }

    pub fn domain(&self) -> DomainSpec {
        self.data.spec(self.seed)
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("config serialization failed: {e}"))
}

fn without_section_seeds(mut tree: Value) -> Value {
    if let Value::Table(t) = &mut tree {
        for s in SEEDED_SECTIONS {
            if let Some(Value::Table(section)) = t.get_mut(s) {
                section.remove("seed");
            }
        }
    }
    tree
}

fn reject_section_seeds(user: &Table, origin: &str) -> Result<()> {
    for (name, value) in user {
        if let Value::Table(section) = value {
            if section.contains_key("seed") {
                return Err(CliError::config(format!(
                    "{origin}: `{name}.seed` is not allowed; every stage derives its randomness from the root `seed`"
                )));
            }
        }
    }
    Ok(())
}

/// Tables merge key by key; any other value replaces the old one.
fn merge(base: &mut Value, over: Table) {
    let Value::Table(base) = base else { return };
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(old @ Value::Table(_)), Value::Table(new)) => merge(old, new),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn set_path(tree: &mut Value, parts: &[&str], value: Value, key: &str) -> Result<()> {
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let Value::Table(t) = node else {
            return Err(CliError::config(format!("`{key}`: `{part}` is not inside a table")));
        };
        node = t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    match node {
        Value::Table(t) => {
            t.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => Err(CliError::config(format!("`{key}` does not name a table entry"))),
    }
}

/// Parses the `KEY=VALUE` of a `--set` flag. The value is read as TOML and
/// falls back to a plain string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) =
        arg.split_once('=').ok_or_else(|| CliError::config(format!("`--set {arg}` is not of the form KEY=VALUE")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}
