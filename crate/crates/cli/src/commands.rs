//! One function per subcommand. Inputs are only read; every output lands in
//! the configured output directory next to `resolved-<subcommand>.toml`.

use std::path::{Path, PathBuf};

use log::info;
use privada_core::accountant::{self, PrivacyLedger};
use privada_core::benchmark::{self, MiaBenchmark};
use privada_core::data::{self, CsvSchema, Dataset};
use privada_core::mia::{self, AttackSetting};
use privada_core::nn::Mlp;
use privada_core::pipeline::{self, SourceModel};
use privada_core::share::{ModelFile, SharePackage};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const SOURCE_CSV: &str = "source.csv";
pub const TARGET_CSV: &str = "target.csv";
pub const SOURCE_MODEL: &str = "source_model.json";
pub const SHARE: &str = "share.json";
pub const TARGET_ENCODER: &str = "target_encoder.json";

/// Encoder and data selection for `evaluate` and `embeddings`.
#[derive(Debug, Clone)]
pub struct ModelChoice {
    pub package: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub source_encoder: bool,
    pub data: Option<PathBuf>,
}

/// Package, chosen encoder, labeled data and the paths they came from.
type Loaded = (SharePackage, Mlp, Dataset, Vec<(&'static str, PathBuf)>);

pub struct Run {
    config: RunConfig,
    name: &'static str,
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_csv(path: &Path, classes: Option<&[String]>) -> Result<Dataset> {
    data::load_csv(path, &CsvSchema { classes: classes.map(<[String]>::to_vec) }).map_err(|e| CliError::at(path, e))
}

fn read_package(path: &Path) -> Result<SharePackage> {
    SharePackage::read(path).map_err(|e| CliError::at(path, e))
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_float(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

impl Run {
    pub fn start(config: RunConfig, name: &'static str) -> Result<Self> {
        let out = &config.output_dir;
        std::fs::create_dir_all(out).map_err(|e| runtime(out, e))?;
        Ok(Self { config, name })
    }

    fn out(&self, file: &str) -> PathBuf {
        self.config.output_dir.join(file)
    }

    fn input(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.out(default))
    }

    fn write(&self, file: &str, text: &str) -> Result<()> {
        let path = self.out(file);
        std::fs::write(&path, text).map_err(|e| runtime(&path, e))?;
        info!("wrote {}", path.display());
        Ok(())
    }

    /// Writes the resolved configuration, with the inputs read, as the
    /// last artifact of the run.
    fn finish(&self, inputs: &[(&str, &Path)]) -> Result<()> {
        let mut text = format!("# privada {}\n# subcommand: {}\n", env!("PRIVADA_VERSION"), self.name);
        for (role, path) in inputs {
            text.push_str(&format!("# input {role} = {}\n", toml_str(&path.display().to_string())));
        }
        text.push('\n');
        text.push_str(&self.config.to_toml()?);
        self.write(&format!("resolved-{}.toml", self.name), &text)
    }

    pub fn gen_data(self) -> Result<()> {
        let (source, target) = data::generate_pair(&self.config.domain())?;
        self.write(SOURCE_CSV, &data::to_csv(&source))?;
        self.write(TARGET_CSV, &data::to_csv(&target))?;
        self.finish(&[])
    }

    pub fn pretrain(self, source: Option<PathBuf>) -> Result<()> {
        let source_path = self.input(source, SOURCE_CSV);
        let dataset = load_csv(&source_path, None)?;
        let trained = pipeline::pretrain_source(&dataset, &self.config.pretrain)?;
        match &trained.receipt {
            Some(r) => info!(
                "private pretraining: ε = {} at δ = {} (σ = {}, q = {}, {} steps)",
                r.epsilon, r.delta, r.sigma, r.q, r.steps
            ),
            None => info!("non-private pretraining"),
        }
        let model_text = trained.model.to_file(trained.receipt.as_ref()).to_text()?;
        self.write(SOURCE_MODEL, &model_text)?;
        self.write("train_log.csv", &trained.log.to_csv())?;
        let mut ledger = String::from("sampling_rate,noise_multiplier,count\n");
        for e in trained.ledger.iter().flat_map(PrivacyLedger::events) {
            ledger.push_str(&format!("{},{},{}\n", e.sampling_rate, e.noise_multiplier, e.count));
        }
        self.write("privacy_ledger.csv", &ledger)?;
        self.finish(&[("source", &source_path)])
    }

    pub fn share(self, model: Option<PathBuf>, source: Option<PathBuf>) -> Result<()> {
        let model_path = self.input(model, SOURCE_MODEL);
        let source_path = self.input(source, SOURCE_CSV);
        let file = ModelFile::read(&model_path).map_err(|e| CliError::at(&model_path, e))?;
        let Some(receipt) = file.privacy.clone() else {
            return Err(CliError::config(format!("{} is not a pretrained source model", model_path.display())));
        };
        let model = SourceModel::from_file(file).map_err(|e| CliError::at(&model_path, e))?;
        let dataset = load_csv(&source_path, Some(&model.class_names))?;
        let pkg = pipeline::build_share(&model, &dataset, &self.config.gmm, receipt.as_ref())?;
        self.write(SHARE, &pkg.to_text()?)?;
        self.finish(&[("model", &model_path), ("source", &source_path)])
    }

    pub fn adapt(self, package: Option<PathBuf>, target: Option<PathBuf>) -> Result<()> {
        let pkg_path = self.input(package, SHARE);
        let target_path = self.input(target, TARGET_CSV);
        let pkg = read_package(&pkg_path)?;
        let target = load_csv(&target_path, Some(&pkg.meta.class_names))?;
        let adapted = pipeline::adapt_target(&pkg, &target.features, &self.config.adapt)?;
        let file = ModelFile {
            encoder: adapted.encoder.clone(),
            classifier: None,
            class_names: pkg.meta.class_names.clone(),
            label_mode: pkg.meta.label_mode,
            privacy: None,
        };
        self.write(TARGET_ENCODER, &file.to_text()?)?;
        self.write("adapt_log.csv", &adapted.log_csv())?;
        self.finish(&[("package", &pkg_path), ("target", &target_path)])
    }

    fn load_model(&self, choice: ModelChoice) -> Result<Loaded> {
        let pkg_path = self.input(choice.package, SHARE);
        let data_path = self.input(choice.data, TARGET_CSV);
        let pkg = read_package(&pkg_path)?;
        let mut inputs = vec![("package", pkg_path)];
        let encoder = if choice.source_encoder {
            pkg.encoder.clone()
        } else {
            let enc_path = self.input(choice.encoder, TARGET_ENCODER);
            let file = ModelFile::read(&enc_path).map_err(|e| CliError::at(&enc_path, e))?;
            if file.encoder.input_dim() != pkg.meta.input_dim || file.encoder.output_dim() != pkg.meta.feature_dim {
                return Err(CliError::config(format!(
                    "{}: encoder maps {} → {} but the package expects {} → {}",
                    enc_path.display(),
                    file.encoder.input_dim(),
                    file.encoder.output_dim(),
                    pkg.meta.input_dim,
                    pkg.meta.feature_dim
                )));
            }
            inputs.push(("encoder", enc_path));
            file.encoder
        };
        let dataset = load_csv(&data_path, Some(&pkg.meta.class_names))?;
        inputs.push(("data", data_path));
        Ok((pkg, encoder, dataset, inputs))
    }

    fn finish_with(&self, inputs: &[(&'static str, PathBuf)]) -> Result<()> {
        let refs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
        self.finish(&refs)
    }

    pub fn evaluate(self, choice: ModelChoice) -> Result<()> {
        let (pkg, encoder, dataset, inputs) = self.load_model(choice)?;
        let metrics = pipeline::evaluate(&encoder, &pkg.classifier, &dataset)?;
        self.write("metrics.csv", &metrics.to_csv())?;
        println!("macro_f1 = {}", toml_float(metrics.macro_f1));
        self.finish_with(&inputs)
    }

    pub fn embeddings(self, choice: ModelChoice) -> Result<()> {
        let (_, encoder, dataset, inputs) = self.load_model(choice)?;
        let emb = pipeline::export_embeddings(&encoder, &dataset, self.config.embeddings.projection)?;
        self.write("embeddings.csv", &emb.to_csv())?;
        self.finish_with(&inputs)
    }

    pub fn attack(self) -> Result<()> {
        let section = &self.config.attack;
        let mut inputs: Vec<(&'static str, PathBuf)> = Vec::new();
        let rows = if section.packages.is_empty() {
            let seed = self.config.seed;
            let mut rows = benchmark::run_mia(&MiaBenchmark::new(seed), pipeline_label(None).as_str())?;
            for &eps in &section.epsilons {
                let bench = MiaBenchmark::new(seed).with_epsilon(eps);
                rows.extend(benchmark::run_mia(&bench, &pipeline_label(Some(eps)))?);
            }
            rows
        } else {
            let required = |p: &Option<PathBuf>, key: &str| {
                p.clone().ok_or_else(|| {
                    CliError::config(format!("`attack.{key}` is required when `attack.packages` is set"))
                })
            };
            let members_path = required(&section.members, "members")?;
            let nonmembers_path = required(&section.nonmembers, "nonmembers")?;
            let mut loaded = Vec::new();
            for path in &section.packages {
                let pkg = read_package(path)?;
                let classes = pkg.meta.class_names.clone();
                let members = load_csv(&members_path, Some(&classes))?;
                let nonmembers = load_csv(&nonmembers_path, Some(&classes))?;
                let reference = section.reference.as_deref().map(|p| load_csv(p, Some(&classes))).transpose()?;
                loaded.push((path.display().to_string(), pkg, members, nonmembers, reference));
                inputs.push(("package", path.clone()));
            }
            inputs.push(("members", members_path));
            inputs.push(("nonmembers", nonmembers_path));
            if let Some(r) = &section.reference {
                inputs.push(("reference", r.clone()));
            }
            let settings: Vec<AttackSetting<'_>> = loaded
                .iter()
                .map(|(label, pkg, m, n, r)| AttackSetting {
                    label,
                    package: pkg,
                    members: m,
                    nonmembers: n,
                    reference: r.as_ref(),
                    seed: self.config.seed,
                })
                .collect();
            mia::compare_privacy(&settings, &self.config.gmm)?
        };
        for r in &rows {
            info!("{} {}: AUC {:.4}", r.setting, r.attack, r.auc);
        }
        self.write("attack.csv", &mia::rows_to_csv(&rows))?;
        self.finish_with(&inputs)
    }

    pub fn accountant(self) -> Result<()> {
        let a = &self.config.accountant;
        let p = &self.config.pretrain;
        let d = &self.config.data;
        let q = a.q.unwrap_or(p.batch_size as f64 / (d.n_classes * d.samples_per_class) as f64);
        let steps = a.steps.unwrap_or(p.iterations as u64);
        if steps == 0 {
            return Err(CliError::config("`accountant.steps` must be ≥ 1"));
        }
        let orders = if a.orders.is_empty() { accountant::default_orders() } else { a.orders.clone() };
        let sigma = match (a.sigma, a.target_epsilon, &p.dp) {
            (Some(s), _, _) => s,
            (None, Some(eps), _) => accountant::calibrate_sigma(q, steps, eps, a.delta, &orders)?,
            (None, None, Some(dp)) => match (dp.noise_multiplier, dp.target_epsilon) {
                (Some(s), _) => s,
                (None, Some(eps)) => accountant::calibrate_sigma(q, steps, eps, dp.delta, &orders)?,
                (None, None) => return Err(CliError::config("set `accountant.sigma` or `accountant.target_epsilon`")),
            },
            (None, None, None) => {
                return Err(CliError::config("set `accountant.sigma` or `accountant.target_epsilon`"));
            }
        };
        let mut ledger = PrivacyLedger::new(a.delta, a.scheme)?;
        ledger.record(q, sigma, steps)?;
        let result = ledger.epsilon(&orders)?;
        let bound_eps = a.target_epsilon.unwrap_or(result.epsilon);
        let bound = accountant::sufficient_sigma(q, steps, bound_eps, a.delta, a.c1, a.c2);
        println!("epsilon = {}", toml_float(result.epsilon));
        println!("delta = {}", toml_float(result.delta));
        println!("order = {}", toml_float(result.optimal_order));
        println!("q = {}", toml_float(q));
        println!("sigma = {}", toml_float(sigma));
        println!("steps = {steps}");
        println!("scheme = {}", toml_str(a.scheme.describe()));
        println!(
            "# bound: sigma >= c2 q sqrt(T ln(1/delta)) / epsilon = {} for epsilon = {} (c1 = {}, c2 = {}; precondition epsilon < c1 q^2 T {})",
            toml_float(bound.sigma),
            toml_float(bound_eps),
            toml_float(a.c1),
            toml_float(a.c2),
            if bound.precondition_met { "holds" } else { "fails" }
        );
        self.finish(&[])
    }
}

/// Setting label of a built-in attack run.
fn pipeline_label(epsilon: Option<f64>) -> String {
    match epsilon {
        None => privada_core::share::NON_PRIVATE.to_string(),
        Some(e) => format!("eps={e}"),
    }
}
