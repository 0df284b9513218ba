//! The three-stage protocol: source pretraining, share construction and
//! target adaptation, plus evaluation and embedding export.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{self, PrivacyLedger, SamplingScheme};
use crate::data::{Dataset, LabelMode, Labels};
use crate::dp::{self, DpConfig, PrivacyMask, Schedule, TrainLog, TrainSet};
use crate::error::{Error, Result};
use crate::gmm::{self, EmConfig, GmmMode};
use crate::metrics::Metrics;
use crate::nn::{Activation, Mlp};
use crate::optim::AdamWConfig;
use crate::rng::{streams, substream};
use crate::share::{ModelFile, PrivacyReceipt, ShareMeta, SharePackage, POOLED_KEY};
use crate::tensor::Matrix;
use crate::uda::{self, AdaptConfig, AdversarialState, FrozenSource, LossWeights, Method, ResampleMode, StepLosses};

/// Encoder hidden widths and feature dimension; the classifier is a single
/// linear layer on top of the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { hidden: vec![64, 32], feature_dim: 16 }
    }
}

/// DP-SGD settings. Exactly one of `noise_multiplier` and `target_epsilon`
/// must be set; a target ε is met by the smallest σ the accountant accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSettings {
    pub clip_norm: f64,
    pub noise_multiplier: Option<f64>,
    pub target_epsilon: Option<f64>,
    pub delta: f64,
    pub privacy_mask: PrivacyMask,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: None,
            target_epsilon: None,
            delta: 1e-5,
            privacy_mask: PrivacyMask::AllLayers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub shape: ModelShape,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Sampled batches per optimizer update.
    pub accumulation_steps: usize,
    /// Sampled batches in total.
    pub iterations: usize,
    pub dp: Option<DpSettings>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            learning_rate: 5e-5,
            weight_decay: 0.01,
            batch_size: 64,
            accumulation_steps: 1,
            iterations: 3000,
            dp: None,
            seed: 0,
        }
    }
}

/// Trained source networks.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub encoder: Mlp,
    pub classifier: Mlp,
    pub class_names: Vec<String>,
    pub label_mode: LabelMode,
}

impl SourceModel {
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.classifier.predict(&self.encoder.predict(features)?)
    }

    /// The model file of a pretrained source model, carrying `receipt` (or
    /// the non-private marker).
    pub fn to_file(&self, receipt: Option<&PrivacyReceipt>) -> ModelFile {
        ModelFile {
            encoder: self.encoder.clone(),
            classifier: Some(self.classifier.clone()),
            class_names: self.class_names.clone(),
            label_mode: self.label_mode,
            privacy: Some(receipt.cloned()),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let classifier = file.classifier.ok_or_else(|| Error::config("model file has no classifier"))?;
        Ok(Self { encoder: file.encoder, classifier, class_names: file.class_names, label_mode: file.label_mode })
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: SourceModel,
    /// Present iff training was private.
    pub ledger: Option<PrivacyLedger>,
    pub receipt: Option<PrivacyReceipt>,
    pub log: TrainLog,
}

/// SHA-256 hex digest of a value's JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration types serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Randomly initialized encoder and classifier for `input_dim` inputs.
pub fn init_source(input_dim: usize, classes: usize, shape: &ModelShape, seed: u64) -> Result<(Mlp, Mlp)> {
    let mut rng = substream(seed, streams::INIT, 0);
    let mut dims = vec![input_dim];
    dims.extend(&shape.hidden);
    dims.push(shape.feature_dim);
    let encoder = Mlp::init(&dims, Activation::Relu, Activation::Identity, &mut rng)?;
    let classifier = Mlp::init(&[shape.feature_dim, classes], Activation::Identity, Activation::Identity, &mut rng)?;
    Ok((encoder, classifier))
}

/// Trains encoder and classifier jointly on the labeled source data, through
/// DP-SGD when `config.dp` is set.
pub fn pretrain_source(dataset: &Dataset, config: &PretrainConfig) -> Result<Pretrained> {
    if dataset.is_empty() {
        return Err(Error::config("source dataset is empty"));
    }
    if config.batch_size == 0 || config.batch_size > dataset.len() || config.accumulation_steps == 0 {
        return Err(Error::config(format!(
            "batch_size {} / accumulation_steps {} invalid for {} rows",
            config.batch_size,
            config.accumulation_steps,
            dataset.len()
        )));
    }
    let classes = dataset.n_classes();
    let (encoder, classifier) = init_source(dataset.dim(), classes, &config.shape, config.seed)?;
    let split = encoder.layers().len();
    let mut net = encoder.chain(&classifier)?;
    let objective = dataset.label_mode().objective();
    let data = TrainSet::new(dataset.features.clone(), dataset.targets())?;
    let optimizer = AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let (log, ledger, receipt) = match &config.dp {
        None => {
            let schedule = Schedule {
                batch_size: config.batch_size,
                accumulation_steps: config.accumulation_steps,
                iterations: config.iterations,
                seed: config.seed,
            };
            (dp::train_plain(&mut net, &data, objective, schedule, optimizer)?, None, None)
        }
        Some(s) => {
            let q = config.batch_size as f64 / dataset.len() as f64;
            let orders = accountant::default_orders();
            let sigma = match (s.noise_multiplier, s.target_epsilon) {
                (Some(sigma), None) => sigma,
                (None, Some(eps)) => accountant::calibrate_sigma(q, config.iterations as u64, eps, s.delta, &orders)?,
                _ => {
                    return Err(Error::config("dp needs exactly one of noise_multiplier and target_epsilon"));
                }
            };
            let dp_config = DpConfig {
                clip_norm: s.clip_norm,
                noise_multiplier: sigma,
                batch_size: config.batch_size,
                accumulation_steps: config.accumulation_steps,
                dataset_size: dataset.len(),
                total_iterations: config.iterations,
                delta: s.delta,
                seed: config.seed,
                privacy_mask: s.privacy_mask.clone(),
            };
            let mut ledger = PrivacyLedger::new(s.delta, SamplingScheme::UniformWithoutReplacement)?;
            let log = dp::dp_train(&mut net, &data, objective, &dp_config, optimizer, &mut ledger)?;
            let epsilon = if ledger.is_empty() { 0.0 } else { ledger.epsilon(&orders)?.epsilon };
            let receipt = PrivacyReceipt {
                epsilon,
                delta: s.delta,
                sigma,
                q,
                steps: ledger.total_steps(),
                accountant: "rdp-subsampled-gaussian".into(),
                scheme: ledger.scheme.describe().into(),
            };
            (log, Some(ledger), Some(receipt))
        }
    };
    let (encoder, classifier) = net.split_at(split)?;
    Ok(Pretrained {
        model: SourceModel {
            encoder,
            classifier,
            class_names: dataset.class_names.clone(),
            label_mode: dataset.label_mode(),
        },
        ledger,
        receipt,
        log,
    })
}

/// Mixture settings for [`build_share`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSettings {
    /// Components per class (or in total for a pooled mixture).
    pub k: usize,
    pub mode: GmmMode,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for GmmSettings {
    fn default() -> Self {
        let em = EmConfig::default();
        Self { k: 6, mode: GmmMode::PerClass, tol: em.tol, max_iter: em.max_iter, seed: 0 }
    }
}

/// Fits mixtures to the source features and assembles the package. Adds no
/// privacy events: it only post-processes the trained encoder.
pub fn build_share(
    model: &SourceModel,
    source: &Dataset,
    settings: &GmmSettings,
    receipt: Option<&PrivacyReceipt>,
) -> Result<SharePackage> {
    if source.n_classes() != model.class_names.len() {
        return Err(Error::config("source classes do not match the model"));
    }
    let features = model.encoder.predict(&source.features)?;
    let labels = source.primary_labels();
    let em = EmConfig { tol: settings.tol, max_iter: settings.max_iter };
    let gmms = gmm::fit_class_conditional(
        &features,
        &labels,
        source.n_classes(),
        settings.k,
        settings.mode,
        em,
        settings.seed,
    )?;
    let gmm_support = gmms
        .entries
        .iter()
        .map(|e| {
            let key = e.class.map_or(POOLED_KEY.to_string(), |c| model.class_names[c].clone());
            (key, e.support)
        })
        .collect();
    let meta = ShareMeta {
        input_dim: model.encoder.input_dim(),
        feature_dim: model.encoder.output_dim(),
        class_names: model.class_names.clone(),
        label_mode: model.label_mode,
        gmm_mode: settings.mode,
        gmm_support,
        seed: settings.seed,
        config_digest: digest(&(settings, model.encoder.num_params(), receipt.map(|r| r.epsilon.to_bits()))),
    };
    let pkg = SharePackage {
        encoder: model.encoder.clone(),
        classifier: model.classifier.clone(),
        gmms,
        privacy: receipt.cloned(),
        meta,
    };
    pkg.validate()?;
    Ok(pkg)
}

/// Result of adaptation: the target encoder and one loss record per step.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub encoder: Mlp,
    pub log: Vec<StepLosses>,
}

impl Adapted {
    /// CSV with columns `step,kd,im_entropy,im_diversity,discriminator,generator`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,kd,im_entropy,im_diversity,discriminator,generator\n");
        for (i, l) in self.log.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                l.kd,
                l.im_entropy,
                l.im_diversity,
                l.discriminator,
                l.generator
            ));
        }
        out
    }
}

/// Adapts a copy of the package's encoder to unlabeled target features.
pub fn adapt_target(pkg: &SharePackage, target: &Matrix, config: &AdaptConfig) -> Result<Adapted> {
    adapt_target_observed(pkg, target, config, |_, _| {})
}

/// [`adapt_target`] calling `observe(step, encoder)` after every step.
pub fn adapt_target_observed(
    pkg: &SharePackage,
    target: &Matrix,
    config: &AdaptConfig,
    mut observe: impl FnMut(usize, &Mlp),
) -> Result<Adapted> {
    config.validate()?;
    pkg.validate()?;
    if target.cols() != pkg.meta.input_dim {
        return Err(Error::config(format!(
            "target data has {} features, the package encoder expects {}",
            target.cols(),
            pkg.meta.input_dim
        )));
    }
    if target.rows() == 0 {
        return Err(Error::config("target data is empty"));
    }
    let d = pkg.meta.feature_dim;
    let k = pkg.meta.class_names.len();
    let disc_input = match config.method {
        Method::Dann => d,
        Method::Cdan => config.conditioning.input_dim(d, k),
    };
    let mut init_rng = substream(config.seed, streams::INIT, 1);
    let discriminator = uda::new_discriminator(disc_input, config.discriminator_hidden, &mut init_rng)?;
    let mut state = AdversarialState::new(pkg.encoder.clone(), discriminator, config.optimizer())?;
    let source =
        FrozenSource { encoder: &pkg.encoder, classifier: &pkg.classifier, objective: pkg.meta.label_mode.objective() };
    let weights = LossWeights::from(config);
    let mut rng = substream(config.seed, streams::ADAPT, 0);
    let batch = config.batch_size.min(target.rows());
    let pool = match config.resample {
        ResampleMode::Fresh => None,
        ResampleMode::StaticPool => Some(pkg.gmms.sample(config.resample_count, &mut rng).0),
    };
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let rows = index::sample(&mut rng, target.rows(), batch).into_vec();
        let target_batch = target.select_rows(&rows);
        let source_feats = match &pool {
            None => pkg.gmms.sample(batch, &mut rng).0,
            Some(p) => {
                let take = batch.min(p.rows());
                p.select_rows(&index::sample(&mut rng, p.rows(), take).into_vec())
            }
        };
        let losses = match config.method {
            Method::Dann => uda::dann_step(&mut state, source, &source_feats, &target_batch, weights)?,
            Method::Cdan => {
                uda::cdan_step(&mut state, source, &source_feats, &target_batch, weights, config.conditioning)?
            }
        };
        if (step + 1) % 1000 == 0 {
            log::debug!("adapt step {}: {losses:?}", step + 1);
        }
        log.push(losses);
        observe(step + 1, &state.encoder);
    }
    Ok(Adapted { encoder: state.encoder, log })
}

/// Scores `encoder` followed by `classifier` on a labeled dataset: argmax for
/// multiclass data, a 0.5 sigmoid threshold per class for multilabel data.
pub fn evaluate(encoder: &Mlp, classifier: &Mlp, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    if classifier.output_dim() != dataset.n_classes() {
        return Err(Error::config(format!(
            "classifier has {} outputs for {} classes",
            classifier.output_dim(),
            dataset.n_classes()
        )));
    }
    let logits = classifier.predict(&encoder.predict(&dataset.features)?)?;
    match &dataset.labels {
        Labels::Multiclass(truth) => Metrics::from_labels(truth, &logits.argmax_rows(), &dataset.class_names),
        Labels::Multilabel(truth) => {
            let predicted = logits.map(|z| if z > 0.0 { 1.0 } else { 0.0 });
            Metrics::from_binary(truth, &predicted, &dataset.class_names)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// Raw encoder features.
    None,
    /// First two principal components.
    #[default]
    Pca2,
}

/// Principal components of the rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `components × dim`, one unit vector per row, largest variance first.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Eigendecomposition of the (1/n) covariance. Each component's sign is
    /// chosen so that its largest-magnitude entry is positive.
    pub fn fit(x: &Matrix, components: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 {
            return Err(Error::config("cannot project an empty matrix"));
        }
        let components = components.min(d);
        let mean = x.column_means();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for r in x.row_iter() {
            for i in 0..d {
                let ci = r[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += ci * (r[j] - mean[j]);
                }
            }
        }
        cov /= n as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut basis = Matrix::zeros(components, d);
        let mut explained = Vec::with_capacity(components);
        for (row, &c) in order.iter().take(components).enumerate() {
            let v = eig.eigenvectors.column(c);
            let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                basis[(row, i)] = sign * v[i];
            }
            explained.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self { mean, components: basis, explained_variance: explained })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let mut centered = x.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_transb(&self.components)
    }
}

/// Encoder features of every row, optionally projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub labels: Vec<String>,
    pub coords: Matrix,
}

impl Embeddings {
    /// CSV with columns `id,label,x0,x1,...`; multilabel rows join their
    /// positive classes with `|`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for j in 0..self.coords.cols() {
            out.push_str(&format!(",x{j}"));
        }
        out.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&format!("{i},{label}"));
            for v in self.coords.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn export_embeddings(encoder: &Mlp, dataset: &Dataset, projection: Projection) -> Result<Embeddings> {
    let features = encoder.predict(&dataset.features)?;
    let coords = match projection {
        Projection::None => features,
        Projection::Pca2 => Pca::fit(&features, 2)?.transform(&features)?,
    };
    let labels = match &dataset.labels {
        Labels::Multiclass(l) => l.iter().map(|&c| dataset.class_names[c].clone()).collect(),
        Labels::Multilabel(m) => m
            .row_iter()
            .map(|r| {
                let names: Vec<&str> =
                    r.iter().zip(&dataset.class_names).filter(|(v, _)| **v == 1.0).map(|(_, n)| n.as_str()).collect();
                names.join("|")
            })
            .collect(),
    };
    Ok(Embeddings { labels, coords })
}
