//! Desk-scale experiment definitions shared by the acceptance suite, the
//! CLI defaults and the benches.

use rand::seq::SliceRandom;

use crate::data::{generate_pair, Dataset, DomainShift, DomainSpec, LabelMode};
use crate::error::Result;
use crate::metrics::Metrics;
use crate::mia::{self, AttackRow, AttackSetting};
use crate::pipeline::{self, DpSettings, GmmSettings, PretrainConfig, Pretrained};
use crate::rng::{streams, substream};
use crate::share::SharePackage;
use crate::uda::AdaptConfig;

/// The rotated-domain benchmark: 16-D inputs, 4 classes with 500 samples
/// each, a 30° rotation and 10 % source label noise.
///
/// Pretraining uses a large learning rate with few large batches, a schedule
/// under which DP-SGD at small ε still trains; DP and non-private runs share
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardBenchmark {
    pub spec: DomainSpec,
    pub pretrain: PretrainConfig,
    pub gmm: GmmSettings,
    pub adapt: AdaptConfig,
}

impl StandardBenchmark {
    pub fn new(seed: u64) -> Self {
        Self {
            spec: DomainSpec {
                n_classes: 4,
                dim: 16,
                samples_per_class: 500,
                radius: 3.0,
                spread: 1.0,
                shift: DomainShift { rotation_deg: 30.0, ..DomainShift::default() },
                label_mode: LabelMode::Multiclass,
                label_noise_rate: 0.1,
                seed,
            },
            pretrain: PretrainConfig {
                learning_rate: 1e-3,
                batch_size: 128,
                iterations: 400,
                seed,
                ..PretrainConfig::default()
            },
            gmm: GmmSettings { seed, ..GmmSettings::default() },
            adapt: AdaptConfig { steps: 4000, seed, ..AdaptConfig::default() },
        }
    }

    /// Same benchmark with DP pretraining calibrated to `epsilon` at δ = 1e-5.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.pretrain.dp = Some(DpSettings { target_epsilon: Some(epsilon), ..DpSettings::default() });
        self
    }

    pub fn with_rotation(mut self, degrees: f64) -> Self {
        self.spec.shift.rotation_deg = degrees;
        self
    }
}

/// Data and a pretrained source model, ready for any number of
/// share/adapt variants.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: Dataset,
    pub target: Dataset,
    pub pretrained: Pretrained,
    /// Source model applied to the target domain unchanged.
    pub no_adapt: Metrics,
}

pub fn prepare(spec: &DomainSpec, pretrain: &PretrainConfig) -> Result<Prepared> {
    let (source, target) = generate_pair(spec)?;
    let pretrained = pipeline::pretrain_source(&source, pretrain)?;
    let m = &pretrained.model;
    let no_adapt = pipeline::evaluate(&m.encoder, &m.classifier, &target)?;
    Ok(Prepared { source, target, pretrained, no_adapt })
}

impl Prepared {
    pub fn share(&self, gmm: &GmmSettings) -> Result<SharePackage> {
        pipeline::build_share(&self.pretrained.model, &self.source, gmm, self.pretrained.receipt.as_ref())
    }

    /// Target metrics after adapting with `adapt` against a package built
    /// with `gmm`.
    pub fn adapted(&self, gmm: &GmmSettings, adapt: &AdaptConfig) -> Result<Metrics> {
        let pkg = self.share(gmm)?;
        let adapted = pipeline::adapt_target(&pkg, &self.target.features, adapt)?;
        pipeline::evaluate(&adapted.encoder, &pkg.classifier, &self.target)
    }
}

/// The membership-inference benchmark: a small, noisy training set that a
/// non-private model memorizes, plus disjoint nonmember and reference
/// samples from the same distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MiaBenchmark {
    pub spec: DomainSpec,
    pub members: usize,
    pub nonmembers: usize,
    pub reference: usize,
    pub pretrain: PretrainConfig,
    pub gmm: GmmSettings,
}

impl MiaBenchmark {
    pub fn new(seed: u64) -> Self {
        Self {
            spec: DomainSpec {
                n_classes: 4,
                dim: 16,
                samples_per_class: 150,
                radius: 2.0,
                spread: 1.0,
                shift: DomainShift::default(),
                label_mode: LabelMode::Multiclass,
                label_noise_rate: 0.2,
                seed,
            },
            members: 200,
            nonmembers: 200,
            reference: 200,
            pretrain: PretrainConfig {
                learning_rate: 1e-3,
                batch_size: 50,
                iterations: 3000,
                seed,
                ..PretrainConfig::default()
            },
            gmm: GmmSettings { seed, ..GmmSettings::default() },
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.pretrain.dp = Some(DpSettings { target_epsilon: Some(epsilon), ..DpSettings::default() });
        self
    }
}

/// Disjoint member, nonmember and reference samples.
#[derive(Debug, Clone)]
pub struct MiaSplit {
    pub members: Dataset,
    pub nonmembers: Dataset,
    pub reference: Dataset,
}

pub fn mia_split(bench: &MiaBenchmark) -> Result<MiaSplit> {
    let (population, _) = generate_pair(&bench.spec)?;
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.shuffle(&mut substream(bench.spec.seed, streams::ATTACK, 0));
    let total = bench.members + bench.nonmembers + bench.reference;
    if total > order.len() {
        return Err(crate::Error::Config(format!(
            "population of {} rows cannot supply {total} candidates",
            order.len()
        )));
    }
    let (m, rest) = order.split_at(bench.members);
    let (n, rest) = rest.split_at(bench.nonmembers);
    let r = &rest[..bench.reference];
    Ok(MiaSplit { members: population.select(m), nonmembers: population.select(n), reference: population.select(r) })
}

/// Pretrains on the members, builds the package and runs every attack
/// against it, labelling the rows `label`.
pub fn run_mia(bench: &MiaBenchmark, label: &str) -> Result<Vec<AttackRow>> {
    let split = mia_split(bench)?;
    let pre = pipeline::pretrain_source(&split.members, &bench.pretrain)?;
    let package = pipeline::build_share(&pre.model, &split.members, &bench.gmm, pre.receipt.as_ref())?;
    let setting = AttackSetting {
        label,
        package: &package,
        members: &split.members,
        nonmembers: &split.nonmembers,
        reference: Some(&split.reference),
        seed: bench.spec.seed,
    };
    mia::compare_privacy(&[setting], &bench.gmm)
}
