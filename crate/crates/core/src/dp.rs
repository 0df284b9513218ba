//! Differentially private training: per-example clipping, Gaussian noise,
//! micro-batch accumulation and AdamW updates.
//!
//! Each iteration samples a batch, privatizes its gradient and records one
//! `(q, σ)` event; one optimizer update is applied per `accumulation_steps`
//! privatized micro-batches.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{self, PrivacyLedger};
use crate::error::{Error, Result};
use crate::nn::{Grads, Mlp, Objective, PerExampleGrads};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{streams, substream};
use crate::tensor::Matrix;

/// Which layers are trained (privately). Layers outside the mask stay frozen.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrivacyMask {
    #[default]
    AllLayers,
    /// Only the final layer is trained, as when a large pretrained encoder
    /// is frozen except for its head.
    LastLayer,
    Layers(Vec<bool>),
}

impl PrivacyMask {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<bool>> {
        match self {
            PrivacyMask::AllLayers => Ok(vec![true; n_layers]),
            PrivacyMask::LastLayer => {
                let mut m = vec![false; n_layers];
                if let Some(last) = m.last_mut() {
                    *last = true;
                }
                Ok(m)
            }
            PrivacyMask::Layers(m) if m.len() == n_layers => Ok(m.clone()),
            PrivacyMask::Layers(m) => {
                Err(Error::config(format!("privacy mask lists {} layers, network has {n_layers}", m.len())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-example L2 bound `C`.
    pub clip_norm: f64,
    /// Noise standard deviation in units of `C`.
    pub noise_multiplier: f64,
    pub batch_size: usize,
    /// Privatized micro-batches per optimizer update.
    pub accumulation_steps: usize,
    pub dataset_size: usize,
    /// Number of sampled (micro-)batches.
    pub total_iterations: usize,
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub privacy_mask: PrivacyMask,
}

impl DpConfig {
    /// Per-release sampling rate `batch_size / dataset_size`.
    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::config(format!("noise_multiplier must be ≥ 0, got {}", self.noise_multiplier)));
        }
        if self.batch_size == 0 || self.batch_size > self.dataset_size {
            return Err(Error::config(format!("batch_size {} must lie in 1..={}", self.batch_size, self.dataset_size)));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::config("accumulation_steps must be ≥ 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// A privatized micro-batch gradient and the release it corresponds to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyGradient {
    pub grads: Grads,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

/// Scales every example's gradient by `min(1, C / ‖g‖₂)`, the norm taken over
/// all of that example's parameters.
pub fn clip_per_example(grads: &PerExampleGrads, clip_norm: f64) -> PerExampleGrads {
    let per_example = grads
        .per_example
        .iter()
        .map(|g| {
            let norm = g.norm();
            let mut g = g.clone();
            if norm > clip_norm {
                g.scale(clip_norm / norm);
            }
            g
        })
        .collect();
    PerExampleGrads { per_example }
}

/// `(Σ_i g_i + n) / B` with `n ~ N(0, σ²C²)` per coordinate. Coordinates of
/// layers outside the privacy mask receive no noise.
pub fn noise_and_average<R: Rng + ?Sized>(
    clipped: &PerExampleGrads,
    config: &DpConfig,
    rng: &mut R,
) -> Result<NoisyGradient> {
    let mut sum = clipped.sum().ok_or_else(|| Error::config("cannot privatize an empty batch"))?;
    let mask = config.privacy_mask.resolve(sum.layers.len())?;
    let std = config.noise_multiplier * config.clip_norm;
    if std > 0.0 {
        sum.for_each_mut(|l, v| {
            if mask[l] {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
        });
    }
    sum.scale(1.0 / clipped.len() as f64);
    Ok(NoisyGradient { grads: sum, sampling_rate: config.sampling_rate(), noise_multiplier: config.noise_multiplier })
}

/// Features with one-hot (multiclass) or binary (multilabel) targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub features: Matrix,
    pub targets: Matrix,
}

impl TrainSet {
    pub fn new(features: Matrix, targets: Matrix) -> Result<Self> {
        if features.rows() != targets.rows() {
            return Err(Error::shape(format!("{} feature rows but {} target rows", features.rows(), targets.rows())));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Indices of iteration `t`'s batch: `batch_size` rows drawn uniformly
/// without replacement.
pub fn sample_batch(seed: u64, iteration: u64, dataset_size: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = substream(seed, streams::DP_BATCH, iteration);
    index::sample(&mut rng, dataset_size, batch_size).into_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    /// Cumulative ε at the ledger's δ; `inf` without noise, absent when
    /// training is not private.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// CSV with columns `step,loss,epsilon`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,epsilon\n");
        for r in &self.rows {
            let eps = r.epsilon.map_or(String::new(), |e| format!("{e}"));
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, eps));
        }
        out
    }
}

/// Schedule shared by the private and the plain trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub iterations: usize,
    pub seed: u64,
}

fn check_data(params: &Mlp, data: &TrainSet, objective: Objective) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training data is empty"));
    }
    if data.features.cols() != params.input_dim() || data.targets.cols() != params.output_dim() {
        return Err(Error::config(format!(
            "data ({} features, {} targets) does not fit a {}→{} network",
            data.features.cols(),
            data.targets.cols(),
            params.input_dim(),
            params.output_dim()
        )));
    }
    if objective == Objective::Multiclass {
        for (i, r) in data.targets.row_iter().enumerate() {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("target row {i} is not one-hot")));
            }
        }
    }
    Ok(())
}

/// Runs the shared loop. `privatize` turns a batch's per-example gradients
/// into the micro-batch gradient and is called once per iteration.
fn run_loop(
    params: &mut Mlp,
    data: &TrainSet,
    objective: Objective,
    schedule: Schedule,
    optimizer: AdamWConfig,
    mask: &[bool],
    mut privatize: impl FnMut(usize, PerExampleGrads) -> Result<(Grads, Option<f64>)>,
) -> Result<TrainLog> {
    let mut opt = AdamW::new(params, optimizer)?;
    let mut log = TrainLog::default();
    let mut accum: Option<Grads> = None;
    let mut micro = 0usize;
    let mut loss_sum = 0.0;
    for t in 0..schedule.iterations {
        let idx = sample_batch(schedule.seed, t as u64, data.len(), schedule.batch_size);
        let x = data.features.select_rows(&idx);
        let y = data.targets.select_rows(&idx);
        let trace = params.forward(&x)?;
        let (losses, output_grad) = objective.row_losses(trace.output(), &y)?;
        loss_sum += losses.iter().sum::<f64>() / losses.len() as f64;
        let mut per_example = params.backward_per_example(&trace, &output_grad)?;
        for g in &mut per_example.per_example {
            for (l, layer) in g.layers.iter_mut().enumerate() {
                if !mask[l] {
                    layer.weight.as_mut_slice().fill(0.0);
                    layer.bias.fill(0.0);
                }
            }
        }
        let (grad, epsilon) = privatize(t, per_example)?;
        match accum.as_mut() {
            Some(a) => a.add_scaled(&grad, 1.0),
            None => accum = Some(grad),
        }
        micro += 1;
        if micro == schedule.accumulation_steps || t + 1 == schedule.iterations {
            let mut grad = accum.take().expect("accumulated at least one micro-batch");
            if micro > 1 {
                grad.scale(1.0 / micro as f64);
            }
            if !grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at iteration {t}")));
            }
            opt.step_masked(params, &grad, Some(mask))?;
            log.rows.push(TrainLogRow { step: log.rows.len() + 1, loss: loss_sum / micro as f64, epsilon });
            micro = 0;
            loss_sum = 0.0;
        }
    }
    Ok(log)
}

/// Private training. Appends one `(q, σ)` event per sampled batch to
/// `ledger`.
pub fn dp_train(
    params: &mut Mlp,
    data: &TrainSet,
    objective: Objective,
    config: &DpConfig,
    optimizer: AdamWConfig,
    ledger: &mut PrivacyLedger,
) -> Result<TrainLog> {
    config.validate()?;
    check_data(params, data, objective)?;
    if config.dataset_size != data.len() {
        return Err(Error::config(format!(
            "dataset_size {} but the data has {} rows",
            config.dataset_size,
            data.len()
        )));
    }
    let mask = config.privacy_mask.resolve(params.layers().len())?;
    let q = config.sampling_rate();
    let steps_before = ledger.total_steps();
    let orders = accountant::default_orders();
    // all events share (q, σ), so the cumulative curve is a multiple of one
    let per_release = if config.noise_multiplier > 0.0 {
        let mut single = PrivacyLedger::new(ledger.delta, ledger.scheme)?;
        single.record(q, config.noise_multiplier, 1)?;
        Some(accountant::compose(&single, &orders)?)
    } else {
        None
    };
    let prior = accountant::compose(ledger, &orders)?;
    let schedule = Schedule {
        batch_size: config.batch_size,
        accumulation_steps: config.accumulation_steps,
        iterations: config.total_iterations,
        seed: config.seed,
    };
    let delta = ledger.delta;
    let mut released = 0u64;
    let log = run_loop(params, data, objective, schedule, optimizer, &mask, |t, per_example| {
        let clipped = clip_per_example(&per_example, config.clip_norm);
        let mut rng = substream(config.seed, streams::DP_NOISE, t as u64);
        let noisy = noise_and_average(&clipped, config, &mut rng)?;
        ledger.record(noisy.sampling_rate, noisy.noise_multiplier, 1)?;
        released += 1;
        let epsilon = match &per_release {
            Some(curve) => {
                let values = curve.values.iter().zip(&prior.values).map(|(v, p)| p + released as f64 * v).collect();
                let cumulative = accountant::RdpCurve { orders: orders.clone(), values };
                accountant::to_eps_delta(&cumulative, delta)?.epsilon
            }
            None => f64::INFINITY,
        };
        Ok((noisy.grads, Some(epsilon)))
    })?;
    let recorded = ledger.total_steps() - steps_before;
    if recorded != config.total_iterations as u64 {
        return Err(Error::Internal(format!(
            "ledger holds {recorded} new events for {} sampled batches",
            config.total_iterations
        )));
    }
    Ok(log)
}

/// Non-private counterpart of [`dp_train`] with the same batch sequence and
/// accumulation, so the two coincide when clipping and noise are inert.
pub fn train_plain(
    params: &mut Mlp,
    data: &TrainSet,
    objective: Objective,
    schedule: Schedule,
    optimizer: AdamWConfig,
) -> Result<TrainLog> {
    check_data(params, data, objective)?;
    if schedule.batch_size == 0 || schedule.batch_size > data.len() || schedule.accumulation_steps == 0 {
        return Err(Error::config(format!("invalid schedule {schedule:?} for {} rows", data.len())));
    }
    let mask = vec![true; params.layers().len()];
    run_loop(params, data, objective, schedule, optimizer, &mask, |_, per_example| {
        let n = per_example.len();
        let mut g = per_example.sum().ok_or_else(|| Error::config("empty batch"))?;
        g.scale(1.0 / n as f64);
        Ok((g, None))
    })
}
