//! Adaptation objectives and the alternating adversarial steps.
//!
//! The target encoder `E_t` is trained against a discriminator that separates
//! resampled source features from target features, plus a distillation term
//! tying its predictions to the frozen source model's on the same target batch
//! and an information-maximization term on the target predictions. The
//! classifier and the source encoder never change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_rows, Activation, Mlp, Objective, PROB_FLOOR};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Matrix;

/// `t² · mean_i Σ_k −softmax(s_i/t)_k · ln softmax(u_i/t)_k` for source
/// logits `s` and target logits `u`, with its gradient w.r.t. `u`. The source
/// distribution is treated as a constant.
pub fn kd_loss(source_logits: &Matrix, target_logits: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    check_pair(source_logits, target_logits)?;
    let ps = softmax_rows(source_logits, temperature)?;
    let pt = softmax_rows(target_logits, temperature)?;
    let n = source_logits.rows() as f64;
    let t2 = temperature * temperature;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pt.rows(), pt.cols());
    for i in 0..pt.rows() {
        let mut row = 0.0;
        for k in 0..pt.cols() {
            row -= ps[(i, k)] * pt[(i, k)].max(PROB_FLOOR).ln();
            grad[(i, k)] = temperature / n * (pt[(i, k)] - ps[(i, k)]);
        }
        loss += row;
    }
    Ok((t2 * loss / n, grad))
}

/// Multilabel distillation: each class softened independently by
/// `sigmoid(z / t)` and compared with binary cross-entropy.
pub fn kd_loss_binary(source_logits: &Matrix, target_logits: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    check_pair(source_logits, target_logits)?;
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let n = source_logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(target_logits.rows(), target_logits.cols());
    for i in 0..target_logits.rows() {
        for k in 0..target_logits.cols() {
            let ps = sigmoid(source_logits[(i, k)] / temperature);
            let pt = sigmoid(target_logits[(i, k)] / temperature);
            loss -= ps * pt.max(PROB_FLOOR).ln() + (1.0 - ps) * (1.0 - pt).max(PROB_FLOOR).ln();
            grad[(i, k)] = temperature / n * (pt - ps);
        }
    }
    Ok((temperature * temperature * loss / n, grad))
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("logits {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::config("empty logit batch"));
    }
    Ok(())
}

/// Entropy and diversity terms of the information-maximization loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ImLoss {
    /// Mean per-row prediction entropy.
    pub entropy: f64,
    /// `Σ_k g_k ln g_k` for the batch-mean prediction `g`.
    pub diversity: f64,
    /// Gradient of `entropy + diversity` w.r.t. the logits.
    pub grad: Matrix,
}

impl ImLoss {
    pub fn total(&self) -> f64 {
        self.entropy + self.diversity
    }
}

pub fn im_loss(target_logits: &Matrix) -> Result<ImLoss> {
    if target_logits.cols() < 2 {
        return Err(Error::config("information maximization needs K ≥ 2"));
    }
    if target_logits.rows() == 0 {
        return Err(Error::config("empty logit batch"));
    }
    let p = softmax_rows(target_logits, 1.0)?;
    let (n, k) = p.shape();
    let nf = n as f64;
    let mut mean = vec![0.0; k];
    let mut entropy = 0.0;
    let mut row_entropy = vec![0.0; n];
    for i in 0..n {
        let mut h = 0.0;
        for j in 0..k {
            let pij = p[(i, j)];
            h -= pij * pij.max(PROB_FLOOR).ln();
            mean[j] += pij;
        }
        row_entropy[i] = h;
        entropy += h;
    }
    entropy /= nf;
    mean.iter_mut().for_each(|g| *g /= nf);
    let log_mean: Vec<f64> = mean.iter().map(|g| g.max(PROB_FLOOR).ln()).collect();
    let diversity: f64 = mean.iter().zip(&log_mean).map(|(g, lg)| g * lg).sum();
    let mut grad = Matrix::zeros(n, k);
    for i in 0..n {
        let weighted: f64 = (0..k).map(|j| p[(i, j)] * log_mean[j]).sum();
        for j in 0..k {
            let pij = p[(i, j)];
            // ∂H_i/∂z_ij = −p_ij (ln p_ij + H_i)
            let ent = -pij * (pij.max(PROB_FLOOR).ln() + row_entropy[i]);
            // ∂D/∂z_ij = p_ij (ln g_j − Σ_k p_ik ln g_k)
            let div = pij * (log_mean[j] - weighted);
            grad[(i, j)] = (ent + div) / nf;
        }
    }
    Ok(ImLoss { entropy, diversity, grad })
}

/// `−mean ln D(source) − mean ln(1 − D(target))` and its gradients w.r.t.
/// the two columns of discriminator outputs.
pub fn discriminator_loss(d_source: &Matrix, d_target: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if d_source.cols() != 1 || d_target.cols() != 1 || d_source.rows() == 0 || d_target.rows() == 0 {
        return Err(Error::shape("discriminator outputs must be non-empty single columns"));
    }
    let ns = d_source.rows() as f64;
    let nt = d_target.rows() as f64;
    let mut loss = 0.0;
    let gs = d_source.map(|p| -1.0 / (p.max(PROB_FLOOR) * ns));
    let gt = d_target.map(|p| 1.0 / ((1.0 - p).max(PROB_FLOOR) * nt));
    loss -= d_source.as_slice().iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>() / ns;
    loss -= d_target.as_slice().iter().map(|p| (1.0 - p).max(PROB_FLOOR).ln()).sum::<f64>() / nt;
    Ok((loss, gs, gt))
}

/// Encoder-side adversarial term `−mean ln D(target)`: target features are
/// pushed toward the discriminator's "source" side.
pub fn generator_loss(d_target: &Matrix) -> Result<(f64, Matrix)> {
    if d_target.cols() != 1 || d_target.rows() == 0 {
        return Err(Error::shape("discriminator outputs must be a non-empty single column"));
    }
    let n = d_target.rows() as f64;
    let loss = -d_target.as_slice().iter().map(|p| p.max(PROB_FLOOR).ln()).sum::<f64>() / n;
    Ok((loss, d_target.map(|p| -1.0 / (p.max(PROB_FLOOR) * n))))
}

/// Three fully connected layers with a sigmoid output.
pub fn new_discriminator<R: rand::Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::init(&[input_dim, hidden, hidden, 1], Activation::Relu, Activation::Sigmoid, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dann,
    #[default]
    Cdan,
}

/// How CDAN combines features with predictions before the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Flattened outer product `z ⊗ p` (dimension `d·K`).
    #[default]
    OuterProduct,
    /// `[z, p]` (dimension `d + K`).
    Concat,
}

impl Conditioning {
    pub fn input_dim(self, feature_dim: usize, classes: usize) -> usize {
        match self {
            Conditioning::OuterProduct => feature_dim * classes,
            Conditioning::Concat => feature_dim + classes,
        }
    }

    pub fn apply(self, features: &Matrix, predictions: &Matrix) -> Matrix {
        let (n, d) = features.shape();
        let k = predictions.cols();
        let width = self.input_dim(d, k);
        let mut out = Matrix::zeros(n, width);
        for i in 0..n {
            let z = features.row(i);
            let p = predictions.row(i);
            let row = out.row_mut(i);
            match self {
                Conditioning::OuterProduct => {
                    for j in 0..d {
                        for c in 0..k {
                            row[j * k + c] = z[j] * p[c];
                        }
                    }
                }
                Conditioning::Concat => {
                    row[..d].copy_from_slice(z);
                    row[d..].copy_from_slice(p);
                }
            }
        }
        out
    }

    /// Gradient w.r.t. the features with the predictions held constant.
    pub fn feature_grad(self, grad: &Matrix, predictions: &Matrix, feature_dim: usize) -> Matrix {
        let (n, k) = predictions.shape();
        let mut out = Matrix::zeros(n, feature_dim);
        for i in 0..n {
            let g = grad.row(i);
            let p = predictions.row(i);
            let row = out.row_mut(i);
            match self {
                Conditioning::OuterProduct => {
                    for j in 0..feature_dim {
                        row[j] = (0..k).map(|c| g[j * k + c] * p[c]).sum();
                    }
                }
                Conditioning::Concat => row.copy_from_slice(&g[..feature_dim]),
            }
        }
        out
    }
}

/// How resampled source features are drawn during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    /// A fresh draw from the mixtures at every step.
    #[default]
    Fresh,
    /// One pool of `resample_count` features drawn up front; batches are
    /// sampled from it.
    StaticPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub method: Method,
    pub temperature: f64,
    pub lambda_kd: f64,
    pub lambda_im: f64,
    pub lambda_adv: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub resample: ResampleMode,
    pub resample_count: usize,
    pub conditioning: Conditioning,
    pub discriminator_hidden: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Cdan,
            temperature: 20.0,
            lambda_kd: 1.0,
            lambda_im: 1.0,
            lambda_adv: 1.0,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            steps: 1000,
            batch_size: 64,
            resample: ResampleMode::Fresh,
            resample_count: 4096,
            conditioning: Conditioning::OuterProduct,
            discriminator_hidden: 64,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if [self.lambda_kd, self.lambda_im, self.lambda_adv].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.batch_size == 0 || self.discriminator_hidden == 0 {
            return Err(Error::config("batch_size and discriminator_hidden must be ≥ 1"));
        }
        if self.resample == ResampleMode::StaticPool && self.resample_count == 0 {
            return Err(Error::config("static resampling needs resample_count ≥ 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// The frozen source side available to the target party.
#[derive(Debug, Clone, Copy)]
pub struct FrozenSource<'a> {
    pub encoder: &'a Mlp,
    pub classifier: &'a Mlp,
    pub objective: Objective,
}

/// Trainable state: the target encoder, the discriminator and their
/// optimizers.
#[derive(Debug, Clone)]
pub struct AdversarialState {
    pub encoder: Mlp,
    pub encoder_opt: AdamW,
    pub discriminator: Mlp,
    pub discriminator_opt: AdamW,
}

impl AdversarialState {
    pub fn new(encoder: Mlp, discriminator: Mlp, optimizer: AdamWConfig) -> Result<Self> {
        Ok(Self {
            encoder_opt: AdamW::new(&encoder, optimizer)?,
            discriminator_opt: AdamW::new(&discriminator, optimizer)?,
            encoder,
            discriminator,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub kd: f64,
    pub im_entropy: f64,
    pub im_diversity: f64,
    pub discriminator: f64,
    pub generator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kd: f64,
    pub im: f64,
    pub adv: f64,
    pub temperature: f64,
}

impl From<&AdaptConfig> for LossWeights {
    fn from(c: &AdaptConfig) -> Self {
        Self { kd: c.lambda_kd, im: c.lambda_im, adv: c.lambda_adv, temperature: c.temperature }
    }
}

/// DANN alternation: the discriminator sees raw features.
pub fn dann_step(
    state: &mut AdversarialState,
    source: FrozenSource<'_>,
    source_feats: &Matrix,
    target_batch: &Matrix,
    weights: LossWeights,
) -> Result<StepLosses> {
    adversarial_step(state, source, source_feats, target_batch, weights, None)
}

/// CDAN alternation: the discriminator sees features conditioned on the
/// classifier's predictions.
pub fn cdan_step(
    state: &mut AdversarialState,
    source: FrozenSource<'_>,
    source_feats: &Matrix,
    target_batch: &Matrix,
    weights: LossWeights,
    conditioning: Conditioning,
) -> Result<StepLosses> {
    adversarial_step(state, source, source_feats, target_batch, weights, Some(conditioning))
}

fn adversarial_step(
    state: &mut AdversarialState,
    source: FrozenSource<'_>,
    source_feats: &Matrix,
    target_batch: &Matrix,
    weights: LossWeights,
    conditioning: Option<Conditioning>,
) -> Result<StepLosses> {
    let d = state.encoder.output_dim();
    if source_feats.cols() != d {
        return Err(Error::shape(format!("resampled features have {} dims, encoder emits {d}", source_feats.cols())));
    }
    if source.classifier.input_dim() != d {
        return Err(Error::shape("classifier input does not match encoder output"));
    }
    let k = source.classifier.output_dim();
    let expected_disc = conditioning.map_or(d, |c| c.input_dim(d, k));
    if state.discriminator.input_dim() != expected_disc {
        return Err(Error::shape(format!(
            "discriminator expects {} inputs, conditioning produces {expected_disc}",
            state.discriminator.input_dim()
        )));
    }

    let enc_trace = state.encoder.forward(target_batch)?;
    let target_feats = enc_trace.output();
    let cls_trace = source.classifier.forward(target_feats)?;
    let target_logits = cls_trace.output();
    let target_probs = source.objective.probabilities(target_logits)?;

    let (disc_source, disc_target) = match conditioning {
        None => (source_feats.clone(), target_feats.clone()),
        Some(c) => {
            let source_probs = source.objective.probabilities(&source.classifier.predict(source_feats)?)?;
            (c.apply(source_feats, &source_probs), c.apply(target_feats, &target_probs))
        }
    };

    // (a) discriminator step, encoder frozen
    let ns = disc_source.rows();
    let both = disc_source.vstack(&disc_target)?;
    let disc_trace = state.discriminator.forward(&both)?;
    let out = disc_trace.output();
    let out_s = out.select_rows(&(0..ns).collect::<Vec<_>>());
    let out_t = out.select_rows(&(ns..out.rows()).collect::<Vec<_>>());
    let (disc_loss, gs, gt) = discriminator_loss(&out_s, &out_t)?;
    let (disc_grads, _) = state.discriminator.backward(&disc_trace, &gs.vstack(&gt)?)?;
    state.discriminator_opt.step(&mut state.discriminator, &disc_grads)?;

    // (b) encoder step, discriminator frozen
    let kd;
    let (mut im_entropy, mut im_diversity) = (0.0, 0.0);
    let mut logit_grad = Matrix::zeros(target_logits.rows(), k);
    {
        let source_logits = source.classifier.predict(&source.encoder.predict(target_batch)?)?;
        let (loss, g) = match source.objective {
            Objective::Multiclass => kd_loss(&source_logits, target_logits, weights.temperature)?,
            Objective::Multilabel => kd_loss_binary(&source_logits, target_logits, weights.temperature)?,
        };
        kd = loss;
        logit_grad.add_scaled(&g, weights.kd)?;
    }
    if source.objective == Objective::Multiclass {
        let im = im_loss(target_logits)?;
        im_entropy = im.entropy;
        im_diversity = im.diversity;
        logit_grad.add_scaled(&im.grad, weights.im)?;
    } else if weights.im > 0.0 {
        log::warn!("information maximization is undefined for multilabel heads; skipped");
    }

    let gen_trace = state.discriminator.forward(&disc_target)?;
    let (gen_loss, gen_out_grad) = generator_loss(gen_trace.output())?;

    let update_encoder =
        weights.kd > 0.0 || weights.adv > 0.0 || (weights.im > 0.0 && source.objective == Objective::Multiclass);
    if update_encoder {
        let mut feat_grad = source.classifier.input_gradient(&cls_trace, &logit_grad)?;
        if weights.adv > 0.0 {
            let disc_in_grad = state.discriminator.input_gradient(&gen_trace, &gen_out_grad)?;
            let adv_grad = match conditioning {
                None => disc_in_grad,
                Some(c) => c.feature_grad(&disc_in_grad, &target_probs, d),
            };
            feat_grad.add_scaled(&adv_grad, weights.adv)?;
        }
        let (enc_grads, _) = state.encoder.backward(&enc_trace, &feat_grad)?;
        state.encoder_opt.step(&mut state.encoder, &enc_grads)?;
    }

    Ok(StepLosses { kd, im_entropy, im_diversity, discriminator: disc_loss, generator: gen_loss })
}
