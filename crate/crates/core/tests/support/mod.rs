//! Independent oracles and property checks shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]
// The scalar oracles index explicitly, and negated comparisons let NaN
// count as a failure.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use privada_core::accountant::{self, PrivacyLedger, SamplingScheme};
use privada_core::dp::{self, DpConfig, TrainSet};
use privada_core::gmm::{self, EmConfig, GmmModel};
use privada_core::nn::{Activation, Dense, Grads, LayerGrad, Mlp, Objective, PerExampleGrads};
use privada_core::optim::{AdamW, AdamWConfig};
use privada_core::rng::{substream, StreamRng};
use privada_core::uda;
use privada_core::Matrix;
use rand::Rng;

/// Outcome of one property check.
#[derive(Debug, Clone)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

pub fn rng(seed: u64, index: u64) -> StreamRng {
    substream(seed, "test", index)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn scalar_act(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
    }
}

/// Forward pass with explicit loops; also returns every pre-activation so
/// callers can see how close the input sits to a relu kink.
pub fn scalar_forward(mlp: &Mlp, x: &[f64]) -> (Vec<f64>, Vec<(Activation, f64)>) {
    let mut a = x.to_vec();
    let mut pre = Vec::new();
    for layer in mlp.layers() {
        let (out, inp) = layer.weight.shape();
        let mut next = vec![0.0; out];
        for o in 0..out {
            let mut z = layer.bias[o];
            for i in 0..inp {
                z += layer.weight[(o, i)] * a[i];
            }
            pre.push((layer.activation, z));
            next[o] = scalar_act(layer.activation, z);
        }
        a = next;
    }
    (a, pre)
}

pub fn random_mlp(rng: &mut impl Rng) -> Mlp {
    let depth = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=5)).collect();
    let acts = [Activation::Relu, Activation::Identity, Activation::Sigmoid];
    let hidden = acts[rng.random_range(0..3)];
    let output = if rng.random_bool(0.5) { Activation::Identity } else { Activation::Sigmoid };
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let act = if l + 2 == dims.len() { output } else { hidden };
            Dense::new(
                random_matrix(w[1], w[0], 1.5, rng),
                (0..w[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                act,
            )
            .unwrap()
        })
        .collect();
    Mlp::from_layers(layers).unwrap()
}

/// Number of scalar parameters and a setter for parameter `p` in
/// layer-major, weights-then-bias order.
fn param_slot(mlp: &mut Mlp, mut p: usize) -> &mut f64 {
    for layer in mlp.layers_mut() {
        let nw = layer.weight.as_slice().len();
        if p < nw {
            return &mut layer.weight.as_mut_slice()[p];
        }
        p -= nw;
        if p < layer.bias.len() {
            return &mut layer.bias[p];
        }
        p -= layer.bias.len();
    }
    panic!("parameter index out of range")
}

fn flat(g: &Grads) -> Vec<f64> {
    g.layers.iter().flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied()).collect()
}

/// Relative error with a scale floor: tiny gradients are compared absolutely
/// at the floor, where finite-difference rounding dominates.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares every per-example gradient of `nets` random networks against
/// central finite differences with step `1e-5`. Returns the worst relative
/// error.
pub fn gradient_check(nets: usize, seed: u64) -> Check {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for n in 0..nets {
        let mut r = rng(seed, n as u64);
        let mlp = random_mlp(&mut r);
        let rows = r.random_range(1..=4);
        // keep every relu pre-activation away from its kink so the
        // finite-difference stencil never straddles it
        let x = loop {
            let x = random_matrix(rows, mlp.input_dim(), 2.0, &mut r);
            let safe = x.row_iter().all(|row| {
                scalar_forward(&mlp, row).1.iter().all(|&(act, z)| act != Activation::Relu || z.abs() > 1e-3)
            });
            if safe {
                break x;
            }
        };
        let out_grad = random_matrix(rows, mlp.output_dim(), 1.0, &mut r);
        let trace = mlp.forward(&x).unwrap();
        let analytic = mlp.backward_per_example(&trace, &out_grad).unwrap();
        let n_params = mlp.num_params();
        for i in 0..rows {
            let g = flat(&analytic.per_example[i]);
            assert_eq!(g.len(), n_params);
            let loss = |m: &Mlp| -> f64 {
                let (out, _) = scalar_forward(m, x.row(i));
                out.iter().zip(out_grad.row(i)).map(|(o, w)| o * w).sum()
            };
            for (p, &gp) in g.iter().enumerate() {
                let mut plus = mlp.clone();
                *param_slot(&mut plus, p) += H;
                let mut minus = mlp.clone();
                *param_slot(&mut minus, p) -= H;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
                worst = worst.max(rel_err(gp, fd));
                checked += 1;
            }
        }
    }
    Check::new(worst <= 1e-4, format!("{checked} gradient entries over {nets} nets, worst relative error {worst:.2e}"))
}

/// `ln A_α` of the subsampled Gaussian by direct quadrature of
/// `E_{x~N(0,σ²)}[(1 − q + q·exp((2x − 1)/(2σ²)))^α]`.
///
/// The integrand is a mixture of Gaussian bumps centred on 0..α with width
/// σ, so a uniform trapezoid grid of step σ/20 over `[−12σ, α + 12σ]` is
/// accurate far below double precision. When `A − 1` is small the integral
/// of `A − 1` is taken directly so the logarithm keeps its relative accuracy.
pub fn subsampled_rdp_by_quadrature(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let var2 = 2.0 * sigma * sigma;
    let lo = -12.0 * sigma;
    let hi = a + 12.0 * sigma;
    let h = sigma / 20.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let ln_norm = -0.5 * (std::f64::consts::PI * var2).ln();
    let ln_1mq = (-q).ln_1p();
    let ln_q = q.ln();
    let log_base = |x: f64| -> f64 {
        // ln(1 − q + q e^s)
        let s = (2.0 * x - 1.0) / var2;
        let (u, v) = (ln_1mq, ln_q + s);
        let m = u.max(v);
        m + ((u - m).exp() + (v - m).exp()).ln()
    };
    let weight = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };

    // log-space integral of A
    let g: Vec<f64> = (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            ln_norm - x * x / var2 + a * log_base(x)
        })
        .collect();
    let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = g.iter().enumerate().map(|(i, v)| weight(i) * (v - gmax).exp()).sum();
    let ln_a = gmax + (s * h).ln();
    if ln_a > 1e-3 {
        return ln_a / (a - 1.0);
    }

    // small case: integrate A − 1 = E[expm1(α ln(1 + u))]
    let mut total = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let y = a * log_base(x);
        let ln_phi = ln_norm - x * x / var2;
        let term = if y > 30.0 { (ln_phi + y + (-(-y).exp()).ln_1p()).exp() } else { y.exp_m1() * ln_phi.exp() };
        total += weight(i) * term;
    }
    (total * h).ln_1p() / (a - 1.0)
}

/// Criterion 4(b): implementation vs quadrature over the reference grid.
pub fn accountant_quadrature_check() -> Check {
    let mut worst = 0.0f64;
    let mut at = (0.0, 0.0, 0);
    for q in [0.001, 0.01, 0.1] {
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            for alpha in 2..=32u32 {
                let got = accountant::subsampled_gaussian_rdp(q, sigma, alpha).unwrap();
                let want = subsampled_rdp_by_quadrature(q, sigma, alpha);
                let err = (got - want).abs() / want.abs();
                if !(err <= worst) {
                    worst = err;
                    at = (q, sigma, alpha);
                }
            }
        }
    }
    Check::new(worst <= 1e-6, format!("372 grid points, worst relative error {worst:.2e} at (q, σ, α) = {at:?}"))
}

/// Criterion 4(a).
pub fn gaussian_rdp_check() -> Check {
    let mut bad = 0;
    for sigma in [0.1, 0.5, 1.0, 1.3, 2.0, 7.5] {
        for alpha in [1.5, 2.0, 3.0, 10.0, 64.0, 256.0] {
            if accountant::gaussian_rdp(sigma, alpha) != alpha / (2.0 * sigma * sigma) {
                bad += 1;
            }
        }
    }
    Check::new(bad == 0, format!("{bad} of 36 (σ, α) pairs differ from α/(2σ²)"))
}

fn random_ledger(r: &mut impl Rng) -> (f64, Vec<(f64, f64, u64)>) {
    let delta = 10f64.powf(r.random_range(-8.0..-3.0));
    let events = (0..r.random_range(1..=4))
        .map(|_| {
            let q = if r.random_bool(0.1) { 1.0 } else { 10f64.powf(r.random_range(-3.0..0.0)) };
            (q, r.random_range(0.4..6.0), r.random_range(1..=2000))
        })
        .collect();
    (delta, events)
}

fn ledger_epsilon(delta: f64, events: &[(f64, f64, u64)]) -> f64 {
    let mut ledger = PrivacyLedger::new(delta, SamplingScheme::Poisson).unwrap();
    for &(q, s, c) in events {
        ledger.record(q, s, c).unwrap();
    }
    ledger.epsilon(&accountant::default_orders()).unwrap().epsilon
}

/// Criterion 4(c): one more release never lowers ε, more noise never raises
/// it.
pub fn accountant_monotonicity_check(trials: usize, seed: u64) -> Check {
    let mut violations = 0;
    for t in 0..trials {
        let mut r = rng(seed, t as u64);
        let (delta, events) = random_ledger(&mut r);
        let eps = ledger_epsilon(delta, &events);
        let mut longer = events.clone();
        let which = r.random_range(0..longer.len());
        longer[which].2 += r.random_range(1..=50);
        if ledger_epsilon(delta, &longer) < eps {
            violations += 1;
        }
        let factor = 1.0 + r.random_range(0.01..1.0);
        let noisier: Vec<_> = events.iter().map(|&(q, s, c)| (q, s * factor, c)).collect();
        if ledger_epsilon(delta, &noisier) > eps {
            violations += 1;
        }
    }
    Check::new(violations == 0, format!("{violations} violations over {trials} randomized ledgers"))
}

/// Plain mini-batch AdamW on the mean loss, using the batch gradient (not
/// the per-example path). Returns the parameters after every step.
pub fn reference_adamw(
    mut mlp: Mlp,
    data: &TrainSet,
    objective: Objective,
    batch: usize,
    steps: usize,
    seed: u64,
    config: AdamWConfig,
) -> Vec<Mlp> {
    let mut opt = AdamW::new(&mlp, config).unwrap();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let idx = dp::sample_batch(seed, t as u64, data.len(), batch);
        let x = data.features.select_rows(&idx);
        let y = data.targets.select_rows(&idx);
        let trace = mlp.forward(&x).unwrap();
        let (_, g) = objective.row_losses(trace.output(), &y).unwrap();
        let (grads, _) = mlp.backward(&trace, &g.scale(1.0 / batch as f64)).unwrap();
        opt.step(&mut mlp, &grads).unwrap();
        out.push(mlp.clone());
    }
    out
}

pub fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        m[(i, l)] = 1.0;
    }
    m
}

fn max_param_diff(a: &Mlp, b: &Mlp) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .flat_map(|(x, y)| x.weight.as_slice().iter().zip(y.weight.as_slice()).chain(x.bias.iter().zip(&y.bias)))
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

/// Criterion 2: DP-SGD with zero noise and an inert clip reproduces plain
/// AdamW step by step.
pub fn dp_degeneracy_check(steps: usize, seed: u64) -> Check {
    let mut r = rng(seed, 0);
    let n = 60;
    let x = random_matrix(n, 3, 2.0, &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let data = TrainSet::new(x, one_hot(&labels, 3)).unwrap();
    let mlp = Mlp::init(&[3, 6, 3], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let opt = AdamWConfig::with_learning_rate(1e-2);
    let batch = 8;
    let reference = reference_adamw(mlp.clone(), &data, Objective::Multiclass, batch, steps, seed, opt);
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let config = DpConfig {
            clip_norm: 1e9,
            noise_multiplier: 0.0,
            batch_size: batch,
            accumulation_steps: 1,
            dataset_size: n,
            total_iterations: t,
            delta: 1e-5,
            seed,
            privacy_mask: Default::default(),
        };
        let mut params = mlp.clone();
        let mut ledger = PrivacyLedger::new(1e-5, SamplingScheme::Poisson).unwrap();
        dp::dp_train(&mut params, &data, Objective::Multiclass, &config, opt, &mut ledger).unwrap();
        worst = worst.max(max_param_diff(&params, &reference[t - 1]));
    }
    Check::new(worst <= 1e-12, format!("{steps}-step trajectory, worst entry difference {worst:.2e}"))
}

/// Criterion 3: per-coordinate variance of the summed noise.
pub fn noise_calibration_check(draws: usize, seed: u64) -> Check {
    let batch = 4;
    let zero = Grads { layers: vec![LayerGrad { weight: Matrix::zeros(2, 3), bias: vec![0.0; 2] }] };
    let per_example = PerExampleGrads { per_example: vec![zero; batch] };
    let config = DpConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        batch_size: batch,
        accumulation_steps: 1,
        dataset_size: 100,
        total_iterations: draws,
        delta: 1e-5,
        seed,
        privacy_mask: Default::default(),
    };
    let coords = 8;
    let mut sum = vec![0.0; coords];
    let mut sum_sq = vec![0.0; coords];
    for t in 0..draws {
        let mut r = substream(seed, privada_core::rng::streams::DP_NOISE, t as u64);
        let noisy = dp::noise_and_average(&per_example, &config, &mut r).unwrap();
        for (j, v) in flat(&noisy.grads).iter().enumerate() {
            let summed = v * batch as f64;
            sum[j] += summed;
            sum_sq[j] += summed * summed;
        }
    }
    let n = draws as f64;
    let worst = (0..coords)
        .map(|j| {
            let mean = sum[j] / n;
            let var = (sum_sq[j] - n * mean * mean) / (n - 1.0);
            (var - 1.0).abs()
        })
        .fold(0.0, f64::max);
    Check::new(worst <= 0.05, format!("{draws} draws, worst relative variance deviation {worst:.4}"))
}

/// Points from a few well-separated random blobs.
pub fn blob_data(n: usize, dim: usize, centres: usize, r: &mut impl Rng) -> Matrix {
    let c: Vec<Vec<f64>> = (0..centres).map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
    let scale: Vec<f64> = (0..centres).map(|_| r.random_range(0.3..1.5)).collect();
    let mut m = Matrix::zeros(n, dim);
    for i in 0..n {
        let k = r.random_range(0..centres);
        for j in 0..dim {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
            m[(i, j)] = c[k][j] + scale[k] * z;
        }
    }
    m
}

/// Criterion 5: EM never lowers the mean log-likelihood, and K = 1 is the
/// sample mean and (biased) variance.
pub fn em_check(inits: usize, seed: u64) -> Check {
    let mut worst_drop = 0.0f64;
    for t in 0..inits {
        let mut r = rng(seed, 1000 + t as u64);
        let dim = r.random_range(1..=4);
        let x = blob_data(r.random_range(60..200), dim, r.random_range(1..=4), &mut r);
        let k = r.random_range(1..=5);
        let fit = gmm::em_fit(&x, k, EmConfig { tol: 0.0, max_iter: 60 }, seed + t as u64).unwrap();
        for w in fit.trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let mut worst_k1 = 0.0f64;
    for t in 0..10 {
        let mut r = rng(seed, 5000 + t);
        let x = blob_data(150, 3, 3, &mut r);
        let fit = gmm::em_fit(&x, 1, EmConfig::default(), t).unwrap();
        let c = &fit.model.components()[0];
        let n = x.rows() as f64;
        for j in 0..3 {
            let mean = (0..x.rows()).map(|i| x[(i, j)]).sum::<f64>() / n;
            let var = (0..x.rows()).map(|i| (x[(i, j)] - mean).powi(2)).sum::<f64>() / n;
            worst_k1 = worst_k1.max((c.mean[j] - mean).abs() / mean.abs().max(1.0));
            worst_k1 = worst_k1.max((c.variance[j] - var).abs() / var.max(1.0));
        }
    }
    Check::new(
        worst_drop <= 1e-9 && worst_k1 <= 1e-10,
        format!("{inits} fits, largest log-likelihood drop {worst_drop:.2e}; K=1 worst deviation {worst_k1:.2e}"),
    )
}

/// Criterion 6: sample means within 4σ/√n of the analytic mixture mean.
pub fn sampling_check(models: usize, samples: usize, seed: u64) -> Check {
    let mut worst = 0.0f64;
    for t in 0..models {
        let mut r = rng(seed, 9000 + t as u64);
        let dim = r.random_range(1..=4);
        let x = blob_data(300, dim, 3, &mut r);
        let model: GmmModel = gmm::em_fit(&x, r.random_range(1..=4), EmConfig::default(), t as u64).unwrap().model;
        let (s, _) = model.sample(samples, &mut r);
        for j in 0..dim {
            let mean: f64 = model.components().iter().map(|c| c.weight * c.mean[j]).sum();
            let second: f64 =
                model.components().iter().map(|c| c.weight * (c.variance[j] + c.mean[j] * c.mean[j])).sum();
            let sd = (second - mean * mean).sqrt();
            let emp = (0..samples).map(|i| s[(i, j)]).sum::<f64>() / samples as f64;
            worst = worst.max((emp - mean).abs() / (sd / (samples as f64).sqrt()));
        }
    }
    Check::new(worst <= 4.0, format!("{models} models × {samples} samples, worst deviation {worst:.2} σ/√n"))
}

/// Criterion 13: closed-form loss values.
pub fn loss_identity_check() -> Check {
    let mut worst = 0.0f64;
    for (k, t) in [(2, 1.0), (4, 20.0), (7, 2.5)] {
        let z = Matrix::zeros(3, k);
        let (kd, _) = uda::kd_loss(&z, &z, t).unwrap();
        worst = worst.max((kd - t * t * (k as f64).ln()).abs());
        let im = uda::im_loss(&z).unwrap();
        worst = worst.max(im.total().abs());
    }
    let half = Matrix::filled(5, 1, 0.5);
    let (d, _, _) = uda::discriminator_loss(&half, &half).unwrap();
    worst = worst.max((d - 2.0 * std::f64::consts::LN_2).abs());
    Check::new(worst <= 1e-9, format!("worst deviation {worst:.2e}"))
}
