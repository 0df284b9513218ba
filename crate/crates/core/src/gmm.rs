//! Diagonal-covariance Gaussian mixtures: EM fitting, densities, sampling and
//! the class-conditional collection shared with the target party.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, substream};
use crate::tensor::Matrix;

/// Lower bound on every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    dim: usize,
    components: Vec<GmmComponent>,
}

impl GmmModel {
    /// Validates weights (sum to 1 within 1e-9), dims and the variance floor.
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::config("a mixture needs K ≥ 1"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::config("mixture dimension must be ≥ 1"));
        }
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::shape(format!("component {k} does not have dimension {dim}")));
            }
            if c.variance.iter().any(|&v| !(v >= VARIANCE_FLOOR) || !v.is_finite()) {
                return Err(Error::config(format!("component {k} has a variance below the floor")));
            }
            if !(c.weight >= 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("component {k} has invalid parameters")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {total}")));
        }
        Ok(Self { dim, components })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Mixture mean `Σ π_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// Per-coordinate mixture variance `Σ π_k (σ²_k + μ_k²) − μ²`.
    pub fn marginal_variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut second = vec![0.0; self.dim];
        for c in &self.components {
            for ((s, v), m) in second.iter_mut().zip(&c.variance).zip(&c.mean) {
                *s += c.weight * (v + m * m);
            }
        }
        second.iter().zip(&mean).map(|(s, m)| s - m * m).collect()
    }

    /// `ln π_k + ln N(x; μ_k, Σ_k)` for every component.
    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            let mut acc = c.weight.ln();
            for ((xj, m), v) in x.iter().zip(&c.mean).zip(&c.variance) {
                let d = xj - m;
                acc -= 0.5 * ((2.0 * PI * v).ln() + d * d / v);
            }
            *o = acc;
        }
    }

    /// Log density of a single point.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::shape(format!("point of dimension {} for a {}-d mixture", x.len(), self.dim)));
        }
        let mut buf = vec![0.0; self.k()];
        self.component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Mean per-row log density.
    pub fn log_likelihood(&self, x: &Matrix) -> Result<f64> {
        if x.cols() != self.dim {
            return Err(Error::shape(format!("{} columns for a {}-d mixture", x.cols(), self.dim)));
        }
        if x.rows() == 0 {
            return Err(Error::config("log-likelihood of an empty sample"));
        }
        let mut buf = vec![0.0; self.k()];
        let mut total = 0.0;
        for r in x.row_iter() {
            self.component_log_densities(r, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / x.rows() as f64)
    }

    /// Posterior component probabilities for each row (rows sum to 1).
    pub fn responsibilities(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::shape(format!("{} columns for a {}-d mixture", x.cols(), self.dim)));
        }
        let mut out = Matrix::zeros(x.rows(), self.k());
        for (i, r) in x.row_iter().enumerate() {
            let row = out.row_mut(i);
            self.component_log_densities(r, row);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        Ok(out)
    }

    /// Draws `n` points; returns them with their component indices.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.dim);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.draw_component(rng);
            let c = &self.components[k];
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(rng);
                data.push(c.mean[j] + c.variance[j].sqrt() * z);
            }
            ids.push(k);
        }
        (Matrix::from_parts(n, self.dim, data), ids)
    }

    fn draw_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        self.components.len() - 1
    }

    /// Bayesian information criterion on `x` (lower is better).
    pub fn bic(&self, x: &Matrix) -> Result<f64> {
        let n = x.rows() as f64;
        let params = (self.k() * (2 * self.dim + 1) - 1) as f64;
        Ok(-2.0 * self.log_likelihood(x)? * n + params * n.ln())
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200 }
    }
}

/// A fitted mixture and how the fit went.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    /// Mean log-likelihood evaluated at the start of every iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
}

/// Fits a `k`-component diagonal mixture by EM. The result does not depend
/// on the order of the rows.
///
/// Means start from k-means++ seeding, variances from the pooled
/// per-coordinate variance, weights uniform. Iteration `m` evaluates the
/// log-likelihood of the current model, stops if it moved by less than `tol`,
/// and otherwise applies one M-step; so a fit that converges at iteration `m`
/// is reproduced exactly by `max_iter = m`.
pub fn em_fit(features: &Matrix, k: usize, config: EmConfig, seed: u64) -> Result<EmFit> {
    let (n, d) = features.shape();
    if k == 0 {
        return Err(Error::config("K must be ≥ 1"));
    }
    if n < k {
        return Err(Error::config(format!("{n} rows cannot support {k} components")));
    }
    if d == 0 {
        return Err(Error::config("features have no columns"));
    }
    if !features.is_finite() {
        return Err(Error::Numeric("non-finite features".into()));
    }
    // a canonical row order makes the fit independent of how rows arrive
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (features.row(a), features.row(b));
        ra.iter().zip(rb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    });
    let features = &features.select_rows(&order);
    let mut rng = substream(seed, streams::GMM, 0);
    let global_var = column_variances(features);
    let mut model = init_kmeanspp(features, k, &global_var, &mut rng);
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut reseeds = 0;
    let mut resp = Matrix::zeros(n, k);
    for _ in 0..config.max_iter {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let row = resp.row_mut(i);
            model.component_log_densities(features.row(i), row);
            let lse = log_sum_exp(row);
            ll += lse;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ll = ll / n as f64;
        trace.push(ll);
        if prev.is_some_and(|p| (ll - p).abs() < config.tol) {
            converged = true;
            break;
        }
        prev = Some(ll);
        reseeds += m_step(features, &resp, &global_var, &mut model, &mut rng);
    }
    Ok(EmFit { model, trace, converged, reseeds })
}

fn column_variances(x: &Matrix) -> Vec<f64> {
    let mean = x.column_means();
    let mut var = vec![0.0; x.cols()];
    for r in x.row_iter() {
        for j in 0..x.cols() {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter().map(|v| (v / x.rows() as f64).max(VARIANCE_FLOOR)).collect()
}

fn init_kmeanspp<R: Rng + ?Sized>(x: &Matrix, k: usize, global_var: &[f64], rng: &mut R) -> GmmModel {
    let n = x.rows();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(centers[0]))).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    let components = centers
        .iter()
        .map(|&c| GmmComponent { weight: 1.0 / k as f64, mean: x.row(c).to_vec(), variance: global_var.to_vec() })
        .collect();
    GmmModel { dim: x.cols(), components }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closed-form M-step with the variance floor. Returns the number of
/// components re-seeded because their responsibility mass vanished.
fn m_step<R: Rng + ?Sized>(x: &Matrix, resp: &Matrix, global_var: &[f64], model: &mut GmmModel, rng: &mut R) -> usize {
    let (n, d) = x.shape();
    let k = model.k();
    let mut reseeds = 0;
    for c in 0..k {
        let mut mass = 0.0;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let r = resp[(i, c)];
            mass += r;
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += r * v;
            }
        }
        let comp = &mut model.components[c];
        if mass <= 1e-12 * n as f64 {
            let pick = rng.random_range(0..n);
            log::warn!("EM component {c} lost its responsibility mass; re-seeded from row {pick}");
            comp.mean = x.row(pick).to_vec();
            comp.variance = global_var.to_vec();
            comp.weight = 1.0 / n as f64;
            reseeds += 1;
            continue;
        }
        mean.iter_mut().for_each(|m| *m /= mass);
        let mut var = vec![0.0; d];
        for i in 0..n {
            let r = resp[(i, c)];
            for j in 0..d {
                let diff = x[(i, j)] - mean[j];
                var[j] += r * diff * diff;
            }
        }
        comp.variance = var.iter().map(|v| (v / mass).max(VARIANCE_FLOOR)).collect();
        comp.mean = mean;
        comp.weight = mass / n as f64;
    }
    let total: f64 = model.components.iter().map(|c| c.weight).sum();
    model.components.iter_mut().for_each(|c| c.weight /= total);
    reseeds
}

/// How source features are summarized for sharing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GmmMode {
    /// One mixture per class; resamples carry labels.
    #[default]
    PerClass,
    /// One unlabeled mixture over all features.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGmm {
    /// Class index, or `None` for the pooled mixture.
    pub class: Option<usize>,
    /// Training rows summarized by this model; sets the resampling prior.
    pub support: usize,
    pub model: GmmModel,
}

/// Mixtures keyed by class, all in the same feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConditionalGmms {
    pub dim: usize,
    pub mode: GmmMode,
    pub entries: Vec<ClassGmm>,
}

impl ClassConditionalGmms {
    pub fn new(mode: GmmMode, entries: Vec<ClassGmm>) -> Result<Self> {
        let dim = entries.first().ok_or_else(|| Error::config("no mixtures supplied"))?.model.dim();
        if entries.iter().any(|e| e.model.dim() != dim) {
            return Err(Error::shape("mixtures disagree on feature dimension"));
        }
        if entries.iter().any(|e| e.support == 0) {
            return Err(Error::config("mixture with zero support"));
        }
        Ok(Self { dim, mode, entries })
    }

    pub fn get(&self, class: usize) -> Option<&GmmModel> {
        self.entries.iter().find(|e| e.class == Some(class)).map(|e| &e.model)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().filter_map(|e| e.class).collect()
    }

    /// Draws `n` features; classes are picked in proportion to their support.
    /// Labels are `None` in pooled mode.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Vec<Option<usize>>) {
        let total: usize = self.entries.iter().map(|e| e.support).sum();
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random::<f64>() * total as f64;
            let mut acc = 0.0;
            let mut entry = &self.entries[self.entries.len() - 1];
            for e in &self.entries {
                acc += e.support as f64;
                if u < acc {
                    entry = e;
                    break;
                }
            }
            let (x, _) = entry.model.sample(1, rng);
            data.extend_from_slice(x.row(0));
            labels.push(entry.class);
        }
        (Matrix::from_parts(n, self.dim, data), labels)
    }
}

/// Fits one mixture per class (or a single pooled mixture).
///
/// A class with fewer than `k` rows is fitted with as many components as it
/// has rows.
pub fn fit_class_conditional(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    k: usize,
    mode: GmmMode,
    config: EmConfig,
    seed: u64,
) -> Result<ClassConditionalGmms> {
    if labels.len() != features.rows() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), features.rows())));
    }
    if mode == GmmMode::Pooled {
        let k_eff = k.min(features.rows());
        let fit = em_fit(features, k_eff, config, seed)?;
        return ClassConditionalGmms::new(
            mode,
            vec![ClassGmm { class: None, support: features.rows(), model: fit.model }],
        );
    }
    let mut entries = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if idx.is_empty() {
            return Err(Error::config(format!("class {c} has no examples to fit")));
        }
        let k_eff = if idx.len() < k {
            log::warn!("class {c} has {} rows; reducing K from {k} to {}", idx.len(), idx.len());
            idx.len()
        } else {
            k
        };
        let class_seed = crate::rng::derive_seed(seed, &format!("gmm-class-{c}"));
        let fit = em_fit(&features.select_rows(&idx), k_eff, config, class_seed)?;
        entries.push(ClassGmm { class: Some(c), support: idx.len(), model: fit.model });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::config(format!("label {bad} outside 0..{n_classes}")));
    }
    ClassConditionalGmms::new(mode, entries)
}
