//! Membership-inference attacks against the shared artifacts.
//!
//! Both attacks are threshold attacks: every candidate gets a score (higher
//! means "member") and the report sweeps all thresholds. All numbers these
//! attacks produce are measurements of this implementation on synthetic data.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{self, ClassConditionalGmms, EmConfig, GmmMode, GmmModel};
use crate::nn::Mlp;
use crate::pipeline::GmmSettings;
use crate::share::SharePackage;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Candidates scoring at least this value are called members.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl ScoreSummary {
    fn of(scores: &[f64]) -> Self {
        let n = scores.len();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        Self { n, mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub auc: f64,
    /// From `(0, 0)` to `(1, 1)`, thresholds decreasing.
    pub roc: Vec<RocPoint>,
    pub member: ScoreSummary,
    pub nonmember: ScoreSummary,
}

impl AttackReport {
    /// Full threshold sweep; the area is the trapezoid rule over the sweep,
    /// so tied scores count one half.
    pub fn from_scores(attack: &str, member: &[f64], nonmember: &[f64]) -> Result<Self> {
        if member.is_empty() || nonmember.is_empty() {
            return Err(Error::config("attack needs at least one member and one nonmember"));
        }
        if member.iter().chain(nonmember).any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite attack score".into()));
        }
        let mut m = member.to_vec();
        let mut n = nonmember.to_vec();
        m.sort_by(|a, b| b.total_cmp(a));
        n.sort_by(|a, b| b.total_cmp(a));
        let (nm, nn) = (m.len() as f64, n.len() as f64);
        let mut roc = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
        let (mut i, mut j) = (0, 0);
        while i < m.len() || j < n.len() {
            let next = match (m.get(i), n.get(j)) {
                (Some(&a), Some(&b)) => a.max(b),
                (Some(&a), None) => a,
                (None, Some(&b)) => b,
                (None, None) => unreachable!(),
            };
            while i < m.len() && m[i] >= next {
                i += 1;
            }
            while j < n.len() && n[j] >= next {
                j += 1;
            }
            roc.push(RocPoint { threshold: next, tpr: i as f64 / nm, fpr: j as f64 / nn });
        }
        let auc = roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
        Ok(Self {
            attack: attack.to_string(),
            auc,
            roc,
            member: ScoreSummary::of(member),
            nonmember: ScoreSummary::of(nonmember),
        })
    }
}

/// Negative per-example loss under the model: confidently correct
/// predictions look like training members.
pub fn confidence_scores(encoder: &Mlp, classifier: &Mlp, data: &Dataset) -> Result<Vec<f64>> {
    let logits = classifier.predict(&encoder.predict(&data.features)?)?;
    let (losses, _) = data.label_mode().objective().row_losses(&logits, &data.targets())?;
    Ok(losses.into_iter().map(|l| -l).collect())
}

pub fn confidence_attack(
    encoder: &Mlp,
    classifier: &Mlp,
    members: &Dataset,
    nonmembers: &Dataset,
) -> Result<AttackReport> {
    AttackReport::from_scores(
        "confidence",
        &confidence_scores(encoder, classifier, members)?,
        &confidence_scores(encoder, classifier, nonmembers)?,
    )
}

fn model_for(gmms: &ClassConditionalGmms, class: usize) -> Result<&GmmModel> {
    match gmms.mode {
        GmmMode::Pooled => Ok(&gmms.entries[0].model),
        GmmMode::PerClass => gmms.get(class).ok_or_else(|| Error::config(format!("no mixture for class {class}"))),
    }
}

/// `log p_with(x | c) − log p_without(x | c)`: how much more plausible the
/// candidate became once the shared mixtures included it.
pub fn gmm_shift_attack(
    without: &ClassConditionalGmms,
    with: &ClassConditionalGmms,
    feature: &[f64],
    class: usize,
) -> Result<f64> {
    if without.dim != with.dim || without.mode != with.mode || without.classes() != with.classes() {
        return Err(Error::config("mixture sets differ in dims, mode or classes"));
    }
    Ok(model_for(with, class)?.log_density(feature)? - model_for(without, class)?.log_density(feature)?)
}

/// Shift-attack scores for every row of `data`, with features taken through
/// `encoder`.
pub fn gmm_shift_scores(
    without: &ClassConditionalGmms,
    with: &ClassConditionalGmms,
    encoder: &Mlp,
    data: &Dataset,
) -> Result<Vec<f64>> {
    let features = encoder.predict(&data.features)?;
    data.primary_labels()
        .iter()
        .enumerate()
        .map(|(i, &c)| gmm_shift_attack(without, with, features.row(i), c))
        .collect()
}

/// Mixtures fitted to `data`'s features in the package's feature space, the
/// attacker's "before" picture of the population.
pub fn reference_gmms(pkg: &SharePackage, data: &Dataset, settings: &GmmSettings) -> Result<ClassConditionalGmms> {
    let features: Matrix = pkg.encoder.predict(&data.features)?;
    gmm::fit_class_conditional(
        &features,
        &data.primary_labels(),
        data.n_classes(),
        settings.k,
        pkg.meta.gmm_mode,
        EmConfig { tol: settings.tol, max_iter: settings.max_iter },
        settings.seed,
    )
}

/// One attacked artifact.
#[derive(Debug, Clone, Copy)]
pub struct AttackSetting<'a> {
    pub label: &'a str,
    pub package: &'a SharePackage,
    pub members: &'a Dataset,
    pub nonmembers: &'a Dataset,
    /// Disjoint population sample for the shift attack's "before" mixtures;
    /// without it only the confidence attack runs.
    pub reference: Option<&'a Dataset>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub setting: String,
    pub attack: String,
    pub auc: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub seed: u64,
}

/// Runs every attack against every setting, in order.
pub fn compare_privacy(settings: &[AttackSetting<'_>], gmm_settings: &GmmSettings) -> Result<Vec<AttackRow>> {
    let mut rows = Vec::new();
    for s in settings {
        let pkg = s.package;
        let mut reports = vec![confidence_attack(&pkg.encoder, &pkg.classifier, s.members, s.nonmembers)?];
        if let Some(reference) = s.reference {
            let without = reference_gmms(pkg, reference, gmm_settings)?;
            reports.push(AttackReport::from_scores(
                "gmm-shift",
                &gmm_shift_scores(&without, &pkg.gmms, &pkg.encoder, s.members)?,
                &gmm_shift_scores(&without, &pkg.gmms, &pkg.encoder, s.nonmembers)?,
            )?);
        }
        for r in reports {
            rows.push(AttackRow {
                setting: s.label.to_string(),
                attack: r.attack,
                auc: r.auc,
                n_member: s.members.len(),
                n_nonmember: s.nonmembers.len(),
                seed: s.seed,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `setting,attack,auc,n_member,n_nonmember,seed`.
pub fn rows_to_csv(rows: &[AttackRow]) -> String {
    let mut out = String::from("setting,attack,auc,n_member,n_nonmember,seed\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.setting, r.attack, r.auc, r.n_member, r.n_nonmember, r.seed));
    }
    out
}
