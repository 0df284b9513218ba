//! The share package and model files: text formats with bit-exact reals.
//!
//! Every real is written as a decimal string with 17 significant digits,
//! which round-trips any `f64` exactly. Serialization is deterministic: the
//! same package always produces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMode;
use crate::error::{Error, Result};
use crate::gmm::{ClassConditionalGmms, ClassGmm, GmmComponent, GmmMode, GmmModel};
use crate::nn::{Activation, Dense, Mlp};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// Key under which a pooled mixture is stored.
pub const POOLED_KEY: &str = "*";

/// The marker stored instead of a receipt when training was not private.
pub const NON_PRIVATE: &str = "non-private";

/// Privacy guarantee of the pretraining that produced a package.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReceipt {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub accountant: String,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShareMeta {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub label_mode: LabelMode,
    pub gmm_mode: GmmMode,
    /// Rows summarized by each mixture, keyed like `gmms`.
    pub gmm_support: BTreeMap<String, usize>,
    pub seed: u64,
    /// SHA-256 of the settings that produced the package.
    pub config_digest: String,
}

/// Everything the source party hands to the target party.
#[derive(Debug, Clone, PartialEq)]
pub struct SharePackage {
    pub encoder: Mlp,
    pub classifier: Mlp,
    pub gmms: ClassConditionalGmms,
    /// `None` when pretraining was not private.
    pub privacy: Option<PrivacyReceipt>,
    pub meta: ShareMeta,
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("`{s}` is not a decimal real")))
}

fn parse_reals(v: &[String]) -> Result<Vec<f64>> {
    v.iter().map(|s| parse_real(s)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMatrix {
    rows: usize,
    cols: usize,
    data: Vec<String>,
}

impl WireMatrix {
    fn encode(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.as_slice().iter().map(|&v| real(v)).collect() }
    }

    fn decode(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, parse_reals(&self.data)?)
            .map_err(|e| Error::Format(format!("bad matrix: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLayer {
    weight: WireMatrix,
    bias: Vec<String>,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMlp {
    layers: Vec<WireLayer>,
}

impl WireMlp {
    fn encode(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers()
            .iter()
            .map(|l| WireLayer {
                weight: WireMatrix::encode(&l.weight),
                bias: l.bias.iter().map(|&v| real(v)).collect(),
                activation: l.activation,
            })
            .collect();
        Self { layers }
    }

    fn decode(&self) -> Result<Mlp> {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense::new(l.weight.decode()?, parse_reals(&l.bias)?, l.activation))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers).map_err(|e| Error::Format(format!("bad network: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGmm {
    k: usize,
    weights: Vec<String>,
    means: WireMatrix,
    variances: WireMatrix,
}

impl WireGmm {
    fn encode(model: &GmmModel) -> Self {
        let k = model.k();
        let d = model.dim();
        let mut means = Matrix::zeros(k, d);
        let mut variances = Matrix::zeros(k, d);
        for (i, c) in model.components().iter().enumerate() {
            means.row_mut(i).copy_from_slice(&c.mean);
            variances.row_mut(i).copy_from_slice(&c.variance);
        }
        Self {
            k,
            weights: model.components().iter().map(|c| real(c.weight)).collect(),
            means: WireMatrix::encode(&means),
            variances: WireMatrix::encode(&variances),
        }
    }

    fn decode(&self) -> Result<GmmModel> {
        let weights = parse_reals(&self.weights)?;
        let means = self.means.decode()?;
        let variances = self.variances.decode()?;
        if weights.len() != self.k || means.rows() != self.k || variances.shape() != means.shape() {
            return Err(Error::Format(format!("mixture with k = {} has inconsistent arrays", self.k)));
        }
        let components = (0..self.k)
            .map(|i| GmmComponent {
                weight: weights[i],
                mean: means.row(i).to_vec(),
                variance: variances.row(i).to_vec(),
            })
            .collect();
        GmmModel::new(components).map_err(|e| Error::Format(format!("bad mixture: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireReceipt {
    epsilon: String,
    delta: String,
    sigma: String,
    q: String,
    steps: u64,
    accountant: String,
    scheme: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum WirePrivacy {
    Receipt(WireReceipt),
    Marker(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePackage {
    version: u32,
    encoder: WireMlp,
    classifier: WireMlp,
    gmms: BTreeMap<String, WireGmm>,
    privacy: WirePrivacy,
    meta: ShareMeta,
}

fn gmm_key(entry: &ClassGmm, class_names: &[String]) -> Result<String> {
    match entry.class {
        None => Ok(POOLED_KEY.to_string()),
        Some(c) => class_names.get(c).cloned().ok_or_else(|| Error::Format(format!("mixture for unnamed class {c}"))),
    }
}

impl WirePrivacy {
    fn encode(receipt: Option<&PrivacyReceipt>) -> Self {
        match receipt {
            None => WirePrivacy::Marker(NON_PRIVATE.to_string()),
            Some(r) => WirePrivacy::Receipt(WireReceipt {
                epsilon: real(r.epsilon),
                delta: real(r.delta),
                sigma: real(r.sigma),
                q: real(r.q),
                steps: r.steps,
                accountant: r.accountant.clone(),
                scheme: r.scheme.clone(),
            }),
        }
    }

    fn decode(self) -> Result<Option<PrivacyReceipt>> {
        match self {
            WirePrivacy::Marker(m) if m == NON_PRIVATE => Ok(None),
            WirePrivacy::Marker(m) => Err(Error::Format(format!("unknown privacy marker `{m}`"))),
            WirePrivacy::Receipt(r) => Ok(Some(PrivacyReceipt {
                epsilon: parse_real(&r.epsilon)?,
                delta: parse_real(&r.delta)?,
                sigma: parse_real(&r.sigma)?,
                q: parse_real(&r.q)?,
                steps: r.steps,
                accountant: r.accountant,
                scheme: r.scheme,
            })),
        }
    }
}

impl SharePackage {
    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.meta.feature_dim;
        if self.encoder.output_dim() != d || self.classifier.input_dim() != d || self.gmms.dim != d {
            return Err(Error::Format(format!(
                "feature dims disagree: encoder {}, classifier {}, mixtures {}, declared {d}",
                self.encoder.output_dim(),
                self.classifier.input_dim(),
                self.gmms.dim
            )));
        }
        if self.encoder.input_dim() != self.meta.input_dim {
            return Err(Error::Format("encoder input does not match the declared input dim".into()));
        }
        if self.classifier.output_dim() != self.meta.class_names.len() {
            return Err(Error::Format("classifier outputs do not match the class names".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut gmms = BTreeMap::new();
        for e in &self.gmms.entries {
            gmms.insert(gmm_key(e, &self.meta.class_names)?, WireGmm::encode(&e.model));
        }
        let privacy = WirePrivacy::encode(self.privacy.as_ref());
        let wire = WirePackage {
            version: FORMAT_VERSION,
            encoder: WireMlp::encode(&self.encoder),
            classifier: WireMlp::encode(&self.classifier),
            gmms,
            privacy,
            meta: self.meta.clone(),
        };
        let mut text = serde_json::to_string_pretty(&wire).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let wire: WirePackage = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if wire.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported package version {}", wire.version)));
        }
        let meta = wire.meta;
        let mut entries = Vec::with_capacity(wire.gmms.len());
        let keys: Vec<String> = match meta.gmm_mode {
            GmmMode::Pooled => vec![POOLED_KEY.to_string()],
            GmmMode::PerClass => meta.class_names.clone(),
        };
        if wire.gmms.len() != keys.len() {
            return Err(Error::Format(format!("expected mixtures for {keys:?}, found {}", wire.gmms.len())));
        }
        for (c, key) in keys.iter().enumerate() {
            let g = wire.gmms.get(key).ok_or_else(|| Error::Format(format!("no mixture for `{key}`")))?;
            let support =
                *meta.gmm_support.get(key).ok_or_else(|| Error::Format(format!("no support count for `{key}`")))?;
            let class = (meta.gmm_mode == GmmMode::PerClass).then_some(c);
            entries.push(ClassGmm { class, support, model: g.decode()? });
        }
        let privacy = wire.privacy.decode()?;
        let pkg = SharePackage {
            encoder: wire.encoder.decode()?,
            classifier: wire.classifier.decode()?,
            gmms: ClassConditionalGmms::new(meta.gmm_mode, entries)?,
            privacy,
            meta,
        };
        pkg.validate()?;
        Ok(pkg)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Networks saved by pretraining or adaptation. `classifier` is absent for
/// an adapted target encoder; `privacy` is present only on a pretrained
/// source model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub encoder: Mlp,
    pub classifier: Option<Mlp>,
    pub class_names: Vec<String>,
    pub label_mode: LabelMode,
    /// `Some(None)` marks a non-private source model.
    pub privacy: Option<Option<PrivacyReceipt>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireModel {
    version: u32,
    encoder: WireMlp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<WireMlp>,
    class_names: Vec<String>,
    label_mode: LabelMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    privacy: Option<WirePrivacy>,
}

impl ModelFile {
    pub fn to_text(&self) -> Result<String> {
        let wire = WireModel {
            version: FORMAT_VERSION,
            encoder: WireMlp::encode(&self.encoder),
            classifier: self.classifier.as_ref().map(WireMlp::encode),
            class_names: self.class_names.clone(),
            label_mode: self.label_mode,
            privacy: self.privacy.as_ref().map(|p| WirePrivacy::encode(p.as_ref())),
        };
        let mut text = serde_json::to_string_pretty(&wire).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let wire: WireModel = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if wire.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", wire.version)));
        }
        let encoder = wire.encoder.decode()?;
        let classifier = wire.classifier.as_ref().map(WireMlp::decode).transpose()?;
        if let Some(c) = &classifier {
            if c.input_dim() != encoder.output_dim() || c.output_dim() != wire.class_names.len() {
                return Err(Error::Format("classifier does not fit the encoder and class names".into()));
            }
        }
        let privacy = wire.privacy.map(WirePrivacy::decode).transpose()?;
        Ok(Self { encoder, classifier, class_names: wire.class_names, label_mode: wire.label_mode, privacy })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_exactly() {
        for v in [0.1, -1.0 / 3.0, 1e-300, f64::MAX, 5e-324, 0.0, -0.0, f64::INFINITY] {
            let back = parse_real(&real(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
        assert_eq!(real(1.0).len(), "1.0000000000000000e0".len());
    }

    #[test]
    fn unknown_privacy_marker_is_rejected() {
        let wire: WirePrivacy = serde_json::from_str("\"private-ish\"").unwrap();
        assert!(matches!(wire, WirePrivacy::Marker(_)));
    }
}
