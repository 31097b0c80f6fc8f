//! Membership classifier over `(c_u, p_u)` and user-level inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::UserCluster;
use crate::embedding::{sigmoid, softplus, Encoder};
use crate::error::{Error, Result};
use crate::features::{extract_features, AttackFeatures, Label};
use crate::nn::{DenseNet, Gradients, NetCheckpoint, Sgd};
use crate::rng;
use crate::shadow::AttackDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    COnly,
    POnly,
    Both,
}

impl FeatureMode {
    pub fn input_dim(self) -> usize {
        match self {
            FeatureMode::Both => 2,
            _ => 1,
        }
    }

    pub fn select(self, f: &AttackFeatures) -> Vec<f64> {
        match self {
            FeatureMode::COnly => vec![f.c_u],
            FeatureMode::POnly => vec![f.p_u],
            FeatureMode::Both => vec![f.c_u, f.p_u],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::COnly => "c_only",
            FeatureMode::POnly => "p_only",
            FeatureMode::Both => "both",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" | "c_only" => Ok(FeatureMode::COnly),
            "p" | "p_only" => Ok(FeatureMode::POnly),
            "both" => Ok(FeatureMode::Both),
            other => Err(Error::InvalidParameter(format!("unknown feature mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackHyperParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for AttackHyperParams {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            epochs: 400,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    pub net: DenseNet,
    pub feature_mode: FeatureMode,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Logit threshold; member iff score > threshold.
    pub decision_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub member: bool,
    pub score: f64,
}

impl Verdict {
    pub fn label(&self) -> Label {
        if self.member {
            Label::Member
        } else {
            Label::Nonmember
        }
    }
}

/// Per-column mean and population std; a constant column gets std 1.
pub fn fit_standardization(inputs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = inputs.first().map(Vec::len).unwrap_or(0);
    let n = inputs.len() as f64;
    let means: Vec<f64> = (0..dim).map(|j| inputs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let stds = (0..dim)
        .map(|j| {
            let var = inputs.iter().map(|x| (x[j] - means[j]).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                std
            } else {
                1.0
            }
        })
        .collect();
    (means, stds)
}

pub fn standardize(x: &[f64], means: &[f64], stds: &[f64]) -> Vec<f64> {
    x.iter().zip(means).zip(stds).map(|((v, m), s)| (v - m) / s).collect()
}

/// Mean binary cross-entropy on logits and its parameter gradient.
/// `targets` are 1 for member, 0 for non-member.
pub fn logistic_loss(net: &DenseNet, inputs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Gradients)> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    let n = inputs.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        let cache = net.forward_cached(x)?;
        let z = cache.output()[0];
        loss += (softplus(z) - y * z) / n;
        net.backward_into(&cache, &[(sigmoid(z) - y) / n], &mut grads)?;
    }
    Ok((loss, grads))
}

/// Fits standardization on the rows, then trains the classifier with
/// full-batch momentum SGD for a fixed number of epochs.
pub fn train_attack(
    data: &AttackDataset,
    feature_mode: FeatureMode,
    hp: &AttackHyperParams,
    seed: u64,
) -> Result<AttackModel> {
    if data.len() < 10 {
        return Err(Error::InvalidParameter(format!(
            "attack training needs >= 10 rows, got {}",
            data.len()
        )));
    }
    if data.count(Label::Member) == 0 || data.count(Label::Nonmember) == 0 {
        return Err(Error::InvalidParameter(
            "attack dataset must contain both labels".into(),
        ));
    }
    let raw: Vec<Vec<f64>> = data.rows.iter().map(|r| feature_mode.select(&r.features)).collect();
    let (means, stds) = fit_standardization(&raw);
    let inputs: Vec<Vec<f64>> = raw.iter().map(|x| standardize(x, &means, &stds)).collect();
    let targets: Vec<f64> = data
        .rows
        .iter()
        .map(|r| if r.label == Label::Member { 1.0 } else { 0.0 })
        .collect();

    let mut dims = vec![feature_mode.input_dim()];
    dims.extend(&hp.hidden);
    dims.push(1);
    let mut net = DenseNet::mlp(&dims, rng::derive_tagged(seed, "attack-init"))?;
    let mut opt = Sgd::new(hp.lr, hp.momentum)?;
    for epoch in 0..hp.epochs {
        let (loss, grads) = logistic_loss(&net, &inputs, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("attack loss {loss}"),
            });
        }
        net = opt.step(&net, &grads).map_err(|e| match e {
            Error::Diverged { reason, .. } => Error::Diverged { epoch, reason },
            other => other,
        })?;
    }
    Ok(AttackModel {
        net,
        feature_mode,
        means,
        stds,
        decision_threshold: 0.0,
    })
}

impl AttackModel {
    pub fn score(&self, f: &AttackFeatures) -> Result<f64> {
        let x = standardize(&self.feature_mode.select(f), &self.means, &self.stds);
        Ok(self.net.forward(&x)?[0])
    }

    pub fn classify(&self, f: &AttackFeatures) -> Result<Verdict> {
        let score = self.score(f)?;
        Ok(Verdict {
            member: score > self.decision_threshold,
            score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = AttackCheckpoint {
            network: self.net.to_checkpoint(),
            feature_mode: self.feature_mode,
            means: self.means.clone(),
            stds: self.stds.clone(),
            decision_threshold: self.decision_threshold,
        };
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: AttackCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let net = DenseNet::from_checkpoint(&ckpt.network)?;
        if net.input_dim() != ckpt.feature_mode.input_dim()
            || ckpt.means.len() != net.input_dim()
            || ckpt.stds.len() != net.input_dim()
            || ckpt.stds.iter().any(|s| *s <= 0.0)
        {
            return Err(Error::Checkpoint("attack model shape is inconsistent".into()));
        }
        Ok(Self {
            net,
            feature_mode: ckpt.feature_mode,
            means: ckpt.means,
            stds: ckpt.stds,
            decision_threshold: ckpt.decision_threshold,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AttackCheckpoint {
    network: NetCheckpoint,
    feature_mode: FeatureMode,
    means: Vec<f64>,
    stds: Vec<f64>,
    decision_threshold: f64,
}

/// Extracts `(c_u, p_u)` from `k` of the user's samples via the victim and
/// classifies them.
pub fn infer_user(
    model: &AttackModel,
    victim: &Encoder,
    cluster: &UserCluster,
    k: usize,
    seed: u64,
) -> Result<Verdict> {
    let features = extract_features(victim, cluster, k, seed)?;
    model.classify(&features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::UserId;
    use crate::shadow::AttackRow;

    fn row(user: usize, c: f64, p: f64, label: Label) -> AttackRow {
        AttackRow {
            features: AttackFeatures {
                user_id: UserId(format!("u{user}")),
                encoder_id: "shadow-0".into(),
                k_used: 4,
                c_u: c,
                p_u: p,
            },
            label,
            shadow_index: 0,
        }
    }

    fn separable() -> AttackDataset {
        let mut rows = Vec::new();
        for i in 0..10 {
            let jitter = i as f64 * 0.01;
            rows.push(row(i, jitter, 1.0 + (i % 3) as f64, Label::Member));
            rows.push(row(100 + i, 10.0 + jitter, 1.0 + (i % 4) as f64, Label::Nonmember));
        }
        AttackDataset { rows }
    }

    #[test]
    fn separable_toy_is_fit_perfectly() {
        let ds = separable();
        let model = train_attack(&ds, FeatureMode::COnly, &AttackHyperParams::default(), 1).unwrap();
        for r in &ds.rows {
            assert_eq!(model.classify(&r.features).unwrap().label(), r.label);
        }
    }

    #[test]
    fn c_only_ignores_p_column() {
        let ds = separable();
        let model = train_attack(&ds, FeatureMode::COnly, &AttackHyperParams::default(), 2).unwrap();
        for r in &ds.rows {
            let mut f = r.features.clone();
            let before = model.score(&f).unwrap();
            f.p_u = 1e6 - f.p_u;
            assert_eq!(model.score(&f).unwrap(), before);
        }
    }

    #[test]
    fn standardized_inputs_are_zero_mean_unit_std() {
        let ds = separable();
        let raw: Vec<Vec<f64>> = ds.rows.iter().map(|r| FeatureMode::Both.select(&r.features)).collect();
        let (m, s) = fit_standardization(&raw);
        let z: Vec<Vec<f64>> = raw.iter().map(|x| standardize(x, &m, &s)).collect();
        for j in 0..2 {
            let n = z.len() as f64;
            let mean = z.iter().map(|x| x[j]).sum::<f64>() / n;
            let std = (z.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_label_or_tiny_dataset_rejected() {
        let only_members = separable().filter(|r| r.label == Label::Member);
        assert!(train_attack(&only_members, FeatureMode::Both, &AttackHyperParams::default(), 0).is_err());
        let tiny = AttackDataset {
            rows: separable().rows.into_iter().take(4).collect(),
        };
        assert!(train_attack(&tiny, FeatureMode::Both, &AttackHyperParams::default(), 0).is_err());
    }

    #[test]
    fn infinite_threshold_and_sign_flip() {
        let ds = separable();
        let mut model = train_attack(&ds, FeatureMode::Both, &AttackHyperParams::default(), 3).unwrap();
        let flipped = AttackModel {
            net: model
                .net
                .map_layers(|layers| {
                    let last = layers.last_mut().unwrap();
                    last.weights.iter_mut().for_each(|w| *w = -*w);
                    last.biases.iter_mut().for_each(|b| *b = -*b);
                })
                .unwrap(),
            ..model.clone()
        };
        for r in &ds.rows {
            let a = model.classify(&r.features).unwrap();
            let b = flipped.classify(&r.features).unwrap();
            assert_eq!(a.score, -b.score);
            if a.score != 0.0 {
                assert_ne!(a.member, b.member);
            }
        }
        model.decision_threshold = f64::INFINITY;
        assert!(ds.rows.iter().all(|r| !model.classify(&r.features).unwrap().member));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = train_attack(
            &separable(),
            FeatureMode::POnly,
            &AttackHyperParams {
                epochs: 5,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attack.json");
        model.save(&path).unwrap();
        assert_eq!(AttackModel::load(&path).unwrap(), model);
    }
}
