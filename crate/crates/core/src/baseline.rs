//! Augmentation-consistency baseline adapted to user level.
//!
//! A record is scored by how tightly its augmented views cluster in the
//! victim's embedding space (mean pairwise cosine similarity). Each sample of
//! a user votes member when its score exceeds a threshold fitted on shadow
//! data; the user verdict is the majority, with ties going to non-member.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, UserCluster};
use crate::embedding::Encoder;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Feature-vector analogues of image augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Augmentation {
    GaussianNoise { sigma: f64 },
    CoordinateDropout { rate: f64 },
    RandomScaling { min: f64, max: f64 },
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Augmentation::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Augmentation::CoordinateDropout { rate } => (0.0..1.0).contains(&rate),
            Augmentation::RandomScaling { min, max } => min > 0.0 && min <= max && max.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("augmentation out of range: {self:?}")))
        }
    }

    fn apply(&self, x: &mut [f64], rng: &mut Rng) {
        match *self {
            Augmentation::GaussianNoise { sigma } => {
                if sigma > 0.0 {
                    let noise = Normal::new(0.0, sigma).expect("validated sigma");
                    x.iter_mut().for_each(|v| *v += noise.sample(rng));
                }
            }
            Augmentation::CoordinateDropout { rate } => {
                if rate > 0.0 {
                    x.iter_mut().for_each(|v| {
                        if rng.random::<f64>() < rate {
                            *v = 0.0;
                        }
                    });
                }
            }
            Augmentation::RandomScaling { min, max } => {
                let s = if min == max { min } else { rng.random_range(min..=max) };
                x.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// Applies `ops` in order to a copy of `features`.
pub fn augment(features: &[f64], ops: &[Augmentation], rng: &mut Rng) -> Vec<f64> {
    let mut x = features.to_vec();
    for op in ops {
        op.apply(&mut x, rng);
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// The attacker uses the victim's own training-time augmentations.
    FullKnowledge,
    /// The attacker falls back to [`AugmentationSpec::default_ops`].
    UnknownAugmentations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub ops: Vec<Augmentation>,
    pub n_views: usize,
    pub knowledge_mode: KnowledgeMode,
}

impl AugmentationSpec {
    /// Stand-in augmentation set used when the victim's is unknown.
    pub fn default_ops() -> Vec<Augmentation> {
        vec![
            Augmentation::RandomScaling { min: 0.8, max: 1.2 },
            Augmentation::CoordinateDropout { rate: 0.1 },
            Augmentation::GaussianNoise { sigma: 0.1 },
        ]
    }

    /// Spec for attacking `victim` under `mode`.
    pub fn for_victim(victim: &Encoder, mode: KnowledgeMode, n_views: usize) -> Self {
        let ops = match mode {
            KnowledgeMode::FullKnowledge => victim.config.augmentations.clone(),
            KnowledgeMode::UnknownAugmentations => Self::default_ops(),
        };
        Self {
            ops,
            n_views,
            knowledge_mode: mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidParameter("n_views must be >= 2".into()));
        }
        self.ops.iter().try_for_each(Augmentation::validate)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean pairwise cosine similarity among `n_views` augmented embeddings.
pub fn record_score(victim: &Encoder, sample: &Sample, spec: &AugmentationSpec, seed: u64) -> Result<f64> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let views = (0..spec.n_views)
        .map(|_| victim.embed_features(&augment(&sample.features, &spec.ops, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    mean_pairwise_cosine(&views)
}

pub fn mean_pairwise_cosine(views: &[Vec<f64>]) -> Result<f64> {
    let n = views.len();
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two views".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += cosine(&views[i], &views[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Per-sample scores of a user; each sample gets its own derived stream.
pub fn user_scores(victim: &Encoder, cluster: &UserCluster, spec: &AugmentationSpec, seed: u64) -> Result<Vec<f64>> {
    cluster
        .samples
        .iter()
        .map(|s| record_score(victim, s, spec, rng::derive_tagged(seed, &s.sample_id)))
        .collect()
}

/// Majority vote; an exact tie is a non-member verdict.
pub fn majority(votes: impl IntoIterator<Item = bool>) -> bool {
    let (yes, total) = votes
        .into_iter()
        .fold((0usize, 0usize), |(y, t), v| (y + usize::from(v), t + 1));
    2 * yes > total
}

pub fn verdict_from_scores(scores: &[f64], threshold: f64) -> bool {
    majority(scores.iter().map(|&s| s > threshold))
}

pub fn user_verdict(
    victim: &Encoder,
    cluster: &UserCluster,
    spec: &AugmentationSpec,
    threshold: f64,
    seed: u64,
) -> Result<bool> {
    if cluster.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "user {} has no samples",
            cluster.user_id
        )));
    }
    Ok(verdict_from_scores(
        &user_scores(victim, cluster, spec, seed)?,
        threshold,
    ))
}

/// Threshold maximizing user-level accuracy on labelled shadow users. Each
/// entry is `(per-sample scores, is_member)`. Candidates are every observed
/// score plus one value below all of them; the first best candidate wins.
pub fn fit_threshold(users: &[(Vec<f64>, bool)]) -> Result<f64> {
    let mut candidates: Vec<f64> = users.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no shadow scores to fit a threshold on".into()));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.insert(0, candidates[0] - 1.0);
    let mut best = (candidates[0], usize::MIN);
    for &t in &candidates {
        let correct = users
            .iter()
            .filter(|(scores, member)| verdict_from_scores(scores, t) == *member)
            .count();
        if correct > best.1 {
            best = (t, correct);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::UserId;
    use crate::nn::DenseNet;

    fn sample(features: Vec<f64>) -> Sample {
        Sample {
            user_id: UserId::from("u"),
            sample_id: "s".into(),
            features,
        }
    }

    #[test]
    fn noiseless_views_score_one() {
        let enc = Encoder::from_net("e", DenseNet::mlp(&[5, 8, 4], 3).unwrap()).unwrap();
        let spec = AugmentationSpec {
            ops: vec![
                Augmentation::GaussianNoise { sigma: 0.0 },
                Augmentation::CoordinateDropout { rate: 0.0 },
                Augmentation::RandomScaling { min: 1.0, max: 1.0 },
            ],
            n_views: 5,
            knowledge_mode: KnowledgeMode::FullKnowledge,
        };
        let s = record_score(&enc, &sample(vec![0.5, -1.0, 2.0, 0.1, 0.3]), &spec, 1).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_noise_in_high_dimension_scores_near_zero() {
        // Independent isotropic Gaussian vectors in d dims have cosine with
        // mean 0 and std about 1/sqrt(d).
        let d = 400;
        let enc = Encoder::identity(d).unwrap();
        let spec = AugmentationSpec {
            ops: vec![Augmentation::GaussianNoise { sigma: 1000.0 }],
            n_views: 10,
            knowledge_mode: KnowledgeMode::UnknownAugmentations,
        };
        let s = record_score(&enc, &sample(vec![1.0; d]), &spec, 4).unwrap();
        assert!(s.abs() < 0.05, "score {s}");
    }

    #[test]
    fn score_equals_double_loop_average() {
        let enc = Encoder::from_net("e", DenseNet::mlp(&[3, 6, 3], 8).unwrap()).unwrap();
        let spec = AugmentationSpec {
            ops: AugmentationSpec::default_ops(),
            n_views: 6,
            knowledge_mode: KnowledgeMode::UnknownAugmentations,
        };
        let x = sample(vec![1.0, 2.0, -0.5]);
        let mut rng = rng::seeded(21);
        let views: Vec<Vec<f64>> = (0..6)
            .map(|_| enc.embed_features(&augment(&x.features, &spec.ops, &mut rng)).unwrap())
            .collect();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..6 {
            for j in 0..6 {
                if i < j {
                    let dot: f64 = views[i].iter().zip(&views[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = views[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nj: f64 = views[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                    total += dot / (ni * nj);
                    count += 1;
                }
            }
        }
        let s = record_score(&enc, &x, &spec, 21).unwrap();
        assert!((s - total / count as f64).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let enc = Encoder::identity(2).unwrap();
        let spec = AugmentationSpec {
            ops: vec![],
            n_views: 2,
            knowledge_mode: KnowledgeMode::FullKnowledge,
        };
        assert!(matches!(
            record_score(&enc, &sample(vec![0.0, 0.0]), &spec, 0),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn majority_rules() {
        assert!(majority([true, true, true]));
        assert!(!majority([true, false, false]));
        assert!(!majority([true, false]));
        assert!(!majority(Vec::<bool>::new()));
    }

    #[test]
    fn threshold_fit_separates() {
        let users = vec![
            (vec![0.9, 0.95, 0.8], true),
            (vec![0.85, 0.99], true),
            (vec![0.2, 0.3, 0.1], false),
            (vec![0.4, 0.1], false),
        ];
        let t = fit_threshold(&users).unwrap();
        for (s, m) in &users {
            assert_eq!(verdict_from_scores(s, t), *m);
        }
    }
}
