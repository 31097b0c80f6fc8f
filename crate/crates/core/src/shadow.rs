//! Shadow encoders over the attacker's pool and the labelled attack dataset.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition, MembershipSplit, Sample, UserCluster, UserId, UserSamples};
use crate::embedding::{train_encoder, Encoder, TrainingConfig};
use crate::error::{Error, Result};
use crate::features::{extract_from_samples, subsample, AttackFeatures, Label};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowConfig {
    pub n_shadows: usize,
    pub member_users: usize,
    pub nonmember_users: usize,
    pub within_user_split: f64,
    /// Samples per user used for features.
    pub k: usize,
    /// Fraction of each member's feature samples drawn from training members.
    pub training_access: f64,
    pub master_seed: u64,
    pub training: TrainingConfig,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            n_shadows: 10,
            member_users: 20,
            nonmember_users: 20,
            within_user_split: 0.5,
            k: 10,
            training_access: 0.0,
            master_seed: 0,
            training: TrainingConfig::default(),
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_shadows == 0 || self.member_users == 0 || self.nonmember_users == 0 {
            return Err(Error::InvalidParameter("shadow counts must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidParameter("k must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.training_access) {
            return Err(Error::InvalidParameter("training_access must be in [0, 1]".into()));
        }
        self.training.validate()
    }

    fn shadow_seed(&self, index: usize) -> u64 {
        rng::derive(self.master_seed, index as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackRow {
    pub features: AttackFeatures,
    pub label: Label,
    pub shadow_index: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttackDataset {
    pub rows: Vec<AttackRow>,
}

#[derive(Serialize, Deserialize)]
struct AttackCsvRow {
    user_id: String,
    encoder_id: String,
    k_used: usize,
    c_u: f64,
    p_u: f64,
    label: Label,
    shadow_index: usize,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    /// Rows sorted by shadow index, then user id.
    pub fn normalize(&mut self) {
        self.rows
            .sort_by(|a, b| (a.shadow_index, &a.features.user_id).cmp(&(b.shadow_index, &b.features.user_id)));
    }

    pub fn filter(&self, keep: impl Fn(&AttackRow) -> bool) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for r in &self.rows {
            wtr.serialize(AttackCsvRow {
                user_id: r.features.user_id.0.clone(),
                encoder_id: r.features.encoder_id.clone(),
                k_used: r.features.k_used,
                c_u: r.features.c_u,
                p_u: r.features.p_u,
                label: r.label,
                shadow_index: r.shadow_index,
            })
            .map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })?;
        }
        wtr.flush().map_err(|e| Error::io("<attack dataset>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let rows = rdr
            .deserialize::<AttackCsvRow>()
            .enumerate()
            .map(|(i, r)| {
                let r = r.map_err(|e| Error::Parse {
                    row: i + 2,
                    message: e.to_string(),
                })?;
                if r.label == Label::Unknown {
                    return Err(Error::Parse {
                        row: i + 2,
                        message: "attack rows need a member/nonmember label".into(),
                    });
                }
                Ok(AttackRow {
                    features: AttackFeatures {
                        user_id: UserId(r.user_id),
                        encoder_id: r.encoder_id,
                        k_used: r.k_used,
                        c_u: r.c_u,
                        p_u: r.p_u,
                    },
                    label: r.label,
                    shadow_index: r.shadow_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }
}

/// Independent splits of the shadow pool, one per shadow, seeded from
/// `master_seed + index`. Users may recur across shadows.
pub fn build_shadow_splits(shadow_pool: &[UserCluster], config: &ShadowConfig) -> Result<Vec<MembershipSplit>> {
    config.validate()?;
    (0..config.n_shadows)
        .map(|i| {
            partition(
                shadow_pool,
                config.member_users,
                config.nonmember_users,
                config.within_user_split,
                config.shadow_seed(i),
            )
            .map_err(|e| Error::Shadow {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Per member user, a pool of exactly `k` samples: `floor(proportion * k)`
/// from training members and the rest from non-training members.
pub fn mix_training_access(split: &MembershipSplit, proportion: f64, k: usize, seed: u64) -> Result<UserSamples> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidParameter(format!(
            "proportion {proportion} must be in [0, 1]"
        )));
    }
    let from_training = (proportion * k as f64).floor() as usize;
    let from_held = k - from_training;
    split
        .training_members
        .iter()
        .map(|(user, train)| {
            let held = split.nontraining_members.get(user).map(Vec::as_slice).unwrap_or(&[]);
            let mut pool: Vec<Sample> = Vec::with_capacity(k);
            pool.extend(take(
                user,
                train,
                from_training,
                rng::derive_tagged(seed, &format!("t/{user}")),
            )?);
            pool.extend(take(
                user,
                held,
                from_held,
                rng::derive_tagged(seed, &format!("h/{user}")),
            )?);
            Ok((user.clone(), pool))
        })
        .collect()
}

fn take(user: &UserId, samples: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    match n {
        0 => Ok(Vec::new()),
        _ if samples.len() < n => Err(Error::Sizing(format!(
            "user {user} has {} samples in this part, {n} required",
            samples.len()
        ))),
        1 => {
            use rand::seq::IndexedRandom;
            let mut r = rng::seeded(seed);
            Ok(vec![samples.choose(&mut r).cloned().expect("non-empty")])
        }
        _ => Ok(subsample(user, samples, n, seed)?.into_iter().cloned().collect()),
    }
}

/// Labelled feature rows for one trained shadow. Member rows come from the
/// training-access mix; non-member rows from the shadow's non-members.
pub fn shadow_rows(
    encoder: &Encoder,
    split: &MembershipSplit,
    index: usize,
    k: usize,
    training_access: f64,
    seed: u64,
) -> Result<Vec<AttackRow>> {
    let member_pools = mix_training_access(split, training_access, k, rng::derive_tagged(seed, "mix"))?;
    let mut rows = Vec::with_capacity(member_pools.len() + split.nonmembers.len());
    for (label, pools) in [(Label::Member, &member_pools), (Label::Nonmember, &split.nonmembers)] {
        for (user, samples) in pools {
            let features = extract_from_samples(encoder, user, samples, k, rng::derive_tagged(seed, &user.0))?;
            rows.push(AttackRow {
                features,
                label,
                shadow_index: index,
            });
        }
    }
    Ok(rows)
}

/// Trains one shadow per split (same architecture as the victim) and
/// assembles the attack dataset. Shadows run on the current rayon pool;
/// output order does not depend on scheduling.
pub fn run_shadows(splits: &[MembershipSplit], config: &ShadowConfig) -> Result<(Vec<Encoder>, AttackDataset)> {
    config.validate()?;
    let results: Vec<Result<(Encoder, Vec<AttackRow>)>> = splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| {
            let seed = config.shadow_seed(i);
            let training = TrainingConfig {
                seed: rng::derive_tagged(seed, "train"),
                ..config.training.clone()
            };
            let tag = |e: Error| Error::Shadow {
                index: i,
                source: Box::new(e),
            };
            let encoder = train_encoder(format!("shadow-{i}"), &split.training_members, &training).map_err(tag)?;
            let rows = shadow_rows(
                &encoder,
                split,
                i,
                config.k,
                config.training_access,
                rng::derive_tagged(seed, "features"),
            )
            .map_err(tag)?;
            Ok((encoder, rows))
        })
        .collect();

    let mut encoders = Vec::with_capacity(splits.len());
    let mut dataset = AttackDataset::default();
    for r in results {
        let (enc, rows) = r?;
        encoders.push(enc);
        dataset.rows.extend(rows);
    }
    dataset.normalize();
    Ok((encoders, dataset))
}

/// Re-extracts rows from already trained shadows, e.g. at a different
/// training-access proportion.
pub fn rebuild_dataset(
    encoders: &[Encoder],
    splits: &[MembershipSplit],
    config: &ShadowConfig,
    training_access: f64,
) -> Result<AttackDataset> {
    let rows: Vec<Result<Vec<AttackRow>>> = encoders
        .par_iter()
        .zip(splits.par_iter())
        .enumerate()
        .map(|(i, (enc, split))| {
            shadow_rows(
                enc,
                split,
                i,
                config.k,
                training_access,
                rng::derive_tagged(config.shadow_seed(i), "features"),
            )
            .map_err(|e| Error::Shadow {
                index: i,
                source: Box::new(e),
            })
        })
        .collect();
    let mut dataset = AttackDataset::default();
    for r in rows {
        dataset.rows.extend(r?);
    }
    dataset.normalize();
    Ok(dataset)
}
