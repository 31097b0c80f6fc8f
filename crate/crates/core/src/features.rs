//! Cluster-compactness features of a user's embeddings.
//!
//! - `c_u`: mean L2 distance of the embeddings to their centroid.
//! - `p_u`: mean L2 distance over all unordered pairs.
//!
//! For any point set with at least two points, `c_u <= p_u <= 2 c_u`.

use std::io::{Read, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, UserCluster, UserId};
use crate::embedding::{euclidean, Encoder};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFeatures {
    pub user_id: UserId,
    pub encoder_id: String,
    pub k_used: usize,
    pub c_u: f64,
    pub p_u: f64,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    if points.len() < 2 {
        return Err(Error::InsufficientSamples {
            user: "<embeddings>".into(),
            needed: 2,
            available: points.len(),
        });
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite embedding value".into()));
        }
    }
    Ok(dim)
}

pub fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    let mut c = vec![0.0; dim];
    for p in points {
        for (ci, pi) in c.iter_mut().zip(p) {
            *ci += pi;
        }
    }
    let n = points.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Average distance to the cluster center.
pub fn center_distance(points: &[Vec<f64>]) -> Result<f64> {
    check_points(points)?;
    let center = centroid(points);
    Ok(points.iter().map(|p| euclidean(p, &center)).sum::<f64>() / points.len() as f64)
}

/// Average distance over all `k (k - 1) / 2` unordered pairs.
pub fn pairwise_distance(points: &[Vec<f64>]) -> Result<f64> {
    check_points(points)?;
    let k = points.len();
    let mut total = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            total += euclidean(a, b);
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Seeded uniform subsample of exactly `k` samples, without replacement.
/// Keeps the original relative order; returns everything when `len == k`.
pub fn subsample<'a>(user: &UserId, samples: &'a [Sample], k: usize, seed: u64) -> Result<Vec<&'a Sample>> {
    if k < 2 || samples.len() < k {
        return Err(Error::InsufficientSamples {
            user: user.0.clone(),
            needed: k.max(2),
            available: samples.len(),
        });
    }
    if samples.len() == k {
        return Ok(samples.iter().collect());
    }
    let mut rng = rng::seeded(seed);
    let mut picked = index::sample(&mut rng, samples.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &samples[i]).collect())
}

/// Features from `k` samples of `samples`, all belonging to `user`.
pub fn extract_from_samples(
    encoder: &Encoder,
    user: &UserId,
    samples: &[Sample],
    k: usize,
    seed: u64,
) -> Result<AttackFeatures> {
    let chosen = subsample(user, samples, k, seed)?;
    let embeddings = chosen.iter().map(|s| encoder.embed(s)).collect::<Result<Vec<_>>>()?;
    Ok(AttackFeatures {
        user_id: user.clone(),
        encoder_id: encoder.id.clone(),
        k_used: k,
        c_u: center_distance(&embeddings)?,
        p_u: pairwise_distance(&embeddings)?,
    })
}

pub fn extract_features(encoder: &Encoder, cluster: &UserCluster, k: usize, seed: u64) -> Result<AttackFeatures> {
    extract_from_samples(encoder, &cluster.user_id, &cluster.samples, k, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
    Unknown,
}

impl Label {
    pub fn is_member(self) -> bool {
        self == Label::Member
    }
}

/// One line of the feature cache: `user_id,encoder_id,k_used,c_u,p_u,label`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub user_id: String,
    pub encoder_id: String,
    pub k_used: usize,
    pub c_u: f64,
    pub p_u: f64,
    pub label: Label,
}

impl FeatureRecord {
    pub fn new(f: &AttackFeatures, label: Label) -> Self {
        Self {
            user_id: f.user_id.0.clone(),
            encoder_id: f.encoder_id.clone(),
            k_used: f.k_used,
            c_u: f.c_u,
            p_u: f.p_u,
            label,
        }
    }
}

pub fn write_feature_cache<W: Write>(records: &[FeatureRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        wtr.serialize(r).map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<feature cache>", e))?;
    Ok(())
}

pub fn read_feature_cache<R: Read>(reader: R) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                row: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
