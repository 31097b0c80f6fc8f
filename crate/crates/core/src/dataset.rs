//! User-labelled samples, the three-way membership partition, synthetic
//! user clusters and CSV IO.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user_id: UserId,
    pub sample_id: String,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserCluster {
    pub user_id: UserId,
    pub samples: Vec<Sample>,
}

impl UserCluster {
    pub fn new(user_id: UserId, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter(format!("user {user_id} has no samples")));
        }
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.user_id != user_id {
                return Err(Error::InvalidParameter(format!(
                    "sample {} belongs to {} not {user_id}",
                    s.sample_id, s.user_id
                )));
            }
            if !ids.insert(&s.sample_id) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate sample_id {} for user {user_id}",
                    s.sample_id
                )));
            }
        }
        Ok(Self { user_id, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }
}

/// Samples grouped by user, ordered by user id.
pub type UserSamples = BTreeMap<UserId, Vec<Sample>>;

/// Clusters from a per-user map, in user-id order.
pub fn clusters_from_map(map: &UserSamples) -> Vec<UserCluster> {
    map.iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(u, s)| UserCluster {
            user_id: u.clone(),
            samples: s.clone(),
        })
        .collect()
}

/// The four-way partition: training members, non-training members (same users,
/// disjoint samples), non-members and the attacker's shadow pool.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MembershipSplit {
    pub training_members: UserSamples,
    pub nontraining_members: UserSamples,
    pub nonmembers: UserSamples,
    pub shadow_pool: UserSamples,
}

impl MembershipSplit {
    pub fn member_users(&self) -> BTreeSet<&UserId> {
        self.training_members.keys().collect()
    }

    pub fn nonmember_users(&self) -> BTreeSet<&UserId> {
        self.nonmembers.keys().collect()
    }

    pub fn shadow_clusters(&self) -> Vec<UserCluster> {
        clusters_from_map(&self.shadow_pool)
    }

    /// Checks every structural invariant of the partition.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.training_members.keys().collect();
        let held: BTreeSet<_> = self.nontraining_members.keys().collect();
        if train != held {
            return Err(Error::InvalidParameter(
                "training and non-training member user sets differ".into(),
            ));
        }
        for (u, samples) in &self.training_members {
            let held_ids: BTreeSet<_> = self.nontraining_members[u].iter().map(|s| &s.sample_id).collect();
            if samples.iter().any(|s| held_ids.contains(&s.sample_id)) {
                return Err(Error::InvalidParameter(format!("member {u} has overlapping samples")));
            }
        }
        let nonmembers: BTreeSet<_> = self.nonmembers.keys().collect();
        let shadow: BTreeSet<_> = self.shadow_pool.keys().collect();
        if !train.is_disjoint(&nonmembers) {
            return Err(Error::InvalidParameter("member and non-member users overlap".into()));
        }
        if !shadow.is_disjoint(&train) || !shadow.is_disjoint(&nonmembers) {
            return Err(Error::InvalidParameter("shadow pool overlaps victim users".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> SplitManifest {
        fn ids(map: &UserSamples) -> BTreeMap<String, Vec<String>> {
            map.iter()
                .map(|(u, s)| (u.0.clone(), s.iter().map(|x| x.sample_id.clone()).collect()))
                .collect()
        }
        SplitManifest {
            training_members: ids(&self.training_members),
            nontraining_members: ids(&self.nontraining_members),
            nonmembers: ids(&self.nonmembers),
            shadow_pool: ids(&self.shadow_pool),
        }
    }
}

/// Replayable record of a split: user ids mapped to sample ids per part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub training_members: BTreeMap<String, Vec<String>>,
    pub nontraining_members: BTreeMap<String, Vec<String>>,
    pub nonmembers: BTreeMap<String, Vec<String>>,
    pub shadow_pool: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    /// Rebuilds the split from the original dataset.
    pub fn resolve(&self, data: &[UserCluster]) -> Result<MembershipSplit> {
        let index: BTreeMap<(&str, &str), &Sample> = data
            .iter()
            .flat_map(|c| c.samples.iter())
            .map(|s| ((s.user_id.0.as_str(), s.sample_id.as_str()), s))
            .collect();
        let part = |ids: &BTreeMap<String, Vec<String>>| -> Result<UserSamples> {
            ids.iter()
                .map(|(u, sids)| {
                    let samples = sids
                        .iter()
                        .map(|sid| {
                            index
                                .get(&(u.as_str(), sid.as_str()))
                                .map(|s| (*s).clone())
                                .ok_or_else(|| {
                                    Error::InvalidParameter(format!("manifest sample {u}/{sid} not in dataset"))
                                })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((UserId(u.clone()), samples))
                })
                .collect()
        };
        let split = MembershipSplit {
            training_members: part(&self.training_members)?,
            nontraining_members: part(&self.nontraining_members)?,
            nonmembers: part(&self.nonmembers)?,
            shadow_pool: part(&self.shadow_pool)?,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Number of a member's samples that go to training: `ceil(fraction * m)`,
/// clamped so both member parts are non-empty.
pub fn training_count(m: usize, within_user_split: f64) -> usize {
    let n = (within_user_split * m as f64).ceil() as usize;
    n.clamp(1, m.saturating_sub(1).max(1))
}

/// Randomly partitions users into members, non-members and the shadow pool,
/// and splits each member's samples into training and non-training parts.
pub fn partition(
    dataset: &[UserCluster],
    n_members: usize,
    n_nonmembers: usize,
    within_user_split: f64,
    seed: u64,
) -> Result<MembershipSplit> {
    if !(within_user_split > 0.0 && within_user_split <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "within_user_split {within_user_split} must be in (0, 1]"
        )));
    }
    if dataset.len() < n_members + n_nonmembers {
        return Err(Error::Sizing(format!(
            "need {} users ({n_members} members + {n_nonmembers} non-members), dataset has {}",
            n_members + n_nonmembers,
            dataset.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let mut members = Vec::with_capacity(n_members);
    let mut rest = Vec::with_capacity(dataset.len());
    for idx in order {
        if members.len() < n_members && dataset[idx].len() >= 2 {
            members.push(idx);
        } else {
            rest.push(idx);
        }
    }
    if members.len() < n_members {
        return Err(Error::Sizing(format!(
            "only {} users have the 2 samples a member needs, {n_members} requested",
            members.len()
        )));
    }

    let mut split = MembershipSplit::default();
    for &idx in &members {
        let cluster = &dataset[idx];
        let mut samples = cluster.samples.clone();
        samples.shuffle(&mut rng);
        let held = samples.split_off(training_count(samples.len(), within_user_split));
        split.training_members.insert(cluster.user_id.clone(), samples);
        split.nontraining_members.insert(cluster.user_id.clone(), held);
    }
    for (i, &idx) in rest.iter().enumerate() {
        let cluster = &dataset[idx];
        let target = if i < n_nonmembers {
            &mut split.nonmembers
        } else {
            &mut split.shadow_pool
        };
        target.insert(cluster.user_id.clone(), cluster.samples.clone());
    }
    Ok(split)
}

/// Parameters for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_users: usize,
    pub samples_per_user: usize,
    /// When set, each user's sample count is uniform in
    /// `[min_samples_per_user, samples_per_user]`.
    pub min_samples_per_user: Option<usize>,
    pub dim: usize,
    pub cluster_spread: f64,
    pub user_separation: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_users: 160,
            samples_per_user: 30,
            min_samples_per_user: None,
            dim: 20,
            cluster_spread: 0.5,
            user_separation: 8.0,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.samples_per_user == 0 {
            return Err(Error::InvalidParameter("counts must be >= 1".into()));
        }
        if let Some(min) = self.min_samples_per_user {
            if min == 0 || min > self.samples_per_user {
                return Err(Error::InvalidParameter(
                    "min_samples_per_user must be in [1, samples_per_user]".into(),
                ));
            }
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter("dim must be >= 2".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidParameter("cluster_spread must be finite and >= 0".into()));
        }
        if !(self.user_separation > 0.0 && self.user_separation.is_finite()) {
            return Err(Error::InvalidParameter("user_separation must be positive".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian user clusters. User centers are drawn from
/// `N(0, s^2 I)` with `s = user_separation / sqrt(2 dim)`, so the expected
/// squared distance between two centers is `user_separation^2`.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Vec<UserCluster>> {
    params.validate()?;
    let mut rng = rng::seeded(seed);
    let center_std = params.user_separation / (2.0 * params.dim as f64).sqrt();
    let centers = Normal::new(0.0, center_std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noise = Normal::new(0.0, params.cluster_spread).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let width = params.n_users.to_string().len();

    (0..params.n_users)
        .map(|u| {
            let user_id = UserId(format!("u{u:0width$}"));
            let center: Vec<f64> = (0..params.dim).map(|_| centers.sample(&mut rng)).collect();
            let m = match params.min_samples_per_user {
                Some(min) => rng.random_range(min..=params.samples_per_user),
                None => params.samples_per_user,
            };
            let samples = (0..m)
                .map(|i| Sample {
                    user_id: user_id.clone(),
                    sample_id: format!("{user_id}-s{i}"),
                    features: center.iter().map(|c| c + noise.sample(&mut rng)).collect(),
                })
                .collect();
            UserCluster::new(user_id, samples)
        })
        .collect()
}

const CSV_FIXED: [&str; 2] = ["user_id", "sample_id"];

/// Reads `user_id,sample_id,f0,...,f{d-1}`. Users keep first-appearance order.
pub fn load_csv(path: &Path) -> Result<Vec<UserCluster>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<UserCluster>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        row: 1,
        message: e.to_string(),
    })?;
    let dim = validate_header(header)?;

    let mut order: Vec<UserId> = Vec::new();
    let mut groups: BTreeMap<UserId, Vec<Sample>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        // Row 1 is the header.
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", dim + 2, record.len()),
            });
        }
        let features = record
            .iter()
            .skip(2)
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        message: format!("non-numeric feature {field:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let user_id = UserId(record[0].to_string());
        if !groups.contains_key(&user_id) {
            order.push(user_id.clone());
        }
        groups.entry(user_id.clone()).or_default().push(Sample {
            user_id,
            sample_id: record[1].to_string(),
            features,
        });
    }
    order
        .into_iter()
        .map(|u| {
            let samples = groups.remove(&u).unwrap_or_default();
            UserCluster::new(u, samples).map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

fn validate_header(header: &csv::StringRecord) -> Result<usize> {
    let bad = |message: String| Error::Parse { row: 1, message };
    if header.len() < 2 + 1 {
        return Err(bad(format!(
            "header needs user_id,sample_id and at least one feature, got {header:?}"
        )));
    }
    for (i, name) in CSV_FIXED.iter().enumerate() {
        if &header[i] != *name {
            return Err(bad(format!("column {i} must be {name:?}, found {:?}", &header[i])));
        }
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(bad(format!("feature column {j} must be \"f{j}\", found {name:?}")));
        }
    }
    Ok(header.len() - 2)
}

pub fn save_csv(data: &[UserCluster], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(data, file)
}

/// Writes features with shortest round-trip float formatting.
pub fn write_csv<W: std::io::Write>(data: &[UserCluster], writer: W) -> Result<()> {
    let dim = data.first().map(|c| c.dim()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::InvalidParameter(
            "cannot infer feature dimension from an empty dataset".into(),
        ));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|j| format!("f{j}")));
    wtr.write_record(&header).map_err(csv_write_err)?;
    for cluster in data {
        for s in &cluster.samples {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.features.len(),
                });
            }
            let mut rec = vec![s.user_id.0.clone(), s.sample_id.clone()];
            rec.extend(s.features.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&rec).map_err(csv_write_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Parse {
        row: 0,
        message: e.to_string(),
    }
}

/// Writes a header-only CSV for a known dimension.
pub fn write_empty_csv<W: std::io::Write>(dim: usize, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|j| format!("f{j}")));
    wtr.write_record(&header).map_err(csv_write_err)?;
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n_users: usize, per_user: usize) -> Vec<UserCluster> {
        (0..n_users)
            .map(|u| {
                let uid = UserId(format!("user{u}"));
                let samples = (0..per_user)
                    .map(|i| Sample {
                        user_id: uid.clone(),
                        sample_id: format!("{u}-{i}"),
                        features: vec![u as f64, i as f64],
                    })
                    .collect();
                UserCluster::new(uid, samples).unwrap()
            })
            .collect()
    }

    #[test]
    fn four_users_two_samples() {
        let split = partition(&tiny(4, 2), 1, 1, 0.5, 7).unwrap();
        split.validate().unwrap();
        assert_eq!(split.training_members.len(), 1);
        let (u, t) = split.training_members.iter().next().unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(split.nontraining_members[u].len(), 1);
        assert_eq!(split.nonmembers.len(), 1);
        assert_eq!(split.shadow_pool.len(), 2);
    }

    #[test]
    fn partition_is_deterministic() {
        let data = tiny(10, 4);
        assert_eq!(
            partition(&data, 3, 3, 0.5, 11).unwrap(),
            partition(&data, 3, 3, 0.5, 11).unwrap()
        );
    }

    #[test]
    fn exact_sizing_leaves_empty_shadow_pool() {
        let params = SyntheticParams {
            n_users: 300,
            samples_per_user: 4,
            dim: 2,
            ..Default::default()
        };
        let data = generate_synthetic(&params, 0).unwrap();
        let split = partition(&data, 150, 150, 0.5, 0).unwrap();
        split.validate().unwrap();
        assert_eq!(split.training_members.len(), 150);
        assert_eq!(split.nonmembers.len(), 150);
        assert!(split.shadow_pool.is_empty());
    }

    #[test]
    fn insufficient_users_or_samples() {
        assert!(matches!(partition(&tiny(3, 2), 2, 2, 0.5, 0), Err(Error::Sizing(_))));
        assert!(matches!(partition(&tiny(4, 1), 1, 1, 0.5, 0), Err(Error::Sizing(_))));
    }

    #[test]
    fn training_count_clamps() {
        assert_eq!(training_count(2, 0.5), 1);
        assert_eq!(training_count(5, 0.5), 3);
        assert_eq!(training_count(4, 1.0), 3);
        assert_eq!(training_count(10, 0.01), 1);
    }

    #[test]
    fn zero_spread_samples_equal_center() {
        let params = SyntheticParams {
            n_users: 3,
            samples_per_user: 5,
            cluster_spread: 0.0,
            ..Default::default()
        };
        for c in generate_synthetic(&params, 1).unwrap() {
            assert!(c.samples.iter().all(|s| s.features == c.samples[0].features));
        }
    }

    #[test]
    fn within_user_std_matches_spread() {
        let params = SyntheticParams {
            n_users: 4,
            samples_per_user: 400,
            dim: 5,
            cluster_spread: 0.7,
            user_separation: 3.0,
            ..Default::default()
        };
        for c in generate_synthetic(&params, 2).unwrap() {
            let n = c.len() as f64;
            for j in 0..params.dim {
                let mean = c.samples.iter().map(|s| s.features[j]).sum::<f64>() / n;
                let var = c.samples.iter().map(|s| (s.features[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let std = var.sqrt();
                assert!((std - 0.7).abs() < 0.07, "std {std}");
            }
        }
    }

    #[test]
    fn seeds_differ_but_are_reproducible() {
        let p = SyntheticParams::default();
        let a = generate_synthetic(&p, 1).unwrap();
        assert_eq!(a, generate_synthetic(&p, 1).unwrap());
        assert_ne!(
            a[0].samples[0].features,
            generate_synthetic(&p, 2).unwrap()[0].samples[0].features
        );
    }

    #[test]
    fn empty_body_csv() {
        let data = read_csv("user_id,sample_id,f0,f1\n".as_bytes()).unwrap();
        assert!(data.is_empty());
    }

    #[test]
    fn handwritten_csv() {
        let text = "user_id,sample_id,f0,f1\nalice,a1,1.0,2.0\nbob,b1,-1,0.5\nalice,a2,3,4\n";
        let data = read_csv(text.as_bytes()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].user_id, UserId::from("alice"));
        assert_eq!(data[0].samples[1].features, vec![3.0, 4.0]);
        assert_eq!(data[1].samples[0].features, vec![-1.0, 0.5]);
    }

    #[test]
    fn malformed_csv_reports_row() {
        let bad_header = "user,sample_id,f0\n";
        assert!(matches!(
            read_csv(bad_header.as_bytes()),
            Err(Error::Parse { row: 1, .. })
        ));
        let ragged = "user_id,sample_id,f0,f1\na,1,1,2\na,2,1\n";
        assert!(matches!(read_csv(ragged.as_bytes()), Err(Error::Parse { row: 3, .. })));
        let nonnum = "user_id,sample_id,f0,f1\na,1,1,2\na,2,1,x\nb,1,0,0\n";
        assert!(matches!(read_csv(nonnum.as_bytes()), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn manifest_resolves_to_same_split() {
        let data = tiny(8, 4);
        let split = partition(&data, 3, 2, 0.5, 5).unwrap();
        let back = split.manifest().resolve(&data).unwrap();
        assert_eq!(split, back);
    }
}
