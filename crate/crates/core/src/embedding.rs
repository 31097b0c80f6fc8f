//! Metric-embedding encoders trained with the soft-margin batch-hard triplet
//! loss over PK batches (P identities, K samples each).

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::baseline::{self, Augmentation};
use crate::dataset::{Sample, UserCluster, UserId, UserSamples};
use crate::error::{Error, Result};
use crate::nn::{DenseNet, Gradients, NetCheckpoint, Sgd};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// P: identities per batch.
    pub identities_per_batch: usize,
    /// K: samples per identity.
    pub samples_per_identity: usize,
    pub seed: u64,
    /// Applied to every batch sample during training. Empty by default.
    pub augmentations: Vec<Augmentation>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            embedding_dim: 8,
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            identities_per_batch: 8,
            samples_per_identity: 4,
            seed: 0,
            augmentations: Vec::new(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::InvalidParameter("embedding_dim must be >= 2".into()));
        }
        if self.identities_per_batch < 2 {
            return Err(Error::InvalidParameter("identities_per_batch must be >= 2".into()));
        }
        if self.samples_per_identity < 2 {
            return Err(Error::InvalidParameter("samples_per_identity must be >= 2".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        for a in &self.augmentations {
            a.validate()?;
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub id: String,
    pub net: DenseNet,
    pub config: TrainingConfig,
    /// Mean batch loss over the final epoch, if any training happened.
    pub final_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    encoder_id: String,
    network: NetCheckpoint,
    training_config: TrainingConfig,
    final_loss: Option<f64>,
}

impl Encoder {
    /// Wraps an arbitrary network as a black-box encoder.
    pub fn from_net(id: impl Into<String>, net: DenseNet) -> Result<Self> {
        if net.output_dim() < 2 {
            return Err(Error::InvalidParameter("embedding dim must be >= 2".into()));
        }
        let config = TrainingConfig {
            hidden: net.layer_dims()[1..net.layers().len()].to_vec(),
            embedding_dim: net.output_dim(),
            epochs: 0,
            ..TrainingConfig::default()
        };
        Ok(Self {
            id: id.into(),
            net,
            config,
            final_loss: None,
        })
    }

    /// A linear identity encoder; handy as a reference point.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        let net = DenseNet::from_layers(vec![crate::nn::Layer {
            in_dim: dim,
            out_dim: dim,
            weights,
            biases: vec![0.0; dim],
            activation: crate::nn::Activation::Identity,
        }])?;
        Self::from_net("identity", net)
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn embed(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.embed_features(&sample.features)
    }

    pub fn embed_features(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(features)
    }

    pub fn embed_samples(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| self.embed(s)).collect()
    }

    /// Embeddings of every sample of `cluster`, in sample order.
    pub fn embed_user(&self, cluster: &UserCluster) -> Result<Vec<Vec<f64>>> {
        self.embed_samples(&cluster.samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = EncoderCheckpoint {
            encoder_id: self.id.clone(),
            network: self.net.to_checkpoint(),
            training_config: self.config.clone(),
            final_loss: self.final_loss,
        };
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: EncoderCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            id: ckpt.encoder_id,
            net: DenseNet::from_checkpoint(&ckpt.network)?,
            config: ckpt.training_config,
            final_loss: ckpt.final_loss,
        })
    }
}

/// One anchor's mined triplet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub positive: usize,
    pub negative: usize,
    pub positive_distance: f64,
    pub negative_distance: f64,
}

#[derive(Clone, Debug)]
pub struct BatchHardLoss {
    pub loss: f64,
    /// Gradient of `loss` w.r.t. each embedding.
    pub grads: Vec<Vec<f64>>,
    pub mined: Vec<MinedTriplet>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// For every anchor: the farthest same-label sample and the nearest
/// other-label sample. Ties resolve to the lowest index.
pub fn mine_hardest(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Vec<MinedTriplet>> {
    check_batch(embeddings, labels)?;
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|a| {
            let mut pos = (usize::MAX, f64::NEG_INFINITY);
            let mut neg = (usize::MAX, f64::INFINITY);
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            MinedTriplet {
                positive: pos.0,
                negative: neg.0,
                positive_distance: pos.1,
                negative_distance: neg.1,
            }
        })
        .collect())
}

fn check_batch(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            actual: labels.len(),
        });
    }
    let dim = embeddings.first().map(Vec::len).unwrap_or(0);
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite embedding in batch".into()));
    }
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::DegenerateBatch("batch needs at least two identities".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::DegenerateBatch(format!(
            "identity {l} has fewer than two samples"
        )));
    }
    Ok(())
}

/// Mean over anchors of `softplus(d(a, hardest positive) - d(a, hardest negative))`
/// with L2 distances, plus its exact gradient w.r.t. every embedding.
pub fn batch_hard_loss(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<BatchHardLoss> {
    let mined = mine_hardest(embeddings, labels)?;
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let mut grads = vec![vec![0.0; dim]; n];
    let mut loss = 0.0;
    let scale = 1.0 / n as f64;

    // d/dx ||x - y|| = (x - y) / ||x - y||; zero subgradient at coincidence.
    let push = |grads: &mut [Vec<f64>], a: usize, b: usize, d: f64, coeff: f64| {
        if d <= 0.0 {
            return;
        }
        for k in 0..dim {
            let g = coeff * (embeddings[a][k] - embeddings[b][k]) / d;
            grads[a][k] += g;
            grads[b][k] -= g;
        }
    };
    for (a, m) in mined.iter().enumerate() {
        let margin = m.positive_distance - m.negative_distance;
        loss += softplus(margin) * scale;
        let dz = sigmoid(margin) * scale;
        push(&mut grads, a, m.positive, m.positive_distance, dz);
        push(&mut grads, a, m.negative, m.negative_distance, -dz);
    }
    Ok(BatchHardLoss { loss, grads, mined })
}

/// A PK batch: `users[i]` owns `samples[i]`, each holding exactly K samples.
#[derive(Clone, Debug)]
pub struct TripletBatch<'a> {
    pub users: Vec<&'a UserId>,
    pub samples: Vec<Vec<&'a Sample>>,
}

impl<'a> TripletBatch<'a> {
    /// K samples per user: without replacement when the user has enough,
    /// with replacement otherwise.
    pub fn draw(users: Vec<&'a UserId>, data: &'a UserSamples, k: usize, rng: &mut Rng) -> Self {
        let samples = users
            .iter()
            .map(|u| {
                let pool = &data[*u];
                if pool.len() >= k {
                    pool.choose_multiple(rng, k).collect()
                } else {
                    (0..k).map(|_| pool.choose(rng).expect("non-empty pool")).collect()
                }
            })
            .collect();
        Self { users, samples }
    }
}

/// Batches of one epoch: users are shuffled and chunked into groups of P;
/// a short final chunk is topped up with other randomly chosen users.
fn epoch_batches<'a>(users: &[&'a UserId], p: usize, rng: &mut Rng) -> Vec<Vec<&'a UserId>> {
    let mut order = users.to_vec();
    order.shuffle(rng);
    let n_batches = order.len().div_ceil(p);
    (0..n_batches)
        .map(|b| {
            let mut chunk: Vec<&UserId> = order[b * p..((b + 1) * p).min(order.len())].to_vec();
            if chunk.len() < p {
                let mut others: Vec<&UserId> = order.iter().copied().filter(|u| !chunk.contains(u)).collect();
                others.shuffle(rng);
                chunk.extend(others.into_iter().take(p - chunk.len()));
            }
            chunk
        })
        .collect()
}

/// Trains an encoder on per-user samples. `epochs = 0` returns the seeded
/// initial network.
pub fn train_encoder(id: impl Into<String>, data: &UserSamples, config: &TrainingConfig) -> Result<Encoder> {
    config.validate()?;
    let users: Vec<&UserId> = data.iter().filter(|(_, s)| !s.is_empty()).map(|(u, _)| u).collect();
    if users.len() < config.identities_per_batch {
        return Err(Error::Sizing(format!(
            "training needs at least {} users with samples, got {}",
            config.identities_per_batch,
            users.len()
        )));
    }
    let input_dim = data[users[0]][0].features.len();
    if let Some(bad) = users
        .iter()
        .flat_map(|u| data[*u].iter())
        .find(|s| s.features.len() != input_dim)
    {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            actual: bad.features.len(),
        });
    }

    let mut net = DenseNet::mlp(&config.layer_dims(input_dim), rng::derive_tagged(config.seed, "init"))?;
    let mut rng = rng::seeded(rng::derive_tagged(config.seed, "batches"));
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let k = config.samples_per_identity;
    let labels: Vec<usize> = (0..config.identities_per_batch)
        .flat_map(|i| std::iter::repeat_n(i, k))
        .collect();
    let mut final_loss = None;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(&users, config.identities_per_batch, &mut rng);
        let n_batches = batches.len();
        for batch_users in batches {
            let batch = TripletBatch::draw(batch_users, data, k, &mut rng);
            let mut caches = Vec::with_capacity(labels.len());
            for sample in batch.samples.iter().flatten() {
                let cache = if config.augmentations.is_empty() {
                    net.forward_cached(&sample.features)?
                } else {
                    let view = baseline::augment(&sample.features, &config.augmentations, &mut rng);
                    net.forward_cached(&view)?
                };
                caches.push(cache);
            }
            let embeddings: Vec<Vec<f64>> = caches.iter().map(|c| c.output().to_vec()).collect();
            if embeddings.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite embedding".into(),
                });
            }
            let out = batch_hard_loss(&embeddings, &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss {}", out.loss),
                });
            }
            epoch_loss += out.loss;
            let mut grads = Gradients::zeros_like(&net);
            for (cache, g) in caches.iter().zip(&out.grads) {
                net.backward_into(cache, g, &mut grads)?;
            }
            net = opt.step(&net, &grads).map_err(|e| match e {
                Error::Diverged { reason, .. } => Error::Diverged { epoch, reason },
                other => other,
            })?;
        }
        final_loss = Some(epoch_loss / n_batches as f64);
    }

    Ok(Encoder {
        id: id.into(),
        net,
        config: config.clone(),
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticParams};

    #[test]
    fn identical_embeddings_give_ln2() {
        let emb = vec![vec![0.3, -0.2]; 6];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let out = batch_hard_loss(&emb, &labels).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn two_users_one_dimension_enumerated() {
        let emb: Vec<Vec<f64>> = vec![vec![0.0], vec![0.1], vec![1.0], vec![1.1]];
        let labels = vec![0, 0, 1, 1];
        // Enumerate all positives and negatives for each anchor.
        let mut expected = 0.0;
        for a in 0..4 {
            let mut hp = f64::NEG_INFINITY;
            let mut hn = f64::INFINITY;
            for j in 0..4 {
                if j == a {
                    continue;
                }
                let d: f64 = (emb[a][0] - emb[j][0]).abs();
                if labels[j] == labels[a] {
                    hp = hp.max(d);
                } else {
                    hn = hn.min(d);
                }
            }
            expected += (1.0 + (hp - hn).exp()).ln() / 4.0;
        }
        // By hand: anchors 0.1 and 1.0 have (0.1, 0.9), anchors 0 and 1.1 have (0.1, 1.0).
        let by_hand = ((1.0 + (-0.8f64).exp()).ln() * 2.0 + (1.0 + (-0.9f64).exp()).ln() * 2.0) / 4.0;
        let out = batch_hard_loss(&emb, &labels).unwrap();
        assert!((out.loss - expected).abs() < 1e-14);
        assert!((out.loss - by_hand).abs() < 1e-14);
    }

    #[test]
    fn single_identity_is_degenerate() {
        let emb = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(batch_hard_loss(&emb, &[0, 0]), Err(Error::DegenerateBatch(_))));
        let emb = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        assert!(matches!(
            batch_hard_loss(&emb, &[0, 0, 1]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    fn small_data(seed: u64) -> UserSamples {
        let params = SyntheticParams {
            n_users: 10,
            samples_per_user: 6,
            dim: 6,
            cluster_spread: 0.3,
            user_separation: 4.0,
            ..Default::default()
        };
        generate_synthetic(&params, seed)
            .unwrap()
            .into_iter()
            .map(|c| (c.user_id, c.samples))
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initial_encoder() {
        let data = small_data(0);
        let cfg = TrainingConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let enc = train_encoder("v", &data, &cfg).unwrap();
        let init = DenseNet::mlp(&cfg.layer_dims(6), rng::derive_tagged(5, "init")).unwrap();
        assert_eq!(enc.net, init);
        assert_eq!(enc.final_loss, None);
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data(1);
        let cfg = TrainingConfig {
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let a = train_encoder("v", &data, &cfg).unwrap();
        let b = train_encoder("v", &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_users_is_sizing_error() {
        let mut data = small_data(2);
        while data.len() > 3 {
            let last = data.keys().next_back().unwrap().clone();
            data.remove(&last);
        }
        assert!(matches!(
            train_encoder("v", &data, &TrainingConfig::default()),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let data = small_data(3);
        let cfg = TrainingConfig {
            epochs: 50,
            lr: 1e200,
            momentum: 0.0,
            ..Default::default()
        };
        match train_encoder("v", &data, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identity_encoder_and_embed_user_order() {
        let enc = Encoder::identity(3).unwrap();
        let uid = UserId::from("a");
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                user_id: uid.clone(),
                sample_id: i.to_string(),
                features: vec![i as f64, 1.0, -2.0],
            })
            .collect();
        let cluster = UserCluster::new(uid, samples.clone()).unwrap();
        let embs = enc.embed_user(&cluster).unwrap();
        assert_eq!(embs.len(), 4);
        for (e, s) in embs.iter().zip(&samples) {
            assert_eq!(e, &s.features);
            assert_eq!(e, &enc.embed(s).unwrap());
        }
        assert!(matches!(
            enc.embed_features(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
