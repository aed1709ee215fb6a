//! One simulated client: scoring, feature aggregation, two-phase partially
//! frozen training, and publication.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Aggregation;
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::nn::{sgd_step, Batch, DenseLayer, Freeze, OptimizerState, Part, Scope, SplitModel};
use crate::scoring::{self, PeerScore, RecencyArray, ScoringParams};

/// Snapshot a client shares with the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedState {
    pub client_id: usize,
    pub feature_layers: Vec<DenseLayer>,
    pub header_layers: Vec<DenseLayer>,
    pub round_stamp: usize,
    /// Best local training loss seen so far.
    pub best_local_loss: f64,
    pub data_fraction: f64,
}

impl PublishedState {
    pub fn header_flat(&self) -> Vec<f64> {
        flatten(&self.header_layers)
    }

    pub fn feature_flat(&self) -> Vec<f64> {
        flatten(&self.feature_layers)
    }

    /// Reassembles the full published model.
    pub fn to_model(&self) -> Result<SplitModel> {
        SplitModel::from_layers(self.feature_layers.clone(), self.header_layers.clone())
    }
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
        .collect()
}

/// Latest publication of every client, indexed by client id.
pub type Registry = [PublishedState];

/// Hyperparameters for the two local training phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub batch_size: usize,
    pub lr_feature: f64,
    pub lr_header: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: SplitModel,
    pub shard: ClientShard,
    pub opt_feature: OptimizerState,
    pub opt_header: OptimizerState,
    /// Latest loss-disparity score per visible peer.
    pub loss_array: BTreeMap<usize, f64>,
    pub recency: RecencyArray,
    pub best_local_loss: f64,
    /// Fixed subsample of the training shard that peers score against.
    pub eval_sample: Batch,
    train_rng: ChaCha8Rng,
    select_rng: ChaCha8Rng,
}

impl ClientState {
    /// `seeds` = (training shuffle stream, selection stream, eval-sample draw).
    pub fn new(
        model: SplitModel,
        shard: ClientShard,
        visible_peers: &[usize],
        training: &LocalTraining,
        eval_sample_size: usize,
        seeds: (u64, u64, u64),
    ) -> Result<Self> {
        let id = shard.client_id;
        if shard.train.is_empty() {
            return Err(Error::Precondition(format!("client {id} has an empty training shard")));
        }
        if visible_peers.contains(&id) {
            return Err(Error::Precondition(format!("client {id} listed as its own peer")));
        }
        let mut indices: Vec<usize> = (0..shard.train.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds.2));
        indices.truncate(eval_sample_size.max(1));
        indices.sort_unstable();
        let eval_sample = shard.train.batch(&indices);
        let best_local_loss = model.loss(&eval_sample)?;
        Ok(Self {
            id,
            opt_feature: OptimizerState::new(&model, training.lr_feature, training.momentum, training.weight_decay)?,
            opt_header: OptimizerState::new(&model, training.lr_header, training.momentum, training.weight_decay)?,
            model,
            shard,
            loss_array: visible_peers.iter().map(|&p| (p, f64::NAN)).collect(),
            recency: RecencyArray::new(visible_peers.iter().copied()),
            best_local_loss,
            eval_sample,
            train_rng: ChaCha8Rng::seed_from_u64(seeds.0),
            select_rng: ChaCha8Rng::seed_from_u64(seeds.1),
        })
    }

    pub fn visible_peers(&self) -> Vec<usize> {
        self.recency.peers().collect()
    }

    pub fn begin_round(&mut self, round: usize) {
        self.recency.set_current_iter(round);
    }

    pub fn select_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.select_rng
    }

    /// Scores every visible peer against its latest publication and the
    /// peer's evaluation sample (`samples[peer]`). Refreshes the loss array.
    pub fn score_candidates(
        &mut self,
        registry: &Registry,
        samples: &[Batch],
        params: &ScoringParams,
    ) -> Result<Vec<PeerScore>> {
        let my_header = self.model.header_flat();
        let mut out = Vec::new();
        for peer in self.visible_peers() {
            let (Some(published), Some(sample)) = (registry.get(peer), samples.get(peer)) else {
                warn!("client {}: peer {peer} missing from registry, skipped", self.id);
                continue;
            };
            let s_l = scoring::loss_disparity_score(&self.model, sample)?;
            let s_d = scoring::header_distance_score(&my_header, &published.header_flat())?;
            let s_p = scoring::recency_score(&self.recency, peer, params.lambda)?;
            let composite = scoring::composite_score(s_l, s_d, s_p, params, self.id, peer);
            self.loss_array.insert(peer, s_l);
            out.push(PeerScore {
                peer_id: peer,
                s_l,
                s_d,
                s_p,
                composite,
            });
        }
        Ok(out)
    }

    /// Replaces the feature layers with the aggregate of self and `selected`.
    /// The header is untouched. Feature momentum is reset whenever peers
    /// contribute.
    pub fn aggregate_features(&mut self, selected: &[&PublishedState], mode: Aggregation) -> Result<()> {
        if selected.is_empty() {
            return Ok(());
        }
        let mut acc: Vec<DenseLayer> = match mode {
            Aggregation::Mean => self.model.feature_layers().to_vec(),
            Aggregation::Sum => self
                .model
                .feature_layers()
                .iter()
                .map(|l| DenseLayer::zeros(l.fan_in(), l.fan_out(), l.activation))
                .collect(),
        };
        for peer in selected {
            if peer.feature_layers.len() != acc.len() {
                return Err(Error::shape(
                    format!("feature layers of peer {}", peer.client_id),
                    acc.len(),
                    peer.feature_layers.len(),
                ));
            }
            for (i, (a, p)) in acc.iter_mut().zip(&peer.feature_layers).enumerate() {
                if a.weights.shape() != p.weights.shape() || a.bias.len() != p.bias.len() {
                    return Err(Error::shape(
                        format!("feature layer {i} of peer {}", peer.client_id),
                        format!("{:?}", a.weights.shape()),
                        format!("{:?}", p.weights.shape()),
                    ));
                }
                for (x, y) in a.weights.as_mut_slice().iter_mut().zip(p.weights.as_slice()) {
                    *x += y;
                }
                for (x, y) in a.bias.iter_mut().zip(&p.bias) {
                    *x += y;
                }
            }
        }
        if mode == Aggregation::Mean {
            let n = (selected.len() + 1) as f64;
            for a in &mut acc {
                a.weights.map_inplace(|x| x / n);
                a.bias.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.model.set_feature_layers(acc)?;
        self.opt_feature.reset(Part::Feature);
        Ok(())
    }

    /// `epochs` passes over the local shard updating only the feature layers.
    /// Returns the mean loss of each epoch.
    pub fn train_feature_phase(&mut self, epochs: usize, batch_size: usize) -> Result<Vec<f64>> {
        self.train_phase(Part::Feature, epochs, batch_size)
    }

    /// `epochs` passes over the local shard updating only the header.
    pub fn train_header_phase(&mut self, epochs: usize, batch_size: usize) -> Result<Vec<f64>> {
        self.train_phase(Part::Header, epochs, batch_size)
    }

    fn train_phase(&mut self, part: Part, epochs: usize, batch_size: usize) -> Result<Vec<f64>> {
        if self.shard.train.is_empty() {
            return Err(Error::Precondition(format!("client {} has an empty training shard", self.id)));
        }
        if batch_size == 0 {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        let (freeze, scope) = match part {
            Part::Feature => (Freeze::HeaderFrozen, Scope::FeatureOnly),
            Part::Header => (Freeze::FeatureFrozen, Scope::HeaderOnly),
        };
        let n = self.shard.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut self.train_rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch = self.shard.train.batch(chunk);
                let (loss, grads) = self.model.loss_and_grads(&batch, freeze)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        round: self.recency.current_iter(),
                        client: self.id,
                    });
                }
                let opt = match part {
                    Part::Feature => &mut self.opt_feature,
                    Part::Header => &mut self.opt_header,
                };
                sgd_step(&mut self.model, &grads, opt, scope)?;
                total += loss * chunk.len() as f64;
            }
            trace.push(total / n as f64);
        }
        if !self.model.is_finite() {
            return Err(Error::Diverged {
                round: self.recency.current_iter(),
                client: self.id,
            });
        }
        Ok(trace)
    }

    /// Snapshot for the registry; stamps `selected` in the recency array.
    pub fn publish(&mut self, round: usize, selected: &[usize]) -> Result<PublishedState> {
        self.recency.set_current_iter(round);
        self.recency.mark_selected(selected)?;
        Ok(self.snapshot(round))
    }

    pub fn snapshot(&self, round: usize) -> PublishedState {
        PublishedState {
            client_id: self.id,
            feature_layers: self.model.feature_layers().to_vec(),
            header_layers: self.model.header_layers().to_vec(),
            round_stamp: round,
            best_local_loss: self.best_local_loss,
            data_fraction: self.shard.data_fraction,
        }
    }

    pub fn record_local_loss(&mut self, loss: f64) {
        if loss < self.best_local_loss {
            self.best_local_loss = loss;
        }
    }

    /// Accuracy of the current model on the client's own test split.
    pub fn evaluate(&self) -> Result<f64> {
        if self.shard.test.is_empty() {
            return Err(Error::Precondition(format!("client {} has an empty test split", self.id)));
        }
        self.model.accuracy(&self.shard.test.as_batch())
    }
}
