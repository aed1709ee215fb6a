//! Synchronous-round orchestration of all clients.
//!
//! Each round samples the active clients, lets every active client score,
//! select, aggregate, train and publish against the previous round's
//! registry, and swaps the new publications in at the round barrier. Active
//! clients run on the rayon pool when `sim.parallel` is set; results do not
//! depend on thread scheduling because every client draws from its own RNG
//! streams and reads only the frozen registry.

use std::collections::BTreeSet;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::client::{ClientState, LocalTraining, PublishedState};
use crate::config::{InitMode, SimConfig, Strategy, Visibility};
use crate::data::{self, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::RoundMetrics;
use crate::nn::{Batch, SplitModel};
use crate::scoring::{self, PeerLoss, PeerScore};

mod seed_tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const GRAPH: u64 = 7;
    pub const SAMPLER: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent seed for stream `tag`, index `i`, under `master`.
pub fn derive_seed(master: u64, tag: u64, i: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)) ^ i)
}

/// Accuracy of one selected peer's published model on the observed
/// client's test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerValidation {
    pub round: usize,
    pub peer_id: usize,
    pub peer_acc: f64,
    /// The observed client's own accuracy at the start of the round.
    pub own_acc: f64,
}

/// Flattened parameters at each stage of one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundTrace {
    pub round: usize,
    pub client_id: usize,
    pub selected: Vec<usize>,
    pub header_before: Vec<f64>,
    pub header_after_aggregation: Vec<f64>,
    pub header_after_feature_phase: Vec<f64>,
    pub header_after_header_phase: Vec<f64>,
    pub features_after_aggregation: Vec<f64>,
    pub features_after_feature_phase: Vec<f64>,
    pub features_after_header_phase: Vec<f64>,
    /// `(peer, last selected round)` after publication.
    pub recency_after: Vec<(usize, Option<usize>)>,
}

#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub round: usize,
    pub active: Vec<usize>,
    pub metrics: Vec<RoundMetrics>,
    pub validation: Vec<PeerValidation>,
    pub traces: Vec<ClientRoundTrace>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub metrics: Vec<RoundMetrics>,
    pub models: Vec<SplitModel>,
    pub validation: Vec<PeerValidation>,
}

struct RoundContext<'a> {
    config: &'a SimConfig,
    registry: &'a [PublishedState],
    samples: &'a [Batch],
    round: usize,
    observe: Option<usize>,
    trace: bool,
}

struct ClientRoundResult {
    metrics: RoundMetrics,
    published: PublishedState,
    validation: Vec<PeerValidation>,
    trace: Option<ClientRoundTrace>,
}

pub struct Simulation {
    config: SimConfig,
    clients: Vec<ClientState>,
    registry: Vec<PublishedState>,
    samples: Vec<Batch>,
    sampler: ChaCha8Rng,
    round: usize,
    observe: Option<usize>,
    trace: bool,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let master = config.sim.master_seed;
        let m = config.sim.num_clients;
        let dataset = load_dataset(&config)?;
        let shards = data::pathological_partition(
            &dataset,
            m,
            config.data.classes_per_client,
            config.data.train_fraction,
            derive_seed(master, seed_tag::PARTITION, 0),
        )?;
        let peers = visibility_graph(&config);
        let training = LocalTraining {
            batch_size: config.train.batch_size,
            lr_feature: config.train.lr_feature,
            lr_header: config.train.lr_header,
            momentum: config.train.momentum,
            weight_decay: config.train.weight_decay,
        };
        let clients = shards
            .into_iter()
            .zip(&peers)
            .map(|(shard, visible)| {
                let id = shard.client_id as u64;
                let init_index = match config.model.init {
                    InitMode::Shared => 0,
                    InitMode::PerClient => id + 1,
                };
                let model = init_model(&config, derive_seed(master, seed_tag::INIT, init_index))?;
                ClientState::new(
                    model,
                    shard,
                    visible,
                    &training,
                    config.data.eval_sample_size,
                    (
                        derive_seed(master, seed_tag::TRAIN, id),
                        derive_seed(master, seed_tag::SELECT, id),
                        derive_seed(master, seed_tag::EVAL, id),
                    ),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let registry = clients.iter().map(|c| c.snapshot(0)).collect();
        let samples = clients.iter().map(|c| c.eval_sample.clone()).collect();
        Ok(Self {
            sampler: ChaCha8Rng::seed_from_u64(derive_seed(master, seed_tag::SAMPLER, 0)),
            config,
            clients,
            registry,
            samples,
            round: 0,
            observe: None,
            trace: false,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn registry(&self) -> &[PublishedState] {
        &self.registry
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Records per-peer validation accuracies for this client.
    pub fn observe_client(&mut self, id: usize) -> Result<()> {
        if id >= self.clients.len() {
            return Err(Error::Precondition(format!(
                "client {id} out of range (0..{})",
                self.clients.len()
            )));
        }
        self.observe = Some(id);
        Ok(())
    }

    /// Records parameter snapshots at every stage of every client round.
    pub fn enable_trace(&mut self) {
        self.trace = true;
    }

    fn sample_active(&mut self) -> Vec<usize> {
        let m = self.config.sim.num_clients;
        let n = self.config.num_active();
        if n == m {
            return (0..m).collect();
        }
        let mut active = index::sample(&mut self.sampler, m, n).into_vec();
        active.sort_unstable();
        active
    }

    /// Runs one round and swaps the new publications in.
    pub fn step(&mut self) -> Result<RoundReport> {
        let round = self.round + 1;
        let active = self.sample_active();
        let ctx = RoundContext {
            config: &self.config,
            registry: &self.registry,
            samples: &self.samples,
            round,
            observe: self.observe,
            trace: self.trace,
        };
        let is_active: BTreeSet<usize> = active.iter().copied().collect();
        let results: Vec<Result<ClientRoundResult>> = if self.config.sim.parallel {
            self.clients
                .par_iter_mut()
                .filter(|c| is_active.contains(&c.id))
                .map(|c| client_round(c, &ctx))
                .collect()
        } else {
            self.clients
                .iter_mut()
                .filter(|c| is_active.contains(&c.id))
                .map(|c| client_round(c, &ctx))
                .collect()
        };
        let mut report = RoundReport {
            round,
            active,
            ..Default::default()
        };
        for r in results {
            let r = r?;
            let id = r.published.client_id;
            self.registry[id] = r.published;
            report.metrics.push(r.metrics);
            report.validation.extend(r.validation);
            report.traces.extend(r.trace);
        }
        self.round = round;
        debug!(
            "round {round}: mean acc {:.4}",
            report.metrics.iter().map(|m| m.test_acc).sum::<f64>() / report.metrics.len() as f64
        );
        Ok(report)
    }

    pub fn run(mut self) -> Result<SimOutput> {
        let mut metrics = Vec::new();
        let mut validation = Vec::new();
        for _ in 0..self.config.sim.rounds {
            let report = self.step()?;
            metrics.extend(report.metrics);
            validation.extend(report.validation);
        }
        Ok(SimOutput {
            metrics,
            models: self.clients.into_iter().map(|c| c.model).collect(),
            validation,
        })
    }
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutput> {
    Simulation::new(config.clone())?.run()
}

/// Fraction of the client's own test rows predicted correctly.
pub fn evaluate_client(client: &ClientState) -> Result<f64> {
    client.evaluate()
}

fn load_dataset(config: &SimConfig) -> Result<Dataset> {
    let d = &config.data;
    let dataset = match &d.path {
        Some(path) => data::load_flatfile(path)?,
        None => data::generate_synthetic(
            d.num_classes,
            d.dim,
            d.per_class,
            d.spread,
            derive_seed(config.sim.master_seed, seed_tag::DATA, 0),
        )?,
    };
    if dataset.dim() != d.dim || dataset.num_classes != d.num_classes {
        return Err(Error::Config(format!(
            "dataset has dim={} classes={}, config says dim={} classes={}",
            dataset.dim(),
            dataset.num_classes,
            d.dim,
            d.num_classes
        )));
    }
    Ok(dataset)
}

fn init_model(config: &SimConfig, seed: u64) -> Result<SplitModel> {
    SplitModel::new(
        config.data.dim,
        &config.model.hidden_dims,
        config.data.num_classes,
        config.model.feature_depth(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Visible peers per client, ascending.
fn visibility_graph(config: &SimConfig) -> Vec<Vec<usize>> {
    let m = config.sim.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.sim.master_seed, seed_tag::GRAPH, 0));
    (0..m)
        .map(|i| {
            let mut others: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            if let Visibility::Count(k) = config.sim.neighbors_visible {
                others.shuffle(&mut rng);
                others.truncate(k);
                others.sort_unstable();
            }
            others
        })
        .collect()
}

fn client_round(c: &mut ClientState, ctx: &RoundContext<'_>) -> Result<ClientRoundResult> {
    let start = Instant::now();
    let cfg = ctx.config;
    let round = ctx.round;
    c.begin_round(round);

    let own_loss = c.model.loss(&c.eval_sample)?;
    let observed = ctx.observe == Some(c.id);
    let own_acc = if observed { Some(c.evaluate()?) } else { None };

    let strategy = cfg.sim.strategy;
    let scores: Vec<PeerScore> = if strategy == Strategy::LocalOnly {
        Vec::new()
    } else {
        c.score_candidates(ctx.registry, ctx.samples, &cfg.scoring)?
    };
    let mut selected: Vec<usize> = match strategy {
        Strategy::LocalOnly => Vec::new(),
        Strategy::PlainAverage => scores.iter().map(|s| s.peer_id).collect(),
        Strategy::Score | Strategy::Random if scores.is_empty() => Vec::new(),
        Strategy::Score => {
            let sel = scoring::select_peers(&scores, &cfg.scoring, c.id)?;
            if let Some(w) = sel.warning {
                warn!("client {} round {round}: {w}", c.id);
            }
            sel.peers
        }
        Strategy::Random => {
            let count = scoring::select_peers(&scores, &cfg.scoring, c.id)?.peers.len();
            let ids: Vec<usize> = scores.iter().map(|s| s.peer_id).collect();
            ids.choose_multiple(c.select_rng(), count).copied().collect()
        }
    };
    selected.sort_unstable();

    let composite_of = |id: usize| scores.iter().find(|s| s.peer_id == id).map(|s| s.composite);
    let mean_score = if selected.is_empty() {
        None
    } else {
        let sum: f64 = selected.iter().filter_map(|&id| composite_of(id)).sum();
        Some(sum / selected.len() as f64)
    };
    let rho = if selected.is_empty() {
        None
    } else {
        let peers: Vec<PeerLoss> = scores
            .iter()
            .map(|s| PeerLoss {
                peer_id: s.peer_id,
                loss_on_peer: s.s_l,
                data_fraction: ctx.registry[s.peer_id].data_fraction,
                baseline: ctx.registry[s.peer_id].best_local_loss,
            })
            .collect();
        scoring::selection_skew(own_loss, &selected, &peers)?
    };

    let mut validation = Vec::new();
    if let Some(own_acc) = own_acc {
        let test = c.shard.test.as_batch();
        for &peer in &selected {
            let peer_acc = ctx.registry[peer].to_model()?.accuracy(&test)?;
            validation.push(PeerValidation {
                round,
                peer_id: peer,
                peer_acc,
                own_acc,
            });
        }
    }

    let header_before = ctx.trace.then(|| c.model.header_flat());
    let peer_states: Vec<&PublishedState> = selected.iter().map(|&j| &ctx.registry[j]).collect();
    c.aggregate_features(&peer_states, cfg.sim.aggregation)?;
    let after_aggregation = ctx.trace.then(|| (c.model.header_flat(), c.model.feature_flat()));

    let feature_trace = c.train_feature_phase(cfg.train.feature_epochs, cfg.train.batch_size)?;
    let after_feature = ctx.trace.then(|| (c.model.header_flat(), c.model.feature_flat()));
    let header_trace = c.train_header_phase(cfg.train.header_epochs, cfg.train.batch_size)?;

    let train_loss = header_trace
        .last()
        .or(feature_trace.last())
        .copied()
        .unwrap_or(own_loss);
    if !train_loss.is_finite() {
        return Err(Error::Diverged { round, client: c.id });
    }
    c.record_local_loss(train_loss);
    let published = c.publish(round, &selected)?;
    let test_acc = c.evaluate()?;

    let trace = match (header_before, after_aggregation, after_feature) {
        (Some(hb), Some((ha, fa)), Some((hf, ff))) => Some(ClientRoundTrace {
            round,
            client_id: c.id,
            selected: selected.clone(),
            header_before: hb,
            header_after_aggregation: ha,
            header_after_feature_phase: hf,
            header_after_header_phase: c.model.header_flat(),
            features_after_aggregation: fa,
            features_after_feature_phase: ff,
            features_after_header_phase: c.model.feature_flat(),
            recency_after: c.visible_peers().into_iter().map(|p| (p, c.recency.last_selected(p))).collect(),
        }),
        _ => None,
    };

    let wall_ms = if cfg.sim.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(ClientRoundResult {
        metrics: RoundMetrics {
            round,
            client_id: c.id,
            test_acc,
            train_loss,
            selected,
            mean_score,
            rho,
            wall_ms,
        },
        published,
        validation,
        trace,
    })
}

/// Shards produced for a configuration, without building clients.
pub fn partition_for(config: &SimConfig) -> Result<Vec<ClientShard>> {
    let dataset = load_dataset(config)?;
    data::pathological_partition(
        &dataset,
        config.sim.num_clients,
        config.data.classes_per_client,
        config.data.train_fraction,
        derive_seed(config.sim.master_seed, seed_tag::PARTITION, 0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::format_metrics_csv;

    fn small() -> SimConfig {
        let mut c = SimConfig::desk();
        c.sim.num_clients = 6;
        c.sim.rounds = 3;
        c.data.num_classes = 4;
        c.data.dim = 4;
        c.data.per_class = 30;
        c.model.hidden_dims = vec![8];
        c.scoring.top_k = Some(2);
        c
    }

    #[test]
    fn seeds_differ_by_tag_and_index() {
        let a = derive_seed(1, seed_tag::TRAIN, 0);
        assert_ne!(a, derive_seed(1, seed_tag::TRAIN, 1));
        assert_ne!(a, derive_seed(1, seed_tag::SELECT, 0));
        assert_ne!(a, derive_seed(2, seed_tag::TRAIN, 0));
    }

    #[test]
    fn visibility_count_restricts_peers() {
        let mut c = small();
        c.sim.neighbors_visible = Visibility::Count(3);
        let g = visibility_graph(&c);
        for (i, peers) in g.iter().enumerate() {
            assert_eq!(peers.len(), 3);
            assert!(!peers.contains(&i));
        }
    }

    #[test]
    fn runs_and_emits_one_row_per_active_client() {
        let mut c = small();
        c.sim.clients_per_round = 0.5;
        let out = run_simulation(&c).unwrap();
        assert_eq!(out.metrics.len(), 3 * 3);
        for r in &out.metrics {
            assert!(!r.selected.contains(&r.client_id));
            assert!((0.0..=1.0).contains(&r.test_acc));
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut c = small();
        c.sim.parallel = false;
        let a = run_simulation(&c).unwrap();
        c.sim.parallel = true;
        let b = run_simulation(&c).unwrap();
        assert_eq!(format_metrics_csv(&a.metrics), format_metrics_csv(&b.metrics));
        assert_eq!(a.models, b.models);
    }

    #[test]
    fn observe_out_of_range() {
        let mut s = Simulation::new(small()).unwrap();
        assert!(s.observe_client(6).is_err());
        assert!(s.observe_client(5).is_ok());
    }

    #[test]
    fn flatfile_dataset_must_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = data::generate_synthetic(4, 3, 30, 1.0, 0).unwrap();
        data::write_flatfile(&d, &path).unwrap();
        let mut c = small();
        c.data.path = Some(path.clone());
        assert!(Simulation::new(c.clone()).is_err());
        c.data.dim = 3;
        assert!(Simulation::new(c).is_ok());
    }
}
