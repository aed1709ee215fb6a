//! Experiment configuration, loaded from and echoed to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoringParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Composite-score peer selection.
    Score,
    /// Uniform selection of as many peers as the score rule would pick.
    Random,
    /// No parameter exchange.
    LocalOnly,
    /// Every visible peer, every round.
    PlainAverage,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Score,
        Strategy::Random,
        Strategy::PlainAverage,
        Strategy::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Score => "score",
            Strategy::Random => "random",
            Strategy::LocalOnly => "local_only",
            Strategy::PlainAverage => "plain_average",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (expected score, random, local_only, plain_average)")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Uniform mean over the client and its selected peers.
    Mean,
    /// Plain sum over the selected peers' feature layers.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every client starts from the same initial weights.
    Shared,
    /// Each client draws its own initial weights.
    PerClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllPeers {
    All,
}

/// How many peers each client can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Visibility {
    All(AllPeers),
    /// A fixed, seeded set of this many peers per client.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub num_clients: usize,
    pub rounds: usize,
    /// Fraction of clients active in each round.
    pub clients_per_round: f64,
    pub neighbors_visible: Visibility,
    pub strategy: Strategy,
    pub master_seed: u64,
    pub aggregation: Aggregation,
    /// Run the active clients of a round on the rayon pool.
    pub parallel: bool,
    /// Measure per-client wall time. When off, `wall_ms` is written as 0 so
    /// that metrics files are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            num_clients: 20,
            rounds: 60,
            clients_per_round: 1.0,
            neighbors_visible: Visibility::All(AllPeers::All),
            strategy: Strategy::Score,
            master_seed: 1,
            aggregation: Aggregation::Mean,
            parallel: true,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    /// Leading layers shared through aggregation. Defaults to all hidden layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_depth: Option<usize>,
    #[serde(default = "default_init")]
    pub init: InitMode,
}

fn default_init() -> InitMode {
    InitMode::Shared
}

impl ModelSection {
    pub fn feature_depth(&self) -> usize {
        self.feature_depth.unwrap_or(self.hidden_dims.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::spread")]
    pub spread: f64,
    #[serde(default = "defaults::classes_per_client")]
    pub classes_per_client: usize,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    /// Size of the fixed subsample of each shard used for loss scoring.
    #[serde(default = "defaults::eval_sample_size")]
    pub eval_sample_size: usize,
    /// Load the dataset from a flat file instead of generating blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

mod defaults {
    pub fn per_class() -> usize {
        60
    }
    pub fn spread() -> f64 {
        1.6
    }
    pub fn classes_per_client() -> usize {
        2
    }
    pub fn train_fraction() -> f64 {
        0.8
    }
    pub fn eval_sample_size() -> usize {
        64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub feature_epochs: usize,
    pub header_epochs: usize,
    pub batch_size: usize,
    pub lr_feature: f64,
    pub lr_header: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            feature_epochs: 5,
            header_epochs: 1,
            batch_size: 32,
            lr_feature: 0.1,
            lr_header: 0.1,
            momentum: 0.9,
            weight_decay: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub sim: SimSection,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub scoring: ScoringParams,
}

impl SimConfig {
    /// Desk-scale defaults: 20 clients, 60 rounds, 10-class blobs with two
    /// classes per client, top-4 selection.
    pub fn desk() -> Self {
        Self {
            sim: SimSection::default(),
            model: ModelSection {
                hidden_dims: vec![32],
                feature_depth: None,
                init: InitMode::Shared,
            },
            data: DataSection {
                dim: 16,
                num_classes: 10,
                per_class: defaults::per_class(),
                spread: defaults::spread(),
                classes_per_client: defaults::classes_per_client(),
                train_fraction: defaults::train_fraction(),
                eval_sample_size: defaults::eval_sample_size(),
                path: None,
            },
            train: TrainSection::default(),
            scoring: ScoringParams::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.scoring = cfg.scoring.with_default_rule();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(data_path), Some(dir)) = (&cfg.data.path, path.parent()) {
            if data_path.is_relative() {
                cfg.data.path = Some(dir.join(data_path));
            }
        }
        Ok(cfg)
    }

    /// Every effective value, including defaults, as TOML.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        if self.scoring.top_k.is_some() && self.scoring.threshold.is_some() {
            out.push_str("# scoring.top_k is set, so scoring.threshold is ignored\n");
        }
        let mut effective = self.clone();
        effective.model.feature_depth = Some(self.model.feature_depth());
        out.push_str(&toml::to_string(&effective).expect("config is always serializable"));
        out
    }

    pub fn num_active(&self) -> usize {
        ((self.sim.clients_per_round * self.sim.num_clients as f64).ceil() as usize).clamp(1, self.sim.num_clients)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        if s.num_clients < 2 {
            return Err(Error::Config(format!("sim.num_clients must be >= 2, got {}", s.num_clients)));
        }
        if s.rounds < 1 {
            return Err(Error::Config("sim.rounds must be >= 1".into()));
        }
        if !(s.clients_per_round > 0.0 && s.clients_per_round <= 1.0) {
            return Err(Error::Config(format!(
                "sim.clients_per_round must lie in (0, 1], got {}",
                s.clients_per_round
            )));
        }
        if let Visibility::Count(k) = s.neighbors_visible {
            if k == 0 || k >= s.num_clients {
                return Err(Error::Config(format!(
                    "sim.neighbors_visible must lie in [1, {}], got {k}",
                    s.num_clients - 1
                )));
            }
        }
        if self.model.hidden_dims.contains(&0) {
            return Err(Error::Config("model.hidden_dims entries must be positive".into()));
        }
        if self.model.feature_depth() > self.model.hidden_dims.len() {
            return Err(Error::Config(format!(
                "model.feature_depth {} must be <= number of hidden layers {}",
                self.model.feature_depth(),
                self.model.hidden_dims.len()
            )));
        }
        let d = &self.data;
        if d.dim == 0 || d.num_classes == 0 || d.per_class == 0 {
            return Err(Error::Config("data.dim, data.num_classes and data.per_class must be positive".into()));
        }
        if d.classes_per_client == 0 || d.classes_per_client > d.num_classes {
            return Err(Error::Config(format!(
                "data.classes_per_client must lie in [1, {}]",
                d.num_classes
            )));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(Error::Config("data.spread must be finite and >= 0".into()));
        }
        if d.eval_sample_size == 0 {
            return Err(Error::Config("data.eval_sample_size must be positive".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.lr_feature > 0.0 && t.lr_header > 0.0) {
            return Err(Error::Config("train learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be >= 0".into()));
        }
        self.scoring.validate(s.num_clients)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nhidden_dims = [8]\n[data]\ndim = 4\nnum_classes = 3\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = SimConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.sim, SimSection::default());
        assert_eq!(c.train, TrainSection::default());
        assert_eq!(c.scoring.top_k, Some(4));
        assert_eq!(c.data.eval_sample_size, 64);
    }

    #[test]
    fn threshold_alone_selects_threshold_mode() {
        let c = SimConfig::from_toml_str(&format!("[scoring]\nthreshold = 0.5\n{MINIMAL}")).unwrap();
        assert_eq!(c.scoring.top_k, None);
        let c = SimConfig::from_toml_str(&format!("[scoring]\nalpha = 0.5\n{MINIMAL}")).unwrap();
        assert_eq!(c.scoring.top_k, Some(4));
    }

    #[test]
    fn missing_required_key_is_named() {
        let e = SimConfig::from_toml_str("[model]\nhidden_dims = [8]\n[data]\nnum_classes = 3\n").unwrap_err();
        assert!(e.to_string().contains("dim"), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = SimConfig::from_toml_str(&format!("{MINIMAL}[train]\nlearnig_rate = 0.1\n")).unwrap_err();
        assert!(e.to_string().contains("learnig_rate"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let mut c = SimConfig::desk();
        c.scoring.threshold = Some(f64::NEG_INFINITY);
        c.sim.neighbors_visible = Visibility::Count(5);
        let echo = c.echo();
        assert!(echo.starts_with('#'));
        // The echo spells out the defaulted feature depth.
        c.model.feature_depth = Some(1);
        assert_eq!(SimConfig::from_toml_str(&echo).unwrap(), c);
    }

    #[test]
    fn visibility_parses_both_forms() {
        let c = SimConfig::from_toml_str(&format!("[sim]\nneighbors_visible = \"all\"\n{MINIMAL}")).unwrap();
        assert_eq!(c.sim.neighbors_visible, Visibility::All(AllPeers::All));
        let c = SimConfig::from_toml_str(&format!("[sim]\nneighbors_visible = 3\n{MINIMAL}")).unwrap();
        assert_eq!(c.sim.neighbors_visible, Visibility::Count(3));
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "[sim]\nnum_clients = 1\n",
            "[sim]\nclients_per_round = 0.0\n",
            "[sim]\nrounds = 0\n",
            "[scoring]\nalpha = 0.0\nlambda = 0.2\ncomm_cost = 1.0\ntop_k = 2\n",
        ] {
            assert!(SimConfig::from_toml_str(&format!("{bad}{MINIMAL}")).is_err(), "{bad}");
        }
    }

    #[test]
    fn active_count_rounds_up() {
        let mut c = SimConfig::desk();
        c.sim.clients_per_round = 0.1;
        assert_eq!(c.num_active(), 2);
        c.sim.clients_per_round = 0.11;
        assert_eq!(c.num_active(), 3);
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("plain-average".parse::<Strategy>().unwrap(), Strategy::PlainAverage);
        assert!("best".parse::<Strategy>().is_err());
    }
}
