//! Peer scoring: loss disparity, header cosine similarity, recency, the
//! composite communication score, peer selection, and the selection-skew
//! diagnostic.
//!
//! The composite score for peer `j` as seen by client `i` is
//!
//! ```text
//! S = s_p * (alpha * s_l - s_d + c)
//! ```
//!
//! where `s_l` is the loss of `i`'s model on `j`'s data, `s_d` the cosine
//! similarity of their flattened headers, `s_p = 1 - exp(-lambda * Δ)` with
//! `Δ` the rounds since `j` was last selected, and `c` the communication cost
//! term for the pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, SplitModel};

/// Per-pair communication cost term `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CommCost {
    Uniform(f64),
    /// `matrix[i][j]` is the cost term client `i` uses for peer `j`.
    Matrix(Vec<Vec<f64>>),
}

impl CommCost {
    pub fn get(&self, client: usize, peer: usize) -> f64 {
        match self {
            CommCost::Uniform(c) => *c,
            CommCost::Matrix(m) => m[client][peer],
        }
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        match self {
            CommCost::Uniform(c) if *c >= 0.0 && c.is_finite() => Ok(()),
            CommCost::Uniform(c) => Err(Error::Config(format!("comm_cost must be finite and >= 0, got {c}"))),
            CommCost::Matrix(m) => {
                if m.len() != num_clients || m.iter().any(|r| r.len() != num_clients) {
                    return Err(Error::Config(format!("comm_cost matrix must be {num_clients}x{num_clients}")));
                }
                if m.iter().flatten().any(|c| !(*c >= 0.0 && c.is_finite())) {
                    return Err(Error::Config("comm_cost entries must be finite and >= 0".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_comm_cost")]
    pub comm_cost: CommCost,
    /// Select every peer whose composite exceeds this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Select the `top_k` highest composites. Takes precedence over `threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

/// Used when neither `top_k` nor `threshold` is configured.
pub const DEFAULT_TOP_K: usize = 4;

fn default_alpha() -> f64 {
    1.0
}

fn default_lambda() -> f64 {
    0.2
}

fn default_comm_cost() -> CommCost {
    CommCost::Uniform(1.0)
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            lambda: default_lambda(),
            comm_cost: default_comm_cost(),
            threshold: None,
            top_k: Some(DEFAULT_TOP_K),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRule {
    TopK(usize),
    Threshold(f64),
}

impl ScoringParams {
    /// Falls back to top-k selection when no rule is configured.
    pub fn with_default_rule(mut self) -> Self {
        if self.top_k.is_none() && self.threshold.is_none() {
            self.top_k = Some(DEFAULT_TOP_K);
        }
        self
    }

    pub fn rule(&self) -> Result<SelectionRule> {
        match (self.top_k, self.threshold) {
            (Some(k), _) => Ok(SelectionRule::TopK(k)),
            (None, Some(s)) if !s.is_nan() => Ok(SelectionRule::Threshold(s)),
            (None, Some(_)) => Err(Error::Config("scoring.threshold must not be NaN".into())),
            (None, None) => Err(Error::Config("scoring needs either top_k or threshold".into())),
        }
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("scoring.alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("scoring.lambda must be positive, got {}", self.lambda)));
        }
        self.comm_cost.validate(num_clients)?;
        self.rule().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerScore {
    pub peer_id: usize,
    pub s_l: f64,
    pub s_d: f64,
    pub s_p: f64,
    pub composite: f64,
}

/// Last round each visible peer was selected, plus the current round.
#[derive(Debug, Clone, PartialEq)]
pub struct RecencyArray {
    last_selected: BTreeMap<usize, Option<usize>>,
    current_iter: usize,
}

impl RecencyArray {
    pub fn new(peers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            last_selected: peers.into_iter().map(|p| (p, None)).collect(),
            current_iter: 0,
        }
    }

    pub fn current_iter(&self) -> usize {
        self.current_iter
    }

    pub fn set_current_iter(&mut self, iter: usize) {
        self.current_iter = iter;
    }

    pub fn last_selected(&self, peer: usize) -> Option<usize> {
        self.last_selected.get(&peer).copied().flatten()
    }

    pub fn peers(&self) -> impl Iterator<Item = usize> + '_ {
        self.last_selected.keys().copied()
    }

    /// Stamps each peer with the current iteration.
    pub fn mark_selected(&mut self, peers: &[usize]) -> Result<()> {
        for p in peers {
            let slot = self
                .last_selected
                .get_mut(p)
                .ok_or_else(|| Error::Precondition(format!("peer {p} not tracked by recency array")))?;
            *slot = Some(self.current_iter);
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn force(&mut self, peer: usize, last: Option<usize>) {
        self.last_selected.insert(peer, last);
    }
}

/// `|mean cross-entropy of model on the peer's sample|`.
pub fn loss_disparity_score(model: &SplitModel, peer_data: &Batch) -> Result<f64> {
    if peer_data.is_empty() {
        return Err(Error::Precondition("peer evaluation sample is empty".into()));
    }
    Ok(model.loss(peer_data)?.abs())
}

/// Cosine similarity of two flattened header parameter vectors.
pub fn header_distance_score(h: &[f64], g: &[f64]) -> Result<f64> {
    if h.len() != g.len() {
        return Err(Error::shape("header_distance_score", h.len(), g.len()));
    }
    if h.is_empty() {
        return Err(Error::Precondition("header vectors are empty".into()));
    }
    let dot: f64 = h.iter().zip(g).map(|(a, b)| a * b).sum();
    let nh = h.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ng = g.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nh == 0.0 || ng == 0.0 {
        return Err(Error::Precondition("cosine similarity undefined for a zero vector".into()));
    }
    Ok((dot / (nh * ng)).clamp(-1.0, 1.0))
}

/// `1 - exp(-lambda * (n_t - n_0))`, or 1 for a never-selected peer.
pub fn recency_score(rec: &RecencyArray, peer: usize, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!("lambda must be positive, got {lambda}")));
    }
    if !rec.last_selected.contains_key(&peer) {
        return Err(Error::Precondition(format!("peer {peer} not tracked by recency array")));
    }
    match rec.last_selected(peer) {
        None => Ok(1.0),
        Some(last) if last > rec.current_iter => Err(Error::Precondition(format!(
            "peer {peer} last selected at {last}, after current iteration {}",
            rec.current_iter
        ))),
        Some(last) => Ok(-(-lambda * (rec.current_iter - last) as f64).exp_m1()),
    }
}

pub fn composite_score(s_l: f64, s_d: f64, s_p: f64, params: &ScoringParams, client: usize, peer: usize) -> f64 {
    let c = params.comm_cost.get(client, peer);
    s_p * (params.alpha * s_l - s_d + c)
}

/// Outcome of [`select_peers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected peer ids in descending composite order.
    pub peers: Vec<usize>,
    pub warning: Option<String>,
}

/// Applies the configured rule. Ties in top-k mode go to the lower peer id;
/// `self_id` is never selected.
pub fn select_peers(scores: &[PeerScore], params: &ScoringParams, self_id: usize) -> Result<Selection> {
    if scores.is_empty() {
        return Err(Error::Precondition("no candidate scores".into()));
    }
    let mut candidates: Vec<&PeerScore> = scores.iter().filter(|s| s.peer_id != self_id).collect();
    candidates.sort_by(|a, b| b.composite.total_cmp(&a.composite).then(a.peer_id.cmp(&b.peer_id)));
    let mut warning = None;
    let chosen: Vec<usize> = match params.rule()? {
        SelectionRule::TopK(k) => {
            if k > candidates.len() {
                warning = Some(format!("top_k {k} exceeds {} candidates; selecting all", candidates.len()));
            }
            candidates.iter().take(k).map(|s| s.peer_id).collect()
        }
        SelectionRule::Threshold(t) => candidates.iter().filter(|s| s.composite > t).map(|s| s.peer_id).collect(),
    };
    Ok(Selection { peers: chosen, warning })
}

/// What a client knows about one peer when computing selection skew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerLoss {
    pub peer_id: usize,
    /// Loss of the client's model on this peer's data.
    pub loss_on_peer: f64,
    /// Share of training data held by the peer.
    pub data_fraction: f64,
    /// Stand-in for the loss of the peer's optimal model on its own data.
    pub baseline: f64,
}

/// Selection skew of the chosen subset relative to all available peers.
/// Returns `None` when the denominator is not positive.
pub fn selection_skew(own_loss: f64, selected: &[usize], peers: &[PeerLoss]) -> Result<Option<f64>> {
    if selected.is_empty() {
        return Err(Error::Precondition("selection skew needs a nonempty selection".into()));
    }
    let lookup: BTreeMap<usize, &PeerLoss> = peers.iter().map(|p| (p.peer_id, p)).collect();
    let mut num = 0.0;
    let mut num_w = 0.0;
    for id in selected {
        let p = lookup
            .get(id)
            .ok_or_else(|| Error::Precondition(format!("selected peer {id} not among available peers")))?;
        num += p.data_fraction * (p.loss_on_peer - p.baseline);
        num_w += p.data_fraction;
    }
    let all_w: f64 = peers.iter().map(|p| p.data_fraction).sum();
    let all_baseline: f64 = peers.iter().map(|p| p.data_fraction * p.baseline).sum();
    if !(num_w > 0.0 && all_w > 0.0) {
        return Ok(None);
    }
    let denom = own_loss - all_baseline / all_w;
    if !(denom > 0.0) {
        return Ok(None);
    }
    Ok(Some((num / num_w) / denom))
}
