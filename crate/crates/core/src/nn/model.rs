//! Feed-forward classifier split into a shared feature extractor and a
//! personalized header.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Which half of a [`SplitModel`] a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Feature,
    Header,
}

/// Fully connected layer. `weights` is `fan_in × fan_out` so that a batch
/// maps as `X · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weights: DenseMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out, activation);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

/// A labelled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("Batch::new", inputs.rows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    FeatureFrozen,
    HeaderFrozen,
    NoneFrozen,
}

impl Freeze {
    pub fn is_frozen(self, part: Part) -> bool {
        matches!(
            (self, part),
            (Freeze::FeatureFrozen, Part::Feature) | (Freeze::HeaderFrozen, Part::Header)
        )
    }
}

/// Intermediate values recorded by [`SplitModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, in network order.
    layer_inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<DenseMatrix>,
}

/// Gradient (or momentum buffer) for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: DenseMatrix::zeros(layer.fan_in(), layer.fan_out()),
            bias: vec![0.0; layer.fan_out()],
        }
    }

    fn matches(&self, layer: &DenseLayer) -> bool {
        self.weights.shape() == layer.weights.shape() && self.bias.len() == layer.bias.len()
    }
}

/// Parameter-shaped container: one [`LayerGrad`] per model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub feature: Vec<LayerGrad>,
    pub header: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &SplitModel) -> Self {
        Self {
            feature: model.feature_layers.iter().map(LayerGrad::zeros_like).collect(),
            header: model.header_layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn part(&self, part: Part) -> &[LayerGrad] {
        match part {
            Part::Feature => &self.feature,
            Part::Header => &self.header,
        }
    }

    pub fn part_mut(&mut self, part: Part) -> &mut [LayerGrad] {
        match part {
            Part::Feature => &mut self.feature,
            Part::Header => &mut self.header,
        }
    }

    pub fn matches(&self, model: &SplitModel) -> bool {
        self.feature.len() == model.feature_layers.len()
            && self.header.len() == model.header_layers.len()
            && self.feature.iter().zip(&model.feature_layers).all(|(g, l)| g.matches(l))
            && self.header.iter().zip(&model.header_layers).all(|(g, l)| g.matches(l))
    }

    /// Iterates over every entry of the given part, weights then bias per layer.
    pub fn values(&self, part: Part) -> impl Iterator<Item = f64> + '_ {
        self.part(part)
            .iter()
            .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias).copied())
    }
}

/// Multi-layer perceptron with layers `[feature_layers..., header_layers...]`.
///
/// Every layer except the last uses ReLU; the last emits raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    feature_layers: Vec<DenseLayer>,
    header_layers: Vec<DenseLayer>,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
}

impl SplitModel {
    /// Glorot-initialized model. `feature_depth` is the number of leading
    /// layers that form the feature extractor; it must leave at least one
    /// header layer.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        feature_depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(input_dim, hidden_dims, num_classes, feature_depth, |i, o, a| {
            DenseLayer::glorot(i, o, a, rng)
        })
    }

    pub fn zeros(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        feature_depth: usize,
    ) -> Result<Self> {
        Self::build(input_dim, hidden_dims, num_classes, feature_depth, DenseLayer::zeros)
    }

    fn build(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        feature_depth: usize,
        mut make: impl FnMut(usize, usize, Activation) -> DenseLayer,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::Precondition("layer widths must be positive".into()));
        }
        let n_layers = hidden_dims.len() + 1;
        if feature_depth >= n_layers {
            return Err(Error::Precondition(format!(
                "feature depth {feature_depth} leaves no header layer ({n_layers} layers)"
            )));
        }
        let mut widths = Vec::with_capacity(n_layers + 1);
        widths.push(input_dim);
        widths.extend_from_slice(hidden_dims);
        widths.push(num_classes);
        let mut layers: Vec<DenseLayer> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                make(w[0], w[1], act)
            })
            .collect();
        let header_layers = layers.split_off(feature_depth);
        Ok(Self {
            feature_layers: layers,
            header_layers,
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            num_classes,
        })
    }

    /// Assembles a model from explicit layers, checking that widths chain.
    pub fn from_layers(feature_layers: Vec<DenseLayer>, header_layers: Vec<DenseLayer>) -> Result<Self> {
        if header_layers.is_empty() {
            return Err(Error::Precondition("model needs at least one header layer".into()));
        }
        let all: Vec<&DenseLayer> = feature_layers.iter().chain(&header_layers).collect();
        for (i, pair) in all.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(
                    format!("layer {} input", i + 1),
                    pair[0].fan_out(),
                    pair[1].fan_in(),
                ));
            }
        }
        for (i, l) in all.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape(format!("layer {i} bias"), l.fan_out(), l.bias.len()));
            }
        }
        let input_dim = all[0].fan_in();
        let num_classes = all[all.len() - 1].fan_out();
        let hidden_dims = all[..all.len() - 1].iter().map(|l| l.fan_out()).collect();
        Ok(Self {
            feature_layers,
            header_layers,
            input_dim,
            hidden_dims,
            num_classes,
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn feature_layers(&self) -> &[DenseLayer] {
        &self.feature_layers
    }

    pub fn header_layers(&self) -> &[DenseLayer] {
        &self.header_layers
    }

    pub fn layers(&self, part: Part) -> &[DenseLayer] {
        match part {
            Part::Feature => &self.feature_layers,
            Part::Header => &self.header_layers,
        }
    }

    /// Mutable access to a part's parameters. Layer shapes and activations
    /// must not be altered by callers.
    pub fn layers_mut(&mut self, part: Part) -> &mut [DenseLayer] {
        match part {
            Part::Feature => &mut self.feature_layers,
            Part::Header => &mut self.header_layers,
        }
    }

    /// Replaces the feature extractor with layers of identical shapes.
    pub fn set_feature_layers(&mut self, layers: Vec<DenseLayer>) -> Result<()> {
        check_same_shapes(&self.feature_layers, &layers, "feature layers")?;
        self.feature_layers = layers;
        Ok(())
    }

    pub fn set_header_layers(&mut self, layers: Vec<DenseLayer>) -> Result<()> {
        check_same_shapes(&self.header_layers, &layers, "header layers")?;
        self.header_layers = layers;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.all_layers().map(DenseLayer::num_params).sum()
    }

    fn all_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.feature_layers.iter().chain(&self.header_layers)
    }

    /// Header parameters concatenated per layer as weights (row-major)
    /// followed by bias.
    pub fn header_flat(&self) -> Vec<f64> {
        flatten(&self.header_layers)
    }

    pub fn feature_flat(&self) -> Vec<f64> {
        flatten(&self.feature_layers)
    }

    pub fn is_finite(&self) -> bool {
        self.all_layers()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        if inputs.cols() != self.input_dim {
            return Err(Error::shape("layer 0 input", self.input_dim, inputs.cols()));
        }
        let n = self.feature_layers.len() + self.header_layers.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut current = inputs.clone();
        for (i, layer) in self.all_layers().enumerate() {
            let mut z = current
                .matmul(&layer.weights)
                .map_err(|_| Error::shape(format!("layer {i} input"), layer.fan_in(), current.cols()))?;
            z.add_row_vector(&layer.bias)?;
            let mut a = z.clone();
            a.map_inplace(|x| layer.activation.apply(x));
            layer_inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        Ok((
            current,
            ForwardCache {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(inputs).map(|(z, _)| z)
    }

    pub fn predict(&self, inputs: &DenseMatrix) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let logits = self.logits(&batch.inputs)?;
        Ok(mean_cross_entropy(&logits, &batch.labels))
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let preds = self.predict(&batch.inputs)?;
        let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / batch.len() as f64)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Precondition(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy and its gradient. Frozen parts get
    /// all-zero gradients.
    pub fn loss_and_grads(&self, batch: &Batch, freeze: Freeze) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        let (logits, cache) = self.forward(&batch.inputs)?;
        let loss = mean_cross_entropy(&logits, &batch.labels);

        // dL/dz for the logits: (softmax - onehot) / B
        let b = batch.len() as f64;
        let mut delta = logits;
        for (r, &y) in batch.labels.iter().enumerate() {
            let row = &mut delta.as_mut_slice()[r * self.num_classes..(r + 1) * self.num_classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum * b;
            }
            row[y] -= 1.0 / b;
        }

        let mut grads = Gradients::zeros_like(self);
        let n_feature = self.feature_layers.len();
        let layers: Vec<&DenseLayer> = self.all_layers().collect();
        // Backprop stops once everything below is frozen.
        let lowest_needed = if freeze.is_frozen(Part::Feature) { n_feature } else { 0 };
        for idx in (lowest_needed..layers.len()).rev() {
            let layer = layers[idx];
            let (part, local) = if idx < n_feature {
                (Part::Feature, idx)
            } else {
                (Part::Header, idx - n_feature)
            };
            if !freeze.is_frozen(part) {
                let g = &mut grads.part_mut(part)[local];
                g.weights = cache.layer_inputs[idx].t_matmul(&delta)?;
                g.bias = delta.column_sums();
            }
            if idx > lowest_needed {
                let mut upstream = delta.matmul_t(&layer.weights)?;
                let prev = layers[idx - 1];
                let pre = &cache.pre_activations[idx - 1];
                for (d, &z) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= prev.activation.derivative(z);
                }
                delta = upstream;
            }
        }
        Ok((loss, grads))
    }
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(DenseLayer::num_params).sum());
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn check_same_shapes(current: &[DenseLayer], new: &[DenseLayer], what: &str) -> Result<()> {
    if current.len() != new.len() {
        return Err(Error::shape(what, current.len(), new.len()));
    }
    for (i, (a, b)) in current.iter().zip(new).enumerate() {
        if a.weights.shape() != b.weights.shape() || a.bias.len() != b.bias.len() {
            return Err(Error::shape(
                format!("{what} [{i}]"),
                format!("{:?}", a.weights.shape()),
                format!("{:?}", b.weights.shape()),
            ));
        }
    }
    Ok(())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean of `logsumexp(z) - z_y` over rows.
pub fn mean_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}
