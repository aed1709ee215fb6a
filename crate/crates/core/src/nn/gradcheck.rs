//! Central finite-difference verification of analytic gradients.

use super::model::{Batch, Freeze, Gradients, Part, SplitModel};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms, since finite differences carry ~1e-10 of noise.
const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub part: Part,
    pub layer: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks the model's own analytic gradients for the active parts.
pub fn gradient_check(model: &SplitModel, batch: &Batch, freeze: Freeze, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batch, freeze)?;
    compare_gradients(model, batch, &grads, freeze, step, tolerance)
}

/// Compares `grads` against `(L(θ+δ) − L(θ−δ)) / 2δ` for every active
/// parameter. Frozen parts must carry exactly-zero gradients; any nonzero
/// entry there counts as an infinite error.
pub fn compare_gradients(
    model: &SplitModel,
    batch: &Batch,
    grads: &Gradients,
    freeze: Freeze,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {step}")));
    }
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if !grads.matches(model) {
        return Err(Error::shape("gradient_check", "model-shaped gradients", "mismatched"));
    }
    let mut probe = model.clone();
    let mut layers = Vec::new();
    for part in [Part::Feature, Part::Header] {
        for (li, g) in grads.part(part).iter().enumerate() {
            let analytic: Vec<f64> = g.weights.as_slice().iter().chain(&g.bias).copied().collect();
            let mut max_err: f64 = 0.0;
            if freeze.is_frozen(part) {
                if analytic.iter().any(|&x| x != 0.0) {
                    max_err = f64::INFINITY;
                }
            } else {
                for (k, &a) in analytic.iter().enumerate() {
                    let original = param(&probe, part, li, k);
                    set_param(&mut probe, part, li, k, original + step);
                    let plus = probe.loss(batch)?;
                    set_param(&mut probe, part, li, k, original - step);
                    let minus = probe.loss(batch)?;
                    set_param(&mut probe, part, li, k, original);
                    let numeric = (plus - minus) / (2.0 * step);
                    max_err = max_err.max(relative_error(a, numeric));
                }
            }
            layers.push(LayerCheck {
                part,
                layer: li,
                max_rel_error: max_err,
            });
        }
    }
    Ok(GradCheckReport { layers, tolerance })
}

fn param(model: &SplitModel, part: Part, layer: usize, k: usize) -> f64 {
    let l = &model.layers(part)[layer];
    let nw = l.weights.as_slice().len();
    if k < nw {
        l.weights.as_slice()[k]
    } else {
        l.bias[k - nw]
    }
}

fn set_param(model: &mut SplitModel, part: Part, layer: usize, k: usize, v: f64) {
    let l = &mut model.layers_mut(part)[layer];
    let nw = l.weights.as_slice().len();
    if k < nw {
        l.weights.as_mut_slice()[k] = v;
    } else {
        l.bias[k - nw] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenseMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (SplitModel, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SplitModel::new(2, &[4], 3, 1, &mut rng).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.4, -1.2], vec![1.5, 0.3], vec![-0.7, 0.9]]).unwrap();
        (model, Batch::new(x, vec![0, 2, 1]).unwrap())
    }

    #[test]
    fn fresh_model_passes() {
        let (m, b) = fixture();
        for freeze in [Freeze::NoneFrozen, Freeze::HeaderFrozen, Freeze::FeatureFrozen] {
            let r = gradient_check(&m, &b, freeze, 1e-5, 1e-4).unwrap();
            assert!(r.passed(), "{freeze:?}: {r:?}");
        }
    }

    #[test]
    fn planted_wrong_gradient_fails() {
        let (m, b) = fixture();
        let (_, mut g) = m.loss_and_grads(&b, Freeze::NoneFrozen).unwrap();
        g.header[0].bias[1] += 0.05;
        let r = compare_gradients(&m, &b, &g, Freeze::NoneFrozen, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn nonzero_gradient_in_frozen_part_fails() {
        let (m, b) = fixture();
        let (_, mut g) = m.loss_and_grads(&b, Freeze::HeaderFrozen).unwrap();
        g.header[0].weights.as_mut_slice()[0] = 1e-9;
        let r = compare_gradients(&m, &b, &g, Freeze::HeaderFrozen, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn guards() {
        let (m, b) = fixture();
        assert!(gradient_check(&m, &b, Freeze::NoneFrozen, 0.0, 1e-4).is_err());
        let empty = Batch::new(DenseMatrix::zeros(0, 2), vec![]).unwrap();
        assert!(matches!(
            gradient_check(&m, &empty, Freeze::NoneFrozen, 1e-5, 1e-4),
            Err(Error::Precondition(_))
        ));
    }
}
