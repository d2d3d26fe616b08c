//! Training objectives with analytic gradients.
//!
//! All sequence losses average a per-position objective over the `T`
//! predicted positions of a caption (every word plus the closing `<eos>`);
//! batch losses average those per-caption means uniformly. Gradients for
//! groups outside the requested [`TrainScope`] are exactly zero.

mod gradcheck;
mod surface;
mod token;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{add_outer, Distribution, ModelParams, TrainScope};

pub use gradcheck::grad_check;
pub use surface::{loss_surface, write_surface_csv, SurfaceRow};
pub use token::{
    anti_focal_token, anti_focal_value, bias_product, bias_product_log, bp_token, ce_token, ce_value, focal_token,
    focal_value, PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelParams,
}

/// Immutable copy of a model used as the biased factor of the bias product.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReference {
    params: ModelParams,
    beta: f64,
}

impl FrozenReference {
    pub fn new(params: ModelParams, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid("beta_prime", "must be finite and non-negative"));
        }
        Ok(Self { params, beta })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn check_compatible(&self, params: &ModelParams) -> Result<()> {
        if self.params.dims != params.dims {
            return Err(Error::ShapeMismatch(format!(
                "frozen reference {:?} vs trainable {:?}",
                self.params.dims, params.dims
            )));
        }
        Ok(())
    }
}

/// Per-position objective selector.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    CrossEntropy,
    Focal { gamma: f64 },
    AntiFocal { gamma: f64, alpha: f64 },
    BiasProduct(&'a FrozenReference),
}

impl Objective<'_> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Focal { gamma } if !(gamma >= 0.0) => {
                Err(Error::invalid("gamma", "must be non-negative"))
            }
            Objective::AntiFocal { gamma, alpha } if !(gamma >= 0.0 && alpha >= 0.0) => {
                Err(Error::invalid("gamma/alpha", "must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// `<bos>`-prefixed inputs for a target sequence.
pub(crate) fn shifted_inputs(bos: usize, targets: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(bos);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    inputs
}

/// Caption words followed by `<eos>`.
pub(crate) fn caption_targets(params: &ModelParams, caption: &[usize]) -> Result<Vec<usize>> {
    if caption.is_empty() {
        return Err(Error::invalid("caption", "must contain at least one token"));
    }
    for &t in caption {
        params.check_token(t)?;
    }
    let mut targets = caption.to_vec();
    targets.push(params.dims.eos());
    Ok(targets)
}

/// Classifier part of the backward pass over precomputed hidden states.
/// Accumulates `weight * dL/dW`, `weight * dL/db` into `grads` and returns
/// the summed (unweighted) position losses plus `dL/dh` per position when
/// requested.
pub(crate) fn classifier_pass<F>(
    params: &ModelParams,
    hidden: &[Array1<f64>],
    targets: &[usize],
    weight: f64,
    grads: &mut ModelParams,
    want_dh: bool,
    mut position: F,
) -> (f64, Vec<Array1<f64>>)
where
    F: FnMut(usize, ArrayView1<f64>, usize) -> (f64, Array1<f64>),
{
    let mut total = 0.0;
    let mut dh = Vec::with_capacity(if want_dh { hidden.len() } else { 0 });
    for (t, (h, &gold)) in hidden.iter().zip(targets).enumerate() {
        let z = params.logits(h);
        let (l, mut dz) = position(t, z.view(), gold);
        total += l;
        dz *= weight;
        add_outer(&mut grads.classifier_w, h, &dz);
        grads.classifier_b += &dz;
        if want_dh {
            dh.push(params.classifier_w.dot(&dz));
        }
    }
    (total, dh)
}

/// Teacher-forced objective over one target sequence; returns the summed
/// position losses and accumulates `weight`-scaled gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sequence_objective(
    params: &ModelParams,
    features: &[f64],
    targets: &[usize],
    objective: Objective<'_>,
    beta: f64,
    scope: TrainScope,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let inputs = shifted_inputs(params.dims.bos(), targets);
    let traj = params.forward(features, &inputs)?;
    let frozen_logits = match objective {
        Objective::BiasProduct(frozen) => {
            frozen.check_compatible(params)?;
            let ft = frozen.params.forward(features, &inputs)?;
            ft.hidden.iter().map(|h| frozen.params.logits(h)).collect()
        }
        _ => Vec::new(),
    };
    let all = scope == TrainScope::AllParams;
    let (total, dh) = classifier_pass(params, &traj.hidden, targets, weight, grads, all, |t, z, g| {
        position_loss(objective, z, frozen_logits.get(t), g, beta)
    });
    if all {
        params.backward_encoder(&traj, features, &dh, grads);
    }
    Ok(total)
}

pub(crate) fn position_loss(
    objective: Objective<'_>,
    z: ArrayView1<f64>,
    z_frozen: Option<&Array1<f64>>,
    gold: usize,
    beta: f64,
) -> (f64, Array1<f64>) {
    match objective {
        Objective::CrossEntropy => ce_token(z, gold, beta),
        Objective::Focal { gamma } => focal_token(z, gold, beta, gamma),
        Objective::AntiFocal { gamma, alpha } => anti_focal_token(z, gold, beta, gamma, alpha),
        Objective::BiasProduct(frozen) => bp_token(
            z,
            z_frozen.expect("frozen logits").view(),
            gold,
            beta,
            frozen.beta,
        ),
    }
}

/// Mean objective over one ground-truth caption.
pub fn caption_loss(
    params: &ModelParams,
    features: &[f64],
    caption: &[usize],
    objective: Objective<'_>,
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    objective.validate()?;
    let targets = caption_targets(params, caption)?;
    let mut grads = ModelParams::zeros(params.dims);
    let t = targets.len() as f64;
    let total = sequence_objective(params, features, &targets, objective, beta, scope, 1.0 / t, &mut grads)?;
    Ok(LossOutput {
        loss: total / t,
        grads,
    })
}

/// Cross-entropy on a ground-truth caption.
pub fn ce_loss(
    params: &ModelParams,
    features: &[f64],
    caption: &[usize],
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    caption_loss(params, features, caption, Objective::CrossEntropy, beta, scope)
}

/// Bias-product loss against a frozen reference; the reference receives no gradient.
pub fn bp_loss(
    params: &ModelParams,
    frozen: &FrozenReference,
    features: &[f64],
    caption: &[usize],
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    caption_loss(params, features, caption, Objective::BiasProduct(frozen), beta, scope)
}

pub fn focal_loss(
    params: &ModelParams,
    features: &[f64],
    caption: &[usize],
    beta: f64,
    gamma: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    caption_loss(params, features, caption, Objective::Focal { gamma }, beta, scope)
}

pub fn anti_focal_loss(
    params: &ModelParams,
    features: &[f64],
    caption: &[usize],
    beta: f64,
    gamma: f64,
    alpha: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    caption_loss(params, features, caption, Objective::AntiFocal { gamma, alpha }, beta, scope)
}

/// Bias-product next-token distribution after `prefix`.
pub fn bp_prob(
    params: &ModelParams,
    frozen: &FrozenReference,
    features: &[f64],
    prefix: &[usize],
    beta: f64,
) -> Result<Distribution> {
    frozen.check_compatible(params)?;
    let z = crate::model::score_step(params, features, prefix)?;
    let zf = crate::model::score_step(&frozen.params, features, prefix)?;
    Ok(Distribution {
        probs: bias_product(z.view(), zf.view(), beta, frozen.beta),
    })
}

/// One (image, caption) pair of a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub features: &'a [f64],
    pub caption: &'a [usize],
}

/// Items per gradient buffer in [`batch_loss`]. Fixed so the reduction
/// order, and therefore the result, does not depend on the thread count.
const CHUNK: usize = 8;

/// Uniform mean of per-caption losses. Fixed-size chunks of items are
/// evaluated in parallel and reduced in input order.
pub fn batch_loss(
    params: &ModelParams,
    items: &[BatchItem<'_>],
    objective: Objective<'_>,
    beta: f64,
    scope: TrainScope,
) -> Result<LossOutput> {
    if items.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    objective.validate()?;
    let n = items.len() as f64;
    let parts: Vec<LossOutput> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = ModelParams::zeros(params.dims);
            let mut loss = 0.0;
            for it in chunk {
                let targets = caption_targets(params, it.caption)?;
                let t = targets.len() as f64;
                let total =
                    sequence_objective(params, it.features, &targets, objective, beta, scope, 1.0 / (t * n), &mut grads)?;
                loss += total / t;
            }
            Ok(LossOutput { loss, grads })
        })
        .collect::<Result<_>>()?;
    let mut grads = ModelParams::zeros(params.dims);
    let mut loss = 0.0;
    for p in &parts {
        loss += p.loss;
        grads.add_scaled(1.0, &p.grads, scope);
    }
    Ok(LossOutput { loss: loss / n, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 5,
            hidden: 4,
            feature: 3,
        }
    }

    fn feats() -> Vec<f64> {
        vec![0.5, -0.3, 0.9]
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let p = ModelParams::zeros(dims());
        // three words + eos: T = 4, a power of two, so the mean is exact
        let out = ce_loss(&p, &feats(), &[0, 1, 0], 1.0, TrainScope::AllParams).unwrap();
        assert_eq!(out.loss, (5f64).ln());
        let out = ce_loss(&p, &feats(), &[0, 1], 1.0, TrainScope::AllParams).unwrap();
        assert!((out.loss - (5f64).ln()).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let mut z = Array1::zeros(5);
        z[2] = 800.0;
        let (l, g) = ce_token(z.view(), 2, 1.0);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-300));

        // a model whose bias is confident in word 0 at every position pays
        // only for the eos position, which is floored
        let mut p = ModelParams::zeros(dims());
        p.classifier_b[0] = 800.0;
        let out = ce_loss(&p, &feats(), &[0], 1.0, TrainScope::AllParams).unwrap();
        assert!((out.loss - (-PROB_FLOOR.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_caption_rejected() {
        let p = ModelParams::init(dims(), 1).unwrap();
        assert!(ce_loss(&p, &feats(), &[], 1.0, TrainScope::AllParams).is_err());
        assert!(ce_loss(&p, &feats(), &[9], 1.0, TrainScope::AllParams).is_err());
    }

    #[test]
    fn classifier_only_leaves_encoder_gradients_zero() {
        let p = ModelParams::init(dims(), 2).unwrap();
        let frozen = FrozenReference::new(p.clone(), 1.0).unwrap();
        for obj in [
            Objective::CrossEntropy,
            Objective::Focal { gamma: 1.0 },
            Objective::AntiFocal {
                gamma: 1.0,
                alpha: 1.0,
            },
            Objective::BiasProduct(&frozen),
        ] {
            let out = caption_loss(&p, &feats(), &[0, 1, 1], obj, 1.0, TrainScope::ClassifierOnly).unwrap();
            for (name, is_cls, g) in out.grads.groups() {
                if !is_cls {
                    assert!(g.iter().all(|&x| x == 0.0), "{name} touched");
                }
            }
            assert!(out.grads.classifier_b.iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn bp_with_zero_frozen_beta_equals_ce() {
        let p = ModelParams::init(dims(), 3).unwrap();
        let other = ModelParams::init(dims(), 4).unwrap();
        let frozen = FrozenReference::new(other, 0.0).unwrap();
        let ce = ce_loss(&p, &feats(), &[1, 0, 1], 1.0, TrainScope::AllParams).unwrap();
        let bp = bp_loss(&p, &frozen, &feats(), &[1, 0, 1], 1.0, TrainScope::AllParams).unwrap();
        assert!((ce.loss - bp.loss).abs() < 1e-10);
    }

    #[test]
    fn bp_prob_doubles_temperature_for_identical_reference() {
        let p = ModelParams::init(dims(), 3).unwrap();
        let frozen = FrozenReference::new(p.clone(), 1.0).unwrap();
        let q = bp_prob(&p, &frozen, &feats(), &[3, 0], 1.0).unwrap();
        let z = crate::model::score_step(&p, &feats(), &[3, 0]).unwrap();
        let p2 = crate::model::softmax_temp(z.view(), 2.0).unwrap();
        for (a, b) in q.probs.iter().zip(p2.probs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = ModelParams::init(dims(), 3).unwrap();
        let other = ModelParams::init(
            ModelDims {
                vocab: 6,
                ..dims()
            },
            3,
        )
        .unwrap();
        let frozen = FrozenReference::new(other, 1.0).unwrap();
        assert!(matches!(
            bp_prob(&p, &frozen, &feats(), &[3], 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn batch_loss_is_mean_of_items() {
        let p = ModelParams::init(dims(), 5).unwrap();
        let f2 = vec![0.1, 0.2, -0.4];
        let items = [
            BatchItem {
                features: &feats(),
                caption: &[0, 1],
            },
            BatchItem {
                features: &f2,
                caption: &[1, 1, 0],
            },
        ];
        let b = batch_loss(&p, &items, Objective::CrossEntropy, 1.0, TrainScope::AllParams).unwrap();
        let a0 = ce_loss(&p, &feats(), &[0, 1], 1.0, TrainScope::AllParams).unwrap();
        let a1 = ce_loss(&p, &f2, &[1, 1, 0], 1.0, TrainScope::AllParams).unwrap();
        assert!((b.loss - (a0.loss + a1.loss) / 2.0).abs() < 1e-14);
        let expect = (a0.grads.classifier_b[2] + a1.grads.classifier_b[2]) / 2.0;
        assert!((b.grads.classifier_b[2] - expect).abs() < 1e-14);
    }
}
