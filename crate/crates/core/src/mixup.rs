//! Cross-domain mixup: Beta(alpha, alpha) sampling, mixed batches, and the
//! loss balancing that weighs each parent's loss by its mixing coefficient.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{bce_per_item, soft_dice_per_item};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MixupError {
    #[error("beta shape parameter must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("mixing requires a batch of at least 2 items, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Beta shape parameter for the mixing coefficient.
    pub alpha: f64,
    /// Per-item probability of replacing the item with a mixed counterpart.
    pub apply_prob: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { alpha: 0.7, apply_prob: 0.5 }
    }
}

/// Which per-item segmentation loss the task update minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskLossKind {
    Dice,
    Bce,
}

/// How the domain loss treats a mixed sample: weigh both parents' labels by
/// the mixing coefficient, or take the dominant parent's label alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainLabelMode {
    Mixed,
    Dominant,
}

/// One training batch before mixing: per-item images [C, H, W], binary masks
/// [H, W], and source-domain indices in 0..k.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub domains: Vec<usize>,
}

/// Batch after (possibly trivial) mixing. Unmixed items keep lambda = 1 and
/// pair with themselves; their images are verbatim copies of the originals.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// [N, C, H, W]
    pub images: Tensor,
    pub lambda: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// [N, 1, H, W] masks of the primary parent.
    pub mask_p: Tensor,
    /// [N, 1, H, W] masks of the secondary parent.
    pub mask_q: Tensor,
    pub dom_p: Vec<usize>,
    pub dom_q: Vec<usize>,
    pub mixed: Vec<bool>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn any_mixed(&self) -> bool {
        self.mixed.iter().any(|&m| m)
    }
}

/// Gamma(shape, 1) variate. Rejection sampling: the Ahrens-Dieter scheme for
/// shape < 1, Marsaglia-Tsang squeeze for shape >= 1.
fn sample_gamma<R: Rng>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let b = 1.0 + shape / std::f64::consts::E;
        loop {
            let p = b * rng.random::<f64>();
            if p <= 1.0 {
                let x = p.powf(1.0 / shape);
                if rng.random::<f64>() <= (-x).exp() {
                    return x;
                }
            } else {
                let x = -((b - p) / shape).ln();
                if rng.random::<f64>() <= x.powf(shape - 1.0) {
                    return x;
                }
            }
        }
    } else {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let z = crate::rng::standard_normal(rng);
            let v = (1.0 + c * z).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u: f64 = rng.random();
            if u < 1.0 - 0.0331 * z.powi(4) {
                return d * v;
            }
            if u.ln() < 0.5 * z * z + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }
}

/// Exact Beta(alpha, alpha) variate from the ratio of two Gamma draws.
pub fn sample_beta<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64, MixupError> {
    if alpha <= 0.0 {
        return Err(MixupError::NonPositiveAlpha(alpha));
    }
    let g1 = sample_gamma(alpha, rng);
    let g2 = sample_gamma(alpha, rng);
    if g1 + g2 == 0.0 {
        return Ok(0.5);
    }
    Ok(g1 / (g1 + g2))
}

/// Convex combination lambda * p + (1 - lambda) * q.
pub fn mix_images(p: &Tensor, q: &Tensor, lambda: f64) -> Result<Tensor, TensorError> {
    if p.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mix_images",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let data = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Tensor::new(p.shape().to_vec(), data)
}

fn pack_images(images: &[Tensor]) -> Tensor {
    let item = images[0].shape().to_vec();
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&item);
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(shape, data).expect("uniform item shapes")
}

fn pack_masks(masks: &[&Tensor]) -> Tensor {
    let (h, w) = (masks[0].shape()[0], masks[0].shape()[1]);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend_from_slice(m.data());
    }
    Tensor::new(vec![masks.len(), 1, h, w], data).expect("uniform mask shapes")
}

/// Replace each item with a mixed counterpart with probability
/// `cfg.apply_prob`; partners are drawn uniformly over the rest of the batch,
/// so cross-domain pairs arise naturally in multi-source batches.
pub fn mix_batch<R: Rng>(
    batch: &DomainBatch,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixedBatch, MixupError> {
    let n = batch.images.len();
    if cfg.apply_prob > 0.0 && n < 2 {
        return Err(MixupError::BatchTooSmall(n));
    }
    let mut images = Vec::with_capacity(n);
    let mut lambda = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut mixed = Vec::with_capacity(n);
    for p in 0..n {
        let apply = cfg.apply_prob > 0.0 && rng.random::<f64>() < cfg.apply_prob;
        if apply {
            let mut q = rng.random_range(0..n - 1);
            if q >= p {
                q += 1;
            }
            let lam = sample_beta(cfg.alpha, rng)?;
            images.push(mix_images(&batch.images[p], &batch.images[q], lam)?);
            lambda.push(lam);
            pairs.push((p, q));
            mixed.push(true);
        } else {
            images.push(batch.images[p].clone());
            lambda.push(1.0);
            pairs.push((p, p));
            mixed.push(false);
        }
    }
    Ok(assemble(batch, images, lambda, pairs, mixed))
}

/// Identity batch: lambda = 1 throughout, every item its own pair. Used by
/// the non-mixing training variants; consumes no randomness.
pub fn unmixed_batch(batch: &DomainBatch) -> MixedBatch {
    let n = batch.images.len();
    assemble(
        batch,
        batch.images.clone(),
        vec![1.0; n],
        (0..n).map(|i| (i, i)).collect(),
        vec![false; n],
    )
}

fn assemble(
    batch: &DomainBatch,
    images: Vec<Tensor>,
    lambda: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    mixed: Vec<bool>,
) -> MixedBatch {
    let mask_p: Vec<&Tensor> = pairs.iter().map(|&(p, _)| &batch.masks[p]).collect();
    let mask_q: Vec<&Tensor> = pairs.iter().map(|&(_, q)| &batch.masks[q]).collect();
    MixedBatch {
        images: pack_images(&images),
        mask_p: pack_masks(&mask_p),
        mask_q: pack_masks(&mask_q),
        dom_p: pairs.iter().map(|&(p, _)| batch.domains[p]).collect(),
        dom_q: pairs.iter().map(|&(_, q)| batch.domains[q]).collect(),
        lambda,
        pairs,
        mixed,
    }
}

/// Balanced task loss: mean over items of
/// lambda * loss(pred, mask_p) + (1 - lambda) * loss(pred, mask_q).
///
/// When no item is mixed this reduces to the plain per-item loss against the
/// items' own masks, with an identical tape graph.
pub fn mixed_task_loss(
    tape: &mut Tape,
    pred: NodeId,
    mb: &MixedBatch,
    kind: TaskLossKind,
    dice_eps: f64,
) -> Result<NodeId, TensorError> {
    let n = mb.len();
    let t_p = tape.leaf(&mb.mask_p);
    let loss_p = per_item_loss(tape, pred, t_p, kind, dice_eps)?;
    let w_p: Vec<f64> = mb.lambda.iter().map(|l| l / n as f64).collect();
    let w_p_id = tape.leaf(&Tensor::new(vec![n], w_p).expect("weights"));
    let weighted_p = tape.mul(loss_p, w_p_id)?;
    let total_p = tape.sum(weighted_p);
    if !mb.any_mixed() {
        return Ok(total_p);
    }
    let t_q = tape.leaf(&mb.mask_q);
    let loss_q = per_item_loss(tape, pred, t_q, kind, dice_eps)?;
    let w_q: Vec<f64> = mb.lambda.iter().map(|l| (1.0 - l) / n as f64).collect();
    let w_q_id = tape.leaf(&Tensor::new(vec![n], w_q).expect("weights"));
    let weighted_q = tape.mul(loss_q, w_q_id)?;
    let total_q = tape.sum(weighted_q);
    tape.add(total_p, total_q)
}

fn per_item_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    kind: TaskLossKind,
    dice_eps: f64,
) -> Result<NodeId, TensorError> {
    match kind {
        TaskLossKind::Dice => soft_dice_per_item(tape, pred, target, dice_eps),
        TaskLossKind::Bce => bce_per_item(tape, pred, target),
    }
}

/// Balanced domain loss. In `Mixed` mode, mean over items of
/// lambda * CE(logits, dom_p) + (1 - lambda) * CE(logits, dom_q); in
/// `Dominant` mode, plain cross-entropy against the heavier parent's label.
pub fn mixed_domain_loss(
    tape: &mut Tape,
    logits: NodeId,
    mb: &MixedBatch,
    mode: DomainLabelMode,
) -> Result<NodeId, TensorError> {
    let n = mb.len();
    if mode == DomainLabelMode::Dominant {
        let labels: Vec<usize> = mb
            .lambda
            .iter()
            .zip(mb.dom_p.iter().zip(&mb.dom_q))
            .map(|(l, (p, q))| if *l >= 0.5 { *p } else { *q })
            .collect();
        let ce = tape.cross_entropy_rows(logits, &labels)?;
        let total = tape.sum(ce);
        return Ok(tape.affine(total, 1.0 / n as f64, 0.0));
    }
    let ce_p = tape.cross_entropy_rows(logits, &mb.dom_p)?;
    let w_p: Vec<f64> = mb.lambda.iter().map(|l| l / n as f64).collect();
    let w_p_id = tape.leaf(&Tensor::new(vec![n], w_p).expect("weights"));
    let weighted_p = tape.mul(ce_p, w_p_id)?;
    let total_p = tape.sum(weighted_p);
    if !mb.any_mixed() {
        return Ok(total_p);
    }
    let ce_q = tape.cross_entropy_rows(logits, &mb.dom_q)?;
    let w_q: Vec<f64> = mb.lambda.iter().map(|l| (1.0 - l) / n as f64).collect();
    let w_q_id = tape.leaf(&Tensor::new(vec![n], w_q).expect("weights"));
    let weighted_q = tape.mul(ce_q, w_q_id)?;
    let total_q = tape.sum(weighted_q);
    tape.add(total_p, total_q)
}
