//! Loss functions and layer parameter types on top of the tape ops.
//!
//! The spatial primitives (conv, pooling, upsampling, concat, activations,
//! gradient reversal) are tape methods; this module provides the segmentation
//! and domain losses composed from those primitives plus the parameter
//! structs used to describe convolution layers.

use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Parameters of one 2D convolution: kernel [out_ch, in_ch, kh, kw], bias
/// [out_ch].
#[derive(Clone, Debug)]
pub struct Conv2DParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2DParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self, TensorError> {
        if kernel.shape().len() != 4 {
            return Err(TensorError::Invalid {
                op: "conv_params",
                msg: format!("kernel must be [oc, ic, kh, kw], got {:?}", kernel.shape()),
            });
        }
        if bias.shape() != [kernel.shape()[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_params",
                lhs: bias.shape().to_vec(),
                rhs: vec![kernel.shape()[0]],
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv_params", msg: "stride must be positive".into() });
        }
        Ok(Conv2DParams { kernel, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// Register kernel and bias on a tape and apply the convolution.
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, TensorError> {
        let k = tape.leaf(&self.kernel);
        let b = tape.leaf(&self.bias);
        tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

/// Adversarial weight of the gradient reversal layer. Mutable between
/// batches, constant within one backward pass.
#[derive(Clone, Copy, Debug)]
pub struct GrlConfig {
    pub gamma: f64,
}

/// Dense layer y = x W + b with x [N, in], W [in, out], b [out].
pub fn dense(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

fn check_binary(op: &'static str, target: &Tensor) -> Result<(), TensorError> {
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::Invalid { op, msg: "target mask must be binary".into() });
    }
    Ok(())
}

/// Soft Dice loss over the whole tensor:
/// 1 - (2 * sum(pred * target) + eps) / (sum(pred) + sum(target) + eps).
///
/// Differentiable in `pred`; `target` is a constant. Both-empty inputs give
/// exactly 0 thanks to the smoothing term.
pub fn soft_dice_loss(
    tape: &mut Tape,
    pred: NodeId,
    target: &Tensor,
    eps: f64,
) -> Result<NodeId, TensorError> {
    same_shape_as(tape, "soft_dice", pred, target)?;
    check_binary("soft_dice", target)?;
    let t = tape.leaf(target);
    let inter = tape.mul(pred, t)?;
    let s_inter = tape.sum(inter);
    let s_pred = tape.sum(pred);
    let s_t = tape.sum(t);
    let num = tape.affine(s_inter, 2.0, eps);
    let den_sum = tape.add(s_pred, s_t)?;
    let den = tape.affine(den_sum, 1.0, eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Per-item soft Dice losses: pred and target are [N, ...]; returns a [N]
/// node with one Dice loss per batch item.
pub fn soft_dice_per_item(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let inter = tape.mul(pred, target)?;
    let s_inter = tape.sum_per_item(inter)?;
    let s_pred = tape.sum_per_item(pred)?;
    let s_t = tape.sum_per_item(target)?;
    let num = tape.affine(s_inter, 2.0, eps);
    let den_sum = tape.add(s_pred, s_t)?;
    let den = tape.affine(den_sum, 1.0, eps);
    let ratio = tape.div(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Per-item mean binary cross-entropy: pred and target are [N, ...]; returns
/// a [N] node. Configurable alternative to the Dice task loss; probabilities
/// are clamped away from 0 and 1 inside the logs.
pub fn bce_per_item(
    tape: &mut Tape,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId, TensorError> {
    const FLOOR: f64 = 1e-12;
    let ln_p = tape.ln_clamped(pred, FLOOR);
    let one_minus_p = tape.affine(pred, -1.0, 1.0);
    let ln_q = tape.ln_clamped(one_minus_p, FLOOR);
    let t_lnp = tape.mul(target, ln_p)?;
    let one_minus_t = tape.affine(target, -1.0, 1.0);
    let q_lnq = tape.mul(one_minus_t, ln_q)?;
    let sum_terms = tape.add(t_lnp, q_lnq)?;
    let per_item = tape.sum_per_item(sum_terms)?;
    let n_pixels: usize = tape.shape(pred).iter().skip(1).product();
    Ok(tape.affine(per_item, -1.0 / n_pixels.max(1) as f64, 0.0))
}

fn same_shape_as(
    tape: &Tape,
    op: &'static str,
    node: NodeId,
    t: &Tensor,
) -> Result<(), TensorError> {
    if tape.shape(node) != t.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(node).to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over rows of -log softmax(logits)[label]: the domain classification
/// loss for logits [N, k].
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, TensorError> {
    let rows = tape.cross_entropy_rows(logits, labels)?;
    let total = tape.sum(rows);
    let n = labels.len().max(1) as f64;
    Ok(tape.affine(total, 1.0 / n, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&t(vec![1, 1, 1, 1], vec![1.0]));
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_hand_cross_correlation() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[10.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 1, 3, 3]));
        let b = tape.leaf(&t(vec![1], vec![0.7]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.data(y), &[0.7, 0.7, 0.7, 0.7]);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 4, 4]));
        let k = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, k, b, 1, 1).is_err());
    }

    #[test]
    fn maxpool_takes_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.data(y), &[4.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_replicates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 1, 1], vec![5.0]));
        let y = tape.upsample2_nearest(x).unwrap();
        assert_eq!(tape.data(y), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![3.0, -1.0, 0.5, 100.0, 0.0, -50.0]));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.data(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grl_forward_identity_backward_reverses() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.5, -2.0]));
        let y = tape.grl(x, 0.1);
        assert_eq!(tape.data(y), tape.data(x));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[-0.1, -0.1]);
    }

    #[test]
    fn grl_zero_gamma_detaches() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.5, -2.0]));
        let y = tape.grl(x, 0.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 0.0]);
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let mut tape = Tape::new();
        let target = t(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let pred = tape.leaf(&target);
        let loss = soft_dice_loss(&mut tape, pred, &target, 1.0).unwrap();
        assert!(tape.value(loss).abs() < 1e-15);
    }

    #[test]
    fn dice_all_zero_prediction() {
        // pred all 0, target has 4 foreground, eps = 1 -> 1 - 1/5 = 0.8
        let mut tape = Tape::new();
        let target = t(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let pred = tape.leaf(&Tensor::zeros(vec![2, 2]));
        let loss = soft_dice_loss(&mut tape, pred, &target, 1.0).unwrap();
        assert!((tape.value(loss) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dice_empty_empty_is_zero() {
        let mut tape = Tape::new();
        let target = Tensor::zeros(vec![3, 3]);
        let pred = tape.leaf(&Tensor::zeros(vec![3, 3]));
        let loss = soft_dice_loss(&mut tape, pred, &target, 1.0).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn dice_loss_in_unit_interval_and_monotone() {
        // Fixed mask sizes, growing overlap -> strictly decreasing loss.
        let target = t(vec![8], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut prev = f64::INFINITY;
        for overlap in 0..5 {
            let mut pred = vec![0.0; 8];
            for i in 0..4 {
                if i < overlap {
                    pred[i] = 1.0; // on target
                } else {
                    pred[4 + i] = 1.0; // off target
                }
            }
            let mut tape = Tape::new();
            let p = tape.leaf(&t(vec![8], pred));
            let loss = soft_dice_loss(&mut tape, p, &target, 1.0).unwrap();
            let v = tape.value(loss);
            assert!((0.0..=1.0).contains(&v));
            assert!(v < prev, "loss should fall as overlap grows");
            prev = v;
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]));
        let loss = softmax_cross_entropy(&mut tape, logits, &[1]).unwrap();
        assert!((tape.value(loss) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_dominant_logit() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![1, 2], vec![100.0, -100.0]));
        let loss = softmax_cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_explicit_probability() {
        // softmax of ln(p) recovers p; true class probability 0.5 -> ln 2.
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(vec![1, 3], vec![0.25f64.ln(), 0.25f64.ln(), 0.5f64.ln()]));
        let loss = softmax_cross_entropy(&mut tape, logits, &[2]).unwrap();
        assert!((tape.value(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]));
        assert!(tape.cross_entropy_rows(logits, &[3]).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        // One joint check through conv -> relu -> pool -> upsample -> concat
        // -> sigmoid -> dice; per-layer sweeps live in the acceptance suite.
        let x0 = t(
            vec![1, 1, 4, 4],
            (0..16).map(|i| (i as f64 * 0.37).sin() * 0.5).collect(),
        );
        let k0 = t(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.21).cos() * 0.3).collect());
        let target = {
            let mut m = vec![0.0; 16];
            m[5] = 1.0;
            m[6] = 1.0;
            t(vec![1, 1, 4, 4], m)
        };

        let eval = |kt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(&x0);
            let k = tape.leaf(kt);
            let b = tape.leaf(&t(vec![2], vec![0.05, -0.02]));
            let c = tape.conv2d(x, k, b, 1, 1).unwrap();
            let r = tape.relu(c);
            let p = tape.maxpool2(r).unwrap();
            let u = tape.upsample2_nearest(p).unwrap();
            let cat = tape.concat_channels(u, r).unwrap();
            let k1 = tape.leaf(&t(vec![1, 4, 1, 1], vec![0.4, -0.3, 0.2, 0.6]));
            let b1 = tape.leaf(&t(vec![1], vec![0.1]));
            let head = tape.conv2d(cat, k1, b1, 1, 0).unwrap();
            let prob = tape.sigmoid(head);
            let loss = soft_dice_loss(&mut tape, prob, &target, 1.0).unwrap();
            tape.value(loss)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let k = tape.leaf(&k0);
        let b = tape.leaf(&t(vec![2], vec![0.05, -0.02]));
        let c = tape.conv2d(x, k, b, 1, 1).unwrap();
        let r = tape.relu(c);
        let p = tape.maxpool2(r).unwrap();
        let u = tape.upsample2_nearest(p).unwrap();
        let cat = tape.concat_channels(u, r).unwrap();
        let k1 = tape.leaf(&t(vec![1, 4, 1, 1], vec![0.4, -0.3, 0.2, 0.6]));
        let b1 = tape.leaf(&t(vec![1], vec![0.1]));
        let head = tape.conv2d(cat, k1, b1, 1, 0).unwrap();
        let prob = tape.sigmoid(head);
        let loss = soft_dice_loss(&mut tape, prob, &target, 1.0).unwrap();
        tape.backward(loss).unwrap();

        let fd = finite_difference_grad(eval, &k0, 1e-5);
        for (g, f) in tape.grad(k).iter().zip(fd.data()) {
            let denom = g.abs().max(f.abs()).max(1.0);
            assert!((g - f).abs() / denom < 1e-4, "{g} vs {f}");
        }
    }
}
