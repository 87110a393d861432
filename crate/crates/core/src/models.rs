//! The micro U-Net split into a feature extractor (downward path through the
//! second downsampling) and a task head (bottleneck, upward path, output
//! head), plus the domain discriminator attached to the features through the
//! gradient reversal layer.

use rand::Rng;

use crate::layers::{dense, GrlConfig};
use crate::rng::derive_rng;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

/// Which of the three trainable parameter groups a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Feature extractor (encoder blocks up to the second downsampling).
    Theta,
    /// Task head (bottleneck, decoder, output head).
    Sigma,
    /// Domain discriminator.
    Mu,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Theta => "theta",
            Role::Sigma => "sigma",
            Role::Mu => "mu",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "theta" => Some(Role::Theta),
            "sigma" => Some(Role::Sigma),
            "mu" => Some(Role::Mu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor,
}

/// Convolution layer wiring: indices of kernel and bias in the bundle's
/// parameter list.
#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseRef {
    pub w: usize,
    pub b: usize,
}

/// Two conv-conv-pool encoder blocks (the feature extractor), then
/// bottleneck, two upsample-conv-concat-conv decoder stages and a 1x1
/// sigmoid head (the task head).
#[derive(Clone, Debug)]
pub struct MicroUNet {
    pub enc1a: ConvRef,
    pub enc1b: ConvRef,
    pub enc2a: ConvRef,
    pub enc2b: ConvRef,
    pub bott_a: ConvRef,
    pub bott_b: ConvRef,
    pub up1: ConvRef,
    pub dec1: ConvRef,
    pub up2: ConvRef,
    pub dec2: ConvRef,
    pub head: ConvRef,
}

/// Conv-Conv-Conv-FC-FC-FC domain classifier over the extractor's features.
#[derive(Clone, Debug)]
pub struct DomainDiscriminator {
    pub convs: [ConvRef; 3],
    pub fcs: [DenseRef; 3],
    /// Spatial dims of the feature maps the dense stack was sized for.
    pub input_hw: (usize, usize),
    pub num_domains: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscSpec {
    pub num_domains: usize,
    /// Feature-map spatial dims = input dims / 4.
    pub input_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub params: Vec<Param>,
    pub unet: MicroUNet,
    pub disc: Option<DomainDiscriminator>,
    pub in_channels: usize,
    pub base_channels: usize,
}

/// Glorot bound a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn conv_out_stride2(s: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1
    (s + 2 - 3) / 2 + 1
}

struct Builder {
    params: Vec<Param>,
}

impl Builder {
    fn conv<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        role: Role,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvRef {
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let a = glorot_bound(fan_in, fan_out);
        let data: Vec<f64> = (0..out_ch * in_ch * k * k)
            .map(|_| rng.random_range(-a..a))
            .collect();
        let w = self.push(
            format!("{name}.w"),
            role,
            Tensor::new(vec![out_ch, in_ch, k, k], data).expect("conv shape"),
        );
        let b = self.push(format!("{name}.b"), role, Tensor::zeros(vec![out_ch]));
        ConvRef { w, b, stride, padding }
    }

    fn dense<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        role: Role,
        in_dim: usize,
        out_dim: usize,
    ) -> DenseRef {
        let a = glorot_bound(in_dim, out_dim);
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-a..a)).collect();
        let w = self.push(
            format!("{name}.w"),
            role,
            Tensor::new(vec![in_dim, out_dim], data).expect("dense shape"),
        );
        let b = self.push(format!("{name}.b"), role, Tensor::zeros(vec![out_dim]));
        DenseRef { w, b }
    }

    fn push(&mut self, name: String, role: Role, tensor: Tensor) -> usize {
        self.params.push(Param { name, role, tensor });
        self.params.len() - 1
    }
}

/// Deterministic model initialization: conv and dense weights from
/// uniform(-a, a) with the Glorot bound, biases zero. The discriminator draws
/// from its own stream, so its presence never shifts the U-Net's weights.
pub fn init_params(
    seed: u64,
    in_channels: usize,
    base_channels: usize,
    disc: Option<DiscSpec>,
) -> ModelBundle {
    let b = base_channels;
    let mut builder = Builder { params: Vec::new() };
    let mut rng = derive_rng(seed, "init/unet");

    let enc1a = builder.conv(&mut rng, "enc1a", Role::Theta, in_channels, 2 * b, 3, 1, 1);
    let enc1b = builder.conv(&mut rng, "enc1b", Role::Theta, 2 * b, 2 * b, 3, 1, 1);
    let enc2a = builder.conv(&mut rng, "enc2a", Role::Theta, 2 * b, 4 * b, 3, 1, 1);
    let enc2b = builder.conv(&mut rng, "enc2b", Role::Theta, 4 * b, 4 * b, 3, 1, 1);

    let bott_a = builder.conv(&mut rng, "bott_a", Role::Sigma, 4 * b, 4 * b, 3, 1, 1);
    let bott_b = builder.conv(&mut rng, "bott_b", Role::Sigma, 4 * b, 4 * b, 3, 1, 1);
    let up1 = builder.conv(&mut rng, "up1", Role::Sigma, 4 * b, 2 * b, 3, 1, 1);
    let dec1 = builder.conv(&mut rng, "dec1", Role::Sigma, 6 * b, 2 * b, 3, 1, 1);
    let up2 = builder.conv(&mut rng, "up2", Role::Sigma, 2 * b, b, 3, 1, 1);
    let dec2 = builder.conv(&mut rng, "dec2", Role::Sigma, 3 * b, b, 3, 1, 1);
    let head = builder.conv(&mut rng, "head", Role::Sigma, b, 1, 1, 1, 0);

    let unet = MicroUNet { enc1a, enc1b, enc2a, enc2b, bott_a, bott_b, up1, dec1, up2, dec2, head };

    let disc = disc.map(|spec| {
        let mut drng = derive_rng(seed, "init/disc");
        let (h, w) = spec.input_hw;
        let c1 = builder.conv(&mut drng, "disc.conv1", Role::Mu, 4 * b, 32, 3, 2, 1);
        let c2 = builder.conv(&mut drng, "disc.conv2", Role::Mu, 32, 32, 3, 2, 1);
        let c3 = builder.conv(&mut drng, "disc.conv3", Role::Mu, 32, 32, 3, 2, 1);
        let (h3, w3) = (
            conv_out_stride2(conv_out_stride2(conv_out_stride2(h))),
            conv_out_stride2(conv_out_stride2(conv_out_stride2(w))),
        );
        let flat = 32 * h3 * w3;
        let f1 = builder.dense(&mut drng, "disc.fc1", Role::Mu, flat, 64);
        let f2 = builder.dense(&mut drng, "disc.fc2", Role::Mu, 64, 64);
        let f3 = builder.dense(&mut drng, "disc.fc3", Role::Mu, 64, spec.num_domains);
        DomainDiscriminator {
            convs: [c1, c2, c3],
            fcs: [f1, f2, f3],
            input_hw: spec.input_hw,
            num_domains: spec.num_domains,
        }
    });

    ModelBundle { params: builder.params, unet, disc, in_channels, base_channels }
}

impl ModelBundle {
    /// Register every parameter as a tape leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    pub fn indices_of(&self, role: Role) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn conv_apply(
    tape: &mut Tape,
    ids: &[NodeId],
    c: &ConvRef,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    tape.conv2d(x, ids[c.w], ids[c.b], c.stride, c.padding)
}

fn conv_relu(
    tape: &mut Tape,
    ids: &[NodeId],
    c: &ConvRef,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let y = conv_apply(tape, ids, c, x)?;
    Ok(tape.relu(y))
}

/// Encoder forward: returns (features after the second pooling, skip1, skip2).
pub fn extract_features(
    bundle: &ModelBundle,
    tape: &mut Tape,
    ids: &[NodeId],
    x: NodeId,
) -> Result<(NodeId, NodeId, NodeId), TensorError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
        return Err(TensorError::Invalid {
            op: "unet_forward",
            msg: format!("spatial dims must be divisible by 4, got {:?}", shape),
        });
    }
    if shape[1] != bundle.in_channels {
        return Err(TensorError::Invalid {
            op: "unet_forward",
            msg: format!("expected {} input channels, got {}", bundle.in_channels, shape[1]),
        });
    }
    let u = &bundle.unet;
    let e1 = conv_relu(tape, ids, &u.enc1a, x)?;
    let skip1 = conv_relu(tape, ids, &u.enc1b, e1)?;
    let p1 = tape.maxpool2(skip1)?;
    let e2 = conv_relu(tape, ids, &u.enc2a, p1)?;
    let skip2 = conv_relu(tape, ids, &u.enc2b, e2)?;
    let features = tape.maxpool2(skip2)?;
    Ok((features, skip1, skip2))
}

/// Full U-Net forward: (features, mask probabilities in (0, 1)).
pub fn unet_forward(
    bundle: &ModelBundle,
    tape: &mut Tape,
    ids: &[NodeId],
    x: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let (features, skip1, skip2) = extract_features(bundle, tape, ids, x)?;
    let mask = task_head(bundle, tape, ids, features, skip1, skip2)?;
    Ok((features, mask))
}

/// Task-head forward from precomputed encoder outputs.
pub fn task_head(
    bundle: &ModelBundle,
    tape: &mut Tape,
    ids: &[NodeId],
    features: NodeId,
    skip1: NodeId,
    skip2: NodeId,
) -> Result<NodeId, TensorError> {
    let u = &bundle.unet;
    let b1 = conv_relu(tape, ids, &u.bott_a, features)?;
    let b2 = conv_relu(tape, ids, &u.bott_b, b1)?;

    let up = tape.upsample2_nearest(b2)?;
    let up = conv_relu(tape, ids, &u.up1, up)?;
    let cat = tape.concat_channels(up, skip2)?;
    let d1 = conv_relu(tape, ids, &u.dec1, cat)?;

    let up = tape.upsample2_nearest(d1)?;
    let up = conv_relu(tape, ids, &u.up2, up)?;
    let cat = tape.concat_channels(up, skip1)?;
    let d2 = conv_relu(tape, ids, &u.dec2, cat)?;

    let logits = conv_apply(tape, ids, &u.head, d2)?;
    Ok(tape.sigmoid(logits))
}

/// Domain logits from extractor features, with the gradient reversal layer
/// in between: backward sends -gamma-scaled gradients into the extractor and
/// unscaled gradients into the discriminator.
pub fn discriminate(
    bundle: &ModelBundle,
    tape: &mut Tape,
    ids: &[NodeId],
    features: NodeId,
    grl: &GrlConfig,
) -> Result<NodeId, TensorError> {
    let disc = bundle.disc.as_ref().ok_or_else(|| TensorError::Invalid {
        op: "discriminate",
        msg: "bundle has no discriminator".into(),
    })?;
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 || (shape[2], shape[3]) != disc.input_hw || shape[1] != 4 * bundle.base_channels {
        return Err(TensorError::ShapeMismatch {
            op: "discriminate",
            lhs: shape,
            rhs: vec![0, 4 * bundle.base_channels, disc.input_hw.0, disc.input_hw.1],
        });
    }
    let n = shape[0];
    let mut h = tape.grl(features, grl.gamma);
    for c in &disc.convs {
        h = conv_relu(tape, ids, c, h)?;
    }
    let ch: usize = tape.shape(h)[1..].iter().product();
    let mut flat = tape.reshape(h, vec![n, ch])?;
    for (i, fc) in disc.fcs.iter().enumerate() {
        flat = dense(tape, flat, ids[fc.w], ids[fc.b])?;
        if i + 1 < disc.fcs.len() {
            flat = tape.relu(flat);
        }
    }
    Ok(flat)
}

/// Convenience inference: mask probabilities for a packed [N, C, H, W] batch
/// on a throwaway tape.
pub fn infer_mask_probs(bundle: &ModelBundle, images: &Tensor) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let ids = bundle.bind(&mut tape);
    let x = tape.leaf(images);
    let (_, mask) = unet_forward(bundle, &mut tape, &ids, x)?;
    Ok(tape.tensor(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;

    #[test]
    fn zero_input_gives_half_probabilities() {
        let bundle = init_params(1, 1, 4, None);
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        let probs = infer_mask_probs(&bundle, &x).unwrap();
        for v in probs.data() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn forward_shapes_trace_two_poolings() {
        let base = 8;
        let bundle = init_params(2, 1, base, None);
        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(vec![2, 1, 32, 32]));
        let (features, mask) = unet_forward(&bundle, &mut tape, &ids, x).unwrap();
        assert_eq!(tape.shape(features), &[2, 4 * base, 8, 8]);
        assert_eq!(tape.shape(mask), &[2, 1, 32, 32]);
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let bundle = init_params(3, 1, 4, None);
        let x = Tensor::zeros(vec![1, 1, 30, 30]);
        assert!(infer_mask_probs(&bundle, &x).is_err());
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let bundle = init_params(4, 1, 4, None);
        let mut rng = derive_rng(5, "probs");
        let data: Vec<f64> = (0..8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(vec![1, 1, 8, 8], data).unwrap();
        let probs = infer_mask_probs(&bundle, &x).unwrap();
        for v in probs.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(7, 1, 4, None);
        let b = init_params(7, 1, 4, None);
        let c = init_params(8, 1, 4, None);
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        assert!(a
            .params
            .iter()
            .zip(&c.params)
            .any(|(pa, pc)| pa.tensor.data() != pc.tensor.data()));
    }

    #[test]
    fn discriminator_does_not_shift_unet_init() {
        let plain = init_params(9, 1, 4, None);
        let with_disc =
            init_params(9, 1, 4, Some(DiscSpec { num_domains: 2, input_hw: (4, 4) }));
        for p in &plain.params {
            let q = with_disc.param(&p.name).unwrap();
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
    }

    #[test]
    fn glorot_bound_example() {
        // 3x3 conv mapping 8 -> 16 channels
        let a = glorot_bound(8 * 9, 16 * 9);
        assert!((a - (6.0 / 216.0f64).sqrt()).abs() < 1e-15);
        assert!((a - 0.1667).abs() < 1e-4);
    }

    #[test]
    fn role_partition_covers_params_disjointly() {
        let bundle = init_params(10, 1, 4, Some(DiscSpec { num_domains: 3, input_hw: (4, 4) }));
        let theta = bundle.indices_of(Role::Theta);
        let sigma = bundle.indices_of(Role::Sigma);
        let mu = bundle.indices_of(Role::Mu);
        let mut all: Vec<usize> = theta.iter().chain(&sigma).chain(&mu).copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..bundle.params.len()).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn zero_gamma_detaches_extractor_from_domain_loss() {
        let bundle = init_params(11, 1, 2, Some(DiscSpec { num_domains: 2, input_hw: (2, 2) }));
        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let mut rng = derive_rng(12, "gamma0");
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 8, 8], data).unwrap());
        let (features, _, _) = extract_features(&bundle, &mut tape, &ids, x).unwrap();
        let logits = discriminate(&bundle, &mut tape, &ids, features, &GrlConfig { gamma: 0.0 }).unwrap();
        let loss = crate::layers::softmax_cross_entropy(&mut tape, logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        for &i in &bundle.indices_of(Role::Theta) {
            for g in tape.grad(ids[i]) {
                assert_eq!(*g, 0.0);
            }
        }
        // while the discriminator itself does receive gradient
        let mu = bundle.indices_of(Role::Mu);
        assert!(mu.iter().any(|&i| tape.grad(ids[i]).iter().any(|g| *g != 0.0)));
    }

    #[test]
    fn symmetric_discriminator_gives_equal_logits() {
        let mut bundle = init_params(13, 1, 2, Some(DiscSpec { num_domains: 2, input_hw: (2, 2) }));
        // zero out the class layer: logits must then be identical per class
        let fc3 = bundle.disc.as_ref().unwrap().fcs[2];
        bundle.params[fc3.w].tensor = Tensor::zeros(bundle.params[fc3.w].tensor.shape().to_vec());
        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let x = tape.leaf(&Tensor::full(vec![1, 1, 8, 8], 0.3));
        let (features, _, _) = extract_features(&bundle, &mut tape, &ids, x).unwrap();
        let logits = discriminate(&bundle, &mut tape, &ids, features, &GrlConfig { gamma: 0.1 }).unwrap();
        let d = tape.data(logits);
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn reversal_actually_reverses_theta_gradients() {
        // gradient on theta through the GRL must anti-align with the true
        // descent direction on the domain loss
        let bundle = init_params(14, 1, 2, Some(DiscSpec { num_domains: 2, input_hw: (2, 2) }));
        let mut rng = derive_rng(15, "reversal");
        let data: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let x_t = Tensor::new(vec![2, 1, 8, 8], data).unwrap();
        let labels = [0usize, 1usize];

        let run = |gamma: Option<f64>| {
            let mut tape = Tape::new();
            let ids = bundle.bind(&mut tape);
            let x = tape.leaf(&x_t);
            let (features, _, _) = extract_features(&bundle, &mut tape, &ids, x).unwrap();
            let after = match gamma {
                Some(g) => {
                    let logits =
                        discriminate(&bundle, &mut tape, &ids, features, &GrlConfig { gamma: g })
                            .unwrap();
                    logits
                }
                None => {
                    // identity in place of the GRL: same network, true gradient
                    let disc = bundle.disc.as_ref().unwrap();
                    let mut h = features;
                    for c in &disc.convs {
                        h = tape.conv2d(h, ids[c.w], ids[c.b], c.stride, c.padding).unwrap();
                        h = tape.relu(h);
                    }
                    let ch: usize = tape.shape(h)[1..].iter().product();
                    let n = tape.shape(h)[0];
                    let mut flat = tape.reshape(h, vec![n, ch]).unwrap();
                    for (i, fc) in disc.fcs.iter().enumerate() {
                        flat = dense(&mut tape, flat, ids[fc.w], ids[fc.b]).unwrap();
                        if i + 1 < disc.fcs.len() {
                            flat = tape.relu(flat);
                        }
                    }
                    flat
                }
            };
            let loss = crate::layers::softmax_cross_entropy(&mut tape, after, &labels).unwrap();
            tape.backward(loss).unwrap();
            let theta = bundle.indices_of(Role::Theta);
            let grads: Vec<Vec<f64>> =
                theta.iter().map(|&i| tape.grad(ids[i]).to_vec()).collect();
            grads
        };

        let reversed = run(Some(0.05));
        let truth = run(None);
        let dot: f64 = reversed
            .iter()
            .flatten()
            .zip(truth.iter().flatten())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot < 0.0, "reversed gradient should oppose the descent direction, dot = {dot}");
    }

    #[test]
    fn discriminate_gradients_match_finite_differences() {
        let bundle = init_params(16, 1, 2, Some(DiscSpec { num_domains: 2, input_hw: (2, 2) }));
        let mut rng = derive_rng(17, "disc-fd");
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let x_t = Tensor::new(vec![1, 1, 8, 8], data).unwrap();
        let labels = [1usize];
        let gamma = 0.07;

        let loss_with = |bundle: &ModelBundle| -> f64 {
            let mut tape = Tape::new();
            let ids = bundle.bind(&mut tape);
            let x = tape.leaf(&x_t);
            let (features, _, _) = extract_features(bundle, &mut tape, &ids, x).unwrap();
            let logits =
                discriminate(bundle, &mut tape, &ids, features, &GrlConfig { gamma }).unwrap();
            let loss = crate::layers::softmax_cross_entropy(&mut tape, logits, &labels).unwrap();
            tape.value(loss)
        };

        let mut tape = Tape::new();
        let ids = bundle.bind(&mut tape);
        let x = tape.leaf(&x_t);
        let (features, _, _) = extract_features(&bundle, &mut tape, &ids, x).unwrap();
        let logits =
            discriminate(&bundle, &mut tape, &ids, features, &GrlConfig { gamma }).unwrap();
        let loss = crate::layers::softmax_cross_entropy(&mut tape, logits, &labels).unwrap();
        tape.backward(loss).unwrap();

        // mu sees the true derivative; theta sits below the reversal, so its
        // tape gradient is -gamma times the derivative of the (identity
        // forward) function that finite differences measure
        for (name, scale) in [("enc1a.w", -gamma), ("disc.fc3.w", 1.0)] {
            let pi = bundle.params.iter().position(|p| p.name == name).unwrap();
            let analytic = tape.grad(ids[pi]).to_vec();
            let fd = finite_difference_grad(
                |t| {
                    let mut b2 = bundle.clone();
                    b2.params[pi].tensor = t.clone();
                    loss_with(&b2)
                },
                &bundle.params[pi].tensor,
                1e-5,
            );
            for (g, f) in analytic.iter().zip(fd.data()) {
                let f = scale * f;
                let denom = g.abs().max(f.abs()).max(1.0);
                assert!((g - f).abs() / denom < 1e-4, "{name}: {g} vs {f}");
            }
        }
    }
}
