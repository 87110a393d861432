//! Dense f64 tensors and a Wengert tape for reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] during the forward pass; [`Tape::backward`]
//! replays the recorded ops in reverse topological (creation) order and
//! accumulates gradients additively into every node, so leaves that feed the
//! root through several paths receive their total gradient and unreached
//! leaves stay at zero.

use thiserror::Error;

/// Identifier of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Dense n-dimensional array of f64 in row-major order.
///
/// Rank-0 tensors (`shape == []`) are scalars with exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.data.len() == 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Recorded operation. Saved context holds whatever backward needs beyond
/// the input values themselves (e.g. pooling argmax positions).
#[derive(Clone, Debug)]
#[allow(dead_code)] // op records keep full context even where backward needs less
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Affine { x: NodeId, mul: f64, add: f64 },
    Sum { x: NodeId },
    SumPerItem { x: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    SoftmaxRows { x: NodeId },
    CrossEntropyRows { logits: NodeId, labels: Vec<usize> },
    Conv2d { x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Upsample2 { x: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    Grl { x: NodeId, gamma: f64 },
    Reshape { x: NodeId },
    Ln { x: NodeId, floor: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Wengert tape. One tape per forward/backward pass; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, data, grad: Vec::new() });
        id
    }

    /// Record a leaf holding a copy of `t`. Parameters and constants are both
    /// leaves; the caller keeps track of which ids it wants gradients for.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Value of a rank-0 node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id].shape.is_empty());
        self.nodes[id].data[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor { shape: self.nodes[id].shape.clone(), data: self.nodes[id].data.clone() }
    }

    /// Gradient buffer of a node; zeros until `backward` has run.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = 0.0;
            }
        }
    }

    // ── elementwise and reduction ops ────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("add", &self.nodes[a].shape, &self.nodes[b].shape)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("mul", &self.nodes[a].shape, &self.nodes[b].shape)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, data))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape("div", &self.nodes[a].shape, &self.nodes[b].shape)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Div { a, b }, shape, data))
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| mul * v + add).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Affine { x, mul, add }, shape, data)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].data.iter().sum();
        self.push(Op::Sum { x }, vec![], vec![s])
    }

    /// Sum over all axes but the first: [N, ...] -> [N].
    pub fn sum_per_item(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = &self.nodes[x].shape;
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "sum_per_item",
                msg: "input must have a batch axis".into(),
            });
        }
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| self.nodes[x].data[i * per..(i + 1) * per].iter().sum())
            .collect();
        Ok(self.push(Op::SumPerItem { x }, vec![n], data))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, &mut data, m, k, n);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], data))
    }

    /// x: [N, k] plus bias [k] broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sb) = (&self.nodes[x].shape, &self.nodes[b].shape);
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sx.clone(), rhs: sb.clone() });
        }
        let (n, k) = (sx[0], sx[1]);
        let mut data = self.nodes[x].data.clone();
        for row in 0..n {
            for (v, bv) in data[row * k..(row + 1) * k].iter_mut().zip(&self.nodes[b].data) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddBias { x, b }, vec![n, k], data))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Relu { x }, shape, data)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|&v| sigmoid_stable(v)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Sigmoid { x }, shape, data)
    }

    /// Row softmax of a [N, k] tensor with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("expected [N, k], got {:?}", shape),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        let mut data = vec![0.0; n * k];
        for row in 0..n {
            let src = &self.nodes[x].data[row * k..(row + 1) * k];
            let dst = &mut data[row * k..(row + 1) * k];
            softmax_row(src, dst);
        }
        Ok(self.push(Op::SoftmaxRows { x }, shape, data))
    }

    /// Per-row negative log softmax probability of the given label: [N, k] -> [N].
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let shape = self.nodes[logits].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {:?} vs {} labels", shape, labels.len()),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        for &l in labels {
            if l >= k {
                return Err(TensorError::LabelOutOfRange { label: l, classes: k });
            }
        }
        let mut data = vec![0.0; n];
        for row in 0..n {
            let src = &self.nodes[logits].data[row * k..(row + 1) * k];
            let maxv = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = src.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
            data[row] = lse - src[labels[row]];
        }
        Ok(self.push(Op::CrossEntropyRows { logits, labels: labels.to_vec() }, vec![n], data))
    }

    // ── spatial ops ──────────────────────────────────────────────────

    /// Cross-correlation of x: [N, C, H, W] with kernel [OC, C, KH, KW] plus
    /// bias [OC].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let sx = self.nodes[x].shape.clone();
        let sk = self.nodes[kernel].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if sx.len() != 4 || sk.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sk });
        }
        if sx[1] != sk[1] {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input has {} channels, kernel expects {}", sx[1], sk[1]),
            });
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(TensorError::ShapeMismatch { op: "conv2d_bias", lhs: sb, rhs: vec![sk[0]] });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv2d", msg: "stride must be positive".into() });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, kh, kw) = (sk[0], sk[2], sk[3]);
        let oh = out_dim(h, padding, kh, stride)?;
        let ow = out_dim(w, padding, kw, stride)?;

        let mut data = vec![0.0; n * oc * oh * ow];
        {
            let xd = &self.nodes[x].data;
            let kd = &self.nodes[kernel].data;
            let bd = &self.nodes[bias].data;
            for ni in 0..n {
                let xin = &xd[ni * c * h * w..(ni + 1) * c * h * w];
                let out = &mut data[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                conv2d_forward_one(xin, kd, bd, out, c, h, w, oc, kh, kw, oh, ow, stride, padding);
            }
        }
        Ok(self.push(
            Op::Conv2d { x, kernel, bias, stride, padding },
            vec![n, oc, oh, ow],
            data,
        ))
    }

    /// 2x2 max pooling with stride 2. Gradient flows only to the argmax
    /// position of each window (first occurrence on ties).
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "maxpool2",
                msg: format!("expected [N, C, 2i, 2j], got {:?}", s),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xd = &self.nodes[x].data;
        for plane in 0..n * c {
            let xin = &xd[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (2 * i + di) * w + 2 * j + dj;
                            if xin[idx] > best {
                                best = xin[idx];
                                best_at = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    data[o] = best;
                    argmax[o] = plane * h * w + best_at;
                }
            }
        }
        Ok(self.push(Op::MaxPool2 { x, argmax }, vec![n, c, oh, ow], data))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2_nearest(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.nodes[x].shape.clone();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "upsample2",
                msg: format!("expected [N, C, H, W], got {:?}", s),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * oh * ow];
        let xd = &self.nodes[x].data;
        for plane in 0..n * c {
            let xin = &xd[plane * h * w..(plane + 1) * h * w];
            let out = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let v = xin[i * w + j];
                    out[(2 * i) * ow + 2 * j] = v;
                    out[(2 * i) * ow + 2 * j + 1] = v;
                    out[(2 * i + 1) * ow + 2 * j] = v;
                    out[(2 * i + 1) * ow + 2 * j + 1] = v;
                }
            }
        }
        Ok(self.push(Op::Upsample2 { x }, vec![n, c, oh, ow], data))
    }

    /// Concatenate along the channel axis: [N, Ca, H, W] ++ [N, Cb, H, W].
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = vec![0.0; n * (ca + cb) * plane];
        for ni in 0..n {
            let dst = &mut data[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
            dst[..ca * plane]
                .copy_from_slice(&self.nodes[a].data[ni * ca * plane..(ni + 1) * ca * plane]);
            dst[ca * plane..]
                .copy_from_slice(&self.nodes[b].data[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        Ok(self.push(Op::ConcatChannels { a, b }, vec![n, ca + cb, h, w], data))
    }

    /// Gradient reversal: identity forward, multiplies the upstream gradient
    /// by -gamma on the way back.
    pub fn grl(&mut self, x: NodeId, gamma: f64) -> NodeId {
        let shape = self.nodes[x].shape.clone();
        let data = self.nodes[x].data.clone();
        self.push(Op::Grl { x, gamma }, shape, data)
    }

    /// Natural log of the input clamped below at `floor`.
    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.nodes[x].shape.clone();
        self.push(Op::Ln { x, floor }, shape, data)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x].data.clone();
        Ok(self.push(Op::Reshape { x }, shape, data))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a rank-0 root. Every node reachable from the
    /// root receives its total gradient; everything else keeps zeros.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if !self.nodes[root].shape.is_empty() {
            return Err(TensorError::NonScalarRoot { shape: self.nodes[root].shape.clone() });
        }
        for n in &mut self.nodes {
            n.grad = vec![0.0; n.data.len()];
        }
        self.nodes[root].grad[0] = 1.0;

        for id in (0..=root).rev() {
            if self.nodes[id].grad.iter().all(|&g| g == 0.0) {
                if !matches!(self.nodes[id].op, Op::Leaf) {
                    continue;
                }
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[a].grad, &g);
                    accumulate(&mut self.nodes[b].grad, &g);
                    self.nodes[id].grad = g;
                }
                Op::Mul { a, b } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    {
                        let bd = self.nodes[b].data.clone();
                        for ((ga, gv), bv) in self.nodes[a].grad.iter_mut().zip(&g).zip(&bd) {
                            *ga += gv * bv;
                        }
                    }
                    {
                        let ad = self.nodes[a].data.clone();
                        for ((gb, gv), av) in self.nodes[b].grad.iter_mut().zip(&g).zip(&ad) {
                            *gb += gv * av;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Div { a, b } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ad = self.nodes[a].data.clone();
                    let bd = self.nodes[b].data.clone();
                    for ((ga, gv), bv) in self.nodes[a].grad.iter_mut().zip(&g).zip(&bd) {
                        *ga += gv / bv;
                    }
                    for (i, gb) in self.nodes[b].grad.iter_mut().enumerate() {
                        *gb += -g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                    self.nodes[id].grad = g;
                }
                Op::Affine { x, mul, .. } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    for (gx, gv) in self.nodes[x].grad.iter_mut().zip(&g) {
                        *gx += mul * gv;
                    }
                    self.nodes[id].grad = g;
                }
                Op::Sum { x } => {
                    let g = self.nodes[id].grad[0];
                    for gx in self.nodes[x].grad.iter_mut() {
                        *gx += g;
                    }
                }
                Op::SumPerItem { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let per = self.nodes[x].data.len() / g.len();
                    for (item, gv) in g.iter().enumerate() {
                        for gx in &mut self.nodes[x].grad[item * per..(item + 1) * per] {
                            *gx += gv;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::MatMul { a, b, m, k, n } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    // dA = G @ B^T
                    {
                        let bd = self.nodes[b].data.clone();
                        let mut bt = vec![0.0; k * n];
                        transpose_into(&bd, &mut bt, k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_into(&g, &bt, &mut da, m, n, k);
                        accumulate(&mut self.nodes[a].grad, &da);
                    }
                    // dB = A^T @ G
                    {
                        let ad = self.nodes[a].data.clone();
                        let mut at = vec![0.0; k * m];
                        transpose_into(&ad, &mut at, m, k);
                        let mut db = vec![0.0; k * n];
                        matmul_into(&at, &g, &mut db, k, m, n);
                        accumulate(&mut self.nodes[b].grad, &db);
                    }
                    self.nodes[id].grad = g;
                }
                Op::AddBias { x, b } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[x].grad, &g);
                    let k = self.nodes[b].data.len();
                    for row in g.chunks_exact(k) {
                        for (gb, gv) in self.nodes[b].grad.iter_mut().zip(row) {
                            *gb += gv;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Relu { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let xd = self.nodes[x].data.clone();
                    for ((gx, gv), xv) in self.nodes[x].grad.iter_mut().zip(&g).zip(&xd) {
                        if *xv > 0.0 {
                            *gx += gv;
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Sigmoid { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let yd = self.nodes[id].data.clone();
                    for ((gx, gv), yv) in self.nodes[x].grad.iter_mut().zip(&g).zip(&yd) {
                        *gx += gv * yv * (1.0 - yv);
                    }
                    self.nodes[id].grad = g;
                }
                Op::SoftmaxRows { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let k = self.nodes[id].shape[1];
                    let yd = self.nodes[id].data.clone();
                    for row in 0..self.nodes[id].shape[0] {
                        let ys = &yd[row * k..(row + 1) * k];
                        let gs = &g[row * k..(row + 1) * k];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                        for ((gx, y), gv) in self.nodes[x].grad[row * k..(row + 1) * k]
                            .iter_mut()
                            .zip(ys)
                            .zip(gs)
                        {
                            *gx += y * (gv - dot);
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::CrossEntropyRows { logits, labels } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let k = self.nodes[logits].shape[1];
                    let ld = self.nodes[logits].data.clone();
                    for (row, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let src = &ld[row * k..(row + 1) * k];
                        let mut soft = vec![0.0; k];
                        softmax_row(src, &mut soft);
                        let gx = &mut self.nodes[logits].grad[row * k..(row + 1) * k];
                        for (c, s) in soft.iter().enumerate() {
                            let target = if c == labels[row] { 1.0 } else { 0.0 };
                            gx[c] += gv * (s - target);
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::Conv2d { x, kernel, bias, stride, padding } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let sx = self.nodes[x].shape.clone();
                    let sk = self.nodes[kernel].shape.clone();
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (oc, kh, kw) = (sk[0], sk[2], sk[3]);
                    let (oh, ow) = (self.nodes[id].shape[2], self.nodes[id].shape[3]);
                    let xd = self.nodes[x].data.clone();
                    let kd = self.nodes[kernel].data.clone();
                    let mut gx = std::mem::take(&mut self.nodes[x].grad);
                    let mut gk = std::mem::take(&mut self.nodes[kernel].grad);
                    let mut gb = std::mem::take(&mut self.nodes[bias].grad);
                    for ni in 0..n {
                        let gout = &g[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
                        let xin = &xd[ni * c * h * w..(ni + 1) * c * h * w];
                        conv2d_backward_one(
                            xin,
                            &kd,
                            gout,
                            &mut gx[ni * c * h * w..(ni + 1) * c * h * w],
                            &mut gk,
                            &mut gb,
                            c,
                            h,
                            w,
                            oc,
                            kh,
                            kw,
                            oh,
                            ow,
                            stride,
                            padding,
                        );
                    }
                    self.nodes[x].grad = gx;
                    self.nodes[kernel].grad = gk;
                    self.nodes[bias].grad = gb;
                    self.nodes[id].grad = g;
                }
                Op::MaxPool2 { x, argmax } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    for (o, &src) in argmax.iter().enumerate() {
                        self.nodes[x].grad[src] += g[o];
                    }
                    self.nodes[id].grad = g;
                }
                Op::Upsample2 { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let s = self.nodes[x].shape.clone();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let planes = s[0] * s[1];
                    for plane in 0..planes {
                        let gout = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let gin = &mut self.nodes[x].grad[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                gin[i * w + j] += gout[(2 * i) * ow + 2 * j]
                                    + gout[(2 * i) * ow + 2 * j + 1]
                                    + gout[(2 * i + 1) * ow + 2 * j]
                                    + gout[(2 * i + 1) * ow + 2 * j + 1];
                            }
                        }
                    }
                    self.nodes[id].grad = g;
                }
                Op::ConcatChannels { a, b } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let sa = self.nodes[a].shape.clone();
                    let sb = self.nodes[b].shape.clone();
                    let plane = sa[2] * sa[3];
                    let (ca, cb) = (sa[1], sb[1]);
                    for ni in 0..sa[0] {
                        let gsl = &g[ni * (ca + cb) * plane..(ni + 1) * (ca + cb) * plane];
                        accumulate(
                            &mut self.nodes[a].grad[ni * ca * plane..(ni + 1) * ca * plane],
                            &gsl[..ca * plane],
                        );
                        accumulate(
                            &mut self.nodes[b].grad[ni * cb * plane..(ni + 1) * cb * plane],
                            &gsl[ca * plane..],
                        );
                    }
                    self.nodes[id].grad = g;
                }
                Op::Grl { x, gamma } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    for (gx, gv) in self.nodes[x].grad.iter_mut().zip(&g) {
                        *gx += -gamma * gv;
                    }
                    self.nodes[id].grad = g;
                }
                Op::Reshape { x } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    accumulate(&mut self.nodes[x].grad, &g);
                    self.nodes[id].grad = g;
                }
                Op::Ln { x, floor } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let xd = self.nodes[x].data.clone();
                    for ((gx, gv), xv) in self.nodes[x].grad.iter_mut().zip(&g).zip(&xd) {
                        *gx += gv / xv.max(floor);
                    }
                    self.nodes[id].grad = g;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid_stable(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let maxv = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - maxv).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn out_dim(size: usize, pad: usize, k: usize, stride: usize) -> Result<usize, TensorError> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel {} larger than padded input {}", k, padded),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// C[m,n] += A[m,k] @ B[k,n] with the k loop in the middle so the innermost
/// loop streams over contiguous rows.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_into(a: &[f64], at: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            at[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Valid output index range [lo, hi) such that 0 <= o*stride + k_off - pad < in_len.
fn valid_range(out_len: usize, in_len: usize, pad: usize, k_off: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k_off {
        ((in_len - 1 + pad - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi.max(lo.min(out_len)))
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes; the summation order is fixed, keeping results deterministic.
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ar, br) = (&a[8 * i..8 * i + 8], &b[8 * i..8 * i + 8]);
        for l in 0..8 {
            acc[l] += ar[l] * br[l];
        }
    }
    let mut tail = 0.0;
    for i in 8 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn sum8(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ar = &a[8 * i..8 * i + 8];
        for l in 0..8 {
            acc[l] += ar[l];
        }
    }
    let mut tail = 0.0;
    for v in &a[8 * chunks..] {
        tail += v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_one(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    let fused = stride == 1 && kh == 3 && kw == 3 && pad == 1 && w >= 2;
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            let kbase = (o * c + ic) * kh * kw;
            if fused {
                for ki in 0..3 {
                    let (lo_i, hi_i) = valid_range(oh, h, 1, ki, 1);
                    let k0 = kernel[kbase + ki * 3];
                    let k1 = kernel[kbase + ki * 3 + 1];
                    let k2 = kernel[kbase + ki * 3 + 2];
                    for oi in lo_i..hi_i {
                        let ii = oi + ki - 1;
                        let xrow = &xin[ii * w..(ii + 1) * w];
                        let orow = &mut plane[oi * ow..(oi + 1) * ow];
                        orow[0] += k1 * xrow[0] + k2 * xrow[1];
                        let mid = &mut orow[1..w - 1];
                        let (x0, x1, x2) = (&xrow[..w - 2], &xrow[1..w - 1], &xrow[2..]);
                        for (((ov, a), b), cc) in
                            mid.iter_mut().zip(x0).zip(x1).zip(x2)
                        {
                            *ov += k0 * a + k1 * b + k2 * cc;
                        }
                        orow[w - 1] += k0 * xrow[w - 2] + k1 * xrow[w - 1];
                    }
                }
                continue;
            }
            for ki in 0..kh {
                let (lo_i, hi_i) = valid_range(oh, h, pad, ki, stride);
                for kj in 0..kw {
                    let kv = kernel[kbase + ki * kw + kj];
                    if kv == 0.0 {
                        continue;
                    }
                    let (lo_j, hi_j) = valid_range(ow, w, pad, kj, stride);
                    for oi in lo_i..hi_i {
                        let ii = oi * stride + ki - pad;
                        let xrow = &xin[ii * w..(ii + 1) * w];
                        let orow = &mut plane[oi * ow + lo_j..oi * ow + hi_j];
                        if stride == 1 {
                            let off = lo_j + kj - pad;
                            for (ov, xv) in orow.iter_mut().zip(&xrow[off..off + (hi_j - lo_j)]) {
                                *ov += kv * xv;
                            }
                        } else {
                            for (step, ov) in orow.iter_mut().enumerate() {
                                let jj = (lo_j + step) * stride + kj - pad;
                                *ov += kv * xrow[jj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_one(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
    gb: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    let fused = stride == 1 && kh == 3 && kw == 3 && pad == 1 && w >= 2;
    for o in 0..oc {
        let gplane = &gout[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += sum8(gplane);
        for ic in 0..c {
            let xin = &x[ic * h * w..(ic + 1) * h * w];
            let gxin = &mut gx[ic * h * w..(ic + 1) * h * w];
            let kbase = (o * c + ic) * kh * kw;
            if fused {
                for ki in 0..3 {
                    let (lo_i, hi_i) = valid_range(oh, h, 1, ki, 1);
                    let k0 = kernel[kbase + ki * 3];
                    let k1 = kernel[kbase + ki * 3 + 1];
                    let k2 = kernel[kbase + ki * 3 + 2];
                    let mut dk = [[0.0f64; 4]; 3];
                    for oi in lo_i..hi_i {
                        let ii = oi + ki - 1;
                        let xrow = &xin[ii * w..(ii + 1) * w];
                        let grow = &gplane[oi * ow..(oi + 1) * ow];
                        let gxrow = &mut gxin[ii * w..(ii + 1) * w];
                        // single pass: dk[kj] += g[j] * x[j + kj - 1] and
                        // dx[t] += k0 g[t+1] + k1 g[t] + k2 g[t-1]
                        gxrow[0] += k0 * grow[1] + k1 * grow[0];
                        dk[1][0] += grow[0] * xrow[0];
                        dk[2][0] += grow[0] * xrow[1];
                        let mid = &mut gxrow[1..w - 1];
                        let (x0, x1, x2) = (&xrow[..w - 2], &xrow[1..w - 1], &xrow[2..]);
                        let (g2, g1, g0) = (&grow[..w - 2], &grow[1..w - 1], &grow[2..]);
                        let chunks = (w - 2) / 4;
                        for ch in 0..chunks {
                            let s = 4 * ch;
                            for l in 0..4 {
                                let g_here = g1[s + l];
                                mid[s + l] += k0 * g0[s + l] + k1 * g_here + k2 * g2[s + l];
                                dk[0][l] += g_here * x0[s + l];
                                dk[1][l] += g_here * x1[s + l];
                                dk[2][l] += g_here * x2[s + l];
                            }
                        }
                        for t in 4 * chunks..w - 2 {
                            let g_here = g1[t];
                            mid[t] += k0 * g0[t] + k1 * g_here + k2 * g2[t];
                            dk[0][0] += g_here * x0[t];
                            dk[1][0] += g_here * x1[t];
                            dk[2][0] += g_here * x2[t];
                        }
                        gxrow[w - 1] += k1 * grow[w - 1] + k2 * grow[w - 2];
                        dk[0][0] += grow[w - 1] * xrow[w - 2];
                        dk[1][0] += grow[w - 1] * xrow[w - 1];
                    }
                    for (kj, acc) in dk.iter().enumerate() {
                        gk[kbase + ki * 3 + kj] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
                    }
                }
                continue;
            }
            for ki in 0..kh {
                let (lo_i, hi_i) = valid_range(oh, h, pad, ki, stride);
                for kj in 0..kw {
                    let (lo_j, hi_j) = valid_range(ow, w, pad, kj, stride);
                    if lo_j >= hi_j {
                        continue;
                    }
                    let kv = kernel[kbase + ki * kw + kj];
                    let mut dk = 0.0;
                    for oi in lo_i..hi_i {
                        let ii = oi * stride + ki - pad;
                        let grow = &gplane[oi * ow + lo_j..oi * ow + hi_j];
                        if stride == 1 {
                            let off = lo_j + kj - pad;
                            let xrow = &xin[ii * w + off..ii * w + off + (hi_j - lo_j)];
                            let gxrow = &mut gxin[ii * w + off..ii * w + off + (hi_j - lo_j)];
                            dk += dot8(grow, xrow);
                            for (gv, gxv) in grow.iter().zip(gxrow) {
                                *gxv += kv * gv;
                            }
                        } else {
                            for (step, gv) in grow.iter().enumerate() {
                                let jj = (lo_j + step) * stride + kj - pad;
                                dk += gv * xin[ii * w + jj];
                                gxin[ii * w + jj] += kv * gv;
                            }
                        }
                    }
                    gk[kbase + ki * kw + kj] += dk;
                }
            }
        }
    }
}

/// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / 2h per
/// coordinate. Test oracle; independent of the tape's backward pass.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}
