//! Batched reverse-mode differentiation for the composite training losses.
//!
//! Nodes hold `[batch x width]` values and are evaluated eagerly as the graph
//! is built, so intermediate values (latent rollouts, bonuses) can be read
//! back for stop-gradient targets before backprop runs. Networks register as
//! trainable or frozen: frozen networks propagate derivatives through their
//! inputs but accumulate no parameter gradients, which makes stop-gradient
//! contracts structural rather than conventions.

use super::mlp::{activation_backward, apply_activation, softmax_in_place};
use super::{Activation, MlpGrads, MlpParams, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Const,
    Affine { net: usize, layer: usize, x: NodeId },
    Activation { act: Activation, group: usize, x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AffineConst { x: NodeId, scale: f64 },
    Exp { x: NodeId },
    Tanh { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    RowSum { x: NodeId },
    RowMin2 { a: NodeId, b: NodeId },
    MatVecConst { x: NodeId, v: Vec<f64> },
    SoftmaxCeRows { logits: NodeId, target: Tensor2 },
    LogOneMinusTanhSq { u: NodeId },
    WeightedSumScalar { x: NodeId, weights: Vec<f64>, scale: f64 },
    AddScalars { xs: Vec<NodeId> },
    Detach,
}

struct Node {
    op: Op,
    value: Tensor2,
}

struct NetEntry<'a> {
    params: &'a MlpParams,
    trainable: bool,
}

pub struct Tape<'a> {
    nets: Vec<NetEntry<'a>>,
    nodes: Vec<Node>,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nets: Vec::new(), nodes: Vec::new() }
    }

    pub fn register(&mut self, params: &'a MlpParams) -> NetId {
        self.nets.push(NetEntry { params, trainable: true });
        NetId(self.nets.len() - 1)
    }

    /// Frozen networks contribute values and pass input derivatives through,
    /// but never receive parameter gradients.
    pub fn register_frozen(&mut self, params: &'a MlpParams) -> NetId {
        self.nets.push(NetEntry { params, trainable: false });
        NetId(self.nets.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!((v.rows(), v.cols()), (1, 1), "not a scalar node");
        v.get(0, 0)
    }

    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Const, value)
    }

    fn affine(&mut self, net: usize, layer: usize, x: NodeId) -> NodeId {
        let params = &self.nets[net].params.layers[layer];
        let mut value = self.nodes[x.0].value.matmul_nt(&params.weight);
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&params.bias) {
                *v += b;
            }
        }
        self.push(Op::Affine { net, layer, x }, value)
    }

    fn activation(&mut self, act: Activation, group: usize, x: NodeId) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for i in 0..value.rows() {
            apply_activation(act, group, value.row_mut(i));
        }
        self.push(Op::Activation { act, group, x }, value)
    }

    /// Full forward pass through a registered network.
    pub fn mlp(&mut self, net: NetId, x: NodeId) -> NodeId {
        let layer_count = self.nets[net.0].params.layers.len();
        let group = self.nets[net.0].params.simnorm_group;
        let mut h = x;
        for l in 0..layer_count {
            h = self.affine(net.0, l, h);
            let act = self.nets[net.0].params.layers[l].activation;
            if act != Activation::Identity {
                h = self.activation(act, group, h);
            }
        }
        h
    }

    /// Row-wise softmax: one full-width simnorm group per row.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let width = self.nodes[x.0].value.cols();
        self.activation(Activation::Simnorm, width, x)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.rows(), vb.rows());
        let rows = va.rows();
        let cols = va.cols() + vb.cols();
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let dst = out.row_mut(i);
            dst[..va.cols()].copy_from_slice(va.row(i));
            dst[va.cols()..].copy_from_slice(vb.row(i));
        }
        self.push(Op::ConcatCols { a, b }, out)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert!(start + width <= vx.cols());
        let mut out = Tensor2::zeros(vx.rows(), width);
        for i in 0..vx.rows() {
            out.row_mut(i).copy_from_slice(&vx.row(i)[start..start + width]);
        }
        self.push(Op::SliceCols { x, start }, out)
    }

    fn zip_elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut out = va.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = f(*o, bv);
        }
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_elementwise(a, b, |x, y| x + y);
        self.push(Op::Add { a, b }, v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_elementwise(a, b, |x, y| x - y);
        self.push(Op::Sub { a, b }, v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_elementwise(a, b, |x, y| x * y);
        self.push(Op::Mul { a, b }, v)
    }

    pub fn affine_const(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for e in v.data_mut() {
            *e = scale * *e + shift;
        }
        self.push(Op::AffineConst { x, scale }, v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for e in v.data_mut() {
            *e = e.exp();
        }
        self.push(Op::Exp { x }, v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for e in v.data_mut() {
            *e = e.tanh();
        }
        self.push(Op::Tanh { x }, v)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for e in v.data_mut() {
            *e = e.clamp(lo, hi);
        }
        self.push(Op::Clamp { x, lo, hi }, v)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut out = Tensor2::zeros(vx.rows(), 1);
        for i in 0..vx.rows() {
            out.set(i, 0, vx.row(i).iter().sum());
        }
        self.push(Op::RowSum { x }, out)
    }

    /// Elementwise minimum of two `[B x 1]` columns; gradient follows the
    /// smaller argument (ties go to `a`).
    pub fn row_min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_elementwise(a, b, f64::min);
        self.push(Op::RowMin2 { a, b }, v)
    }

    pub fn matvec_const(&mut self, x: NodeId, v: Vec<f64>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.cols(), v.len());
        let mut out = Tensor2::zeros(vx.rows(), 1);
        for i in 0..vx.rows() {
            out.set(i, 0, vx.row(i).iter().zip(&v).map(|(a, b)| a * b).sum());
        }
        self.push(Op::MatVecConst { x, v }, out)
    }

    /// Per-row cross-entropy of `softmax(logits)` against constant target
    /// probability rows. Gradient is `softmax - target`, none to the target.
    pub fn softmax_ce_rows(&mut self, logits: NodeId, target: Tensor2) -> NodeId {
        let vl = &self.nodes[logits.0].value;
        assert_eq!((vl.rows(), vl.cols()), (target.rows(), target.cols()));
        let mut out = Tensor2::zeros(vl.rows(), 1);
        for i in 0..vl.rows() {
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for (&t, &l) in target.row(i).iter().zip(row) {
                if t > 0.0 {
                    loss -= t * (l - lse);
                }
            }
            out.set(i, 0, loss);
        }
        self.push(Op::SoftmaxCeRows { logits, target }, out)
    }

    /// `log(1 - tanh(u)^2)` computed stably as `2(ln 2 - u - softplus(-2u))`.
    pub fn log_one_minus_tanh_sq(&mut self, u: NodeId) -> NodeId {
        let mut v = self.nodes[u.0].value.clone();
        for e in v.data_mut() {
            *e = 2.0 * (std::f64::consts::LN_2 - *e - softplus(-2.0 * *e));
        }
        self.push(Op::LogOneMinusTanhSq { u }, v)
    }

    /// `scale * sum_i weights[i] * x[i, 0]` as a `[1 x 1]` scalar node.
    pub fn weighted_sum_scalar(&mut self, x: NodeId, weights: Vec<f64>, scale: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.cols(), 1);
        assert_eq!(vx.rows(), weights.len());
        let total: f64 = weights.iter().enumerate().map(|(i, w)| w * vx.get(i, 0)).sum();
        self.push(
            Op::WeightedSumScalar { x, weights, scale },
            Tensor2::from_vec(1, 1, vec![scale * total]),
        )
    }

    pub fn add_scalars(&mut self, xs: Vec<NodeId>) -> NodeId {
        let total: f64 = xs.iter().map(|id| self.scalar(*id)).sum();
        self.push(Op::AddScalars { xs }, Tensor2::from_vec(1, 1, vec![total]))
    }

    /// Identity on values, blocks all gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::Detach, v)
    }

    /// Reverse pass from a scalar loss node. Returns per-network parameter
    /// gradients indexed like the registration order; frozen entries are None.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<MlpGrads>> {
        let mut grads: Vec<Option<MlpGrads>> = self
            .nets
            .iter()
            .map(|n| n.trainable.then(|| MlpGrads::zeros_like(n.params)))
            .collect();
        let mut adjoint: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor2::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            let Some(d_out) = adjoint[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Affine { net, layer, x } => {
                    let entry = &self.nets[*net];
                    let layer_params = &entry.params.layers[*layer];
                    if entry.trainable {
                        let xin = &self.nodes[x.0].value;
                        let g = grads[*net].as_mut().expect("trainable");
                        let lg = &mut g.layers[*layer];
                        lg.d_weight.add_assign(&d_out.matmul_tn(xin));
                        for i in 0..d_out.rows() {
                            for (b, &d) in lg.d_bias.iter_mut().zip(d_out.row(i)) {
                                *b += d;
                            }
                        }
                    }
                    accumulate(&mut adjoint[x.0], d_out.matmul_nn(&layer_params.weight));
                }
                Op::Activation { act, group, x } => {
                    let mut d = d_out;
                    let post = &self.nodes[id].value;
                    for i in 0..d.rows() {
                        let (pr, dr_all) = (post.row(i), d.row_mut(i));
                        activation_backward(*act, *group, pr, dr_all);
                    }
                    accumulate(&mut adjoint[x.0], d);
                }
                Op::ConcatCols { a, b } => {
                    let wa = self.nodes[a.0].value.cols();
                    let mut da = Tensor2::zeros(d_out.rows(), wa);
                    let mut db = Tensor2::zeros(d_out.rows(), d_out.cols() - wa);
                    for i in 0..d_out.rows() {
                        da.row_mut(i).copy_from_slice(&d_out.row(i)[..wa]);
                        db.row_mut(i).copy_from_slice(&d_out.row(i)[wa..]);
                    }
                    accumulate(&mut adjoint[a.0], da);
                    accumulate(&mut adjoint[b.0], db);
                }
                Op::SliceCols { x, start } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor2::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        dx.row_mut(i)[*start..*start + d_out.cols()].copy_from_slice(d_out.row(i));
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoint[a.0], d_out.clone());
                    accumulate(&mut adjoint[b.0], d_out);
                }
                Op::Sub { a, b } => {
                    let mut db = d_out.clone();
                    db.scale(-1.0);
                    accumulate(&mut adjoint[a.0], d_out);
                    accumulate(&mut adjoint[b.0], db);
                }
                Op::Mul { a, b } => {
                    let da = elementwise_product(&d_out, &self.nodes[b.0].value);
                    let db = elementwise_product(&d_out, &self.nodes[a.0].value);
                    accumulate(&mut adjoint[a.0], da);
                    accumulate(&mut adjoint[b.0], db);
                }
                Op::AffineConst { x, scale } => {
                    let mut d = d_out;
                    d.scale(*scale);
                    accumulate(&mut adjoint[x.0], d);
                }
                Op::Exp { x } => {
                    let d = elementwise_product(&d_out, &self.nodes[id].value);
                    accumulate(&mut adjoint[x.0], d);
                }
                Op::Tanh { x } => {
                    let mut d = d_out;
                    for (e, &y) in d.data_mut().iter_mut().zip(self.nodes[id].value.data()) {
                        *e *= 1.0 - y * y;
                    }
                    accumulate(&mut adjoint[x.0], d);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut d = d_out;
                    for (e, &xin) in d.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if xin <= *lo || xin >= *hi {
                            *e = 0.0;
                        }
                    }
                    accumulate(&mut adjoint[x.0], d);
                }
                Op::RowSum { x } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor2::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let d = d_out.get(i, 0);
                        for e in dx.row_mut(i) {
                            *e = d;
                        }
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::RowMin2 { a, b } => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut da = Tensor2::zeros(d_out.rows(), 1);
                    let mut db = Tensor2::zeros(d_out.rows(), 1);
                    for i in 0..d_out.rows() {
                        if va.get(i, 0) <= vb.get(i, 0) {
                            da.set(i, 0, d_out.get(i, 0));
                        } else {
                            db.set(i, 0, d_out.get(i, 0));
                        }
                    }
                    accumulate(&mut adjoint[a.0], da);
                    accumulate(&mut adjoint[b.0], db);
                }
                Op::MatVecConst { x, v } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor2::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let d = d_out.get(i, 0);
                        for (e, &vv) in dx.row_mut(i).iter_mut().zip(v) {
                            *e = d * vv;
                        }
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::SoftmaxCeRows { logits, target } => {
                    let vl = &self.nodes[logits.0].value;
                    let mut dx = Tensor2::zeros(vl.rows(), vl.cols());
                    for i in 0..vl.rows() {
                        let d = d_out.get(i, 0);
                        let mut p = vl.row(i).to_vec();
                        softmax_in_place(&mut p);
                        for ((e, &pv), &t) in dx.row_mut(i).iter_mut().zip(&p).zip(target.row(i)) {
                            *e = d * (pv - t);
                        }
                    }
                    accumulate(&mut adjoint[logits.0], dx);
                }
                Op::LogOneMinusTanhSq { u } => {
                    let mut d = d_out;
                    for (e, &uv) in d.data_mut().iter_mut().zip(self.nodes[u.0].value.data()) {
                        *e *= -2.0 * uv.tanh();
                    }
                    accumulate(&mut adjoint[u.0], d);
                }
                Op::WeightedSumScalar { x, weights, scale } => {
                    let d = d_out.get(0, 0) * scale;
                    let mut dx = Tensor2::zeros(weights.len(), 1);
                    for (i, w) in weights.iter().enumerate() {
                        dx.set(i, 0, d * w);
                    }
                    accumulate(&mut adjoint[x.0], dx);
                }
                Op::AddScalars { xs } => {
                    for x in xs {
                        accumulate(&mut adjoint[x.0], d_out.clone());
                    }
                }
                Op::Detach => {}
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Tensor2>, delta: Tensor2) {
    match slot {
        Some(t) => t.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn elementwise_product(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    out
}

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}
