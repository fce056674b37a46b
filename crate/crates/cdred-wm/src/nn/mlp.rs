use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor2;

/// Per-layer nonlinearity. `Simnorm` splits the layer output into contiguous
/// groups and applies a softmax within each group, so every group lies on a
/// probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Simnorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// [out x in]
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Fully-connected network. Layer widths and activations are fixed at
/// construction; parameters are owned and mutated in place by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
    /// Group width used by any `Simnorm` layer; must divide that layer's width.
    pub simnorm_group: usize,
}

/// Post-activation values kept from a forward pass, enough to backprop:
/// relu masks, tanh and simnorm derivatives are all functions of the outputs.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub post: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_weight: Tensor2,
    pub d_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.add_assign(&b.d_weight);
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.d_weight.scale(s);
            for b in &mut l.d_bias {
                *b *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.d_weight.is_finite() && l.d_bias.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for l in &self.layers {
            for &v in l.d_weight.data() {
                m = m.max(v.abs());
            }
            for &v in &l.d_bias {
                m = m.max(v.abs());
            }
        }
        m
    }
}

pub(crate) fn apply_activation(act: Activation, group: usize, x: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in x.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for v in x.iter_mut() {
                *v = v.tanh();
            }
        }
        Activation::Simnorm => {
            assert!(group > 0 && x.len() % group == 0, "simnorm group must divide width");
            for chunk in x.chunks_exact_mut(group) {
                softmax_in_place(chunk);
            }
        }
    }
}

/// d_pre from d_post, using only post-activation values.
pub(crate) fn activation_backward(act: Activation, group: usize, post: &[f64], d_post: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (d, &y) in d_post.iter_mut().zip(post) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        Activation::Tanh => {
            for (d, &y) in d_post.iter_mut().zip(post) {
                *d *= 1.0 - y * y;
            }
        }
        Activation::Simnorm => {
            for (yc, dc) in post.chunks_exact(group).zip(d_post.chunks_exact_mut(group)) {
                let dot: f64 = yc.iter().zip(dc.iter()).map(|(y, d)| y * d).sum();
                for (d, &y) in dc.iter_mut().zip(yc) {
                    *d = y * (*d - dot);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

impl MlpParams {
    /// Uniform fan-in init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    /// `sizes` lists widths input-first; `acts` has one entry per layer.
    pub fn init<R: Rng>(sizes: &[usize], acts: &[Activation], simnorm_group: usize, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least one layer");
        assert_eq!(acts.len(), sizes.len() - 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(acts)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                if activation == Activation::Simnorm {
                    assert!(
                        simnorm_group > 0 && fan_out % simnorm_group == 0,
                        "simnorm group must divide layer width"
                    );
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut weight = Tensor2::zeros(fan_out, fan_in);
                for v in weight.data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
                LayerParams {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        MlpParams { layers, simnorm_group }
    }

    /// Standard hidden stack: `in -> hidden x depth (relu) -> out (out_act)`.
    pub fn standard<R: Rng>(
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        out_act: Activation,
        simnorm_group: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![in_dim];
        sizes.extend(std::iter::repeat(hidden).take(depth));
        sizes.push(out_dim);
        let mut acts = vec![Activation::Relu; depth];
        acts.push(out_act);
        Self::init(&sizes, &acts, simnorm_group, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "input width mismatch");
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.bias.clone();
            for (o, p) in pre.iter_mut().enumerate() {
                let wrow = layer.weight.row(o);
                let mut acc = 0.0;
                for (k, &hv) in h.iter().enumerate() {
                    acc += wrow[k] * hv;
                }
                *p += acc;
            }
            apply_activation(layer.activation, self.simnorm_group, &mut pre);
            h = pre;
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut cache = MlpCache {
            input: x.to_vec(),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        for layer in &self.layers {
            let mut pre = layer.bias.clone();
            for (o, p) in pre.iter_mut().enumerate() {
                let wrow = layer.weight.row(o);
                let mut acc = 0.0;
                for (k, &hv) in h.iter().enumerate() {
                    acc += wrow[k] * hv;
                }
                *p += acc;
            }
            apply_activation(layer.activation, self.simnorm_group, &mut pre);
            cache.post.push(pre.clone());
            h = pre;
        }
        (h, cache)
    }

    /// Batched forward over row-major inputs, no cache. Used by acting and
    /// planning paths where only values are needed.
    pub fn forward_batch(&self, x: &Tensor2) -> Tensor2 {
        assert_eq!(x.cols(), self.in_dim(), "input width mismatch");
        let mut h = x.clone();
        for layer in &self.layers {
            let mut pre = h.matmul_nt(&layer.weight);
            for i in 0..pre.rows() {
                let row = pre.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
                apply_activation(layer.activation, self.simnorm_group, row);
            }
            h = pre;
        }
        h
    }

    /// Analytic gradients of a scalar loss with upstream derivative `d_out`
    /// at the cached forward point. Returns parameter grads and d(input).
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64]) -> (MlpGrads, Vec<f64>) {
        assert_eq!(d_out.len(), self.out_dim(), "output width mismatch");
        let mut grads = MlpGrads::zeros_like(self);
        let mut d_post = d_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let post = &cache.post[l];
            activation_backward(layer.activation, self.simnorm_group, post, &mut d_post);
            // d_post now holds d_pre.
            let prev: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let g = &mut grads.layers[l];
            for (o, &dp) in d_post.iter().enumerate() {
                g.d_bias[o] += dp;
                let wrow = g.d_weight.row_mut(o);
                for (k, &pv) in prev.iter().enumerate() {
                    wrow[k] += dp * pv;
                }
            }
            let mut d_prev = vec![0.0; layer.in_dim()];
            for (o, &dp) in d_post.iter().enumerate() {
                let wrow = layer.weight.row(o);
                for (k, d) in d_prev.iter_mut().enumerate() {
                    *d += wrow[k] * dp;
                }
            }
            d_post = d_prev;
        }
        (grads, d_post)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn tiny(rng_seed: u64) -> MlpParams {
        let mut rng = seeding::rng(rng_seed, 0);
        MlpParams::init(
            &[3, 4, 2],
            &[Activation::Relu, Activation::Identity],
            2,
            &mut rng,
        )
    }

    #[test]
    fn identity_single_layer_is_affine() {
        let mut net = tiny(1);
        net.layers.truncate(1);
        net.layers[0].activation = Activation::Identity;
        let x = [0.5, -1.0, 2.0];
        let out = net.forward(&x);
        for (o, v) in out.iter().enumerate() {
            let w = net.layers[0].weight.row(o);
            let expect = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + net.layers[0].bias[o];
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let mut net = tiny(2);
        net.layers.truncate(1);
        net.layers[0].activation = Activation::Relu;
        net.layers[0].weight.fill(0.0);
        net.layers[0].bias = vec![-1.0, 1.0, -0.5, 0.25];
        let out = net.forward(&[0.0, 0.0, 0.0]);
        assert_eq!(out, vec![0.0, 1.0, 0.0, 0.25]);
    }

    #[test]
    fn simnorm_groups_form_simplices() {
        let mut rng = seeding::rng(3, 0);
        let net = MlpParams::init(&[5, 8], &[Activation::Simnorm], 4, &mut rng);
        let out = net.forward(&[1.0, -2.0, 0.5, 3.0, -0.25]);
        for chunk in out.chunks_exact(4) {
            let sum: f64 = chunk.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(chunk.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_batch_matches_single() {
        let net = tiny(4);
        let rows = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0], vec![0.0, 0.0, 0.0]];
        let x = Tensor2::from_vec(3, 3, rows.concat());
        let batch = net.forward_batch(&x);
        for (i, r) in rows.iter().enumerate() {
            let single = net.forward(r);
            for (a, b) in single.iter().zip(batch.row(i)) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny(5);
        let x = [0.3, -0.7, 1.1];
        assert_eq!(net.forward(&x), net.forward(&x));
    }

    #[test]
    fn init_is_seed_deterministic_and_biases_zero() {
        let a = tiny(6);
        let b = tiny(6);
        let c = tiny(7);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for l in &a.layers {
            assert!(l.bias.iter().all(|&v| v == 0.0));
        }
    }
}
