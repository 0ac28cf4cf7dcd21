//! The descriptor-conditioned weight generator and the encoder it
//! parameterizes.
//!
//! A two-layer hypernetwork maps an invariance descriptor i in [0,1]^K to
//! the flattened conv weights of each encoder layer:
//!
//! ```text
//!     theta_l = w2_l^T (sigma(w1^T i) + b1) + b2_l
//! ```
//!
//! The generated weights are ordinary graph nodes, so gradients flow from
//! a task loss through the conv kernels into both the generator weights
//! and the descriptor itself.

use crate::autodiff::{BatchStats, BnMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A point on the invariance manifold: one scalar in [0,1] per
/// transformation family. Component k == 1 requests invariance to family
/// k, 0 requests sensitivity. Ordering is (rotation, color) for the
/// synthetic tasks and (ventral, dorsal) for the contrastive ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceDescriptor(Vec<f64>);

impl InvarianceDescriptor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("descriptor must have at least one component"));
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!(
                    "descriptor component {v} outside [0, 1]"
                )));
            }
        }
        Ok(InvarianceDescriptor(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for InvarianceDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| format!("{v:.4}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Snap each component to the nearest of `levels` evenly spaced values in
/// [0, 1]; ties round up. `levels == 2` is the binary case.
pub fn round_descriptor(i: &InvarianceDescriptor, levels: usize) -> Result<InvarianceDescriptor> {
    if levels < 2 {
        return Err(Error::contract(format!(
            "round_descriptor needs at least 2 levels, got {levels}"
        )));
    }
    let steps = (levels - 1) as f64;
    let values = i
        .values()
        .iter()
        .map(|&v| {
            let scaled = v * steps;
            // round() is half-away-from-zero; values are non-negative, so
            // exact halves round up as declared.
            (scaled.round() / steps).clamp(0.0, 1.0)
        })
        .collect();
    InvarianceDescriptor::new(values)
}

/// Nonlinearity inside the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One conv layer of the encoder; every layer is followed by batch
/// normalization and ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Architecture of the generated encoder, serialized into checkpoints so
/// they are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub in_channels: usize,
    pub image_side: usize,
    pub convs: Vec<ConvSpec>,
}

impl EncoderArch {
    /// The synthetic-benchmark encoder: a single 16-filter 5x5 conv with
    /// stride 2 and padding 2 over 3x28x28 inputs.
    pub fn synthetic() -> Self {
        EncoderArch {
            in_channels: 3,
            image_side: 28,
            convs: vec![ConvSpec {
                filters: 16,
                kernel: 5,
                stride: 2,
                padding: 2,
            }],
        }
    }

    /// A two-conv-layer toy encoder exercising per-layer weight
    /// generation, used by the contrastive mode.
    pub fn toy_contrastive() -> Self {
        EncoderArch {
            in_channels: 3,
            image_side: 28,
            convs: vec![
                ConvSpec {
                    filters: 8,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
        }
    }

    /// (channels, side) after each conv layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.convs.len());
        let mut side = self.image_side;
        for c in &self.convs {
            side = (side + 2 * c.padding - c.kernel) / c.stride + 1;
            dims.push((c.filters, side));
        }
        dims
    }

    /// Input channel count of layer `l`.
    fn in_channels_of(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.convs[l - 1].filters
        }
    }

    /// Kernel tensor shape [F, C, k, k] of layer `l`.
    pub fn kernel_shape(&self, l: usize) -> Vec<usize> {
        let c = &self.convs[l];
        vec![c.filters, self.in_channels_of(l), c.kernel, c.kernel]
    }

    /// Flattened conv-weight count of layer `l` (the generator's d_out).
    pub fn weight_count(&self, l: usize) -> usize {
        self.kernel_shape(l).iter().product()
    }

    /// Flat feature dimension after the final layer.
    pub fn feature_dim(&self) -> usize {
        let (c, side) = *self.layer_dims().last().expect("encoder has layers");
        c * side * side
    }
}

/// The two-layer generator weights: the pre-trained asset.
#[derive(Clone, Debug)]
pub struct HyperNetworkParams {
    /// [K, d_h]
    pub w1: Tensor,
    /// [d_h]
    pub b1: Tensor,
    /// Per generated layer l: [d_h, d_out_l]
    pub w2: Vec<Tensor>,
    /// Per generated layer l: [d_out_l]
    pub b2: Vec<Tensor>,
    pub activation: Activation,
}

impl HyperNetworkParams {
    /// Fan-in-scaled uniform init, then each w2_l rescaled so the weights
    /// generated at i = all-ones have the spread standard conv
    /// initialization would give that layer.
    pub fn init(
        k: usize,
        d_h: usize,
        arch: &EncoderArch,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::from_parts(seed, "init.hypernet", &[]);
        let bound1 = 1.0 / (k as f64).sqrt();
        let w1 = Tensor::uniform(vec![k, d_h], bound1, &mut rng);
        let b1 = Tensor::uniform(vec![d_h], bound1, &mut rng);

        // Hidden activation at the all-ones descriptor.
        let mut h = vec![0.0; d_h];
        for j in 0..d_h {
            let mut s = 0.0;
            for ki in 0..k {
                s += w1.data()[ki * d_h + j];
            }
            let a = match activation {
                Activation::Relu => s.max(0.0),
                Activation::Tanh => s.tanh(),
            };
            h[j] = a + b1.data()[j];
        }

        let bound2 = 1.0 / (d_h as f64).sqrt();
        let mut w2 = Vec::with_capacity(arch.convs.len());
        let mut b2 = Vec::with_capacity(arch.convs.len());
        for l in 0..arch.convs.len() {
            let d_out = arch.weight_count(l);
            let mut w = Tensor::uniform(vec![d_h, d_out], bound2, &mut rng);
            // Spread of theta = w^T h at the all-ones descriptor.
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for o in 0..d_out {
                let mut t = 0.0;
                for j in 0..d_h {
                    t += w.data()[j * d_out + o] * h[j];
                }
                sum += t;
                sumsq += t * t;
            }
            let mean = sum / d_out as f64;
            let std = (sumsq / d_out as f64 - mean * mean).max(0.0).sqrt();
            let fan_in = self::fan_in(arch, l);
            let target = 1.0 / (3.0 * fan_in as f64).sqrt();
            if std > 1e-12 {
                let factor = target / std;
                for v in w.data_mut() {
                    *v *= factor;
                }
            }
            w2.push(w);
            b2.push(Tensor::zeros(vec![d_out]));
        }
        HyperNetworkParams {
            w1,
            b1,
            w2,
            b2,
            activation,
        }
    }

    pub fn descriptor_len(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn layers(&self) -> usize {
        self.w2.len()
    }

    pub fn numel(&self) -> usize {
        self.w1.numel()
            + self.b1.numel()
            + self.w2.iter().map(Tensor::numel).sum::<usize>()
            + self.b2.iter().map(Tensor::numel).sum::<usize>()
    }
}

fn fan_in(arch: &EncoderArch, l: usize) -> usize {
    let shape = arch.kernel_shape(l);
    shape[1] * shape[2] * shape[3]
}

/// Batchnorm parameters and running statistics for one encoder layer.
/// These are ordinary shared parameters, not generator outputs, and one
/// running-stat set is shared across all descriptor values.
#[derive(Clone, Debug)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - self.momentum) * *r + self.momentum * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - self.momentum) * *r + self.momentum * b;
        }
    }
}

/// Linear readout from encoder features to task outputs (no bias; the
/// prediction rule is a plain inner product).
#[derive(Clone, Debug)]
pub struct TaskHead {
    /// [D, O]
    pub weight: Tensor,
}

impl TaskHead {
    pub fn init(feature_dim: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = Rng::from_parts(seed, "init.head", &[]);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        TaskHead {
            weight: Tensor::uniform(vec![feature_dim, outputs], bound, &mut rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Graph leaves for the generator parameters.
pub struct HyperBinding {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: Vec<NodeId>,
    pub b2: Vec<NodeId>,
}

pub fn bind_hypernet(g: &mut Graph, p: &HyperNetworkParams) -> HyperBinding {
    HyperBinding {
        w1: g.leaf(&p.w1),
        b1: g.leaf(&p.b1),
        w2: p.w2.iter().map(|t| g.leaf(t)).collect(),
        b2: p.b2.iter().map(|t| g.leaf(t)).collect(),
    }
}

/// Graph leaves for one layer's batchnorm parameters.
pub struct BnBinding {
    pub gamma: NodeId,
    pub beta: NodeId,
}

pub fn bind_bn(g: &mut Graph, s: &BnState) -> BnBinding {
    BnBinding {
        gamma: g.leaf(&s.gamma),
        beta: g.leaf(&s.beta),
    }
}

/// Generate per-layer conv kernels from a descriptor node [1, K].
///
/// Returns one node per layer, reshaped to [F, C, k, k], differentiable
/// with respect to both the generator parameters and the descriptor.
pub fn hyper_forward(
    g: &mut Graph,
    hb: &HyperBinding,
    descriptor: NodeId,
    arch: &EncoderArch,
    activation: Activation,
) -> Result<Vec<NodeId>> {
    let k = g.shape(hb.w1)[0];
    if g.shape(descriptor) != [1, k] {
        return Err(Error::shape("hyper_forward descriptor", &[1, k], g.shape(descriptor)));
    }
    let pre = g.matmul(descriptor, hb.w1)?; // [1, d_h]
    let act = match activation {
        Activation::Relu => g.relu(pre),
        Activation::Tanh => g.tanh(pre),
    };
    // Bias is added after the nonlinearity.
    let hidden = g.add_row_bias(act, hb.b1)?;
    let mut kernels = Vec::with_capacity(arch.convs.len());
    for l in 0..arch.convs.len() {
        let flat = g.matmul(hidden, hb.w2[l])?; // [1, d_out]
        let with_bias = g.add_row_bias(flat, hb.b2[l])?;
        kernels.push(g.reshape(with_bias, arch.kernel_shape(l))?);
    }
    Ok(kernels)
}

/// Run the encoder: per layer conv (no conv bias) -> batchnorm -> ReLU,
/// then flatten to [B, D]. Kernel nodes may come from [`hyper_forward`]
/// or be ordinary leaves (the MTL baseline).
pub fn encode(
    g: &mut Graph,
    kernels: &[NodeId],
    bn_bindings: &[BnBinding],
    bn_states: &[BnState],
    x: NodeId,
    arch: &EncoderArch,
    train: bool,
) -> Result<(NodeId, Vec<Option<BatchStats>>)> {
    if kernels.len() != arch.convs.len() || bn_bindings.len() != arch.convs.len() {
        return Err(Error::contract(format!(
            "encode got {} kernels / {} bn layers for a {}-layer arch",
            kernels.len(),
            bn_bindings.len(),
            arch.convs.len()
        )));
    }
    let mut cur = x;
    let mut all_stats = Vec::with_capacity(arch.convs.len());
    for (l, spec) in arch.convs.iter().enumerate() {
        let conv = g.conv2d(cur, kernels[l], None, spec.stride, spec.padding)?;
        let mode = if train {
            BnMode::Train
        } else {
            BnMode::Eval {
                running_mean: &bn_states[l].running_mean,
                running_var: &bn_states[l].running_var,
            }
        };
        let (bn, stats) = g.batchnorm2d(conv, bn_bindings[l].gamma, bn_bindings[l].beta, mode, bn_states[l].eps)?;
        all_stats.push(stats);
        cur = g.relu(bn);
    }
    let b = g.shape(x)[0];
    let features = g.reshape(cur, vec![b, arch.feature_dim()])?;
    Ok((features, all_stats))
}

/// logits = encode(...) @ head.
pub fn predict(
    g: &mut Graph,
    features: NodeId,
    head: NodeId,
) -> Result<NodeId> {
    let d = g.shape(features)[1];
    if g.shape(head)[0] != d {
        return Err(Error::contract(format!(
            "head expects features of dim {}, encoder produced {d}",
            g.shape(head)[0]
        )));
    }
    g.matmul(features, head)
}

/// Eval-mode features for a stack of images, computed without gradients
/// in batches of `chunk`. The pure-inference path used by evaluation,
/// analysis, and head-only training.
pub fn encode_eval(
    hypernet: &HyperNetworkParams,
    bn_states: &[BnState],
    arch: &EncoderArch,
    descriptor: &InvarianceDescriptor,
    images: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let d = arch.feature_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch = images.gather_rows(&rows);
        let mut g = Graph::new();
        let hb = bind_hypernet(&mut g, hypernet);
        let bb: Vec<BnBinding> = bn_states.iter().map(|s| bind_bn(&mut g, s)).collect();
        let desc = g.constant(vec![1, descriptor.len()], descriptor.values().to_vec());
        let kernels = hyper_forward(&mut g, &hb, desc, arch, hypernet.activation)?;
        let x = g.leaf(&batch);
        let (features, _) = encode(&mut g, &kernels, &bb, bn_states, x, arch, false)?;
        out.extend_from_slice(g.data(features));
        start = end;
    }
    Tensor::new(vec![n, d], out)
}

/// Eval-mode features from plain kernel tensors (the MTL baseline).
pub fn encode_eval_kernels(
    kernels: &[Tensor],
    bn_states: &[BnState],
    arch: &EncoderArch,
    images: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let d = arch.feature_dim();
    let mut out = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let batch = images.gather_rows(&rows);
        let mut g = Graph::new();
        let kids: Vec<NodeId> = kernels.iter().map(|t| g.leaf(t)).collect();
        let bb: Vec<BnBinding> = bn_states.iter().map(|s| bind_bn(&mut g, s)).collect();
        let x = g.leaf(&batch);
        let (features, _) = encode(&mut g, &kids, &bb, bn_states, x, arch, false)?;
        out.extend_from_slice(g.data(features));
        start = end;
    }
    Tensor::new(vec![n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn round_descriptor_paper_rows() {
        let r = |v: Vec<f64>| round_descriptor(&InvarianceDescriptor::new(v).unwrap(), 2).unwrap();
        assert_eq!(r(vec![0.72, 0.91]).values(), &[1.0, 1.0]);
        assert_eq!(r(vec![0.35, 0.75]).values(), &[0.0, 1.0]);
        assert_eq!(r(vec![0.5, 0.5]).values(), &[1.0, 1.0]);
    }

    #[test]
    fn round_descriptor_ternary_and_idempotence() {
        let i = InvarianceDescriptor::new(vec![0.1, 0.4, 0.8]).unwrap();
        let r3 = round_descriptor(&i, 3).unwrap();
        assert_eq!(r3.values(), &[0.0, 0.5, 1.0]);
        let again = round_descriptor(&r3, 3).unwrap();
        assert_eq!(again.values(), r3.values());
        assert!(round_descriptor(&i, 1).is_err());
    }

    #[test]
    fn descriptor_rejects_out_of_range() {
        assert!(InvarianceDescriptor::new(vec![0.5, 1.2]).is_err());
        assert!(InvarianceDescriptor::new(vec![-0.1]).is_err());
        assert!(InvarianceDescriptor::new(vec![]).is_err());
    }

    #[test]
    fn synthetic_arch_dimensions_check_out() {
        let arch = EncoderArch::synthetic();
        assert_eq!(arch.weight_count(0), 1200);
        assert_eq!(arch.feature_dim(), 16 * 14 * 14);
    }

    #[test]
    fn zero_w2_generates_exactly_b2() {
        let arch = EncoderArch::synthetic();
        let mut p = HyperNetworkParams::init(2, 40, &arch, Activation::Relu, 3);
        for v in p.w2[0].data_mut() {
            *v = 0.0;
        }
        for (i, v) in p.b2[0].data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.001;
        }
        for desc in [[0.0, 0.0], [1.0, 0.0], [0.3, 0.9]] {
            let mut g = Graph::new();
            let hb = bind_hypernet(&mut g, &p);
            let d = g.constant(vec![1, 2], desc.to_vec());
            let kernels = hyper_forward(&mut g, &hb, d, &arch, Activation::Relu).unwrap();
            assert_eq!(g.data(kernels[0]), p.b2[0].data());
        }
    }

    #[test]
    fn generated_weight_count_is_1200() {
        let arch = EncoderArch::synthetic();
        let p = HyperNetworkParams::init(2, 40, &arch, Activation::Relu, 3);
        let mut g = Graph::new();
        let hb = bind_hypernet(&mut g, &p);
        let d = g.constant(vec![1, 2], vec![1.0, 1.0]);
        let kernels = hyper_forward(&mut g, &hb, d, &arch, Activation::Relu).unwrap();
        assert_eq!(g.shape(kernels[0]), &[16, 3, 5, 5]);
        assert_eq!(g.data(kernels[0]).len(), 1200);
    }

    #[test]
    fn generator_is_affine_in_second_layer() {
        let arch = EncoderArch::synthetic();
        let pa = HyperNetworkParams::init(2, 8, &arch, Activation::Relu, 5);
        let mut pb = HyperNetworkParams::init(2, 8, &arch, Activation::Relu, 6);
        // Same first layer, so the hidden activation h matches.
        pb.w1 = pa.w1.clone();
        pb.b1 = pa.b1.clone();
        let mut pc = pa.clone();
        for (c, b) in pc.w2[0].data_mut().iter_mut().zip(pb.w2[0].data()) {
            *c += b;
        }
        for (c, b) in pc.b2[0].data_mut().iter_mut().zip(pb.b2[0].data()) {
            *c += b;
        }
        let theta = |p: &HyperNetworkParams| -> Vec<f64> {
            let mut g = Graph::new();
            let hb = bind_hypernet(&mut g, p);
            let d = g.constant(vec![1, 2], vec![0.4, 0.7]);
            let k = hyper_forward(&mut g, &hb, d, &arch, Activation::Relu).unwrap();
            g.data(k[0]).to_vec()
        };
        let (ta, tb, tc) = (theta(&pa), theta(&pb), theta(&pc));
        for i in 0..ta.len() {
            assert!((tc[i] - (ta[i] + tb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_gradient_through_generator_checks_out() {
        // Projected finite-difference check of d theta / d i.
        let arch = EncoderArch {
            in_channels: 2,
            image_side: 6,
            convs: vec![ConvSpec {
                filters: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
        };
        let p = HyperNetworkParams::init(2, 5, &arch, Activation::Relu, 11);
        let mut rng = Rng::from_parts(11, "proj", &[]);
        let proj = Tensor::uniform(vec![arch.weight_count(0)], 1.0, &mut rng);
        let desc = Tensor::new(vec![1, 2], vec![0.6, 0.3]).unwrap().with_grad();
        let params = vec![desc];
        let f = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let d = g.leaf(&ps[0]);
            let hb = bind_hypernet(&mut g, &p);
            let kernels = hyper_forward(&mut g, &hb, d, &arch, Activation::Relu)?;
            let flat = g.reshape(kernels[0], vec![1, arch.weight_count(0)])?;
            let pn = g.constant(vec![1, arch.weight_count(0)], proj.data().to_vec());
            let prod = g.mul(flat, pn)?;
            let loss = g.sum_all(prod);
            Ok(gradcheck::Built {
                graph: g,
                loss,
                params: vec![d],
            })
        };
        let report = gradcheck::check(f, &params, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn encode_output_shape_and_zero_case() {
        let arch = EncoderArch::synthetic();
        let p = HyperNetworkParams::init(2, 40, &arch, Activation::Relu, 7);
        let bns = vec![BnState::new(16)];
        let desc = InvarianceDescriptor::new(vec![1.0, 0.0]).unwrap();
        let images = Tensor::zeros(vec![2, 3, 28, 28]);
        let f = encode_eval(&p, &bns, &arch, &desc, &images, 8).unwrap();
        assert_eq!(f.shape(), &[2, 3136]);
        // Zero input, zero running mean, beta = 0: ReLU output all zeros...
        // except that generated kernels make conv(0) = 0 regardless.
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_descriptors_give_different_features() {
        let arch = EncoderArch::synthetic();
        let p = HyperNetworkParams::init(2, 40, &arch, Activation::Relu, 13);
        let bns = vec![BnState::new(16)];
        let mut rng = Rng::new(4);
        let images = Tensor::uniform(vec![2, 3, 28, 28], 0.5, &mut rng);
        let d1 = InvarianceDescriptor::new(vec![1.0, 0.0]).unwrap();
        let d2 = InvarianceDescriptor::new(vec![0.0, 1.0]).unwrap();
        let f1 = encode_eval(&p, &bns, &arch, &d1, &images, 8).unwrap();
        let f2 = encode_eval(&p, &bns, &arch, &d2, &images, 8).unwrap();
        let dist: f64 = f1
            .data()
            .iter()
            .zip(f2.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn batched_prediction_equals_one_at_a_time() {
        let arch = EncoderArch::synthetic();
        let p = HyperNetworkParams::init(2, 40, &arch, Activation::Relu, 17);
        let bns = vec![BnState::new(16)];
        let desc = InvarianceDescriptor::new(vec![0.5, 0.5]).unwrap();
        let mut rng = Rng::new(6);
        let images = Tensor::uniform(vec![3, 3, 28, 28], 0.5, &mut rng);
        let batched = encode_eval(&p, &bns, &arch, &desc, &images, 3).unwrap();
        for i in 0..3 {
            let single = encode_eval(
                &p,
                &bns,
                &arch,
                &desc,
                &images.gather_rows(&[i]),
                1,
            )
            .unwrap();
            for (a, b) in single.data().iter().zip(batched.row(i).data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn head_dim_mismatch_is_contract_error() {
        let mut g = Graph::new();
        let features = g.constant(vec![2, 8], vec![0.0; 16]);
        let head = g.constant(vec![4, 3], vec![0.0; 12]);
        assert!(predict(&mut g, features, head).is_err());
    }

    #[test]
    fn toy_contrastive_arch_generates_per_layer() {
        let arch = EncoderArch::toy_contrastive();
        assert_eq!(arch.convs.len(), 2);
        let p = HyperNetworkParams::init(2, 16, &arch, Activation::Relu, 21);
        assert_eq!(p.w2.len(), 2);
        assert_eq!(p.w2[0].shape(), &[16, 8 * 3 * 25]);
        assert_eq!(p.w2[1].shape(), &[16, 16 * 8 * 9]);
        let mut g = Graph::new();
        let hb = bind_hypernet(&mut g, &p);
        let d = g.constant(vec![1, 2], vec![1.0, 1.0]);
        let kernels = hyper_forward(&mut g, &hb, d, &arch, Activation::Relu).unwrap();
        assert_eq!(g.shape(kernels[0]), &[8, 3, 5, 5]);
        assert_eq!(g.shape(kernels[1]), &[16, 8, 3, 3]);
    }
}
