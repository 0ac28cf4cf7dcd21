//! Oracles shared across the integration suites.

use hyperinv::autodiff::{Graph, NodeId};
use hyperinv::dataset::{glyph_colored_rotated, LabelField};
use hyperinv::hypernet::{
    encode, hyper_forward, BnBinding, BnState, EncoderArch, HyperBinding, HyperNetworkParams,
    TaskHead,
};
use hyperinv::optim::{schedule_lr, Adam, LrSchedule, ParamSet};
use hyperinv::rng::{derive_labeled, Rng};
use hyperinv::train::TrainConfig;
use hyperinv::Tensor;

/// Direct nested-loop convolution: the independent oracle for conv2d.
#[allow(dead_code)]
pub fn conv2d_oracle(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (b, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; b * f * h_out * w_out];
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = match bias {
                        Some(t) => t.data()[fi],
                        None => 0.0,
                    };
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let y = (oy * stride + dy) as isize - padding as isize;
                                let x = (ox * stride + dx) as isize - padding as isize;
                                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                    continue;
                                }
                                let iv = input.data()
                                    [((bi * c + ci) * h + y as usize) * w + x as usize];
                                let kv = kernel.data()[((fi * c + ci) * kh + dy) * kw + dx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((bi * f + fi) * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
    }
    (vec![b, f, h_out, w_out], out)
}

/// Hand-rolled supervised training of the generated encoder at a fixed
/// descriptor: no task loop, no augmentation machinery, no output
/// averaging. The equivalence oracle for single-task pre-training.
#[allow(dead_code)]
pub fn plain_supervised_loop(config: &TrainConfig, epochs: usize) -> Vec<f64> {
    let data = glyph_colored_rotated(6, 31).unwrap();
    let n = data.len();
    let arch = EncoderArch::synthetic();
    let hypernet =
        HyperNetworkParams::init(2, config.hidden_dim, &arch, config.activation, config.seed);
    let mut bn_states = vec![BnState::new(16)];

    let mut params = ParamSet::new();
    let w1 = params.push("hypernet.w1", hypernet.w1.clone(), true);
    let b1 = params.push("hypernet.b1", hypernet.b1.clone(), true);
    let w2 = params.push("hypernet.w2.0", hypernet.w2[0].clone(), true);
    let b2 = params.push("hypernet.b2.0", hypernet.b2[0].clone(), true);
    let gamma = params.push("bn.0.gamma", bn_states[0].gamma.clone(), false);
    let beta = params.push("bn.0.beta", bn_states[0].beta.clone(), false);
    let head = TaskHead::init(
        arch.feature_dim(),
        10,
        derive_labeled(config.seed, "head", &[0]),
    );
    let head_idx = params.push("head.0.weight", head.weight, true);
    let mut adam = Adam::new(&params, config.weight_decay);

    let batch = config.batch_size;
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = LrSchedule::cosine(config.lr, (epochs * steps_per_epoch) as u64);

    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = Rng::from_parts(config.seed, "shuffle", &[0, epoch as u64]);
        let perm = rng.permutation(n);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for (step, idxs) in perm.chunks(batch).enumerate() {
            let lr = schedule_lr(&schedule, (epoch * steps_per_epoch + step) as u64).unwrap();
            let (images, batch_labels) = data.batch(idxs, LabelField::Digit);

            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let hb = HyperBinding {
                w1: ids[w1],
                b1: ids[b1],
                w2: vec![ids[w2]],
                b2: vec![ids[b2]],
            };
            let bb = vec![BnBinding {
                gamma: ids[gamma],
                beta: ids[beta],
            }];
            let desc = g.constant(vec![1, 2], vec![0.0, 0.0]);
            let kernels = hyper_forward(&mut g, &hb, desc, &arch, config.activation).unwrap();
            let x = g.leaf(&images);
            let (features, stats) =
                encode(&mut g, &kernels, &bb, &bn_states, x, &arch, true).unwrap();
            let logits = g.matmul(features, ids[head_idx]).unwrap();
            let loss = g.softmax_cross_entropy(logits, &batch_labels).unwrap();
            epoch_loss += g.scalar(loss) * batch_labels.len() as f64;
            seen += batch_labels.len();
            g.backward(loss).unwrap();
            for (k, &id) in ids.iter().enumerate() {
                params.tensor_mut(k).grad = g.grad(id).map(|v| v.to_vec());
            }
            adam.step(&mut params, lr).unwrap();
            for (l, s) in stats.into_iter().enumerate() {
                if let Some(s) = s {
                    bn_states[l].update(&s);
                }
            }
        }
        curve.push(epoch_loss / seen as f64);
    }
    curve
}

/// Eval-mode batchnorm usage note: the oracle above matches the
/// framework's train-mode path; see the equivalence suite.
#[allow(dead_code)]
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[allow(dead_code)]
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}
