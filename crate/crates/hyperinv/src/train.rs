//! The learning procedures: joint multi-task pre-training of the weight
//! generator, downstream descriptor-plus-head fitting (continuous and
//! discretized), the shared-encoder multi-task baseline, and toy-scale
//! contrastive pre-training.

use crate::autodiff::{nt_xent_loss, Graph, NodeId};
use crate::dataset::{LabeledDataset, LabelField};
use crate::error::{Error, Result};
use crate::hypernet::{
    bind_bn, encode, encode_eval, encode_eval_kernels, hyper_forward, predict, round_descriptor,
    Activation, BnBinding, BnState, EncoderArch, HyperBinding, HyperNetworkParams,
    InvarianceDescriptor, TaskHead,
};
use crate::optim::{schedule_lr, Adam, LrSchedule, ParamSet};
use crate::rng::{derive_labeled, Rng};
use crate::tensor::Tensor;
use crate::transforms::{
    apply_descriptor_augmentation, make_views, DorsalParams, TransformFamily, VentralParams,
    ViewFamily,
};
use crate::{checkpoint, idx};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How the learned descriptor is kept inside [0,1]^K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorMode {
    /// Stored unconstrained, squashed through a logistic per use.
    Sigmoid,
    /// Stored directly, clamped into [0,1] after every step.
    Clamp,
}

/// Schedule choice resolved into an [`LrSchedule`] once the step count is
/// known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScheduleChoice {
    Constant,
    Cosine,
    MultiStepEvery { every_epochs: usize, gamma: f64 },
}

impl ScheduleChoice {
    fn resolve(&self, base_lr: f64, epochs: usize, steps_per_epoch: usize) -> LrSchedule {
        let total = (epochs * steps_per_epoch) as u64;
        match self {
            ScheduleChoice::Constant => LrSchedule::constant(base_lr, total),
            ScheduleChoice::Cosine => LrSchedule::cosine(base_lr, total),
            ScheduleChoice::MultiStepEvery { every_epochs, gamma } => {
                let milestones = (1..)
                    .map(|k| (k * every_epochs * steps_per_epoch) as u64)
                    .take_while(|&m| m < total)
                    .collect();
                LrSchedule::multi_step(base_lr, total, milestones, *gamma)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 selects the default rule: full batch when the training set has
    /// at most 512 examples, otherwise 128.
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleChoice,
    pub weight_decay: f64,
    pub seed: u64,
    /// Augmentation sample count m; losses average model outputs over m.
    pub aug_samples: usize,
    pub descriptor_mode: DescriptorMode,
    pub grad_clip: Option<f64>,
    /// Discretization levels for the rounded descriptor.
    pub levels: usize,
    /// NT-Xent temperature (contrastive mode only).
    pub temperature: f64,
    /// Generator hidden width.
    pub hidden_dim: usize,
    pub activation: Activation,
}

impl TrainConfig {
    /// Multi-task pre-training defaults: 200 epochs, Adam at 5e-4 with
    /// cosine annealing.
    pub fn pretrain_defaults(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: 5e-4,
            schedule: ScheduleChoice::Cosine,
            weight_decay: 0.0,
            seed,
            aug_samples: 1,
            descriptor_mode: DescriptorMode::Sigmoid,
            grad_clip: None,
            levels: 2,
            temperature: 0.5,
            hidden_dim: 40,
            activation: Activation::Relu,
        }
    }

    /// Contrastive pre-training defaults: Adam at 3e-4, weight decay 1e-4,
    /// cosine annealing.
    pub fn contrastive_defaults(seed: u64) -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            ..TrainConfig::pretrain_defaults(seed)
        }
    }

    /// Downstream defaults: 100 epochs, multi-step decay of 0.1 every 10.
    pub fn downstream_defaults(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 0,
            schedule: ScheduleChoice::MultiStepEvery {
                every_epochs: 10,
                gamma: 0.1,
            },
            ..TrainConfig::pretrain_defaults(seed)
        }
    }

    fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size > 0 {
            self.batch_size.min(n)
        } else if n <= 512 {
            n
        } else {
            128
        }
    }
}

/// One pre-training task: a dataset, the factor it predicts, its observed
/// binary descriptor, and its head cardinality.
#[derive(Clone, Debug)]
pub struct PretrainTask {
    pub name: String,
    pub dataset: LabeledDataset,
    pub label_field: LabelField,
    pub descriptor: InvarianceDescriptor,
    pub head_size: usize,
}

/// Per-epoch, per-task training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// The pre-trained asset: generator weights, shared batchnorm state,
/// training-task heads, architecture, and the training log.
#[derive(Clone, Debug)]
pub struct PretrainedBundle {
    pub hypernet: HyperNetworkParams,
    pub arch: EncoderArch,
    pub bn: Vec<BnState>,
    pub heads: Vec<TaskHead>,
    pub task_names: Vec<String>,
    pub families: Vec<TransformFamily>,
    pub log: Vec<LogRow>,
}

/// The conventional shared-encoder baseline: same architecture, ordinary
/// conv weights, no generator and no descriptor.
#[derive(Clone, Debug)]
pub struct MtlModel {
    pub kernels: Vec<Tensor>,
    pub arch: EncoderArch,
    pub bn: Vec<BnState>,
    pub heads: Vec<TaskHead>,
    pub task_names: Vec<String>,
    pub log: Vec<LogRow>,
}

impl MtlModel {
    /// Encoder-side parameter count: conv weights plus batchnorm affine
    /// parameters (no generator parameters).
    pub fn encoder_param_count(&self) -> usize {
        self.kernels.iter().map(Tensor::numel).sum::<usize>()
            + self.bn.iter().map(|b| b.gamma.numel() + b.beta.numel()).sum::<usize>()
    }
}

// ── Parameter layout plumbing ────────────────────────────────────────

struct HyperLayout {
    w1: usize,
    b1: usize,
    w2: Vec<usize>,
    b2: Vec<usize>,
}

struct BnLayout {
    gamma: usize,
    beta: usize,
}

fn push_hypernet(params: &mut ParamSet, h: &HyperNetworkParams) -> HyperLayout {
    HyperLayout {
        w1: params.push("hypernet.w1", h.w1.clone(), true),
        b1: params.push("hypernet.b1", h.b1.clone(), true),
        w2: h
            .w2
            .iter()
            .enumerate()
            .map(|(l, t)| params.push(format!("hypernet.w2.{l}"), t.clone(), true))
            .collect(),
        b2: h
            .b2
            .iter()
            .enumerate()
            .map(|(l, t)| params.push(format!("hypernet.b2.{l}"), t.clone(), true))
            .collect(),
    }
}

fn push_bns(params: &mut ParamSet, bns: &[BnState]) -> Vec<BnLayout> {
    bns.iter()
        .enumerate()
        .map(|(l, s)| BnLayout {
            gamma: params.push(format!("bn.{l}.gamma"), s.gamma.clone(), false),
            beta: params.push(format!("bn.{l}.beta"), s.beta.clone(), false),
        })
        .collect()
}

fn hyper_binding(ids: &[NodeId], l: &HyperLayout) -> HyperBinding {
    HyperBinding {
        w1: ids[l.w1],
        b1: ids[l.b1],
        w2: l.w2.iter().map(|&i| ids[i]).collect(),
        b2: l.b2.iter().map(|&i| ids[i]).collect(),
    }
}

fn bn_bindings(ids: &[NodeId], ls: &[BnLayout]) -> Vec<BnBinding> {
    ls.iter()
        .map(|l| BnBinding {
            gamma: ids[l.gamma],
            beta: ids[l.beta],
        })
        .collect()
}

fn extract_hypernet(params: &ParamSet, l: &HyperLayout, activation: Activation) -> HyperNetworkParams {
    HyperNetworkParams {
        w1: params.tensor(l.w1).clone(),
        b1: params.tensor(l.b1).clone(),
        w2: l.w2.iter().map(|&i| params.tensor(i).clone()).collect(),
        b2: l.b2.iter().map(|&i| params.tensor(i).clone()).collect(),
        activation,
    }
}

fn extract_bns(params: &ParamSet, ls: &[BnLayout], states: &[BnState]) -> Vec<BnState> {
    ls.iter()
        .zip(states)
        .map(|(l, s)| BnState {
            gamma: params.tensor(l.gamma).clone(),
            beta: params.tensor(l.beta).clone(),
            running_mean: s.running_mean.clone(),
            running_var: s.running_var.clone(),
            momentum: s.momentum,
            eps: s.eps,
        })
        .collect()
}

/// Shuffled index batches for one epoch: chunks of `batch`, trailing
/// partial chunk kept.
fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn transfer_grads(graph: &Graph, ids: &[NodeId], params: &mut ParamSet) {
    for (k, &id) in ids.iter().enumerate() {
        params.tensor_mut(k).grad = graph.grad(id).map(|g| g.to_vec());
    }
}

fn argmax_hits(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            best == y
        })
        .count()
}

// ── Multi-task pre-training ──────────────────────────────────────────

/// Jointly optimize the generator and all task heads: each step samples a
/// batch per task, applies that task's descriptor-gated augmentation, and
/// averages the per-task cross-entropies with uniform weights. Returns
/// the bundle from the best epoch by mean train loss.
pub fn pretrain_multitask(
    tasks: &[PretrainTask],
    families: &[TransformFamily],
    config: &TrainConfig,
) -> Result<PretrainedBundle> {
    if tasks.is_empty() {
        return Err(Error::contract("pretrain_multitask with no tasks"));
    }
    let k = families.len();
    for t in tasks {
        if t.descriptor.len() != k {
            return Err(Error::contract(format!(
                "task '{}' descriptor has {} components for {} families",
                t.name,
                t.descriptor.len(),
                k
            )));
        }
    }
    let arch = EncoderArch::synthetic();
    let feature_dim = arch.feature_dim();
    let hypernet = HyperNetworkParams::init(k, config.hidden_dim, &arch, config.activation, config.seed);
    let mut bn_states: Vec<BnState> = arch
        .layer_dims()
        .iter()
        .map(|&(c, _)| BnState::new(c))
        .collect();

    let mut params = ParamSet::new();
    let hlay = push_hypernet(&mut params, &hypernet);
    let blay = push_bns(&mut params, &bn_states);
    let head_idx: Vec<usize> = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let head = TaskHead::init(
                feature_dim,
                task.head_size,
                derive_labeled(config.seed, "head", &[t as u64]),
            );
            params.push(format!("head.{t}.weight"), head.weight, true)
        })
        .collect();

    let mut adam = Adam::new(&params, config.weight_decay);
    let batch = config.effective_batch(tasks.iter().map(|t| t.dataset.len()).min().unwrap());
    let steps_per_epoch = tasks
        .iter()
        .map(|t| t.dataset.len().div_ceil(batch))
        .max()
        .unwrap();
    let schedule = config.schedule.resolve(config.lr, config.epochs, steps_per_epoch);

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet, Vec<BnState>)> = None;

    for epoch in 0..config.epochs {
        let task_batches: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .enumerate()
            .map(|(t, task)| {
                let mut rng = Rng::from_parts(config.seed, "shuffle", &[t as u64, epoch as u64]);
                epoch_batches(task.dataset.len(), batch, &mut rng)
            })
            .collect();

        let mut epoch_loss = vec![0.0; tasks.len()];
        let mut epoch_hits = vec![0usize; tasks.len()];
        let mut epoch_seen = vec![0usize; tasks.len()];

        for step in 0..steps_per_epoch {
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let lr = schedule_lr(&schedule, global_step)?;

            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let hb = hyper_binding(&ids, &hlay);
            let bb = bn_bindings(&ids, &blay);

            let mut task_losses = Vec::with_capacity(tasks.len());
            let mut pending_stats = Vec::new();
            for (t, task) in tasks.iter().enumerate() {
                let batches = &task_batches[t];
                let idxs = &batches[step % batches.len()];
                let (images, labels) = task.dataset.batch(idxs, task.label_field);
                let aug = apply_descriptor_augmentation(
                    &images,
                    task.descriptor.values(),
                    families,
                    derive_labeled(config.seed, "augment-step", &[epoch as u64, step as u64, t as u64]),
                    config.aug_samples,
                )?;
                let desc = g.constant(vec![1, k], task.descriptor.values().to_vec());
                let kernels = hyper_forward(&mut g, &hb, desc, &arch, config.activation)?;
                let mut logits_per_sample = Vec::with_capacity(aug.len());
                for sample in &aug {
                    let x = g.leaf(sample);
                    let (features, stats) = encode(&mut g, &kernels, &bb, &bn_states, x, &arch, true)?;
                    pending_stats.push(stats);
                    logits_per_sample.push(predict(&mut g, features, ids[head_idx[t]])?);
                }
                let logits = g.mean_of(&logits_per_sample)?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                if !g.scalar(loss).is_finite() {
                    return Err(Error::NonFiniteLoss {
                        task: Some(task.name.clone()),
                        step: global_step,
                    });
                }
                epoch_loss[t] += g.scalar(loss) * labels.len() as f64;
                epoch_hits[t] += argmax_hits(g.data(logits), &labels, task.head_size);
                epoch_seen[t] += labels.len();
                task_losses.push(loss);
            }
            let total = g.mean_of(&task_losses)?;
            g.backward(total)?;
            transfer_grads(&g, &ids, &mut params);
            if let Some(clip) = config.grad_clip {
                params.clip_global_norm(clip);
            }
            adam.step(&mut params, lr)?;
            for stats in pending_stats {
                for (l, s) in stats.into_iter().enumerate() {
                    if let Some(s) = s {
                        bn_states[l].update(&s);
                    }
                }
            }
        }

        let mut mean_loss = 0.0;
        for (t, task) in tasks.iter().enumerate() {
            let loss = epoch_loss[t] / epoch_seen[t] as f64;
            mean_loss += loss / tasks.len() as f64;
            log.push(LogRow {
                epoch,
                task: task.name.clone(),
                split: "train".to_string(),
                loss,
                accuracy: epoch_hits[t] as f64 / epoch_seen[t] as f64,
            });
        }
        if best.as_ref().map(|(l, _, _)| mean_loss < *l).unwrap_or(true) {
            best = Some((mean_loss, params.clone(), bn_states.clone()));
        }
    }

    let (_, best_params, best_bns) = best.expect("at least one epoch");
    Ok(PretrainedBundle {
        hypernet: extract_hypernet(&best_params, &hlay, config.activation),
        arch,
        bn: extract_bns(&best_params, &blay, &best_bns),
        heads: head_idx
            .iter()
            .map(|&i| TaskHead {
                weight: best_params.tensor(i).clone(),
            })
            .collect(),
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        families: families.to_vec(),
        log,
    })
}

// ── Contrastive pre-training ─────────────────────────────────────────

/// Toy-scale contrastive pre-training of the two-layer generated encoder:
/// steps cycle the descriptors [1,1], [1,0], [0,1] matched to default,
/// ventral and dorsal view recipes, minimizing NT-Xent on projected
/// features. The projection head is discarded from the returned bundle.
pub fn pretrain_contrastive(
    images: &Tensor,
    ventral: &VentralParams,
    dorsal: &DorsalParams,
    projection_dim: usize,
    config: &TrainConfig,
) -> Result<PretrainedBundle> {
    let n = images.shape()[0];
    let batch = config.effective_batch(n).max(2);
    let arch = EncoderArch::toy_contrastive();
    let feature_dim = arch.feature_dim();
    let hypernet = HyperNetworkParams::init(2, config.hidden_dim, &arch, config.activation, config.seed);
    let mut bn_states: Vec<BnState> = arch
        .layer_dims()
        .iter()
        .map(|&(c, _)| BnState::new(c))
        .collect();

    let mut params = ParamSet::new();
    let hlay = push_hypernet(&mut params, &hypernet);
    let blay = push_bns(&mut params, &bn_states);
    let proj_head = TaskHead::init(
        feature_dim,
        projection_dim,
        derive_labeled(config.seed, "head", &[0]),
    );
    let proj_idx = params.push("projection.weight", proj_head.weight, true);

    let mut adam = Adam::new(&params, config.weight_decay);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = config.schedule.resolve(config.lr, config.epochs, steps_per_epoch);

    const CYCLE: [([f64; 2], ViewFamily); 3] = [
        ([1.0, 1.0], ViewFamily::Default),
        ([1.0, 0.0], ViewFamily::Ventral),
        ([0.0, 1.0], ViewFamily::Dorsal),
    ];

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet, Vec<BnState>)> = None;

    for epoch in 0..config.epochs {
        let mut rng = Rng::from_parts(config.seed, "shuffle", &[0, epoch as u64]);
        let batches = epoch_batches(n, batch, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;

        for (step, idxs) in batches.iter().enumerate() {
            if idxs.len() < 2 {
                continue;
            }
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let lr = schedule_lr(&schedule, global_step)?;
            let (desc_vals, family) = CYCLE[global_step as usize % CYCLE.len()];

            let batch_images = images.gather_rows(idxs);
            let (v1, v2) = make_views(
                &batch_images,
                family,
                ventral,
                dorsal,
                derive_labeled(config.seed, "views-step", &[epoch as u64, step as u64]),
            )?;

            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let hb = hyper_binding(&ids, &hlay);
            let bb = bn_bindings(&ids, &blay);
            let desc = g.constant(vec![1, 2], desc_vals.to_vec());
            let kernels = hyper_forward(&mut g, &hb, desc, &arch, config.activation)?;

            let project = |g: &mut Graph, view: &Tensor| -> Result<(NodeId, Vec<_>)> {
                let x = g.leaf(view);
                let (features, stats) = encode(g, &kernels, &bb, &bn_states, x, &arch, true)?;
                Ok((g.matmul(features, ids[proj_idx])?, stats))
            };
            let (z1, s1) = project(&mut g, &v1)?;
            let (z2, s2) = project(&mut g, &v2)?;
            let loss = nt_xent_loss(&mut g, z1, z2, config.temperature)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: Some(format!("contrastive {family:?}")),
                    step: global_step,
                });
            }
            epoch_loss += g.scalar(loss);
            epoch_steps += 1;
            g.backward(loss)?;
            transfer_grads(&g, &ids, &mut params);
            if let Some(clip) = config.grad_clip {
                params.clip_global_norm(clip);
            }
            adam.step(&mut params, lr)?;
            for stats in [s1, s2] {
                for (l, s) in stats.into_iter().enumerate() {
                    if let Some(s) = s {
                        bn_states[l].update(&s);
                    }
                }
            }
        }

        let mean_loss = epoch_loss / epoch_steps.max(1) as f64;
        log.push(LogRow {
            epoch,
            task: "contrastive".to_string(),
            split: "train".to_string(),
            loss: mean_loss,
            accuracy: f64::NAN,
        });
        if best.as_ref().map(|(l, _, _)| mean_loss < *l).unwrap_or(true) {
            best = Some((mean_loss, params.clone(), bn_states.clone()));
        }
    }

    let (_, best_params, best_bns) = best.expect("at least one epoch");
    Ok(PretrainedBundle {
        hypernet: extract_hypernet(&best_params, &hlay, config.activation),
        arch,
        bn: extract_bns(&best_params, &blay, &best_bns),
        heads: Vec::new(), // projection head discarded: linear-evaluation convention
        task_names: vec!["contrastive".to_string()],
        families: vec![
            TransformFamily::Ventral(ventral.clone()),
            TransformFamily::Dorsal(dorsal.clone()),
        ],
        log,
    })
}

// ── The shared-encoder baseline ──────────────────────────────────────

/// Same objective and augmentation stream as [`pretrain_multitask`], but
/// the conv weights are ordinary parameters: one unconditioned encoder
/// shared by every task.
pub fn train_mtl_baseline(
    tasks: &[PretrainTask],
    families: &[TransformFamily],
    config: &TrainConfig,
) -> Result<MtlModel> {
    if tasks.is_empty() {
        return Err(Error::contract("train_mtl_baseline with no tasks"));
    }
    let arch = EncoderArch::synthetic();
    let feature_dim = arch.feature_dim();
    let mut bn_states: Vec<BnState> = arch
        .layer_dims()
        .iter()
        .map(|&(c, _)| BnState::new(c))
        .collect();

    let mut params = ParamSet::new();
    let kernel_idx: Vec<usize> = (0..arch.convs.len())
        .map(|l| {
            let shape = arch.kernel_shape(l);
            let fan_in: usize = shape[1..].iter().product();
            let mut rng = Rng::from_parts(config.seed, "init.conv", &[l as u64]);
            let k = Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);
            params.push(format!("conv.{l}.weight"), k, true)
        })
        .collect();
    let blay = push_bns(&mut params, &bn_states);
    let head_idx: Vec<usize> = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let head = TaskHead::init(
                feature_dim,
                task.head_size,
                derive_labeled(config.seed, "head", &[t as u64]),
            );
            params.push(format!("head.{t}.weight"), head.weight, true)
        })
        .collect();

    let mut adam = Adam::new(&params, config.weight_decay);
    let batch = config.effective_batch(tasks.iter().map(|t| t.dataset.len()).min().unwrap());
    let steps_per_epoch = tasks
        .iter()
        .map(|t| t.dataset.len().div_ceil(batch))
        .max()
        .unwrap();
    let schedule = config.schedule.resolve(config.lr, config.epochs, steps_per_epoch);

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet, Vec<BnState>)> = None;

    for epoch in 0..config.epochs {
        let task_batches: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .enumerate()
            .map(|(t, task)| {
                let mut rng = Rng::from_parts(config.seed, "shuffle", &[t as u64, epoch as u64]);
                epoch_batches(task.dataset.len(), batch, &mut rng)
            })
            .collect();

        let mut epoch_loss = vec![0.0; tasks.len()];
        let mut epoch_hits = vec![0usize; tasks.len()];
        let mut epoch_seen = vec![0usize; tasks.len()];

        for step in 0..steps_per_epoch {
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let lr = schedule_lr(&schedule, global_step)?;

            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let kernels: Vec<NodeId> = kernel_idx.iter().map(|&i| ids[i]).collect();
            let bb = bn_bindings(&ids, &blay);

            let mut task_losses = Vec::with_capacity(tasks.len());
            let mut pending_stats = Vec::new();
            for (t, task) in tasks.iter().enumerate() {
                let batches = &task_batches[t];
                let idxs = &batches[step % batches.len()];
                let (images, labels) = task.dataset.batch(idxs, task.label_field);
                let aug = apply_descriptor_augmentation(
                    &images,
                    task.descriptor.values(),
                    families,
                    derive_labeled(config.seed, "augment-step", &[epoch as u64, step as u64, t as u64]),
                    config.aug_samples,
                )?;
                let mut logits_per_sample = Vec::with_capacity(aug.len());
                for sample in &aug {
                    let x = g.leaf(sample);
                    let (features, stats) = encode(&mut g, &kernels, &bb, &bn_states, x, &arch, true)?;
                    pending_stats.push(stats);
                    logits_per_sample.push(predict(&mut g, features, ids[head_idx[t]])?);
                }
                let logits = g.mean_of(&logits_per_sample)?;
                let loss = g.softmax_cross_entropy(logits, &labels)?;
                if !g.scalar(loss).is_finite() {
                    return Err(Error::NonFiniteLoss {
                        task: Some(task.name.clone()),
                        step: global_step,
                    });
                }
                epoch_loss[t] += g.scalar(loss) * labels.len() as f64;
                epoch_hits[t] += argmax_hits(g.data(logits), &labels, task.head_size);
                epoch_seen[t] += labels.len();
                task_losses.push(loss);
            }
            let total = g.mean_of(&task_losses)?;
            g.backward(total)?;
            transfer_grads(&g, &ids, &mut params);
            if let Some(clip) = config.grad_clip {
                params.clip_global_norm(clip);
            }
            adam.step(&mut params, lr)?;
            for stats in pending_stats {
                for (l, s) in stats.into_iter().enumerate() {
                    if let Some(s) = s {
                        bn_states[l].update(&s);
                    }
                }
            }
        }

        let mut mean_loss = 0.0;
        for (t, task) in tasks.iter().enumerate() {
            let loss = epoch_loss[t] / epoch_seen[t] as f64;
            mean_loss += loss / tasks.len() as f64;
            log.push(LogRow {
                epoch,
                task: task.name.clone(),
                split: "train".to_string(),
                loss,
                accuracy: epoch_hits[t] as f64 / epoch_seen[t] as f64,
            });
        }
        if best.as_ref().map(|(l, _, _)| mean_loss < *l).unwrap_or(true) {
            best = Some((mean_loss, params.clone(), bn_states.clone()));
        }
    }

    let (_, best_params, best_bns) = best.expect("at least one epoch");
    Ok(MtlModel {
        kernels: kernel_idx
            .iter()
            .map(|&i| best_params.tensor(i).clone())
            .collect(),
        arch,
        bn: extract_bns(&best_params, &blay, &best_bns),
        heads: head_idx
            .iter()
            .map(|&i| TaskHead {
                weight: best_params.tensor(i).clone(),
            })
            .collect(),
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        log,
    })
}

// ── Downstream fitting ───────────────────────────────────────────────

/// Evaluation metrics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Result of fitting one downstream task.
#[derive(Clone, Debug)]
pub struct ContinuousFit {
    pub descriptor: InvarianceDescriptor,
    pub head: TaskHead,
    pub train: Metrics,
    pub loss_curve: Vec<f64>,
}

/// Continuous variant: jointly optimize a fresh head and the descriptor
/// (through its constraint parametrization) on the task loss. The bundle
/// is frozen: generator weights and batchnorm statistics receive no
/// updates, and no augmentation is applied.
pub fn downstream_fit(
    bundle: &PretrainedBundle,
    data: &LabeledDataset,
    label_field: LabelField,
    head_size: usize,
    config: &TrainConfig,
) -> Result<ContinuousFit> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset("downstream_fit".into()));
    }
    let k = bundle.hypernet.descriptor_len();
    let feature_dim = bundle.arch.feature_dim();
    let batch = config.effective_batch(n);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = config.schedule.resolve(config.lr, config.epochs, steps_per_epoch);

    let raw_init = match config.descriptor_mode {
        DescriptorMode::Sigmoid => 0.0, // logistic(0) = 0.5 per component
        DescriptorMode::Clamp => 0.5,
    };
    let mut params = ParamSet::new();
    let raw_idx = params.push("descriptor.raw", Tensor::filled(vec![1, k], raw_init), false);
    // Downstream heads start at zero (the convex-start convention): the
    // descriptor then receives task-aligned gradient only, not random
    // projections through an arbitrary initial head.
    let head_idx = params.push("head.weight", Tensor::zeros(vec![feature_dim, head_size]), true);
    let mut adam = Adam::new(&params, config.weight_decay);

    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = Rng::from_parts(config.seed, "shuffle", &[0, epoch as u64]);
        let batches = epoch_batches(n, batch, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (step, idxs) in batches.iter().enumerate() {
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let lr = schedule_lr(&schedule, global_step)?;
            let (images, labels) = data.batch(idxs, label_field);

            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let raw = ids[raw_idx];
            let desc = match config.descriptor_mode {
                DescriptorMode::Sigmoid => g.sigmoid(raw),
                DescriptorMode::Clamp => raw,
            };
            // Frozen generator and batchnorm: plain non-grad leaves.
            let hb = HyperBinding {
                w1: g.leaf(&bundle.hypernet.w1),
                b1: g.leaf(&bundle.hypernet.b1),
                w2: bundle.hypernet.w2.iter().map(|t| g.leaf(t)).collect(),
                b2: bundle.hypernet.b2.iter().map(|t| g.leaf(t)).collect(),
            };
            let bb: Vec<BnBinding> = bundle.bn.iter().map(|s| bind_bn(&mut g, s)).collect();
            let kernels = hyper_forward(&mut g, &hb, desc, &bundle.arch, bundle.hypernet.activation)?;
            let x = g.leaf(&images);
            // Batch statistics during the fit (running stats are shared
            // across descriptors, so eval-mode feature scale grows with
            // the descriptor and would leak a spurious scale gradient
            // into the descriptor update). The returned stats are
            // dropped: the bundle's running estimates never move.
            let (features, _) = encode(&mut g, &kernels, &bb, &bundle.bn, x, &bundle.arch, true)?;
            let logits = predict(&mut g, features, ids[head_idx])?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: None,
                    step: global_step,
                });
            }
            epoch_loss += g.scalar(loss) * labels.len() as f64;
            seen += labels.len();
            g.backward(loss)?;
            transfer_grads(&g, &ids, &mut params);
            if let Some(clip) = config.grad_clip {
                params.clip_global_norm(clip);
            }
            adam.step(&mut params, lr)?;
            if config.descriptor_mode == DescriptorMode::Clamp {
                for v in params.tensor_mut(raw_idx).data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        loss_curve.push(epoch_loss / seen as f64);
    }

    let raw = params.tensor(raw_idx);
    let values: Vec<f64> = match config.descriptor_mode {
        DescriptorMode::Sigmoid => raw.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        DescriptorMode::Clamp => raw.data().to_vec(),
    };
    let descriptor = InvarianceDescriptor::new(values)?;
    // Final head: refit at the recovered descriptor on eval-mode
    // features, so the returned readout matches the frozen inference
    // path instead of the per-batch statistics used while the
    // descriptor was moving.
    let features = encode_eval(
        &bundle.hypernet,
        &bundle.bn,
        &bundle.arch,
        &descriptor,
        &data.images,
        256,
    )?;
    let labels = data.labels(label_field);
    let (head, _) = train_linear_head(&features, labels, head_size, config)?;
    let train = evaluate_features(&features, &head, labels)?;
    Ok(ContinuousFit {
        descriptor,
        head,
        train,
        loss_curve,
    })
}

/// Discretized variant: pin the rounded descriptor, re-initialize the
/// head, and retrain it alone. The pinned descriptor receives no gradient
/// updates, so features are fixed and computed once.
pub fn downstream_fit_discrete(
    bundle: &PretrainedBundle,
    data: &LabeledDataset,
    label_field: LabelField,
    head_size: usize,
    i_star: &InvarianceDescriptor,
    config: &TrainConfig,
) -> Result<ContinuousFit> {
    let rounded = round_descriptor(i_star, config.levels)?;
    let features = encode_eval(
        &bundle.hypernet,
        &bundle.bn,
        &bundle.arch,
        &rounded,
        &data.images,
        256,
    )?;
    let labels = data.labels(label_field);
    let (head, loss_curve) = train_linear_head(&features, labels, head_size, config)?;
    let train = evaluate_features(&features, &head, labels)?;
    Ok(ContinuousFit {
        descriptor: rounded,
        head,
        train,
        loss_curve,
    })
}

/// Head-only training on fixed features: the downstream procedure for
/// the MTL baseline and for any pinned-descriptor fit.
pub fn train_linear_head(
    features: &Tensor,
    labels: &[usize],
    head_size: usize,
    config: &TrainConfig,
) -> Result<(TaskHead, Vec<f64>)> {
    let n = features.shape()[0];
    let d = features.shape()[1];
    if labels.len() != n {
        return Err(Error::shape("train_linear_head labels", &[n], &[labels.len()]));
    }
    let batch = config.effective_batch(n);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = config.schedule.resolve(config.lr, config.epochs, steps_per_epoch);

    let mut params = ParamSet::new();
    let head_idx = params.push("head.weight", Tensor::zeros(vec![d, head_size]), true);
    let mut adam = Adam::new(&params, config.weight_decay);

    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = Rng::from_parts(config.seed, "shuffle", &[0, epoch as u64]);
        let batches = epoch_batches(n, batch, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (step, idxs) in batches.iter().enumerate() {
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let lr = schedule_lr(&schedule, global_step)?;
            let x = features.gather_rows(idxs);
            let y: Vec<usize> = idxs.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|e| g.leaf(&e.tensor)).collect();
            let xn = g.leaf(&x);
            let logits = g.matmul(xn, ids[head_idx])?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: None,
                    step: global_step,
                });
            }
            epoch_loss += g.scalar(loss) * y.len() as f64;
            seen += y.len();
            g.backward(loss)?;
            transfer_grads(&g, &ids, &mut params);
            adam.step(&mut params, lr)?;
        }
        loss_curve.push(epoch_loss / seen as f64);
    }
    Ok((
        TaskHead {
            weight: params.tensor(head_idx).clone(),
        },
        loss_curve,
    ))
}

// ── Evaluation ───────────────────────────────────────────────────────

/// A frozen feature extractor: the generated encoder at a descriptor, or
/// the baseline's plain kernels.
pub enum Features<'a> {
    Hyper {
        bundle: &'a PretrainedBundle,
        descriptor: &'a InvarianceDescriptor,
    },
    Kernels {
        kernels: &'a [Tensor],
        bn: &'a [BnState],
        arch: &'a EncoderArch,
    },
}

impl Features<'_> {
    pub fn compute(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            Features::Hyper { bundle, descriptor } => encode_eval(
                &bundle.hypernet,
                &bundle.bn,
                &bundle.arch,
                descriptor,
                images,
                256,
            ),
            Features::Kernels { kernels, bn, arch } => {
                encode_eval_kernels(kernels, bn, arch, images, 256)
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Features::Hyper { bundle, .. } => bundle.arch.feature_dim(),
            Features::Kernels { arch, .. } => arch.feature_dim(),
        }
    }
}

/// Accuracy (fraction argmax-correct) and mean loss on a dataset,
/// eval-mode batchnorm.
pub fn evaluate(
    features: &Features,
    head: &TaskHead,
    dataset: &LabeledDataset,
    label_field: LabelField,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluate".into()));
    }
    let f = features.compute(&dataset.images)?;
    evaluate_features(&f, head, dataset.labels(label_field))
}

/// Metrics from precomputed features.
pub fn evaluate_features(features: &Tensor, head: &TaskHead, labels: &[usize]) -> Result<Metrics> {
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(Error::shape("evaluate_features labels", &[n], &[labels.len()]));
    }
    let mut g = Graph::new();
    let x = g.leaf(features);
    let h = g.leaf(&head.weight);
    let logits = g.matmul(x, h)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let hits = argmax_hits(g.data(logits), labels, head.outputs());
    Ok(Metrics {
        accuracy: hits as f64 / n as f64,
        mean_loss: g.scalar(loss),
    })
}

// ── Bundle persistence ───────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    kind: String,
    arch: EncoderArch,
    activation: Activation,
    families: Vec<TransformFamily>,
    task_names: Vec<String>,
    head_sizes: Vec<usize>,
    bn_momentum: f64,
    bn_eps: f64,
}

/// Save a bundle as `dir/stem.{json,bin}`.
pub fn save_bundle(dir: &Path, stem: &str, bundle: &PretrainedBundle) -> Result<()> {
    let meta = BundleMeta {
        kind: "hyper".to_string(),
        arch: bundle.arch.clone(),
        activation: bundle.hypernet.activation,
        families: bundle.families.clone(),
        task_names: bundle.task_names.clone(),
        head_sizes: bundle.heads.iter().map(TaskHead::outputs).collect(),
        bn_momentum: bundle.bn.first().map(|b| b.momentum).unwrap_or(0.1),
        bn_eps: bundle.bn.first().map(|b| b.eps).unwrap_or(1e-5),
    };
    let mut tensors: Vec<(String, &Tensor)> = vec![
        ("hypernet.w1".to_string(), &bundle.hypernet.w1),
        ("hypernet.b1".to_string(), &bundle.hypernet.b1),
    ];
    for (l, t) in bundle.hypernet.w2.iter().enumerate() {
        tensors.push((format!("hypernet.w2.{l}"), t));
    }
    for (l, t) in bundle.hypernet.b2.iter().enumerate() {
        tensors.push((format!("hypernet.b2.{l}"), t));
    }
    let mut bn_stat_tensors = Vec::new();
    for (l, s) in bundle.bn.iter().enumerate() {
        bn_stat_tensors.push((
            format!("bn.{l}.running_mean"),
            Tensor::new(vec![s.running_mean.len()], s.running_mean.clone())?,
        ));
        bn_stat_tensors.push((
            format!("bn.{l}.running_var"),
            Tensor::new(vec![s.running_var.len()], s.running_var.clone())?,
        ));
    }
    for (l, s) in bundle.bn.iter().enumerate() {
        tensors.push((format!("bn.{l}.gamma"), &s.gamma));
        tensors.push((format!("bn.{l}.beta"), &s.beta));
    }
    for (name, t) in &bn_stat_tensors {
        tensors.push((name.clone(), t));
    }
    for (t, head) in bundle.heads.iter().enumerate() {
        tensors.push((format!("head.{t}.weight"), &head.weight));
    }
    checkpoint::save(dir, stem, serde_json::to_value(&meta)?, &tensors)
}

/// Load a bundle saved by [`save_bundle`]. The checkpoint is
/// self-describing: architecture, families and head sizes come from the
/// manifest.
pub fn load_bundle(dir: &Path, stem: &str) -> Result<PretrainedBundle> {
    let (meta_value, tensors) = checkpoint::load(dir, stem)?;
    let meta: BundleMeta = serde_json::from_value(meta_value)?;
    let find = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::contract(format!("checkpoint missing tensor '{name}'")))
    };
    let layers = meta.arch.convs.len();
    let hypernet = HyperNetworkParams {
        w1: find("hypernet.w1")?,
        b1: find("hypernet.b1")?,
        w2: (0..layers)
            .map(|l| find(&format!("hypernet.w2.{l}")))
            .collect::<Result<_>>()?,
        b2: (0..layers)
            .map(|l| find(&format!("hypernet.b2.{l}")))
            .collect::<Result<_>>()?,
        activation: meta.activation,
    };
    let bn = (0..layers)
        .map(|l| {
            Ok(BnState {
                gamma: find(&format!("bn.{l}.gamma"))?,
                beta: find(&format!("bn.{l}.beta"))?,
                running_mean: find(&format!("bn.{l}.running_mean"))?.data().to_vec(),
                running_var: find(&format!("bn.{l}.running_var"))?.data().to_vec(),
                momentum: meta.bn_momentum,
                eps: meta.bn_eps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = (0..meta.head_sizes.len())
        .map(|t| {
            Ok(TaskHead {
                weight: find(&format!("head.{t}.weight"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainedBundle {
        hypernet,
        arch: meta.arch,
        bn,
        heads,
        task_names: meta.task_names,
        families: meta.families,
        log: Vec::new(),
    })
}

/// Save the MTL baseline as `dir/stem.{json,bin}`.
pub fn save_mtl(dir: &Path, stem: &str, model: &MtlModel) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "mtl",
        "arch": model.arch,
        "task_names": model.task_names,
        "head_sizes": model.heads.iter().map(TaskHead::outputs).collect::<Vec<_>>(),
        "bn_momentum": model.bn.first().map(|b| b.momentum).unwrap_or(0.1),
        "bn_eps": model.bn.first().map(|b| b.eps).unwrap_or(1e-5),
    });
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (l, t) in model.kernels.iter().enumerate() {
        tensors.push((format!("conv.{l}.weight"), t));
    }
    let mut bn_stat_tensors = Vec::new();
    for (l, s) in model.bn.iter().enumerate() {
        bn_stat_tensors.push((
            format!("bn.{l}.running_mean"),
            Tensor::new(vec![s.running_mean.len()], s.running_mean.clone())?,
        ));
        bn_stat_tensors.push((
            format!("bn.{l}.running_var"),
            Tensor::new(vec![s.running_var.len()], s.running_var.clone())?,
        ));
    }
    for (l, s) in model.bn.iter().enumerate() {
        tensors.push((format!("bn.{l}.gamma"), &s.gamma));
        tensors.push((format!("bn.{l}.beta"), &s.beta));
    }
    for (name, t) in &bn_stat_tensors {
        tensors.push((name.clone(), t));
    }
    for (t, head) in model.heads.iter().enumerate() {
        tensors.push((format!("head.{t}.weight"), &head.weight));
    }
    checkpoint::save(dir, stem, meta, &tensors)
}

/// Load an MTL baseline saved by [`save_mtl`].
pub fn load_mtl(dir: &Path, stem: &str) -> Result<MtlModel> {
    let (meta, tensors) = checkpoint::load(dir, stem)?;
    let arch: EncoderArch = serde_json::from_value(meta["arch"].clone())?;
    let task_names: Vec<String> = serde_json::from_value(meta["task_names"].clone())?;
    let head_sizes: Vec<usize> = serde_json::from_value(meta["head_sizes"].clone())?;
    let momentum = meta["bn_momentum"].as_f64().unwrap_or(0.1);
    let eps = meta["bn_eps"].as_f64().unwrap_or(1e-5);
    let find = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::contract(format!("checkpoint missing tensor '{name}'")))
    };
    let layers = arch.convs.len();
    let kernels = (0..layers)
        .map(|l| find(&format!("conv.{l}.weight")))
        .collect::<Result<Vec<_>>>()?;
    let bn = (0..layers)
        .map(|l| {
            Ok(BnState {
                gamma: find(&format!("bn.{l}.gamma"))?,
                beta: find(&format!("bn.{l}.beta"))?,
                running_mean: find(&format!("bn.{l}.running_mean"))?.data().to_vec(),
                running_var: find(&format!("bn.{l}.running_var"))?.data().to_vec(),
                momentum,
                eps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = (0..head_sizes.len())
        .map(|t| {
            Ok(TaskHead {
                weight: find(&format!("head.{t}.weight"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MtlModel {
        kernels,
        arch,
        bn,
        heads,
        task_names,
        log: Vec::new(),
    })
}

/// Serializable summary of one downstream cell, the JSON artifact
/// written per (N, seed).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub task: String,
    pub n_per_class: usize,
    pub seed: u64,
    pub descriptor_continuous: Vec<f64>,
    pub descriptor_discrete: Vec<f64>,
    pub train_continuous: Metrics,
    pub test_continuous: Metrics,
    pub train_discrete: Metrics,
    pub test_discrete: Metrics,
}

/// Convenience for tests and the CLI: IDX pair if present, else a fresh
/// glyph corpus.
pub fn load_base_images(
    images_path: Option<&Path>,
    labels_path: Option<&Path>,
    glyph_per_class: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    match (images_path, labels_path) {
        (Some(ip), Some(lp)) => {
            let images = idx::load_idx_images(ip)?;
            let labels = idx::load_idx_labels(lp)?;
            Ok((images, labels))
        }
        _ => Ok(crate::glyphs::synth_glyph_dataset(glyph_per_class, seed)),
    }
}
