//! Measurement and theory tooling: invariance spectra, loss-vs-descriptor
//! sweeps, the closed-form generalization bound with empirical norm
//! estimation, and the Monte Carlo bound sanity check.

use crate::dataset::{subsample_per_class, LabeledDataset, LabelField};
use crate::error::{Error, Result};
use crate::hypernet::{encode_eval, round_descriptor, InvarianceDescriptor, TaskHead};
use crate::rng::{derive, Rng};
use crate::tensor::{cosine_similarity, Tensor};
use crate::train::{
    downstream_fit, evaluate_features, train_linear_head, PretrainedBundle, TrainConfig,
};
use crate::transforms::TransformFamily;
use serde::{Deserialize, Serialize};

/// Per-family similarity statistics at one sweep descriptor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub descriptor: Vec<f64>,
    /// Mean cosine similarity per family, aligned with the curve's
    /// family names.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Measured invariance along a descriptor sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceCurve {
    pub family_names: Vec<String>,
    pub points: Vec<SweepPoint>,
    /// Similarity samples per (point, family): images times draws.
    pub sample_count: usize,
}

/// The default sweep preset: descriptors [t, 1-t] for t evenly spaced on
/// [0, 1].
pub fn interpolation_sweep(steps: usize) -> Vec<InvarianceDescriptor> {
    assert!(steps >= 2);
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            InvarianceDescriptor::new(vec![t, 1.0 - t]).unwrap()
        })
        .collect()
}

/// Mean cosine similarity between encodings of images and their augmented
/// versions, per family, at each sweep descriptor.
///
/// Fractional sweep descriptors affect only the generator input; the
/// transforms are always drawn from the full family.
pub fn measure_invariance(
    bundle: &PretrainedBundle,
    images: &Tensor,
    families: &[TransformFamily],
    sweep: &[InvarianceDescriptor],
    n_aug: usize,
    seed: u64,
) -> Result<InvarianceCurve> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::EmptyDataset("measure_invariance".into()));
    }
    if n_aug == 0 {
        return Err(Error::contract("measure_invariance needs n_aug >= 1"));
    }
    let n = s[0];
    let d = bundle.arch.feature_dim();

    // Transformed copies are descriptor-independent; build them once.
    let mut transformed: Vec<Tensor> = Vec::with_capacity(families.len());
    for (k, family) in families.iter().enumerate() {
        let mut stack = Vec::with_capacity(n * n_aug);
        for j in 0..n_aug {
            for b in 0..n {
                let mut rng = Rng::from_parts(seed, "measure", &[k as u64, j as u64, b as u64]);
                let t = family.sample(&mut rng);
                stack.push(t.apply(&images.row(b))?);
            }
        }
        transformed.push(Tensor::stack(&stack)?);
    }

    let mut points = Vec::with_capacity(sweep.len());
    for descriptor in sweep {
        let base = encode_eval(
            &bundle.hypernet,
            &bundle.bn,
            &bundle.arch,
            descriptor,
            images,
            256,
        )?;
        let mut means = Vec::with_capacity(families.len());
        let mut stds = Vec::with_capacity(families.len());
        for t in &transformed {
            let feats = encode_eval(
                &bundle.hypernet,
                &bundle.bn,
                &bundle.arch,
                descriptor,
                t,
                256,
            )?;
            let mut sims = Vec::with_capacity(n * n_aug);
            for j in 0..n_aug {
                for b in 0..n {
                    let fa = &base.data()[b * d..(b + 1) * d];
                    let fb = &feats.data()[(j * n + b) * d..(j * n + b + 1) * d];
                    sims.push(cosine_similarity(fa, fb));
                }
            }
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            let var = sims.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sims.len() as f64;
            means.push(mean);
            stds.push(var.sqrt());
        }
        points.push(SweepPoint {
            descriptor: descriptor.values().to_vec(),
            mean: means,
            std: stds,
        });
    }
    Ok(InvarianceCurve {
        family_names: families.iter().map(|f| f.name().to_string()).collect(),
        points,
        sample_count: n * n_aug,
    })
}

/// Converged train loss of a fresh head at each pinned sweep descriptor,
/// identical budgets and seeds across points.
pub fn loss_descriptor_sweep(
    bundle: &PretrainedBundle,
    data: &LabeledDataset,
    label_field: LabelField,
    head_size: usize,
    sweep: &[InvarianceDescriptor],
    config: &TrainConfig,
) -> Result<Vec<(InvarianceDescriptor, f64)>> {
    let labels = data.labels(label_field);
    let mut out = Vec::with_capacity(sweep.len());
    for descriptor in sweep {
        let features = encode_eval(
            &bundle.hypernet,
            &bundle.bn,
            &bundle.arch,
            descriptor,
            &data.images,
            256,
        )?;
        let (head, _) = train_linear_head(&features, labels, head_size, config)?;
        let metrics = evaluate_features(&features, &head, labels)?;
        out.push((descriptor.clone(), metrics.mean_loss));
    }
    Ok(out)
}

// ── The generalization bound ─────────────────────────────────────────

/// Inputs to the closed-form bound for a 1-Lipschitz loss in [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Mean loss on the n training points.
    pub empirical_risk: f64,
    /// X: bound on the feature norm.
    pub feature_bound: f64,
    /// B: bound on the head norm.
    pub head_bound: f64,
    pub n: usize,
    /// |I|: number of discretized descriptors (levels^K).
    pub cardinality: usize,
    pub delta: f64,
}

/// empirical_risk + 2XB/sqrt(n) + 3 sqrt(ln(|I|/delta) / (2n)).
pub fn generalization_bound(inputs: &BoundInputs) -> Result<f64> {
    if !(inputs.delta > 0.0 && inputs.delta <= 1.0) {
        return Err(Error::contract(format!(
            "delta {} outside (0, 1]",
            inputs.delta
        )));
    }
    if inputs.n == 0 {
        return Err(Error::contract("bound needs n >= 1"));
    }
    if inputs.cardinality == 0 {
        return Err(Error::contract("bound needs cardinality >= 1"));
    }
    if inputs.empirical_risk < 0.0 {
        return Err(Error::contract("empirical risk must be non-negative"));
    }
    let n = inputs.n as f64;
    let complexity = 2.0 * inputs.feature_bound * inputs.head_bound / n.sqrt();
    let confidence = 3.0 * ((inputs.cardinality as f64 / inputs.delta).ln() / (2.0 * n)).sqrt();
    Ok(inputs.empirical_risk + complexity + confidence)
}

/// Empirical norm estimates: the max feature L2 norm over the dataset and
/// the head's L2 norm.
pub fn estimate_norm_bounds(
    bundle: &PretrainedBundle,
    descriptor: &InvarianceDescriptor,
    data: &LabeledDataset,
    head: &TaskHead,
) -> Result<(f64, f64)> {
    let features = encode_eval(
        &bundle.hypernet,
        &bundle.bn,
        &bundle.arch,
        descriptor,
        &data.images,
        256,
    )?;
    Ok((max_row_norm(&features), head.weight.l2_norm()))
}

pub(crate) fn max_row_norm(features: &Tensor) -> f64 {
    let d = features.shape()[1];
    features
        .data()
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Hinge-style multiclass surrogate, clipped to [0, 1]: the bounded
/// 1-Lipschitz loss the bound check uses. The training pipeline itself
/// stays on cross-entropy.
pub fn clipped_hinge_loss(scores: &[f64], label: usize) -> f64 {
    let correct = scores[label];
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (1.0 - (correct - runner_up)).clamp(0.0, 1.0)
}

/// Mean clipped-hinge risk of a linear head on precomputed features.
pub fn surrogate_risk(features: &Tensor, head: &TaskHead, labels: &[usize]) -> f64 {
    let n = features.shape()[0];
    let d = features.shape()[1];
    let o = head.outputs();
    let mut total = 0.0;
    for i in 0..n {
        let row = &features.data()[i * d..(i + 1) * d];
        let mut scores = vec![0.0; o];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &x) in row.iter().enumerate() {
                acc += x * head.weight.data()[k * o + j];
            }
            *s = acc;
        }
        total += clipped_hinge_loss(&scores, labels[i]);
    }
    total / n as f64
}

/// One trial of the Monte Carlo bound check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundTrial {
    pub seed: u64,
    pub n: usize,
    pub train_risk: f64,
    pub test_risk: f64,
    pub feature_bound: f64,
    pub head_bound: f64,
    pub bound: f64,
    /// The fixed-feature comparison: the same bound with |I| = 1.
    pub bound_fixed_feature: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub cardinality: usize,
    pub trials: Vec<BoundTrial>,
    pub violations: usize,
}

/// Over `trials` independent downstream fits with discretized
/// descriptors, count violations of `test risk <= bound` under the
/// clipped 1-Lipschitz surrogate, and report the fixed-feature (|I| = 1)
/// comparison bound alongside.
#[allow(clippy::too_many_arguments)]
pub fn bound_sanity_check(
    bundle: &PretrainedBundle,
    train_pool: &LabeledDataset,
    test: &LabeledDataset,
    label_field: LabelField,
    head_size: usize,
    n_per_class: usize,
    trials: usize,
    delta: f64,
    config: &TrainConfig,
) -> Result<BoundReport> {
    let cardinality = config
        .levels
        .pow(bundle.hypernet.descriptor_len() as u32);
    let mut rows = Vec::with_capacity(trials);
    let mut violations = 0;
    for trial in 0..trials {
        let seed = derive(config.seed, &[0x626f756e64, trial as u64]);
        let train = subsample_per_class(train_pool, n_per_class, label_field, seed)?;
        let trial_config = TrainConfig { seed, ..config.clone() };
        let fit = downstream_fit(bundle, &train, label_field, head_size, &trial_config)?;
        let rounded = round_descriptor(&fit.descriptor, config.levels)?;
        let train_features = encode_eval(
            &bundle.hypernet,
            &bundle.bn,
            &bundle.arch,
            &rounded,
            &train.images,
            256,
        )?;
        let (head, _) = train_linear_head(
            &train_features,
            train.labels(label_field),
            head_size,
            &trial_config,
        )?;
        let test_features = encode_eval(
            &bundle.hypernet,
            &bundle.bn,
            &bundle.arch,
            &rounded,
            &test.images,
            256,
        )?;
        let train_risk = surrogate_risk(&train_features, &head, train.labels(label_field));
        let test_risk = surrogate_risk(&test_features, &head, test.labels(label_field));
        let feature_bound = max_row_norm(&train_features).max(max_row_norm(&test_features));
        let head_bound = head.weight.l2_norm();
        let n = train.len();
        let bound = generalization_bound(&BoundInputs {
            empirical_risk: train_risk,
            feature_bound,
            head_bound,
            n,
            cardinality,
            delta,
        })?;
        let bound_fixed_feature = generalization_bound(&BoundInputs {
            empirical_risk: train_risk,
            feature_bound,
            head_bound,
            n,
            cardinality: 1,
            delta,
        })?;
        let violation = test_risk > bound;
        if violation {
            violations += 1;
        }
        rows.push(BoundTrial {
            seed,
            n,
            train_risk,
            test_risk,
            feature_bound,
            head_bound,
            bound,
            bound_fixed_feature,
            violation,
        });
    }
    Ok(BoundReport {
        delta,
        cardinality,
        trials: rows,
        violations,
    })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::glyph_colored_rotated;
    use crate::hypernet::{Activation, BnState, EncoderArch, HyperNetworkParams};
    use crate::train::{pretrain_multitask, PretrainTask};
    use crate::transforms::VentralParams;

    #[test]
    fn bound_collapses_to_risk_when_terms_vanish() {
        let b = generalization_bound(&BoundInputs {
            empirical_risk: 0.5,
            feature_bound: 0.0,
            head_bound: 0.0,
            n: 37,
            cardinality: 1,
            delta: 1.0,
        })
        .unwrap();
        assert_eq!(b, 0.5);
    }

    #[test]
    fn bound_matches_hand_derived_example() {
        let b = generalization_bound(&BoundInputs {
            empirical_risk: 0.0,
            feature_bound: 1.0,
            head_bound: 1.0,
            n: 100,
            cardinality: 4,
            delta: 0.05,
        })
        .unwrap();
        let exact = 0.2 + 3.0 * ((80.0_f64).ln() / 200.0).sqrt();
        assert!((b - exact).abs() < 1e-15);
        assert!((b - 0.644063).abs() < 1e-6, "bound {b}");
    }

    #[test]
    fn bound_monotone_in_cardinality_and_n() {
        let base = BoundInputs {
            empirical_risk: 0.1,
            feature_bound: 2.0,
            head_bound: 1.5,
            n: 50,
            cardinality: 4,
            delta: 0.05,
        };
        let b0 = generalization_bound(&base).unwrap();
        let more_card = generalization_bound(&BoundInputs {
            cardinality: 16,
            ..base.clone()
        })
        .unwrap();
        let more_n = generalization_bound(&BoundInputs { n: 500, ..base.clone() }).unwrap();
        assert!(more_card > b0);
        assert!(more_n < b0);
    }

    #[test]
    fn bound_matches_independent_recomputation_on_random_inputs() {
        // Spreadsheet-style recomputation through a different expression.
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let inputs = BoundInputs {
                empirical_risk: rng.uniform(0.0, 1.0),
                feature_bound: rng.uniform(0.0, 50.0),
                head_bound: rng.uniform(0.0, 10.0),
                n: 1 + rng.below(10_000),
                cardinality: 1 + rng.below(64),
                delta: rng.uniform(0.01, 1.0),
            };
            let ours = generalization_bound(&inputs).unwrap();
            let n = inputs.n as f64;
            let third = ((inputs.cardinality as f64).ln() - inputs.delta.ln()) / (2.0 * n);
            let independent = inputs.empirical_risk
                + 2.0 * inputs.feature_bound * inputs.head_bound * n.powf(-0.5)
                + 3.0 * third.sqrt();
            assert!((ours - independent).abs() < 1e-9, "{ours} vs {independent}");
        }
    }

    #[test]
    fn bound_contract_errors() {
        let mut inputs = BoundInputs {
            empirical_risk: 0.0,
            feature_bound: 1.0,
            head_bound: 1.0,
            n: 10,
            cardinality: 4,
            delta: 0.0,
        };
        assert!(generalization_bound(&inputs).is_err());
        inputs.delta = 1.5;
        assert!(generalization_bound(&inputs).is_err());
        inputs.delta = 0.5;
        inputs.n = 0;
        assert!(generalization_bound(&inputs).is_err());
    }

    #[test]
    fn fixed_feature_bound_differs_by_exactly_the_union_term() {
        let (n, delta) = (64, 0.05);
        let base = BoundInputs {
            empirical_risk: 0.3,
            feature_bound: 1.2,
            head_bound: 0.7,
            n,
            cardinality: 4,
            delta,
        };
        let with_card = generalization_bound(&base).unwrap();
        let fixed = generalization_bound(&BoundInputs {
            cardinality: 1,
            ..base
        })
        .unwrap();
        let expected_gap = 3.0
            * (((4.0_f64 / delta).ln()).sqrt() - ((1.0_f64 / delta).ln()).sqrt())
            / (2.0 * n as f64).sqrt();
        assert!(((with_card - fixed) - expected_gap).abs() < 1e-12);
    }

    #[test]
    fn norm_estimates_zero_head_and_scaling() {
        let features = Tensor::new(vec![3, 2], vec![3.0, 4.0, 0.1, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(max_row_norm(&features), 5.0);
        let scaled = Tensor::new(vec![3, 2], features.data().iter().map(|v| v * -2.0).collect())
            .unwrap();
        assert_eq!(max_row_norm(&scaled), 10.0);
        let zero_head = TaskHead {
            weight: Tensor::zeros(vec![2, 4]),
        };
        assert_eq!(zero_head.weight.l2_norm(), 0.0);
    }

    #[test]
    fn max_row_norm_matches_brute_scan() {
        let mut rng = Rng::new(41);
        let features = Tensor::uniform(vec![100, 7], 2.0, &mut rng);
        let mut best: f64 = 0.0;
        for i in 0..100 {
            let row = features.row(i);
            best = best.max(row.l2_norm());
        }
        assert_eq!(max_row_norm(&features), best);
    }

    #[test]
    fn clipped_hinge_is_bounded_and_zero_on_big_margin() {
        assert_eq!(clipped_hinge_loss(&[5.0, 0.0, 0.0], 0), 0.0);
        assert_eq!(clipped_hinge_loss(&[0.0, 5.0, 0.0], 0), 1.0);
        let mid = clipped_hinge_loss(&[0.6, 0.0, 0.0], 0);
        assert!((mid - 0.4).abs() < 1e-12);
    }

    #[test]
    fn spearman_known_cases() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!(rho > 0.5 && rho < 1.0);
    }

    fn tiny_bundle(seed: u64) -> PretrainedBundle {
        let arch = EncoderArch::synthetic();
        PretrainedBundle {
            hypernet: HyperNetworkParams::init(2, 8, &arch, Activation::Relu, seed),
            bn: vec![BnState::new(16)],
            arch,
            heads: Vec::new(),
            task_names: Vec::new(),
            families: vec![
                TransformFamily::Rotation,
                TransformFamily::ColorSwap,
            ],
            log: Vec::new(),
        }
    }

    #[test]
    fn identity_family_measures_exactly_one() {
        let bundle = tiny_bundle(3);
        let data = glyph_colored_rotated(1, 5).unwrap();
        let identity_family = TransformFamily::Ventral(VentralParams {
            min_crop_scale: 1.0,
            flip_prob: 0.0,
        });
        let curve = measure_invariance(
            &bundle,
            &data.images,
            &[identity_family],
            &interpolation_sweep(3),
            2,
            7,
        )
        .unwrap();
        for p in &curve.points {
            assert_eq!(p.mean[0], 1.0);
            assert_eq!(p.std[0], 0.0);
        }
    }

    #[test]
    fn untrained_curve_lies_in_range() {
        let bundle = tiny_bundle(9);
        let data = glyph_colored_rotated(1, 11).unwrap();
        let families = [TransformFamily::Rotation, TransformFamily::ColorSwap];
        let curve = measure_invariance(
            &bundle,
            &data.images,
            &families,
            &interpolation_sweep(3),
            2,
            13,
        )
        .unwrap();
        assert_eq!(curve.family_names, vec!["rotation", "color-swap"]);
        for p in &curve.points {
            for (m, s) in p.mean.iter().zip(&p.std) {
                assert!((-1.0..=1.0).contains(m));
                assert!(*s >= 0.0);
            }
        }
    }

    #[test]
    fn sweep_of_length_one_matches_discrete_fit() {
        let data = glyph_colored_rotated(4, 21).unwrap();
        let tasks = vec![PretrainTask {
            name: "digit".into(),
            dataset: data.clone(),
            label_field: LabelField::Digit,
            descriptor: InvarianceDescriptor::new(vec![1.0, 1.0]).unwrap(),
            head_size: 10,
        }];
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::pretrain_defaults(3)
        };
        let families = [TransformFamily::Rotation, TransformFamily::ColorSwap];
        let bundle = pretrain_multitask(&tasks, &families, &cfg).unwrap();
        let small = glyph_colored_rotated(2, 23).unwrap();
        let ds_cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::downstream_defaults(29)
        };
        let pinned = InvarianceDescriptor::new(vec![1.0, 0.0]).unwrap();
        let sweep = loss_descriptor_sweep(
            &bundle,
            &small,
            LabelField::Digit,
            10,
            std::slice::from_ref(&pinned),
            &ds_cfg,
        )
        .unwrap();
        assert_eq!(sweep.len(), 1);
        let direct = crate::train::downstream_fit_discrete(
            &bundle,
            &small,
            LabelField::Digit,
            10,
            &pinned,
            &ds_cfg,
        )
        .unwrap();
        assert_eq!(sweep[0].1.to_bits(), direct.train.mean_loss.to_bits());
    }
}
