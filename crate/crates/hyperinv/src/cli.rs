//! Operator surface: config-driven commands for pre-training, downstream
//! fitting, invariance measurement, loss sweeps, and bound reports.
//!
//! Every command takes `--out` pointing at a fresh run directory (or
//! `--force`), writes a full config snapshot into it, and creates its
//! artifacts atomically. On failure an INCOMPLETE marker is left behind.

use crate::analysis::{
    bound_sanity_check, generalization_bound, interpolation_sweep, loss_descriptor_sweep,
    measure_invariance, BoundInputs,
};
use crate::checkpoint::write_atomic;
use crate::config::{PretrainMode, RunConfig, SourceChoice, TaskSection};
use crate::dataset::{
    glyph_colored_rotated, glyph_transfer_colored_rotated, idx_colored_rotated,
    subsample_per_class, LabeledDataset, LabelField, Source,
};
use crate::error::{Error, Result};
use crate::hypernet::InvarianceDescriptor;
use crate::report::{
    bound_report_csv, invariance_curve_csv, loss_sweep_csv, make_report, metrics_csv,
    svg_line_chart, BaselineCell, Series,
};
use crate::rng::derive_labeled;
use crate::train::{
    downstream_fit, downstream_fit_discrete, evaluate, evaluate_features, load_bundle, load_mtl,
    pretrain_contrastive, pretrain_multitask, save_bundle, save_mtl, train_linear_head,
    train_mtl_baseline, DownstreamResult, Features, MtlModel, PretrainTask, PretrainedBundle,
};
use crate::transforms::{DorsalParams, TransformFamily, VentralParams};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hyperinv", about = "Amortized invariance learning at desk scale", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Run directory for artifacts; must be empty unless --force.
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty run directory.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the weight generator (and optionally the MTL baseline).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Override [run].source: glyph or idx.
        #[arg(long)]
        source: Option<String>,
        /// Override [run].seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit downstream tasks over the N-per-class grid and seed list.
    Downstream {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding bundle.{json,bin} from `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Override the N list, e.g. --n 10,20,50.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        /// Override the seed list, e.g. --seeds 0,1,2.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also run a baseline under the same protocol ("mtl").
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Measure invariance curves along the [t, 1-t] sweep.
    Measure {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
        /// Number of sweep points.
        #[arg(long)]
        sweep: Option<usize>,
        #[arg(long)]
        n_aug: Option<usize>,
    },
    /// Converged train loss of a fresh head at pinned descriptors.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Evaluate the generalization bound; with --checkpoint, run the
    /// Monte Carlo sanity check instead.
    Bound {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        force: bool,
        /// Sample count n.
        #[arg(long)]
        n: Option<usize>,
        /// Descriptor cardinality |I|.
        #[arg(long)]
        card: Option<usize>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Feature-norm bound X.
        #[arg(long = "X", default_value_t = 1.0)]
        x: f64,
        /// Head-norm bound B.
        #[arg(long = "B", default_value_t = 1.0)]
        b: f64,
        /// Empirical risk.
        #[arg(long, default_value_t = 0.0)]
        risk: f64,
    },
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain {
            config,
            out,
            source,
            seed,
        } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(s) = source {
                cfg.run.source = match s.as_str() {
                    "glyph" => SourceChoice::Glyph,
                    "idx" => SourceChoice::Idx,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown source '{other}' (expected glyph or idx)"
                        )))
                    }
                };
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            with_run_dir(&out, |dir| cmd_pretrain(&cfg, dir))
        }
        Command::Downstream {
            config,
            checkpoint,
            out,
            n,
            seeds,
            baseline,
        } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(n) = n {
                cfg.downstream.n_per_class = n;
            }
            if let Some(seeds) = seeds {
                cfg.downstream.seeds = seeds;
            }
            let baseline = match baseline.as_deref() {
                None => false,
                Some("mtl") => true,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown baseline '{other}' (expected mtl)"
                    )))
                }
            };
            with_run_dir(&out, |dir| cmd_downstream(&cfg, &checkpoint, baseline, dir))
        }
        Command::Measure {
            config,
            checkpoint,
            out,
            sweep,
            n_aug,
        } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(s) = sweep {
                cfg.measure.sweep_steps = s;
            }
            if let Some(a) = n_aug {
                cfg.measure.n_aug = a;
            }
            with_run_dir(&out, |dir| cmd_measure(&cfg, &checkpoint, dir))
        }
        Command::Sweep {
            config,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            with_run_dir(&out, |dir| cmd_sweep(&cfg, &checkpoint, dir))
        }
        Command::Bound {
            config,
            checkpoint,
            out,
            force,
            n,
            card,
            delta,
            x,
            b,
            risk,
        } => match checkpoint {
            None => {
                let n = n.ok_or_else(|| Error::Config("--n required without --checkpoint".into()))?;
                let card =
                    card.ok_or_else(|| Error::Config("--card required without --checkpoint".into()))?;
                let bound = generalization_bound(&BoundInputs {
                    empirical_risk: risk,
                    feature_bound: x,
                    head_bound: b,
                    n,
                    cardinality: card,
                    delta,
                })?;
                println!("{bound:.9}");
                Ok(())
            }
            Some(ckpt) => {
                let cfg_path = config
                    .ok_or_else(|| Error::Config("--config required with --checkpoint".into()))?;
                let cfg = RunConfig::from_path(&cfg_path)?;
                let out = out.ok_or_else(|| Error::Config("--out required with --checkpoint".into()))?;
                let out_args = OutArgs { out, force };
                with_run_dir(&out_args, |dir| cmd_bound_check(&cfg, &ckpt, dir))
            }
        },
    }
}

/// Prepare the run directory, execute, and mark failures.
fn with_run_dir(out: &OutArgs, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = &out.out;
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !out.force {
            return Err(Error::Config(format!(
                "run directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    match f(dir) {
        Ok(()) => {
            let _ = std::fs::remove_file(dir.join("INCOMPLETE"));
            Ok(())
        }
        Err(e) => {
            let _ = write_atomic(&dir.join("INCOMPLETE"), e.to_string().as_bytes());
            Err(e)
        }
    }
}

fn snapshot_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// The synthetic transformation families, aligned with descriptor order
/// (rotation, color).
pub fn synthetic_families() -> Vec<TransformFamily> {
    vec![TransformFamily::Rotation, TransformFamily::ColorSwap]
}

fn idx_paths(cfg: &RunConfig, dataset: &str, split: &str) -> (PathBuf, PathBuf) {
    let dir = cfg.data_dir().join(dataset);
    (
        dir.join(format!("{split}-images-idx3-ubyte")),
        dir.join(format!("{split}-labels-idx1-ubyte")),
    )
}

fn load_idx_or_explain(
    cfg: &RunConfig,
    dataset: &str,
    split: &str,
    seed: u64,
) -> Result<LabeledDataset> {
    let (images, labels) = idx_paths(cfg, dataset, split);
    if !images.exists() || !labels.exists() {
        return Err(Error::Config(format!(
            "missing IDX files for {dataset}/{split}; expected {} and {} \
             (set [run].data_dir or HYPERINV_DATA_DIR, or use --source glyph)",
            images.display(),
            labels.display()
        )));
    }
    let source = if dataset == "kmnist" {
        Source::Kmnist
    } else {
        Source::Mnist
    };
    idx_colored_rotated(images, labels, source, seed)
}

/// The pre-training dataset per config.
fn pretrain_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    let seed = derive_labeled(cfg.run.seed, "pretrain-data", &[]);
    match cfg.run.source {
        SourceChoice::Glyph => glyph_colored_rotated(cfg.pretrain.glyph_per_class, seed),
        SourceChoice::Idx => load_idx_or_explain(cfg, &cfg.run.pretrain_dataset, "train", seed),
    }
}

/// Downstream train pool and held-out test set.
fn downstream_pools(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let train_seed = derive_labeled(cfg.run.seed, "downstream-train-pool", &[]);
    let test_seed = derive_labeled(cfg.run.seed, "downstream-test-pool", &[]);
    match cfg.run.source {
        // The transfer alphabet plays the role of the shifted downstream
        // domain (a different glyph set, same factor structure).
        SourceChoice::Glyph => Ok((
            glyph_transfer_colored_rotated(cfg.downstream.glyph_train_per_class, train_seed)?,
            glyph_transfer_colored_rotated(cfg.downstream.glyph_test_per_class, test_seed)?,
        )),
        SourceChoice::Idx => Ok((
            load_idx_or_explain(cfg, &cfg.run.downstream_dataset, "train", train_seed)?,
            // Standard 10k test split, noted in the manifest.
            load_idx_or_explain(cfg, &cfg.run.downstream_dataset, "t10k", test_seed)?,
        )),
    }
}

fn build_tasks(sections: &[TaskSection], data: &LabeledDataset) -> Result<Vec<PretrainTask>> {
    sections
        .iter()
        .map(|t| {
            Ok(PretrainTask {
                name: t.name.clone(),
                dataset: data.clone(),
                label_field: t.label,
                descriptor: InvarianceDescriptor::new(t.descriptor.clone())?,
                head_size: t.head_size,
            })
        })
        .collect()
}

// ── Commands ─────────────────────────────────────────────────────────

pub fn cmd_pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    snapshot_config(cfg, dir)?;
    let data = pretrain_dataset(cfg)?;
    write_json(&dir.join("pretrain_data_manifest.json"), &data.manifest("pretrain"))?;
    let train_cfg = cfg.pretrain.train_config(cfg.run.seed)?;

    match cfg.pretrain.mode {
        PretrainMode::Multitask => {
            let tasks = build_tasks(&cfg.tasks_or_default(), &data)?;
            let families = synthetic_families();
            let bundle = pretrain_multitask(&tasks, &families, &train_cfg)?;
            save_bundle(dir, "bundle", &bundle)?;
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&bundle.log).as_bytes())?;
            if cfg.pretrain.baseline {
                let mtl = train_mtl_baseline(&tasks, &families, &train_cfg)?;
                save_mtl(dir, "mtl", &mtl)?;
                write_atomic(&dir.join("mtl_metrics.csv"), metrics_csv(&mtl.log).as_bytes())?;
            }
        }
        PretrainMode::Contrastive => {
            let bundle = pretrain_contrastive(
                &data.images,
                &VentralParams::default(),
                &DorsalParams::default(),
                cfg.pretrain.projection_dim,
                &train_cfg,
            )?;
            save_bundle(dir, "bundle", &bundle)?;
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&bundle.log).as_bytes())?;
        }
    }
    println!("pretrain artifacts written to {}", dir.display());
    Ok(())
}

/// One downstream cell of the Table-1 protocol.
pub fn run_downstream_cell(
    bundle: &PretrainedBundle,
    train_pool: &LabeledDataset,
    test: &LabeledDataset,
    field: LabelField,
    n: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<DownstreamResult> {
    let head_size = cfg.downstream.head_size(field);
    let sub_seed = derive_labeled(seed, "subsample", &[n as u64]);
    let train = subsample_per_class(train_pool, n, field, sub_seed)?;
    let fit_cfg = cfg
        .downstream
        .train_config(derive_labeled(seed, "fit", &[n as u64]))?;
    let cont = downstream_fit(bundle, &train, field, head_size, &fit_cfg)?;
    let disc = downstream_fit_discrete(bundle, &train, field, head_size, &cont.descriptor, &fit_cfg)?;
    let test_cont = evaluate(
        &Features::Hyper {
            bundle,
            descriptor: &cont.descriptor,
        },
        &cont.head,
        test,
        field,
    )?;
    let test_disc = evaluate(
        &Features::Hyper {
            bundle,
            descriptor: &disc.descriptor,
        },
        &disc.head,
        test,
        field,
    )?;
    Ok(DownstreamResult {
        task: field.name().to_string(),
        n_per_class: n,
        seed,
        descriptor_continuous: cont.descriptor.values().to_vec(),
        descriptor_discrete: disc.descriptor.values().to_vec(),
        train_continuous: cont.train,
        test_continuous: test_cont,
        train_discrete: disc.train,
        test_discrete: test_disc,
    })
}

/// One baseline cell: a fresh head on the frozen shared encoder, same
/// subsample and budgets.
pub fn run_baseline_cell(
    mtl: &MtlModel,
    train_pool: &LabeledDataset,
    test: &LabeledDataset,
    field: LabelField,
    n: usize,
    seed: u64,
    cfg: &RunConfig,
) -> Result<BaselineCell> {
    let head_size = cfg.downstream.head_size(field);
    let sub_seed = derive_labeled(seed, "subsample", &[n as u64]);
    let train = subsample_per_class(train_pool, n, field, sub_seed)?;
    let fit_cfg = cfg
        .downstream
        .train_config(derive_labeled(seed, "fit-mtl", &[n as u64]))?;
    let fx = Features::Kernels {
        kernels: &mtl.kernels,
        bn: &mtl.bn,
        arch: &mtl.arch,
    };
    let train_features = fx.compute(&train.images)?;
    let (head, _) = train_linear_head(&train_features, train.labels(field), head_size, &fit_cfg)?;
    let train_metrics = evaluate_features(&train_features, &head, train.labels(field))?;
    let test_metrics = evaluate(&fx, &head, test, field)?;
    Ok(BaselineCell {
        task: field.name().to_string(),
        n_per_class: n,
        seed,
        train_accuracy: train_metrics.accuracy,
        test_accuracy: test_metrics.accuracy,
    })
}

pub fn cmd_downstream(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: bool,
    dir: &Path,
) -> Result<()> {
    snapshot_config(cfg, dir)?;
    let bundle = load_bundle(checkpoint, "bundle")?;
    let mtl = if baseline {
        Some(load_mtl(checkpoint, "mtl")?)
    } else {
        None
    };
    let (train_pool, test) = downstream_pools(cfg)?;
    write_json(&dir.join("train_pool_manifest.json"), &train_pool.manifest("train-pool"))?;
    write_json(&dir.join("test_manifest.json"), &test.manifest("test"))?;

    let mut results = Vec::new();
    let mut baselines = Vec::new();
    for &field in &cfg.downstream.tasks {
        for &n in &cfg.downstream.n_per_class {
            for &seed in &cfg.downstream.seeds {
                let r = run_downstream_cell(&bundle, &train_pool, &test, field, n, seed, cfg)?;
                write_json(
                    &dir.join(format!("downstream_{}_n{}_s{}.json", field.name(), n, seed)),
                    &r,
                )?;
                results.push(r);
                if let Some(mtl) = &mtl {
                    let b = run_baseline_cell(mtl, &train_pool, &test, field, n, seed, cfg)?;
                    write_json(
                        &dir.join(format!("baseline_{}_n{}_s{}.json", field.name(), n, seed)),
                        &b,
                    )?;
                    baselines.push(b);
                }
            }
        }
    }
    let report = make_report(&results, &baselines);
    write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    println!("{}", report.to_text());
    Ok(())
}

pub fn cmd_measure(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<()> {
    snapshot_config(cfg, dir)?;
    let bundle = load_bundle(checkpoint, "bundle")?;
    let data = pretrain_dataset(cfg)?;
    let count = cfg.measure.images.min(data.len());
    let rows: Vec<usize> = (0..count).collect();
    let images = data.images.gather_rows(&rows);
    let sweep = interpolation_sweep(cfg.measure.sweep_steps);
    let curve = measure_invariance(
        &bundle,
        &images,
        &bundle.families.clone(),
        &sweep,
        cfg.measure.n_aug,
        derive_labeled(cfg.run.seed, "measure", &[]),
    )?;
    write_atomic(&dir.join("invariance.csv"), invariance_curve_csv(&curve).as_bytes())?;
    let series: Vec<Series> = curve
        .family_names
        .iter()
        .enumerate()
        .map(|(k, name)| Series {
            name: name.clone(),
            points: curve
                .points
                .iter()
                .map(|p| (p.descriptor[0], p.mean[k]))
                .collect(),
        })
        .collect();
    write_atomic(
        &dir.join("invariance.svg"),
        svg_line_chart("measured invariance", "descriptor[0] (t)", "cosine similarity", &series)
            .as_bytes(),
    )?;
    println!("invariance curve written to {}", dir.display());
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<()> {
    snapshot_config(cfg, dir)?;
    let bundle = load_bundle(checkpoint, "bundle")?;
    let (train_pool, _) = downstream_pools(cfg)?;
    let descriptors: Vec<InvarianceDescriptor> = cfg
        .sweep
        .descriptors
        .iter()
        .map(|d| InvarianceDescriptor::new(d.clone()))
        .collect::<Result<_>>()?;
    for &field in &cfg.sweep.tasks {
        let data = subsample_per_class(
            &train_pool,
            cfg.sweep.n_per_class.min(train_pool.len() / field.class_count()),
            field,
            derive_labeled(cfg.run.seed, "sweep-data", &[]),
        )?;
        let fit_cfg = cfg
            .downstream
            .train_config(derive_labeled(cfg.run.seed, "sweep-fit", &[]))?;
        let points = loss_descriptor_sweep(
            &bundle,
            &data,
            field,
            cfg.downstream.head_size(field),
            &descriptors,
            &fit_cfg,
        )?;
        write_atomic(
            &dir.join(format!("loss_sweep_{}.csv", field.name())),
            loss_sweep_csv(&points).as_bytes(),
        )?;
        let series = vec![Series {
            name: field.name().to_string(),
            points: points
                .iter()
                .map(|(d, l)| (d.values()[0], *l))
                .collect(),
        }];
        write_atomic(
            &dir.join(format!("loss_sweep_{}.svg", field.name())),
            svg_line_chart(
                &format!("{} train loss vs descriptor", field.name()),
                "descriptor[0]",
                "converged train loss",
                &series,
            )
            .as_bytes(),
        )?;
    }
    println!("loss sweeps written to {}", dir.display());
    Ok(())
}

pub fn cmd_bound_check(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<()> {
    snapshot_config(cfg, dir)?;
    let bundle = load_bundle(checkpoint, "bundle")?;
    let (train_pool, test) = downstream_pools(cfg)?;
    let field = cfg.bound.task;
    let fit_cfg = cfg
        .downstream
        .train_config(derive_labeled(cfg.run.seed, "bound", &[]))?;
    let report = bound_sanity_check(
        &bundle,
        &train_pool,
        &test,
        field,
        cfg.downstream.head_size(field),
        cfg.bound.n_per_class,
        cfg.bound.trials,
        cfg.bound.delta,
        &fit_cfg,
    )?;
    write_atomic(&dir.join("bound_report.csv"), bound_report_csv(&report).as_bytes())?;
    println!(
        "bound check: {} violations over {} trials (delta {})",
        report.violations,
        report.trials.len(),
        report.delta
    );
    Ok(())
}
