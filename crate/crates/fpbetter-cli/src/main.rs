//! Batch command-line entry point: training, evaluation, method
//! comparison, bound diagnostics, loss-landscape export and metrics
//! conversion.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fpbetter::bound::{BoundInputs, BoundReport, MaskMode};
use fpbetter::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use fpbetter::error::Error;
use fpbetter::eval::{self, EvalReport};
use fpbetter::io::config::{LossBound, RunConfig};
use fpbetter::io::dataset::DatasetHandle;
use fpbetter::io::metrics::{read_metrics, write_metrics};
use fpbetter::model::Scaling;
use fpbetter::rng::{Stream, StreamId};
use fpbetter::sampler::spatial_probabilities;
use fpbetter::trainer::{self, Method, TrainOutput};

/// Deterministic adversarial training with sampled stochastic-depth
/// subnetworks. Kernel thread count is controlled by the FPBETTER_THREADS
/// environment variable (default 1; parallel results are bit-identical).
#[derive(Parser)]
#[command(name = "fpbetter", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key, e.g. --set train.epochs=5 (repeatable, last
    /// wins; applied before --seed/--method/--ablation).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.method (for compare: comma-separated list).
    #[arg(long)]
    method: Option<String>,
    /// Sampling ablation: spatial (mu = 0), temporal (uniform schedule) or
    /// both.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write checkpoints + metrics.
    Train(CommonArgs),
    /// Evaluate a checkpoint against the configured attacks.
    Evaluate(CommonArgs),
    /// Train several methods over a seed matrix and tabulate best/last.
    Compare(CommonArgs),
    /// Compute the generalization-bound diagnostic for a checkpoint.
    Bound(CommonArgs),
    /// Export the loss-landscape grid around one example.
    Landscape(CommonArgs),
    /// Convert a run's metrics log into a plot-ready CSV.
    ExportCurves(CommonArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Bound(args) => cmd_bound(args),
        Command::Landscape(args) => cmd_landscape(args),
        Command::ExportCurves(args) => cmd_export_curves(args),
    };
    if let Err(err) = result {
        let message = err.to_string().replace(['\n', '"'], " ");
        eprintln!("error kind={} message=\"{}\"", err.kind(), message);
        std::process::exit(match err {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Format { .. } | Error::Dataset(_) | Error::Checkpoint(_) => 3,
            _ => 4,
        });
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, Error> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(method) = &args.method {
        // compare accepts a comma-separated list; single-method commands
        // take the value as-is.
        if !method.contains(',') {
            Method::parse(method)?;
            overrides.push(format!("train.method=\"{method}\""));
        }
    }
    if let Some(ablation) = &args.ablation {
        match ablation.as_str() {
            "spatial" => {
                overrides.push("train.method=\"fp-better\"".into());
                overrides.push("sampler.mode=\"linear\"".into());
                overrides.push("sampler.mu=0.0".into());
            }
            "temporal" => {
                overrides.push("train.method=\"fp-better\"".into());
                overrides.push("sampler.mode=\"uniform\"".into());
            }
            "both" => {
                overrides.push("train.method=\"fp-better\"".into());
                overrides.push("sampler.mode=\"linear\"".into());
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected spatial, temporal or both)"
                )))
            }
        }
    }
    RunConfig::load(&args.config, &overrides)
}

fn prepare_out_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<(), Error> {
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

fn write_timing(path: &Path, wall_times: &[f64]) -> Result<(), Error> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (epoch, seconds) in wall_times.iter().enumerate() {
        writeln!(out, "{{\"epoch\":{epoch},\"seconds\":{seconds}}}")?;
    }
    Ok(())
}

fn run_training(config: &RunConfig, out_dir: &Path) -> Result<TrainOutput, Error> {
    let (train_set, eval_set) = config.dataset.load()?;
    let train_config = config.build_train_config(train_set.range)?;
    let output = trainer::train(&train_config, &train_set, &eval_set)?;

    write_checkpoint(&out_dir.join("best.ckpt"), &output.pair.best)?;
    write_checkpoint(&out_dir.join("last.ckpt"), &output.pair.last)?;
    write_metrics(&out_dir.join("metrics.jsonl"), &output.metrics)?;
    write_timing(&out_dir.join("timing.jsonl"), &output.wall_times)?;
    Ok(output)
}

fn cmd_train(args: &CommonArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    prepare_out_dir(&args.out)?;
    echo_config(&config, &args.out)?;
    let output = run_training(&config, &args.out)?;

    for (m, seconds) in output.metrics.iter().zip(&output.wall_times) {
        println!(
            "epoch={} lr={} p_min={} expected_blocks={} train_adv_loss={:.6} clean_acc={} pgd10_acc={} branch_fraction={:.4} wall_time_s={:.3}",
            m.epoch,
            m.lr,
            m.p_min,
            m.expected_blocks,
            m.train_adv_loss,
            m.clean_acc.map_or("-".into(), |v| format!("{v:.4}")),
            m.pgd10_acc.map_or("-".into(), |v| format!("{v:.4}")),
            m.branch_fraction,
            seconds,
        );
    }
    if let Some(epoch) = output.collapse_epoch {
        println!("robust-accuracy collapse flagged at epoch {epoch}");
    }
    println!(
        "done method={} best_epoch={} best_pgd10={} outputs={}",
        config.train.method.name(),
        output.pair.best.epoch,
        output
            .pair
            .best
            .robust_acc
            .map_or("-".into(), |v| format!("{v:.4}")),
        args.out.display()
    );
    Ok(())
}

fn checkpoint_scaling(config: &RunConfig, checkpoint: &Checkpoint) -> Result<Scaling, Error> {
    if config.model.survival_scaling()? {
        let probs = spatial_probabilities(
            checkpoint.spec.block_count(),
            checkpoint.sampler.p_min,
            checkpoint.sampler.mode,
        )?;
        Ok(Scaling::SurvivalProbability(probs))
    } else {
        Ok(Scaling::None)
    }
}

fn evaluate_checkpoint(
    config: &RunConfig,
    checkpoint: &Checkpoint,
    dataset: &DatasetHandle,
    seed: u64,
) -> Result<EvalReport, Error> {
    let scaling = checkpoint_scaling(config, checkpoint)?;
    let spec = &checkpoint.spec;
    let batch = config.eval.batch_size;
    let clean = eval::accuracy(&checkpoint.params, spec, dataset, &scaling, batch)?;
    let risk = eval::empirical_risk(&checkpoint.params, spec, dataset, &scaling, batch)?;
    let mut robust = Vec::new();
    for (i, label) in config.eval.attacks.iter().enumerate() {
        let acc = match config.eval_attack_from_label(label, dataset.range)? {
            None => clean,
            Some(attack) => {
                let mut rng = Stream::derive(seed, &[StreamId::Eval as u64, 1000 + i as u64]);
                eval::robust_accuracy(
                    &checkpoint.params,
                    spec,
                    dataset,
                    &attack,
                    &scaling,
                    batch,
                    &mut rng,
                )?
            }
        };
        robust.push((label.clone(), acc));
    }
    Ok(EvalReport {
        epoch: Some(checkpoint.epoch),
        clean_accuracy: clean,
        empirical_risk: risk,
        robust,
    })
}

fn required_checkpoint(field: &Option<PathBuf>, key: &str) -> Result<PathBuf, Error> {
    field
        .clone()
        .ok_or_else(|| Error::Config(format!("missing checkpoint: set {key} = \"path\"")))
}

fn cmd_evaluate(args: &CommonArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    prepare_out_dir(&args.out)?;
    echo_config(&config, &args.out)?;
    let path = required_checkpoint(&config.eval.checkpoint, "eval.checkpoint")?;
    let checkpoint = read_checkpoint(&path)?;
    let (_, eval_set) = config.dataset.load()?;
    let report = evaluate_checkpoint(&config, &checkpoint, &eval_set, config.train.seed)?;
    let csv = report.to_csv();
    std::fs::write(args.out.join("eval_report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    prepare_out_dir(&args.out)?;
    echo_config(&config, &args.out)?;

    let methods: Vec<Method> = match &args.method {
        Some(list) if list.contains(',') => list
            .split(',')
            .map(|m| Method::parse(m.trim()))
            .collect::<Result<_, _>>()?,
        Some(single) => vec![Method::parse(single)?],
        None => config.compare.methods.clone(),
    };
    if methods.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two methods (compare.methods or --method a,b)".into(),
        ));
    }
    let seeds = if config.compare.seeds.is_empty() {
        vec![config.train.seed]
    } else {
        config.compare.seeds.clone()
    };

    let labels = config.eval.attacks.clone();
    let mut csv = String::from("method,seed,checkpoint");
    for label in &labels {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');

    // method -> (best sums, last sums) over seeds, per attack label.
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> =
        vec![(vec![0.0; labels.len()], vec![0.0; labels.len()]); methods.len()];

    for (mi, method) in methods.iter().enumerate() {
        for &seed in &seeds {
            let mut run_config = config.clone();
            run_config.train.method = *method;
            run_config.train.seed = seed;
            let run_dir = args.out.join(format!("{}-s{seed}", method.name()));
            prepare_out_dir(&run_dir)?;
            echo_config(&run_config, &run_dir)?;
            let output = run_training(&run_config, &run_dir)?;

            let (_, eval_set) = run_config.dataset.load()?;
            for (kind, checkpoint) in
                [("best", &output.pair.best), ("last", &output.pair.last)]
            {
                let report = evaluate_checkpoint(&run_config, checkpoint, &eval_set, seed)?;
                csv.push_str(&format!("{},{seed},{kind}", method.name()));
                for (li, (_, acc)) in report.robust.iter().enumerate() {
                    csv.push_str(&format!(",{acc}"));
                    let slot = if kind == "best" {
                        &mut sums[mi].0
                    } else {
                        &mut sums[mi].1
                    };
                    slot[li] += acc;
                }
                csv.push('\n');
            }
        }
    }
    std::fs::write(args.out.join("compare.csv"), &csv)?;

    // Side-by-side summary, mean over seeds.
    let denom = seeds.len() as f64;
    println!("method       ckpt  {}", labels.join("  "));
    for (mi, method) in methods.iter().enumerate() {
        for (kind, totals) in [("best", &sums[mi].0), ("last", &sums[mi].1)] {
            let cells: Vec<String> = totals
                .iter()
                .map(|t| format!("{:.4}", t / denom))
                .collect();
            println!("{:<12} {:<5} {}", method.name(), kind, cells.join("  "));
        }
    }
    println!("per-seed table written to {}", args.out.join("compare.csv").display());
    Ok(())
}

fn cmd_bound(args: &CommonArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    prepare_out_dir(&args.out)?;
    echo_config(&config, &args.out)?;
    let path = required_checkpoint(&config.bound.checkpoint, "bound.checkpoint")?;
    let checkpoint = read_checkpoint(&path)?;
    let (train_set, eval_set) = config.dataset.load()?;

    let spec = &checkpoint.spec;
    let attack = config.eval_pgd_attack(train_set.range)?;
    let mask_mode = match config.bound.mask_mode.as_str() {
        "full" => MaskMode::Full,
        _ => MaskMode::Subnetwork(spatial_probabilities(
            spec.block_count(),
            checkpoint.sampler.p_min,
            checkpoint.sampler.mode,
        )?),
    };

    let mut rng = Stream::new(config.train.seed, StreamId::Bound);
    let scan = fpbetter::bound::layerwise_intensity(
        &checkpoint.params,
        spec,
        &train_set,
        &attack,
        &mask_mode,
        config.train.batch_size,
        config.bound.scan_batches,
        &mut rng,
    )?;

    let undefined: Vec<&str> = scan
        .layers
        .iter()
        .filter(|l| l.ratio_or_unit().is_none())
        .map(|l| l.layer.as_str())
        .collect();
    if !undefined.is_empty() {
        return Err(Error::Config(format!(
            "zero clean-gradient norm for layers {undefined:?}; ratio undefined"
        )));
    }
    let ratios: Vec<f64> = scan
        .layers
        .iter()
        .map(|l| l.ratio_or_unit().unwrap())
        .collect();

    let laplace_b = fpbetter::bound::estimate_laplace_b(
        &checkpoint.params,
        spec,
        &train_set,
        &attack,
        config.train.batch_size,
        config.bound.laplace_batches,
        &mut rng,
    )?;
    let loss_bound = match &config.bound.loss_bound {
        LossBound::Named(s) if s == "auto" => scan.max_example_loss,
        LossBound::Named(s) => {
            return Err(Error::Config(format!(
                "bound.loss_bound {s:?} (expected auto or a number)"
            )))
        }
        LossBound::Value(v) => *v,
    };
    let iterations =
        config.train.epochs * train_set.len().div_ceil(config.train.batch_size);

    let mut report = BoundReport::from_scan(
        &scan,
        BoundInputs {
            iterations,
            sample_size: train_set.len(),
            delta_prime: config.bound.delta_prime,
            laplace_b,
            l_erm: scan.max_clean_norm,
            ratios,
            loss_bound,
            gamma: config.bound.gamma,
            c: config.bound.c,
            tau: config.train.batch_size,
        },
    )?;
    report.heldout_risk = Some(eval::empirical_risk(
        &checkpoint.params,
        spec,
        &eval_set,
        &Scaling::None,
        config.eval.batch_size,
    )?);

    let json = report.to_json()?;
    std::fs::write(args.out.join("bound.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn cmd_landscape(args: &CommonArgs) -> Result<(), Error> {
    let config = load_config(args)?;
    prepare_out_dir(&args.out)?;
    echo_config(&config, &args.out)?;
    let path = required_checkpoint(&config.landscape.checkpoint, "landscape.checkpoint")?;
    let checkpoint = read_checkpoint(&path)?;
    let (_, eval_set) = config.dataset.load()?;
    let index = config.landscape.example;
    if index >= eval_set.len() {
        return Err(Error::Config(format!(
            "landscape.example {index} out of range for {} examples",
            eval_set.len()
        )));
    }
    let example = eval_set.examples.slice_rows(index, index + 1);
    let label = eval_set.labels[index];
    let mut rng = Stream::new(config.train.seed, StreamId::Landscape);
    let scape = eval::loss_landscape(
        &checkpoint.params,
        &checkpoint.spec,
        &example,
        label,
        config.attack.epsilon,
        config.landscape.grid,
        config.landscape.pgd_steps,
        &mut rng,
    )?;
    std::fs::write(args.out.join("landscape.csv"), scape.to_csv())?;
    std::fs::write(
        args.out.join("landscape_directions.csv"),
        scape.directions_csv(),
    )?;
    let mid = (scape.grid_n() - 1) / 2;
    println!(
        "landscape grid {}x{} written; center loss {}",
        scape.grid_n(),
        scape.grid_n(),
        scape.value(mid, mid)
    );
    Ok(())
}

fn cmd_export_curves(args: &CommonArgs) -> Result<(), Error> {
    let _ = load_config(args)?;
    let metrics_path = args.out.join("metrics.jsonl");
    if !metrics_path.exists() {
        return Err(Error::Config(format!(
            "no metrics log at {} (run train into this directory first)",
            metrics_path.display()
        )));
    }
    let metrics = read_metrics(&metrics_path)?;
    let mut csv = String::from(
        "epoch,lr,p_min,expected_blocks,train_adv_loss,branch_fraction,clean_acc,pgd10_acc,train_pgd10_acc\n",
    );
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for m in &metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.epoch,
            m.lr,
            m.p_min,
            m.expected_blocks,
            m.train_adv_loss,
            m.branch_fraction,
            cell(m.clean_acc),
            cell(m.pgd10_acc),
            cell(m.train_pgd10_acc),
        ));
    }
    let out_path = args.out.join("curves.csv");
    std::fs::write(&out_path, &csv)?;
    println!("wrote {} ({} epochs)", out_path.display(), metrics.len());
    Ok(())
}
