//! Training loops: subnetwork-sampled single-step adversarial training with
//! the spatial/temporal schedule, the single-step random-start baseline, the
//! multi-step baseline, and standard training — all driven by one
//! deterministic engine with SGD-momentum and stepwise learning-rate decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{fgsm, pgd, AttackConfig, NetworkTarget, Perturbation};
use crate::checkpoint::{Checkpoint, SamplerState};
use crate::error::{Error, Result};
use crate::eval::{self, MonitorThresholds};
use crate::io::dataset::{minibatches, DatasetHandle};
use crate::io::metrics::EpochMetrics;
use crate::model::{self, BlockMask, NetworkSpec, ParameterSet, Scaling};
use crate::rng::{Stream, StreamId};
use crate::sampler::{SamplerSchedule, ScheduleMode};
use crate::tensor::Tensor;

/// Training method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Subnetwork-sampled single-step training with the spatial/temporal
    /// schedule.
    FpBetter,
    /// Single-step training with random start on the full network.
    FgsmRs,
    /// Multi-step inner maximization on the full network.
    PgdAt,
    /// Clean training.
    Standard,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "fp-better" => Ok(Method::FpBetter),
            "fgsm-rs" => Ok(Method::FgsmRs),
            "pgd-at" => Ok(Method::PgdAt),
            "standard" => Ok(Method::Standard),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected fp-better, fgsm-rs, pgd-at or standard)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::FpBetter => "fp-better",
            Method::FgsmRs => "fgsm-rs",
            Method::PgdAt => "pgd-at",
            Method::Standard => "standard",
        }
    }
}

/// Which parameters the update step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateTarget {
    /// Train the sampled subnetwork: the training loss runs under the same
    /// mask as the attack, so dropped branches are untouched.
    Subnetwork,
    /// Train the whole model on the subnetwork-generated examples.
    Full,
}

/// Everything one training run needs besides the datasets.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub spec: NetworkSpec,
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Decay points as fractions of the epoch count, applied from epoch
    /// `floor(fraction * epochs)` on.
    pub lr_decay_points: Vec<f64>,
    /// Training-time attack (single-step methods ignore `steps`).
    pub attack: AttackConfig,
    pub schedule_mode: ScheduleMode,
    pub p_min: f64,
    pub mu: f64,
    pub update_target: UpdateTarget,
    pub seed: u64,
    /// Evaluate every n-th epoch (1 = every epoch, 0 = final epoch only).
    pub eval_every: usize,
    /// Fixed training-subset size watched for robust collapse (0 = off).
    pub monitor_subset: usize,
    pub eval_batch: usize,
    /// Attack behind the per-epoch robust-accuracy metric and the best
    /// checkpoint selection.
    pub eval_attack: AttackConfig,
    /// Record per-iteration losses (test instrumentation).
    pub trace_iterations: bool,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_batch must be >= 1".into(),
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} invalid")));
            }
        }
        if self.lr == 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lr_decay_points.iter().any(|&f| !(0.0 < f && f < 1.0)) {
            return Err(Error::Config("lr decay points must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `lr * factor^k` where `k` counts decay
/// points with `floor(fraction * epochs) <= epoch`.
pub fn lr_at_epoch(
    lr: f64,
    factor: f64,
    decay_points: &[f64],
    epochs: usize,
    epoch: usize,
) -> f64 {
    let passed = decay_points
        .iter()
        .filter(|&&f| (f * epochs as f64).floor() as usize <= epoch)
        .count();
    lr * factor.powi(passed as i32)
}

/// One SGD-momentum update on a single tensor:
/// `g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v`.
pub fn sgd_momentum_step(
    theta: &mut Tensor,
    grad: &Tensor,
    buffer: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            node: 0,
            context: "optimizer gradient".into(),
        });
    }
    let theta_data = theta.data_mut();
    let buf = buffer.data_mut();
    for ((t, v), &g) in theta_data.iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
        let g = g + weight_decay * *t;
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
    Ok(())
}

/// Best (highest robust accuracy seen) and final checkpoints of one run.
#[derive(Clone, Debug)]
pub struct CheckpointPair {
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub pair: CheckpointPair,
    pub metrics: Vec<EpochMetrics>,
    /// Wall-clock seconds per epoch; kept out of the metrics records so
    /// those stay byte-reproducible.
    pub wall_times: Vec<f64>,
    /// Exact ordered per-epoch adversarial-loss sums.
    pub epoch_loss_sums: Vec<f64>,
    /// Per-iteration losses, filled when `trace_iterations` is set.
    pub iteration_losses: Vec<Vec<f64>>,
    /// Collapse epoch flagged by the monitor over the train-subset robust
    /// accuracy history, if any.
    pub collapse_epoch: Option<usize>,
}

struct Optimizer {
    buffers: Vec<Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Optimizer {
    fn new(params: &ParameterSet, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            buffers: params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape().to_vec()))
                .collect(),
            lr: 0.0,
            momentum,
            weight_decay,
        }
    }

    /// Apply one step to every parameter that received a gradient. Weight
    /// decay and momentum only touch those parameters, so a dropped branch
    /// is bit-unchanged.
    fn step(&mut self, params: &mut ParameterSet, grads: &[Option<Tensor>]) -> Result<()> {
        for (idx, grad) in grads.iter().enumerate() {
            if let Some(grad) = grad {
                sgd_momentum_step(
                    params.tensor_mut(idx),
                    grad,
                    &mut self.buffers[idx],
                    self.lr,
                    self.momentum,
                    self.weight_decay,
                )?;
            }
        }
        Ok(())
    }
}

fn training_error(epoch: usize, iteration: usize, source: Error) -> Error {
    Error::Training {
        epoch,
        iteration,
        source: Box::new(source),
    }
}

/// Run one training method to completion. The RNG discipline is fixed: one
/// stream per consumer (init, masks, attacks, shuffling, evaluation), so
/// methods that skip a consumer leave the others bit-identical.
pub fn train(
    config: &TrainConfig,
    train_set: &DatasetHandle,
    eval_set: &DatasetHandle,
) -> Result<TrainOutput> {
    config.validate()?;
    let spec = &config.spec;
    if train_set.example_shape() != &spec.input_shape[..] {
        return Err(Error::Shape(format!(
            "dataset examples {:?} do not match spec input {:?}",
            train_set.example_shape(),
            spec.input_shape
        )));
    }
    let blocks = spec.block_count();
    let mut params = model::build_network(spec, config.seed)?;
    let mut optimizer = Optimizer::new(&params, config.momentum, config.weight_decay);
    let mut schedule = SamplerSchedule::new(
        blocks,
        match config.method {
            Method::FpBetter => config.p_min,
            _ => 1.0,
        },
        config.mu,
        config.schedule_mode,
    )?;
    let mut mask_stream = Stream::new(config.seed, StreamId::Masks);
    let mut attack_stream = Stream::new(config.seed, StreamId::Attacks);
    let monitor_set = (config.monitor_subset > 0).then(|| train_set.take(config.monitor_subset));

    let mut metrics: Vec<EpochMetrics> = Vec::with_capacity(config.epochs);
    let mut wall_times = Vec::with_capacity(config.epochs);
    let mut epoch_loss_sums = Vec::with_capacity(config.epochs);
    let mut iteration_losses = Vec::new();
    let mut monitor_history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at_epoch(
            config.lr,
            config.lr_decay_factor,
            &config.lr_decay_points,
            config.epochs,
            epoch,
        );
        optimizer.lr = lr;
        let p_min_in_effect = schedule.p_min;
        let expected_blocks = schedule.expected_effective_blocks();

        let mut loss_sum = 0.0;
        let mut trace = Vec::new();
        let mut executed = 0usize;
        let mut passes = 0usize;

        for (iteration, batch) in minibatches(train_set, config.batch_size, config.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let fail = |e| training_error(epoch, iteration, e);

            // Mask for this iteration; only the subnetwork method samples.
            let mask = match config.method {
                Method::FpBetter => schedule.sample(&mut mask_stream),
                _ => BlockMask::all_ones(blocks),
            };

            // Inner maximization.
            let delta = match config.method {
                Method::FpBetter | Method::FgsmRs => {
                    let mut target =
                        NetworkTarget::new(&params, spec, mask.clone(), &batch.labels);
                    let p = fgsm(&mut target, &batch.examples, &config.attack, &mut attack_stream)
                        .map_err(fail)?;
                    executed += target.executed_branches;
                    passes += target.forward_passes;
                    Some(p)
                }
                Method::PgdAt => {
                    let mut target = NetworkTarget::new(
                        &params,
                        spec,
                        BlockMask::all_ones(blocks),
                        &batch.labels,
                    );
                    let p = pgd(&mut target, &batch.examples, &config.attack, &mut attack_stream)
                        .map_err(fail)?;
                    executed += target.executed_branches;
                    passes += target.forward_passes;
                    Some(p)
                }
                Method::Standard => None,
            };
            let inputs = match delta {
                Some(Perturbation { delta }) => batch.examples.add(&delta).map_err(fail)?,
                None => batch.examples.clone(),
            };

            // Training loss under the configured update target.
            let train_mask = match (config.method, config.update_target) {
                (Method::FpBetter, UpdateTarget::Subnetwork) => mask,
                _ => BlockMask::all_ones(blocks),
            };
            let mut pass = model::forward(&params, spec, &inputs, &train_mask, &Scaling::None)
                .map_err(fail)?;
            executed += pass.executed_branches;
            passes += 1;
            let loss_node = pass.loss(&batch.labels).map_err(fail)?;
            let loss = pass.graph.value(loss_node).item();
            if !loss.is_finite() {
                return Err(fail(Error::NonFinite {
                    node: loss_node,
                    context: "training loss".into(),
                }));
            }
            let grads = pass.graph.backward(loss_node).map_err(fail)?;
            let per_param = pass.param_gradients(&grads);
            optimizer.step(&mut params, &per_param).map_err(fail)?;

            schedule.record_loss(loss);
            loss_sum += loss;
            if config.trace_iterations {
                trace.push(loss);
            }
        }

        epoch_loss_sums.push(loss_sum);
        if config.trace_iterations {
            iteration_losses.push(trace);
        }

        // Per-epoch evaluation (clean + robust on the eval split, robust on
        // the fixed monitor subset).
        let evaluate_now = (config.eval_every > 0 && epoch % config.eval_every == 0)
            || epoch + 1 == config.epochs;
        let mut clean_acc = None;
        let mut robust_acc = None;
        let mut monitor_acc = None;
        if evaluate_now {
            let scaling = Scaling::None;
            clean_acc = Some(eval::accuracy(
                &params,
                spec,
                eval_set,
                &scaling,
                config.eval_batch,
            )?);
            let mut eval_stream =
                Stream::derive(config.seed, &[StreamId::Eval as u64, epoch as u64]);
            robust_acc = Some(eval::robust_accuracy(
                &params,
                spec,
                eval_set,
                &config.eval_attack,
                &scaling,
                config.eval_batch,
                &mut eval_stream,
            )?);
            if let Some(monitor) = &monitor_set {
                let mut monitor_stream =
                    Stream::derive(config.seed, &[StreamId::Eval as u64, epoch as u64, 1]);
                let acc = eval::robust_accuracy(
                    &params,
                    spec,
                    monitor,
                    &config.eval_attack,
                    &scaling,
                    config.eval_batch,
                    &mut monitor_stream,
                )?;
                monitor_acc = Some(acc);
                monitor_history.push(acc);
            }
        }

        let iterations = train_set.len().div_ceil(config.batch_size);
        metrics.push(EpochMetrics {
            epoch,
            lr,
            p_min: p_min_in_effect,
            expected_blocks,
            train_adv_loss: loss_sum / iterations as f64,
            branch_fraction: if passes > 0 {
                executed as f64 / (passes * blocks) as f64
            } else {
                1.0
            },
            clean_acc,
            pgd10_acc: robust_acc,
            train_pgd10_acc: monitor_acc,
        });
        wall_times.push(started.elapsed().as_secs_f64());

        if let Some(acc) = robust_acc {
            let is_better = best.as_ref().is_none_or(|(b, _)| acc > *b);
            if is_better {
                best = Some((acc, snapshot(config, &params, &schedule, epoch, Some(acc))));
            }
        }

        // Temporal controller: close the epoch's period. The first epoch has
        // no predecessor, so the comparison starts after epoch two.
        if config.method == Method::FpBetter {
            schedule.end_epoch()?;
        }
    }

    let last_robust = metrics.last().and_then(|m| m.pgd10_acc);
    let last = snapshot(
        config,
        &params,
        &schedule,
        config.epochs - 1,
        last_robust,
    );
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    let collapse_epoch = eval::overfitting_monitor(&monitor_history, MonitorThresholds::default());

    Ok(TrainOutput {
        pair: CheckpointPair { best, last },
        metrics,
        wall_times,
        epoch_loss_sums,
        iteration_losses,
        collapse_epoch,
    })
}

fn snapshot(
    config: &TrainConfig,
    params: &ParameterSet,
    schedule: &SamplerSchedule,
    epoch: usize,
    robust_acc: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        spec: config.spec.clone(),
        seed: config.seed,
        epoch,
        params: params.clone(),
        sampler: SamplerState {
            mode: schedule.mode,
            p_min: schedule.p_min,
            mu: schedule.mu,
            temporal: schedule.temporal.clone(),
        },
        robust_acc,
    }
}

/// Subnetwork-sampled single-step adversarial training with the
/// spatial/temporal schedule.
pub fn train_fp_better(
    config: &TrainConfig,
    train_set: &DatasetHandle,
    eval_set: &DatasetHandle,
) -> Result<TrainOutput> {
    train(
        &TrainConfig {
            method: Method::FpBetter,
            ..config.clone()
        },
        train_set,
        eval_set,
    )
}

/// Single-step baseline: random-start FGSM on the full network.
pub fn train_fgsm_rs(
    config: &TrainConfig,
    train_set: &DatasetHandle,
    eval_set: &DatasetHandle,
) -> Result<TrainOutput> {
    train(
        &TrainConfig {
            method: Method::FgsmRs,
            ..config.clone()
        },
        train_set,
        eval_set,
    )
}

/// Multi-step baseline: PGD inner maximization on the full network.
pub fn train_pgd_at(
    config: &TrainConfig,
    train_set: &DatasetHandle,
    eval_set: &DatasetHandle,
) -> Result<TrainOutput> {
    train(
        &TrainConfig {
            method: Method::PgdAt,
            ..config.clone()
        },
        train_set,
        eval_set,
    )
}

/// Clean-data baseline.
pub fn train_standard(
    config: &TrainConfig,
    train_set: &DatasetHandle,
    eval_set: &DatasetHandle,
) -> Result<TrainOutput> {
    train(
        &TrainConfig {
            method: Method::Standard,
            ..config.clone()
        },
        train_set,
        eval_set,
    )
}
