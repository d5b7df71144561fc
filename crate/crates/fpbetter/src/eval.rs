//! Clean and robust accuracy, empirical risk, robust-accuracy collapse
//! monitoring, and loss-landscape grid export.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, AttackTarget, NetworkTarget, Perturbation};
use crate::error::{Error, Result};
use crate::io::dataset::DatasetHandle;
use crate::model::{self, BlockMask, NetworkSpec, ParameterSet, Scaling};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Accuracy and risk of one checkpoint, with robust accuracy per attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epoch: Option<usize>,
    pub clean_accuracy: f64,
    pub empirical_risk: f64,
    /// (label, robust accuracy) per evaluated attack.
    pub robust: Vec<(String, f64)>,
}

impl EvalReport {
    /// Comma-separated text with a one-line header; robust columns carry
    /// their attack labels.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("epoch,clean_acc,empirical_risk");
        let mut row = format!(
            "{},{},{}",
            self.epoch.map_or(String::from(""), |e| e.to_string()),
            self.clean_accuracy,
            self.empirical_risk
        );
        for (label, acc) in &self.robust {
            header.push(',');
            header.push_str(label);
            row.push(',');
            row.push_str(&acc.to_string());
        }
        format!("{header}\n{row}\n")
    }
}

fn argmax_lowest_tie(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batches_in_order(dataset: &DatasetHandle, batch: usize) -> Vec<(Tensor, &[usize])> {
    let n = dataset.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        out.push((
            dataset.examples.slice_rows(start, end),
            &dataset.labels[start..end],
        ));
        start = end;
    }
    out
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax_lowest_tie(row) == y)
        .count()
}

/// Fraction of examples whose argmax logit matches the label, on the full
/// network. Ties break toward the lowest class index.
pub fn accuracy(
    params: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &DatasetHandle,
    scaling: &Scaling,
    batch: usize,
) -> Result<f64> {
    let mask = BlockMask::all_ones(spec.block_count());
    let mut correct = 0usize;
    for (examples, labels) in batches_in_order(dataset, batch) {
        let pass = model::forward(params, spec, &examples, &mask, scaling)?;
        correct += count_correct(pass.logits_tensor(), labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy on `x + pgd(x)`; the attack always runs on the full network.
pub fn robust_accuracy(
    params: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &DatasetHandle,
    attack: &AttackConfig,
    scaling: &Scaling,
    batch: usize,
    rng: &mut Stream,
) -> Result<f64> {
    let mask = BlockMask::all_ones(spec.block_count());
    let mut correct = 0usize;
    for (examples, labels) in batches_in_order(dataset, batch) {
        let mut target = NetworkTarget::new(params, spec, mask.clone(), labels);
        let Perturbation { delta } = pgd(&mut target, &examples, attack, rng)?;
        let moved = examples.add(&delta)?;
        let pass = model::forward(params, spec, &moved, &mask, scaling)?;
        correct += count_correct(pass.logits_tensor(), labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Stable per-row cross-entropy of the softmax at the labeled class.
pub(crate) fn per_example_loss(logits_row: &[f64], label: usize) -> f64 {
    let m = logits_row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut acc = 0.0;
    for &v in logits_row {
        acc += (v - m).exp();
    }
    (m + acc.ln()) - logits_row[label]
}

/// Exact mean of per-example losses, summed in dataset order.
pub fn empirical_risk(
    params: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &DatasetHandle,
    scaling: &Scaling,
    batch: usize,
) -> Result<f64> {
    let mask = BlockMask::all_ones(spec.block_count());
    let classes = spec.classes;
    let mut total = 0.0;
    for (examples, labels) in batches_in_order(dataset, batch) {
        let pass = model::forward(params, spec, &examples, &mask, scaling)?;
        for (row, &y) in pass.logits_tensor().data().chunks(classes).zip(labels) {
            total += per_example_loss(row, y);
        }
    }
    Ok(total / dataset.len() as f64)
}

/// Collapse thresholds: flag the first epoch whose robust accuracy falls
/// below `floor` after some earlier epoch reached `peak`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonitorThresholds {
    pub peak: f64,
    pub floor: f64,
}

impl Default for MonitorThresholds {
    fn default() -> Self {
        MonitorThresholds {
            peak: 0.20,
            floor: 0.05,
        }
    }
}

/// Scan a per-epoch robust-accuracy history for catastrophic collapse.
/// Returns the first epoch index where accuracy drops below the floor after
/// the history has reached the peak threshold, or `None`.
pub fn overfitting_monitor(
    history: &[f64],
    thresholds: MonitorThresholds,
) -> Option<usize> {
    let mut peak_seen = false;
    for (epoch, &acc) in history.iter().enumerate() {
        if peak_seen && acc < thresholds.floor {
            return Some(epoch);
        }
        if acc >= thresholds.peak {
            peak_seen = true;
        }
    }
    None
}

/// Loss surface on the plane spanned by an adversarial direction and a
/// Rademacher direction, both scaled to infinity-norm epsilon.
#[derive(Clone, Debug)]
pub struct LossLandscape {
    pub epsilon: f64,
    /// Axis offsets in perturbation units, from -epsilon to +epsilon.
    pub offsets: Vec<f64>,
    /// Row-major grid: rows walk the adversarial axis, columns the
    /// Rademacher axis.
    pub matrix: Vec<f64>,
    pub adv_direction: Tensor,
    pub rademacher_direction: Tensor,
}

impl LossLandscape {
    pub fn grid_n(&self) -> usize {
        self.offsets.len()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.grid_n() + j]
    }

    /// Long-format CSV (`adv_offset,rademacher_offset,loss`), row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("adv_offset,rademacher_offset,loss\n");
        for (i, &a) in self.offsets.iter().enumerate() {
            for (j, &b) in self.offsets.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.value(i, j)));
            }
        }
        out
    }

    /// CSV of the two direction vectors, one coordinate per line.
    pub fn directions_csv(&self) -> String {
        let mut out = String::from("index,adv,rademacher\n");
        for (i, (a, r)) in self
            .adv_direction
            .data()
            .iter()
            .zip(self.rademacher_direction.data())
            .enumerate()
        {
            out.push_str(&format!("{i},{a},{r}\n"));
        }
        out
    }
}

/// Landscape over any attackable loss. The adversarial direction comes from
/// a PGD run (rescaled to infinity-norm epsilon); the Rademacher direction
/// is `epsilon * (random sign tensor)`.
pub fn loss_landscape_on_target<T: AttackTarget>(
    target: &mut T,
    example: &Tensor,
    epsilon: f64,
    grid_n: usize,
    attack: &AttackConfig,
    rng: &mut Stream,
) -> Result<LossLandscape> {
    if grid_n < 2 || grid_n % 2 == 0 {
        return Err(Error::Config(format!(
            "landscape grid {grid_n} must be odd and >= 3"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("landscape epsilon {epsilon}")));
    }
    let Perturbation { delta } = pgd(target, example, attack, rng)?;
    let peak = delta.max_abs();
    let adv = if peak > 0.0 {
        delta.scale(epsilon / peak)
    } else {
        delta
    };
    let rad = {
        let data: Vec<f64> = (0..example.numel())
            .map(|_| epsilon * rng.next_sign())
            .collect();
        Tensor::from_vec(example.shape().to_vec(), data)?
    };

    let mid = (grid_n - 1) / 2;
    let coeffs: Vec<f64> = (0..grid_n)
        .map(|k| (k as f64 - mid as f64) / mid as f64)
        .collect();
    let offsets: Vec<f64> = coeffs.iter().map(|c| c * epsilon).collect();

    let mut matrix = Vec::with_capacity(grid_n * grid_n);
    for &u in &coeffs {
        for &v in &coeffs {
            let data: Vec<f64> = example
                .data()
                .iter()
                .zip(adv.data())
                .zip(rad.data())
                .map(|((&x, &a), &r)| x + u * a + v * r)
                .collect();
            let point = Tensor::from_vec(example.shape().to_vec(), data)?;
            let loss = target.loss(&point)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    node: 0,
                    context: format!("landscape loss at ({u}, {v})"),
                });
            }
            matrix.push(loss);
        }
    }
    Ok(LossLandscape {
        epsilon,
        offsets,
        matrix,
        adv_direction: adv,
        rademacher_direction: rad,
    })
}

/// Landscape of the network's cross-entropy at one example.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape(
    params: &ParameterSet,
    spec: &NetworkSpec,
    example: &Tensor,
    label: usize,
    epsilon: f64,
    grid_n: usize,
    pgd_steps: usize,
    rng: &mut Stream,
) -> Result<LossLandscape> {
    let labels = [label];
    let mask = BlockMask::all_ones(spec.block_count());
    let mut target = NetworkTarget::new(params, spec, mask, &labels);
    let attack = AttackConfig {
        epsilon,
        alpha: 2.5 * epsilon / pgd_steps as f64,
        steps: pgd_steps,
        init: crate::attack::InitMode::Zero,
        clip: None,
    };
    loss_landscape_on_target(&mut target, example, epsilon, grid_n, &attack, rng)
}
