//! Diagnostic calculator for the differential-privacy generalization
//! machinery: layerwise robustified-intensity ratios, the per-iteration
//! privacy loss, its composition over training, and the resulting
//! high-probability generalization bound.
//!
//! The max over (parameters, example) in the intensity definition is
//! intractable; it is estimated as the max over scanned training batches at
//! the supplied parameters, and the report records that scope.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, NetworkTarget, Perturbation};
use crate::error::{Error, Result};
use crate::eval::per_example_loss;
use crate::io::dataset::DatasetHandle;
use crate::model::{self, BlockMask, NetworkSpec, ParameterSet, Scaling};
use crate::rng::Stream;
use crate::sampler;
use crate::tensor::Tensor;

/// Gradient-scan masking: the full network, or freshly sampled subnetworks
/// with the given survival probabilities.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskMode {
    Full,
    Subnetwork(Vec<f64>),
}

/// One layer's gradient-norm maxima and intensity ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerIntensity {
    pub layer: String,
    /// Max over scanned batches of the adversarial-loss gradient norm
    /// restricted to this layer.
    pub adv_norm: f64,
    /// Same for the clean-loss gradient.
    pub clean_norm: f64,
    /// adv_norm / clean_norm; `None` when the denominator is zero
    /// (flagged, excluded from products only via `ratio_or_unit`).
    pub ratio: Option<f64>,
    /// True when every scanned mask dropped this layer; such layers take
    /// ratio 1 by convention.
    pub always_dropped: bool,
}

impl LayerIntensity {
    /// The factor this layer contributes to the privacy product.
    pub fn ratio_or_unit(&self) -> Option<f64> {
        if self.always_dropped {
            Some(1.0)
        } else {
            self.ratio
        }
    }
}

/// Result of one gradient scan over the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityScan {
    pub layers: Vec<LayerIntensity>,
    /// Whole-parameter-vector ratio (the robustified intensity), `None`
    /// when the clean maximum is zero.
    pub intensity: Option<f64>,
    /// Max clean full-gradient norm seen — the empirical-risk gradient
    /// bound used as L_ERM.
    pub max_clean_norm: f64,
    pub max_adv_norm: f64,
    /// Largest per-example adversarial loss observed (an empirical loss
    /// bound M when none is supplied).
    pub max_example_loss: f64,
    /// Human-readable estimation scope.
    pub scope: String,
}

fn layer_index_ranges(params: &ParameterSet) -> Vec<(String, Vec<usize>)> {
    let mut layers: Vec<(String, Vec<usize>)> = Vec::new();
    for (idx, p) in params.iter().enumerate() {
        let layer = ParameterSet::layer_of(&p.name).to_string();
        match layers.last_mut() {
            Some((name, ids)) if *name == layer => ids.push(idx),
            _ => layers.push((layer, vec![idx])),
        }
    }
    layers
}

fn squared_norm(grads: &[Option<Tensor>], ids: &[usize]) -> f64 {
    let mut acc = 0.0;
    for &i in ids {
        if let Some(g) = &grads[i] {
            for v in g.data() {
                acc += v * v;
            }
        }
    }
    acc
}

fn param_grads_for(
    params: &ParameterSet,
    spec: &NetworkSpec,
    mask: &BlockMask,
    examples: &Tensor,
    labels: &[usize],
) -> Result<Vec<Option<Tensor>>> {
    let mut pass = model::forward(params, spec, examples, mask, &Scaling::None)?;
    let loss = pass.loss(labels)?;
    let grads = pass.graph.backward(loss)?;
    Ok(pass.param_gradients(&grads))
}

/// Scan the dataset in order, batch by batch, recording per-layer maxima of
/// clean and adversarial parameter-gradient norms.
#[allow(clippy::too_many_arguments)]
pub fn layerwise_intensity(
    params: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &DatasetHandle,
    attack: &AttackConfig,
    mask_mode: &MaskMode,
    batch_size: usize,
    max_batches: usize,
    rng: &mut Stream,
) -> Result<IntensityScan> {
    if dataset.is_empty() {
        return Err(Error::Dataset("intensity scan over empty dataset".into()));
    }
    if batch_size == 0 || max_batches == 0 {
        return Err(Error::Config("scan batch size and count must be >= 1".into()));
    }
    let layers = layer_index_ranges(params);
    let blocks = spec.block_count();
    let full = BlockMask::all_ones(blocks);

    let mut adv_sq = vec![0.0f64; layers.len()];
    let mut clean_sq = vec![0.0f64; layers.len()];
    let mut touched = vec![false; layers.len()];
    let mut max_clean_total = 0.0f64;
    let mut max_adv_total = 0.0f64;
    let mut max_example_loss = f64::NEG_INFINITY;

    let n = dataset.len();
    let mut scanned = 0usize;
    let mut start = 0usize;
    while start < n && scanned < max_batches {
        let end = (start + batch_size).min(n);
        let examples = dataset.examples.slice_rows(start, end);
        let labels = &dataset.labels[start..end];

        // Clean gradients always come from the full network.
        let clean = param_grads_for(params, spec, &full, &examples, labels)?;

        // Adversarial gradients under the configured masking.
        let scan_mask = match mask_mode {
            MaskMode::Full => full.clone(),
            MaskMode::Subnetwork(probs) => sampler::sample_mask(probs, rng),
        };
        let Perturbation { delta } = {
            let mut target = NetworkTarget::new(params, spec, scan_mask.clone(), labels);
            pgd(&mut target, &examples, attack, rng)?
        };
        let moved = examples.add(&delta)?;
        let adv = param_grads_for(params, spec, &scan_mask, &moved, labels)?;

        // Track the loss bound on the adversarial examples.
        let pass = model::forward(params, spec, &moved, &full, &Scaling::None)?;
        for (row, &y) in pass
            .logits_tensor()
            .data()
            .chunks(spec.classes)
            .zip(labels)
        {
            max_example_loss = max_example_loss.max(per_example_loss(row, y));
        }

        for (li, (_, ids)) in layers.iter().enumerate() {
            clean_sq[li] = clean_sq[li].max(squared_norm(&clean, ids));
            adv_sq[li] = adv_sq[li].max(squared_norm(&adv, ids));
            if ids.iter().any(|&i| adv[i].is_some()) {
                touched[li] = true;
            }
        }
        let all: Vec<usize> = (0..params.len()).collect();
        max_clean_total = max_clean_total.max(squared_norm(&clean, &all));
        max_adv_total = max_adv_total.max(squared_norm(&adv, &all));

        start = end;
        scanned += 1;
    }

    let layer_reports: Vec<LayerIntensity> = layers
        .iter()
        .enumerate()
        .map(|(li, (name, _))| {
            let clean_norm = clean_sq[li].sqrt();
            let adv_norm = adv_sq[li].sqrt();
            LayerIntensity {
                layer: name.clone(),
                adv_norm,
                clean_norm,
                ratio: (clean_norm > 0.0).then(|| adv_norm / clean_norm),
                always_dropped: !touched[li],
            }
        })
        .collect();
    let max_clean_norm = max_clean_total.sqrt();
    let max_adv_norm = max_adv_total.sqrt();
    Ok(IntensityScan {
        layers: layer_reports,
        intensity: (max_clean_norm > 0.0).then(|| max_adv_norm / max_clean_norm),
        max_clean_norm,
        max_adv_norm,
        max_example_loss,
        scope: format!(
            "max over {scanned} batches of {batch_size} (dataset size {n}) at the supplied parameters"
        ),
    })
}

/// Per-iteration privacy loss: `(2 L_ERM / (N b)) * prod(ratios)`.
pub fn epsilon0(ratios: &[f64], l_erm: f64, sample_size: usize, b: f64) -> Result<f64> {
    if sample_size == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    if !(b > 0.0) {
        return Err(Error::Config(format!("Laplace parameter b = {b} must be positive")));
    }
    if !(l_erm >= 0.0) {
        return Err(Error::Config(format!("L_ERM = {l_erm} must be nonnegative")));
    }
    let mut value = 2.0 * l_erm / (sample_size as f64 * b);
    for r in ratios {
        value *= r;
    }
    Ok(value)
}

/// Composed privacy over T iterations:
/// `epsilon = eps0 * sqrt(2 T ln(N / delta')) + T eps0 (e^eps0 - 1)`,
/// `delta = delta' / N`.
pub fn privacy_epsilon(
    eps0: f64,
    iterations: usize,
    sample_size: usize,
    delta_prime: f64,
) -> Result<(f64, f64)> {
    if iterations < 1 {
        return Err(Error::Config("iteration count must be >= 1".into()));
    }
    if !(delta_prime > 0.0 && delta_prime < sample_size as f64) {
        return Err(Error::Config(format!(
            "delta' = {delta_prime} must lie in (0, N)"
        )));
    }
    if !(eps0 >= 0.0) {
        return Err(Error::Config(format!("eps0 = {eps0} must be nonnegative")));
    }
    let t = iterations as f64;
    let n = sample_size as f64;
    let epsilon = eps0 * (2.0 * t * (n / delta_prime).ln()).sqrt() + t * eps0 * (eps0.exp_m1());
    Ok((epsilon, delta_prime / n))
}

/// High-probability generalization bound:
/// `c * (M (1 - e^-eps + e^-eps delta) ln(N) ln(N / gamma) + sqrt(ln(1/gamma) / N))`.
pub fn generalization_bound(
    epsilon: f64,
    delta: f64,
    loss_bound: f64,
    sample_size: usize,
    gamma: f64,
    c: f64,
) -> f64 {
    let n = sample_size as f64;
    let privacy_term =
        loss_bound * (1.0 - (-epsilon).exp() + (-epsilon).exp() * delta) * n.ln() * (n / gamma).ln();
    c * (privacy_term + ((1.0 / gamma).ln() / n).sqrt())
}

/// Laplace maximum-likelihood scale: the mean absolute deviation of the
/// samples around the center, averaged over all coordinates.
pub fn laplace_scale(samples: &[Vec<f64>], center: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("no gradient samples".into()));
    }
    let dims = center.len();
    let mut total = 0.0;
    for s in samples {
        if s.len() != dims {
            return Err(Error::Shape(format!(
                "gradient sample has {} coordinates, center has {dims}",
                s.len()
            )));
        }
        for (v, c) in s.iter().zip(center) {
            total += (v - c).abs();
        }
    }
    Ok(total / (samples.len() * dims) as f64)
}

fn flatten_grads(params: &ParameterSet, grads: &[Option<Tensor>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (idx, p) in params.iter().enumerate() {
        match &grads[idx] {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.resize(out.len() + p.tensor.numel(), 0.0),
        }
    }
    out
}

/// Estimate the Laplace parameter b: minibatch adversarial gradients are
/// compared against the full-dataset adversarial gradient (the example-
/// weighted mean of the batch gradients), and b is their mean absolute
/// deviation per coordinate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_laplace_b(
    params: &ParameterSet,
    spec: &NetworkSpec,
    dataset: &DatasetHandle,
    attack: &AttackConfig,
    batch_size: usize,
    n_batches: usize,
    rng: &mut Stream,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Dataset("Laplace estimation over empty dataset".into()));
    }
    if n_batches < 2 {
        return Err(Error::Config("Laplace estimation needs >= 2 batches".into()));
    }
    let full = BlockMask::all_ones(spec.block_count());
    let n = dataset.len();
    let mut batch_grads: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut start = 0usize;
    while start < n && batch_grads.len() < n_batches {
        let end = (start + batch_size).min(n);
        let examples = dataset.examples.slice_rows(start, end);
        let labels = &dataset.labels[start..end];
        let Perturbation { delta } = {
            let mut target = NetworkTarget::new(params, spec, full.clone(), labels);
            pgd(&mut target, &examples, attack, rng)?
        };
        let moved = examples.add(&delta)?;
        let grads = param_grads_for(params, spec, &full, &moved, labels)?;
        batch_grads.push((end - start, flatten_grads(params, &grads)));
        start = end;
    }
    if batch_grads.len() < 2 {
        return Err(Error::Config(format!(
            "dataset only yields {} batches of {batch_size}, need >= 2",
            batch_grads.len()
        )));
    }
    // Example-weighted mean of the (per-batch mean) gradients equals the
    // full-dataset mean gradient.
    let total_examples: usize = batch_grads.iter().map(|(w, _)| w).sum();
    let dims = batch_grads[0].1.len();
    let mut center = vec![0.0f64; dims];
    for (w, g) in &batch_grads {
        let weight = *w as f64 / total_examples as f64;
        for (c, v) in center.iter_mut().zip(g) {
            *c += weight * v;
        }
    }
    let samples: Vec<Vec<f64>> = batch_grads.into_iter().map(|(_, g)| g).collect();
    laplace_scale(&samples, &center)
}

/// Raw inputs to the bound formulas, echoed in the report. The batch size
/// tau is recorded but does not enter the formulas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub iterations: usize,
    pub sample_size: usize,
    pub delta_prime: f64,
    pub laplace_b: f64,
    pub l_erm: f64,
    pub ratios: Vec<f64>,
    pub loss_bound: f64,
    pub gamma: f64,
    pub c: f64,
    pub tau: usize,
}

/// Full diagnostic output. Values are reported up to the universal
/// constant c.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub epsilon0: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub bound: f64,
    pub intensity: Option<f64>,
    pub layers: Vec<LayerIntensity>,
    pub scope: String,
    /// Held-out risk estimate, reported for context only (the expected risk
    /// itself is not computable).
    pub heldout_risk: Option<f64>,
    pub note: String,
}

impl BoundReport {
    /// Assemble the report from a finished scan and the remaining inputs.
    pub fn from_scan(scan: &IntensityScan, inputs: BoundInputs) -> Result<BoundReport> {
        let eps0 = epsilon0(
            &inputs.ratios,
            inputs.l_erm,
            inputs.sample_size,
            inputs.laplace_b,
        )?;
        let (epsilon, delta) =
            privacy_epsilon(eps0, inputs.iterations, inputs.sample_size, inputs.delta_prime)?;
        let bound = generalization_bound(
            epsilon,
            delta,
            inputs.loss_bound,
            inputs.sample_size,
            inputs.gamma,
            inputs.c,
        );
        Ok(BoundReport {
            epsilon0: eps0,
            epsilon,
            delta,
            bound,
            intensity: scan.intensity,
            layers: scan.layers.clone(),
            scope: scan.scope.clone(),
            heldout_risk: None,
            note: "values are up to the universal constant c".into(),
            inputs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("bound report encode: {e}")))
    }
}
