//! Adversarial perturbation generation: FGSM, FGSM-RS and PGD, on the full
//! network or on a masked subnetwork.
//!
//! Both attacks run against an [`AttackTarget`], anything that can report
//! the loss and its input gradient at a perturbed batch. Training and
//! evaluation use the network-backed target; tests plug in hand-
//! differentiated toy losses as independent oracles.

use crate::error::{Error, Result};
use crate::model::{self, BlockMask, NetworkSpec, ParameterSet, Scaling};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Perturbation start: zeros, or uniform in `[-epsilon, epsilon)` drawn
/// elementwise from the attack stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    Uniform,
}

/// Infinity-norm attack configuration.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget, in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// Iteration count for PGD; FGSM ignores it.
    pub steps: usize,
    pub init: InitMode,
    /// When present, `x + delta` is kept inside `[lo, hi]` elementwise by
    /// shrinking delta after the box projection.
    pub clip: Option<(f64, f64)>,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("attack epsilon {}", self.epsilon)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("attack alpha {}", self.alpha)));
        }
        if self.steps < 1 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("attack clip range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// A perturbation; every constructor guarantees `max |delta_i| <= epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
}

/// Anything attackable: reports the loss (and input gradient) at `x`.
pub trait AttackTarget {
    fn loss_and_input_grad(&mut self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn loss(&mut self, x: &Tensor) -> Result<f64> {
        Ok(self.loss_and_input_grad(x)?.0)
    }
}

/// The production target: cross-entropy loss of a masked network forward.
/// Counts executed branches so training can report the realized compute
/// saving.
pub struct NetworkTarget<'a> {
    pub params: &'a ParameterSet,
    pub spec: &'a NetworkSpec,
    pub mask: BlockMask,
    pub labels: &'a [usize],
    pub scaling: Scaling,
    /// Branches executed across all forwards through this target.
    pub executed_branches: usize,
    /// Forward passes run through this target.
    pub forward_passes: usize,
}

impl<'a> NetworkTarget<'a> {
    pub fn new(
        params: &'a ParameterSet,
        spec: &'a NetworkSpec,
        mask: BlockMask,
        labels: &'a [usize],
    ) -> Self {
        NetworkTarget {
            params,
            spec,
            mask,
            labels,
            scaling: Scaling::None,
            executed_branches: 0,
            forward_passes: 0,
        }
    }
}

impl AttackTarget for NetworkTarget<'_> {
    fn loss_and_input_grad(&mut self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut pass = model::forward(self.params, self.spec, x, &self.mask, &self.scaling)?;
        self.executed_branches += pass.executed_branches;
        self.forward_passes += 1;
        let loss = pass.loss(self.labels)?;
        let grads = pass.graph.backward(loss)?;
        let gx = pass.graph.grad_or_zeros(&grads, pass.input);
        Ok((pass.graph.value(loss).item(), gx))
    }

    fn loss(&mut self, x: &Tensor) -> Result<f64> {
        let mut pass = model::forward(self.params, self.spec, x, &self.mask, &self.scaling)?;
        self.executed_branches += pass.executed_branches;
        self.forward_passes += 1;
        let loss = pass.loss(self.labels)?;
        Ok(pass.graph.value(loss).item())
    }
}

/// Elementwise clamp to the `[-epsilon, epsilon]` box.
pub fn project_box(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn init_delta(shape: &[usize], config: &AttackConfig, rng: &mut Stream) -> Tensor {
    match config.init {
        InitMode::Zero => Tensor::zeros(shape.to_vec()),
        InitMode::Uniform => {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|_| rng.uniform(-config.epsilon, config.epsilon))
                .collect();
            Tensor::from_vec(shape.to_vec(), data).expect("init shape")
        }
    }
}

/// Shrink delta so `lo <= x + delta <= hi` elementwise.
fn clip_to_range(x: &Tensor, delta: &Tensor, lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&xv, &dv)| (xv + dv).clamp(lo, hi) - xv)
        .collect();
    Tensor::from_vec(delta.shape().to_vec(), data).expect("clip shape")
}

fn check_grad_finite(grad: &Tensor) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            node: 0,
            context: "attack input gradient".into(),
        });
    }
    Ok(())
}

/// One ascent step from `phi`, projected to the epsilon box:
/// `delta = clamp(phi + alpha * sign(grad_x loss(x + phi)))`.
fn ascend_step<T: AttackTarget>(
    target: &mut T,
    x: &Tensor,
    phi: &Tensor,
    config: &AttackConfig,
) -> Result<Tensor> {
    let perturbed = x.add(phi)?;
    let (_, grad) = target.loss_and_input_grad(&perturbed)?;
    check_grad_finite(&grad)?;
    let stepped: Vec<f64> = phi
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| p + config.alpha * sign(g))
        .collect();
    let mut delta = project_box(
        &Tensor::from_vec(x.shape().to_vec(), stepped)?,
        config.epsilon,
    );
    if let Some((lo, hi)) = config.clip {
        // Shrinking delta via x + delta rounds through x; re-project so the
        // epsilon box stays exact.
        delta = project_box(&clip_to_range(x, &delta, lo, hi), config.epsilon);
    }
    Ok(delta)
}

/// Single-step attack (FGSM; FGSM-RS under uniform init). `config.steps`
/// is ignored.
pub fn fgsm<T: AttackTarget>(
    target: &mut T,
    x: &Tensor,
    config: &AttackConfig,
    rng: &mut Stream,
) -> Result<Perturbation> {
    config.validate()?;
    let phi = init_delta(x.shape(), config, rng);
    Ok(Perturbation {
        delta: ascend_step(target, x, &phi, config)?,
    })
}

/// Iterated attack: `config.steps` sign-gradient steps with per-step box
/// projection (and optional per-step data-range clipping).
pub fn pgd<T: AttackTarget>(
    target: &mut T,
    x: &Tensor,
    config: &AttackConfig,
    rng: &mut Stream,
) -> Result<Perturbation> {
    config.validate()?;
    let mut delta = init_delta(x.shape(), config, rng);
    for _ in 0..config.steps {
        delta = ascend_step(target, x, &delta, config)?;
    }
    Ok(Perturbation { delta })
}

/// FGSM on a masked subnetwork. Plain FGSM-RS is the all-ones mask with
/// uniform init.
pub fn fgsm_on_network(
    params: &ParameterSet,
    spec: &NetworkSpec,
    mask: &BlockMask,
    batch: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut Stream,
) -> Result<Perturbation> {
    let mut target = NetworkTarget::new(params, spec, mask.clone(), labels);
    fgsm(&mut target, batch, config, rng)
}

/// PGD for evaluation and for multi-step training baselines. Always runs
/// on the full network.
pub fn pgd_on_network(
    params: &ParameterSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    rng: &mut Stream,
) -> Result<Perturbation> {
    let mask = BlockMask::all_ones(spec.block_count());
    let mut target = NetworkTarget::new(params, spec, mask, labels);
    pgd(&mut target, batch, config, rng)
}
