//! Survival-probability schedules over blocks (the spatial dimension),
//! per-iteration mask sampling, and the temporal controller that raises the
//! probability floor when the cumulative adversarial loss stops improving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BlockMask;
use crate::rng::Stream;

/// How survival probability varies over block depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `p_l = 1 - (l / L) * (1 - p_min)`: deepest block sits at the floor.
    Linear,
    /// `p_l = p_min` for every block.
    Uniform,
}

/// Survival probabilities `p_l` for blocks `l = 1..=L`.
pub fn spatial_probabilities(blocks: usize, p_min: f64, mode: ScheduleMode) -> Result<Vec<f64>> {
    if blocks < 1 {
        return Err(Error::Config("schedule needs at least one block".into()));
    }
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(Error::Config(format!("p_min {p_min} outside (0, 1]")));
    }
    Ok(match mode {
        ScheduleMode::Linear => (1..=blocks)
            .map(|l| 1.0 - (l as f64 / blocks as f64) * (1.0 - p_min))
            .collect(),
        ScheduleMode::Uniform => vec![p_min; blocks],
    })
}

/// Expected number of active blocks: the sum of the survival vector.
pub fn expected_effective_blocks(probs: &[f64]) -> f64 {
    probs.iter().sum()
}

/// Independent Bernoulli draw per block, beta_l = 1 with probability p_l.
pub fn sample_mask(probs: &[f64], rng: &mut Stream) -> BlockMask {
    BlockMask::new(probs.iter().map(|&p| rng.next_f64() < p).collect())
}

/// Floor update: keep `p_min` while the current period's cumulative loss is
/// at least the previous one's; otherwise raise it by `mu`, clamped at 1.
pub fn temporal_update(l_pre: f64, l_cur: f64, p_min: f64, mu: f64) -> f64 {
    if l_cur - l_pre >= 0.0 {
        p_min
    } else {
        (p_min + mu).min(1.0)
    }
}

/// Cumulative adversarial-loss accumulators for the temporal criterion.
/// One period is one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalState {
    /// Previous period's total; `None` until one full period has elapsed.
    pub l_pre: Option<f64>,
    /// Running total of the current period, in iteration order.
    pub l_cur: f64,
}

impl Default for TemporalState {
    fn default() -> Self {
        Self::new()
    }
}

impl TemporalState {
    pub fn new() -> Self {
        TemporalState {
            l_pre: None,
            l_cur: 0.0,
        }
    }

    /// Add one iteration's adversarial training loss.
    pub fn record(&mut self, loss: f64) {
        self.l_cur += loss;
    }

    /// Close the period: compare against the previous period when one
    /// exists (the first period has no predecessor and keeps `p_min`),
    /// then roll `l_pre <- l_cur`, `l_cur <- 0`. Returns the new floor.
    pub fn end_period(&mut self, p_min: f64, mu: f64) -> f64 {
        let next = match self.l_pre {
            Some(pre) => temporal_update(pre, self.l_cur, p_min, mu),
            None => p_min,
        };
        self.l_pre = Some(self.l_cur);
        self.l_cur = 0.0;
        next
    }
}

/// Spatial schedule plus temporal controller state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub mode: ScheduleMode,
    pub blocks: usize,
    pub p_min: f64,
    /// Adjusting factor added to `p_min` when the temporal criterion fires.
    /// Zero makes the controller the identity (spatial-only training).
    pub mu: f64,
    pub temporal: TemporalState,
    probs: Vec<f64>,
}

impl SamplerSchedule {
    pub fn new(blocks: usize, p_min: f64, mu: f64, mode: ScheduleMode) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Config(format!("adjusting factor {mu} must be >= 0")));
        }
        Ok(SamplerSchedule {
            mode,
            blocks,
            p_min,
            mu,
            temporal: TemporalState::new(),
            probs: spatial_probabilities(blocks, p_min, mode)?,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn expected_effective_blocks(&self) -> f64 {
        expected_effective_blocks(&self.probs)
    }

    pub fn sample(&self, rng: &mut Stream) -> BlockMask {
        sample_mask(&self.probs, rng)
    }

    /// Record one iteration's adversarial loss.
    pub fn record_loss(&mut self, loss: f64) {
        self.temporal.record(loss);
    }

    /// End-of-epoch temporal update; rebuilds the survival vector when the
    /// floor moves.
    pub fn end_epoch(&mut self) -> Result<()> {
        let next = self.temporal.end_period(self.p_min, self.mu);
        if next != self.p_min {
            self.p_min = next;
            self.probs = spatial_probabilities(self.blocks, self.p_min, self.mode)?;
        }
        Ok(())
    }

    /// Restore accumulators and floor from a checkpoint.
    pub fn restore(&mut self, p_min: f64, temporal: TemporalState) -> Result<()> {
        self.p_min = p_min;
        self.temporal = temporal;
        self.probs = spatial_probabilities(self.blocks, self.p_min, self.mode)?;
        Ok(())
    }
}
