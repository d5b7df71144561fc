//! Run configuration: a TOML file with dotted-key overrides. Every key is
//! validated before any training begins and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, InitMode};
use crate::error::{Error, Result};
use crate::io::dataset::DatasetHandle;
use crate::model::NetworkSpec;
use crate::sampler::ScheduleMode;
use crate::trainer::{Method, UpdateTarget};

fn default_one() -> f64 {
    1.0
}

/// Step size derived from a budget fraction. A zero budget makes any
/// attack a no-op, but the step size must stay positive to satisfy the
/// attack-config invariant.
fn derived_alpha(epsilon: f64, frac: f64) -> f64 {
    if epsilon > 0.0 {
        epsilon * frac
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    // blobs
    pub per_class: usize,
    pub eval_per_class: usize,
    pub dims: usize,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub data_seed: u64,
    // idx
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub eval_images: Option<PathBuf>,
    pub eval_labels: Option<PathBuf>,
    // cifar10
    pub train_files: Vec<PathBuf>,
    pub eval_files: Vec<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            per_class: 500,
            eval_per_class: 500,
            dims: 2,
            centers: vec![vec![1.0, 1.0], vec![-1.0, -1.0]],
            sigma: 0.1,
            data_seed: 0,
            train_images: None,
            train_labels: None,
            eval_images: None,
            eval_labels: None,
            train_files: Vec::new(),
            eval_files: Vec::new(),
        }
    }
}

impl DatasetConfig {
    /// Load the (train, eval) pair this config describes.
    pub fn load(&self) -> Result<(DatasetHandle, DatasetHandle)> {
        match self.kind {
            DatasetKind::Blobs => {
                let train = crate::io::dataset::make_blobs(
                    self.per_class,
                    self.dims,
                    &self.centers,
                    self.sigma,
                    self.data_seed,
                )?;
                // The eval split draws from a shifted seed so it is disjoint
                // from the training sample with probability one.
                let eval = crate::io::dataset::make_blobs(
                    self.eval_per_class,
                    self.dims,
                    &self.centers,
                    self.sigma,
                    self.data_seed.wrapping_add(0x9E37_79B9),
                )?;
                Ok((train, eval))
            }
            DatasetKind::Idx => {
                let need = |field: &Option<PathBuf>, name: &str| {
                    field.clone().ok_or_else(|| {
                        Error::Config(format!("dataset.{name} is required for kind = \"idx\""))
                    })
                };
                let train = crate::io::formats::load_idx(
                    &need(&self.train_images, "train_images")?,
                    &need(&self.train_labels, "train_labels")?,
                )?;
                let eval = crate::io::formats::load_idx(
                    &need(&self.eval_images, "eval_images")?,
                    &need(&self.eval_labels, "eval_labels")?,
                )?;
                Ok((train, eval))
            }
            DatasetKind::Cifar10 => {
                if self.train_files.is_empty() || self.eval_files.is_empty() {
                    return Err(Error::Config(
                        "dataset.train_files and dataset.eval_files are required for kind = \"cifar10\"".into(),
                    ));
                }
                Ok((
                    crate::io::formats::load_cifar_binary(&self.train_files)?,
                    crate::io::formats::load_cifar_binary(&self.eval_files)?,
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `resmlp-4`, `rescnn-6`, or `resmlp` (custom width/blocks).
    pub preset: String,
    pub classes: usize,
    /// Input feature count for affine presets.
    pub input_dim: usize,
    /// Input channels / side length for the conv preset.
    pub in_channels: usize,
    pub side: usize,
    /// Custom resmlp dimensions (used when preset = "resmlp").
    pub width: usize,
    pub blocks: usize,
    /// Evaluation-time branch scaling: "none" (whole model verbatim) or
    /// "survival" (rescale branches by their survival probabilities).
    pub scaling: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: "resmlp-4".into(),
            classes: 2,
            input_dim: 2,
            in_channels: 3,
            side: 32,
            width: 64,
            blocks: 4,
            scaling: "none".into(),
        }
    }
}

impl ModelConfig {
    pub fn build_spec(&self) -> Result<NetworkSpec> {
        let spec = match self.preset.as_str() {
            "resmlp-4" => NetworkSpec::resmlp4(self.input_dim, self.classes),
            "rescnn-6" => NetworkSpec::rescnn6(self.in_channels, self.side, self.classes),
            "resmlp" => NetworkSpec::resmlp(self.input_dim, self.width, self.blocks, self.classes),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (expected resmlp-4, rescnn-6 or resmlp)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn survival_scaling(&self) -> Result<bool> {
        match self.scaling.as_str() {
            "none" => Ok(false),
            "survival" => Ok(true),
            other => Err(Error::Config(format!(
                "model.scaling {other:?} (expected none or survival)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Decay points as fractions of the epoch count.
    pub lr_decay_points: Vec<f64>,
    pub seed: u64,
    pub update_target: UpdateTarget,
    /// Evaluate every n-th epoch (1 = every epoch, 0 = only at the end).
    pub eval_every: usize,
    /// Size of the fixed training subset watched for robust-accuracy
    /// collapse (0 disables the monitor evaluation).
    pub monitor_subset: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: Method::FpBetter,
            epochs: 30,
            batch_size: 100,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_points: vec![100.0 / 110.0, 105.0 / 110.0],
            seed: 1,
            update_target: UpdateTarget::Subnetwork,
            eval_every: 1,
            monitor_subset: 1000,
        }
    }
}

/// Attack clip setting: `"auto"` follows the dataset's declared range,
/// `"off"` disables clipping, or an explicit `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipSetting {
    Named(String),
    Range([f64; 2]),
}

impl Default for ClipSetting {
    fn default() -> Self {
        ClipSetting::Named("auto".into())
    }
}

impl ClipSetting {
    pub fn resolve(&self, dataset_range: Option<(f64, f64)>) -> Result<Option<(f64, f64)>> {
        match self {
            ClipSetting::Named(s) if s == "auto" => Ok(dataset_range),
            ClipSetting::Named(s) if s == "off" => Ok(None),
            ClipSetting::Named(s) => Err(Error::Config(format!(
                "attack.clip {s:?} (expected auto, off or [lo, hi])"
            ))),
            ClipSetting::Range([lo, hi]) => Ok(Some((*lo, *hi))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub alpha: f64,
    /// Inner-attack steps for the multi-step trainer.
    pub steps: usize,
    pub init: InitMode,
    pub clip: ClipSetting,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: 0.3,
            alpha: 0.375,
            steps: 2,
            init: InitMode::Uniform,
            clip: ClipSetting::default(),
        }
    }
}

impl AttackSection {
    pub fn build(&self, dataset_range: Option<(f64, f64)>) -> Result<AttackConfig> {
        let config = AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            init: self.init,
            clip: self.clip.resolve(dataset_range)?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub mode: ScheduleMode,
    pub p_min: f64,
    pub mu: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            mode: ScheduleMode::Linear,
            p_min: 0.5,
            mu: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    /// Steps of the PGD attack used for the best-checkpoint metric.
    pub pgd_steps: usize,
    /// PGD step size as a fraction of epsilon.
    pub pgd_alpha_frac: f64,
    /// Attacks reported by `evaluate` / `compare`: "clean", "fgsm" or
    /// "pgd-K".
    pub attacks: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_size: 256,
            pgd_steps: 10,
            pgd_alpha_frac: 0.25,
            attacks: vec!["clean".into(), "fgsm".into(), "pgd-10".into()],
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub delta_prime: f64,
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub c: f64,
    /// Loss bound M: "auto" takes the largest observed per-example
    /// adversarial loss on the scan.
    pub loss_bound: LossBound,
    /// Batches scanned for the gradient-norm maxima.
    pub scan_batches: usize,
    pub laplace_batches: usize,
    /// "full" or "subnetwork" gradient scans.
    pub mask_mode: String,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossBound {
    Named(String),
    Value(f64),
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection {
            delta_prime: 1e-3,
            gamma: 0.05,
            c: 1.0,
            loss_bound: LossBound::Named("auto".into()),
            scan_batches: 8,
            laplace_batches: 8,
            mask_mode: "full".into(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    /// Index of the evaluated example in the eval split.
    pub example: usize,
    /// Grid resolution; must be odd so the clean point is a grid point.
    pub grid: usize,
    pub pgd_steps: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        LandscapeSection {
            example: 0,
            grid: 21,
            pgd_steps: 100,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: vec![
                Method::FpBetter,
                Method::FgsmRs,
                Method::PgdAt,
                Method::Standard,
            ],
            seeds: vec![1, 2, 3],
        }
    }
}

/// The full run configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub bound: BoundSection,
    pub landscape: LandscapeSection,
    pub compare: CompareSection,
}

impl RunConfig {
    /// Parse a TOML file and apply `key=value` overrides (dotted keys,
    /// last wins).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        for check in [
            ("train.lr", t.lr),
            ("train.momentum", t.momentum),
            ("train.weight_decay", t.weight_decay),
            ("train.lr_decay_factor", t.lr_decay_factor),
        ] {
            if !(check.1.is_finite() && check.1 >= 0.0) {
                return Err(Error::Config(format!("{} = {} invalid", check.0, check.1)));
            }
        }
        if t.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if t.lr_decay_points.iter().any(|&f| !(0.0 < f && f < 1.0)) {
            return Err(Error::Config(
                "train.lr_decay_points must lie in (0, 1)".into(),
            ));
        }
        if !(self.sampler.p_min > 0.0 && self.sampler.p_min <= 1.0) {
            return Err(Error::Config(format!(
                "sampler.p_min {} outside (0, 1]",
                self.sampler.p_min
            )));
        }
        if !(self.sampler.mu >= 0.0 && self.sampler.mu.is_finite()) {
            return Err(Error::Config(format!("sampler.mu {} invalid", self.sampler.mu)));
        }
        if self.landscape.grid < 2 || self.landscape.grid % 2 == 0 {
            return Err(Error::Config(
                "landscape.grid must be odd and >= 3".into(),
            ));
        }
        self.model.build_spec()?;
        self.model.survival_scaling()?;
        match self.bound.mask_mode.as_str() {
            "full" | "subnetwork" => {}
            other => {
                return Err(Error::Config(format!(
                    "bound.mask_mode {other:?} (expected full or subnetwork)"
                )))
            }
        }
        Ok(())
    }

    /// The fully resolved config, echoed into run output directories.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Evaluation PGD attack (the best-checkpoint metric).
    pub fn eval_pgd_attack(&self, dataset_range: Option<(f64, f64)>) -> Result<AttackConfig> {
        let config = AttackConfig {
            epsilon: self.attack.epsilon,
            alpha: derived_alpha(self.attack.epsilon, self.eval.pgd_alpha_frac),
            steps: self.eval.pgd_steps,
            init: InitMode::Uniform,
            clip: self.attack.clip.resolve(dataset_range)?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Assemble the trainer configuration for this run.
    pub fn build_train_config(
        &self,
        dataset_range: Option<(f64, f64)>,
    ) -> Result<crate::trainer::TrainConfig> {
        Ok(crate::trainer::TrainConfig {
            spec: self.model.build_spec()?,
            method: self.train.method,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            lr_decay_factor: self.train.lr_decay_factor,
            lr_decay_points: self.train.lr_decay_points.clone(),
            attack: self.attack.build(dataset_range)?,
            schedule_mode: self.sampler.mode,
            p_min: self.sampler.p_min,
            mu: self.sampler.mu,
            update_target: self.train.update_target,
            seed: self.train.seed,
            eval_every: self.train.eval_every,
            monitor_subset: self.train.monitor_subset,
            eval_batch: self.eval.batch_size,
            eval_attack: self.eval_pgd_attack(dataset_range)?,
            trace_iterations: false,
        })
    }

    /// Parse an attack label from the eval section: "clean", "fgsm" or
    /// "pgd-K". FGSM evaluates at full strength (alpha = epsilon, zero
    /// start); PGD uses the configured step fraction and a random start.
    pub fn eval_attack_from_label(
        &self,
        label: &str,
        dataset_range: Option<(f64, f64)>,
    ) -> Result<Option<AttackConfig>> {
        let clip = self.attack.clip.resolve(dataset_range)?;
        let epsilon = self.attack.epsilon;
        if label == "clean" {
            return Ok(None);
        }
        if label == "fgsm" {
            return Ok(Some(AttackConfig {
                epsilon,
                alpha: derived_alpha(epsilon, 1.0),
                steps: 1,
                init: InitMode::Zero,
                clip,
            }));
        }
        if let Some(steps) = label.strip_prefix("pgd-") {
            let steps: usize = steps
                .parse()
                .map_err(|_| Error::Config(format!("attack label {label:?}")))?;
            if steps < 1 {
                return Err(Error::Config(format!("attack label {label:?}")));
            }
            return Ok(Some(AttackConfig {
                epsilon,
                alpha: derived_alpha(epsilon, self.eval.pgd_alpha_frac),
                steps,
                init: InitMode::Uniform,
                clip,
            }));
        }
        Err(Error::Config(format!(
            "attack label {label:?} (expected clean, fgsm or pgd-K)"
        )))
    }
}

/// Apply one `dotted.key=value` override, creating tables as needed. The
/// value is parsed as TOML when possible and falls back to a string.
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {entry:?} has an empty key")));
    }
    let parsed: toml::Value = match format!("v = {}", raw.trim()).parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.sampler.p_min, 0.5);
        assert_eq!(c.sampler.mu, 0.04);
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.weight_decay, 5e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[train]\nnot_a_key = 3\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = RunConfig::from_toml("[nonsense]\nx = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_last_wins() {
        let c = RunConfig::from_toml(
            "[train]\nepochs = 10\n",
            &[
                "train.epochs=20".into(),
                "train.epochs=5".into(),
                "sampler.mu=0.0".into(),
                "train.method=\"standard\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.sampler.mu, 0.0);
        assert_eq!(c.train.method, Method::Standard);
    }

    #[test]
    fn bad_override_shapes_rejected(){
        assert!(RunConfig::from_toml("", &["no_equals".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train.epochs=0".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train.unknown=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        assert!(RunConfig::from_toml("[sampler]\np_min = 0.0\n", &[]).is_err());
        assert!(RunConfig::from_toml("[sampler]\nmu = -0.1\n", &[]).is_err());
        assert!(RunConfig::from_toml("[train]\nlr_decay_points = [1.5]\n", &[]).is_err());
        assert!(RunConfig::from_toml("[landscape]\ngrid = 4\n", &[]).is_err());
        assert!(RunConfig::from_toml("[model]\npreset = \"other\"\n", &[]).is_err());
    }

    #[test]
    fn clip_settings_resolve() {
        let auto = ClipSetting::Named("auto".into());
        assert_eq!(auto.resolve(Some((0.0, 1.0))).unwrap(), Some((0.0, 1.0)));
        assert_eq!(auto.resolve(None).unwrap(), None);
        let off = ClipSetting::Named("off".into());
        assert_eq!(off.resolve(Some((0.0, 1.0))).unwrap(), None);
        let range = ClipSetting::Range([-1.0, 2.0]);
        assert_eq!(range.resolve(None).unwrap(), Some((-1.0, 2.0)));
        assert!(ClipSetting::Named("sideways".into()).resolve(None).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml("[train]\nepochs = 7\n", &[]).unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(c, back);
    }
}
