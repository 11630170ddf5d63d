//! Training configuration and its flat `key = value` text form.
//!
//! Every field is addressable by a dotted key (`train.tau`, `mask.ratio`, ...).
//! A config file holds one assignment per line; `#` starts a comment. The same
//! keys are accepted as command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::losses::{LcrRegion, LossWeights};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::pseudo_label::{Averaging, ScaleSet};
use crate::segnet::ModelConfig;

/// Which training components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Labeled data only.
    SupervisedOnly,
    /// Mean teacher, weak-to-strong consistency and pseudo-label selection.
    Baseline,
    /// Baseline with multi-scale ensemble pseudo-labels.
    BaselineMs,
    /// Baseline with masked local consistency.
    BaselineLcr,
    /// Every component.
    Full,
}

/// Component flags, in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub mean_teacher: bool,
    pub weak_strong: bool,
    pub selection: bool,
    pub multi_scale: bool,
    pub lcr: bool,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::SupervisedOnly,
        Mode::Baseline,
        Mode::BaselineMs,
        Mode::BaselineLcr,
        Mode::Full,
    ];

    pub fn components(self) -> Components {
        let semi = self != Mode::SupervisedOnly;
        Components {
            mean_teacher: semi,
            weak_strong: semi,
            selection: semi,
            multi_scale: matches!(self, Mode::BaselineMs | Mode::Full),
            lcr: matches!(self, Mode::BaselineLcr | Mode::Full),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SupervisedOnly => "supervised_only",
            Mode::Baseline => "baseline",
            Mode::BaselineMs => "baseline_ms",
            Mode::BaselineLcr => "baseline_lcr",
            Mode::Full => "full",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised_only" => Ok(Mode::SupervisedOnly),
            "baseline" | "baseline_ws" => Ok(Mode::Baseline),
            "baseline_ms" => Ok(Mode::BaselineMs),
            "baseline_lcr" => Ok(Mode::BaselineLcr),
            "full" => Ok(Mode::Full),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (expected supervised_only, baseline, baseline_ms, baseline_lcr or full)"
            ))),
        }
    }
}

/// What the masked branch is trained to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcrTask {
    /// Predict the label map of the complete image.
    Predict,
    /// Reconstruct the complete image through an auxiliary head.
    Reconstruct,
}

impl fmt::Display for LcrTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LcrTask::Predict => "predict",
            LcrTask::Reconstruct => "reconstruct",
        })
    }
}

impl FromStr for LcrTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predict" => Ok(LcrTask::Predict),
            "reconstruct" => Ok(LcrTask::Reconstruct),
            _ => Err(Error::Config(format!(
                "unknown lcr task `{s}` (expected predict or reconstruct)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub base_width: usize,
    pub depth: usize,
    pub mode: Mode,
    pub epochs: usize,
    /// Overrides the epoch-derived iteration count when non-zero.
    pub max_iter: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    pub ohem: bool,
    pub ohem_keep_ratio: f64,
    pub ohem_min_kept: usize,
    pub lcr_task: LcrTask,
    pub lcr_region: LcrRegion,
    pub mask: MaskSpec,
    pub scales: ScaleSet,
    pub averaging: Averaging,
    pub weights: LossWeights,
    pub aug: AugConfig,
    /// Validation every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub eval_tol_frac: f64,
    /// Checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            base_width: 16,
            depth: 3,
            mode: Mode::Full,
            epochs: 10,
            max_iter: 0,
            batch_labeled: 8,
            batch_unlabeled: 8,
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            tau: 0.9,
            ema_alpha: 0.999,
            seed: 0,
            ohem: false,
            ohem_keep_ratio: 0.7,
            ohem_min_kept: 256,
            lcr_task: LcrTask::Predict,
            lcr_region: LcrRegion::All,
            mask: MaskSpec::default(),
            scales: ScaleSet::default(),
            averaging: Averaging::Probabilities,
            weights: LossWeights::default(),
            aug: AugConfig::default(),
            eval_every: 0,
            eval_tol_frac: 0.0003,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.dir" => self.data_dir = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "model.base_width" => self.base_width = parse(key, v)?,
            "model.depth" => self.depth = parse(key, v)?,
            "train.mode" => self.mode = v.parse()?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.max_iter" => self.max_iter = parse(key, v)?,
            "train.batch_labeled" => self.batch_labeled = parse(key, v)?,
            "train.batch_unlabeled" => self.batch_unlabeled = parse(key, v)?,
            "train.base_lr" => self.base_lr = parse(key, v)?,
            "train.momentum" => self.momentum = parse(key, v)?,
            "train.weight_decay" => self.weight_decay = parse(key, v)?,
            "train.tau" => self.tau = parse(key, v)?,
            "train.ema_alpha" => self.ema_alpha = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.ohem" => self.ohem = parse_bool(key, v)?,
            "ohem.keep_ratio" => self.ohem_keep_ratio = parse(key, v)?,
            "ohem.min_kept" => self.ohem_min_kept = parse(key, v)?,
            "lcr.task" => self.lcr_task = v.parse()?,
            "lcr.region" => self.lcr_region = v.parse()?,
            "mask.strategy" => self.mask.strategy = v.parse::<MaskStrategy>()?,
            "mask.patch_size" => self.mask.patch_size = parse(key, v)?,
            "mask.ratio" => self.mask.ratio = parse(key, v)?,
            "ms.sigma1" => self.scales.sigma1 = parse(key, v)?,
            "ms.sigma2" => self.scales.sigma2 = parse(key, v)?,
            "ms.average" => self.averaging = v.parse()?,
            "loss.lambda" => self.weights.lambda = parse(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "aug.crop" => self.aug.crop_size = parse(key, v)?,
            "aug.scale_min" => self.aug.scale_min = parse(key, v)?,
            "aug.scale_max" => self.aug.scale_max = parse(key, v)?,
            "aug.flip_prob" => self.aug.flip_prob = parse(key, v)?,
            "aug.jitter_prob" => self.aug.jitter_prob = parse(key, v)?,
            "aug.jitter_strength" => self.aug.jitter_strength = parse(key, v)?,
            "aug.gray_prob" => self.aug.gray_prob = parse(key, v)?,
            "aug.blur_prob" => self.aug.blur_prob = parse(key, v)?,
            "aug.blur_sigma_min" => self.aug.blur_sigma_min = parse(key, v)?,
            "aug.blur_sigma_max" => self.aug.blur_sigma_max = parse(key, v)?,
            "aug.cutmix_prob" => self.aug.cutmix_prob = parse(key, v)?,
            "aug.cutmix_area_min" => self.aug.cutmix_area_min = parse(key, v)?,
            "aug.cutmix_area_max" => self.aug.cutmix_area_max = parse(key, v)?,
            "eval.every" => self.eval_every = parse(key, v)?,
            "eval.tol_frac" => self.eval_tol_frac = parse(key, v)?,
            "checkpoint.every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data.dir", self.data_dir.display().to_string()),
            ("out.dir", self.out_dir.display().to_string()),
            ("model.base_width", self.base_width.to_string()),
            ("model.depth", self.depth.to_string()),
            ("train.mode", self.mode.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.max_iter", self.max_iter.to_string()),
            ("train.batch_labeled", self.batch_labeled.to_string()),
            ("train.batch_unlabeled", self.batch_unlabeled.to_string()),
            ("train.base_lr", self.base_lr.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.tau", self.tau.to_string()),
            ("train.ema_alpha", self.ema_alpha.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.ohem", self.ohem.to_string()),
            ("ohem.keep_ratio", self.ohem_keep_ratio.to_string()),
            ("ohem.min_kept", self.ohem_min_kept.to_string()),
            ("lcr.task", self.lcr_task.to_string()),
            ("lcr.region", self.lcr_region.to_string()),
            ("mask.strategy", self.mask.strategy.to_string()),
            ("mask.patch_size", self.mask.patch_size.to_string()),
            ("mask.ratio", self.mask.ratio.to_string()),
            ("ms.sigma1", self.scales.sigma1.to_string()),
            ("ms.sigma2", self.scales.sigma2.to_string()),
            ("ms.average", self.averaging.to_string()),
            ("loss.lambda", self.weights.lambda.to_string()),
            ("loss.lambda1", self.weights.lambda1.to_string()),
            ("loss.lambda2", self.weights.lambda2.to_string()),
            ("aug.crop", self.aug.crop_size.to_string()),
            ("aug.scale_min", self.aug.scale_min.to_string()),
            ("aug.scale_max", self.aug.scale_max.to_string()),
            ("aug.flip_prob", self.aug.flip_prob.to_string()),
            ("aug.jitter_prob", self.aug.jitter_prob.to_string()),
            ("aug.jitter_strength", self.aug.jitter_strength.to_string()),
            ("aug.gray_prob", self.aug.gray_prob.to_string()),
            ("aug.blur_prob", self.aug.blur_prob.to_string()),
            ("aug.blur_sigma_min", self.aug.blur_sigma_min.to_string()),
            ("aug.blur_sigma_max", self.aug.blur_sigma_max.to_string()),
            ("aug.cutmix_prob", self.aug.cutmix_prob.to_string()),
            ("aug.cutmix_area_min", self.aug.cutmix_area_min.to_string()),
            ("aug.cutmix_area_max", self.aug.cutmix_area_max.to_string()),
            ("eval.every", self.eval_every.to_string()),
            ("eval.tol_frac", self.eval_tol_frac.to_string()),
            ("checkpoint.every", self.checkpoint_every.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Network configuration for a dataset with `num_classes` classes.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            num_classes,
            base_width: self.base_width,
            depth: self.depth,
            seed: self.seed,
            recon_head: self.uses_reconstruction(),
        }
    }

    pub fn uses_reconstruction(&self) -> bool {
        self.mode.components().lcr && self.lcr_task == LcrTask::Reconstruct
    }

    /// Checks ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.epochs == 0 && self.max_iter == 0 {
            return bad("either train.epochs or train.max_iter must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if self.ohem && !(self.ohem_keep_ratio > 0.0 && self.ohem_keep_ratio <= 1.0) {
            return bad(format!("ohem.keep_ratio {} outside (0, 1]", self.ohem_keep_ratio));
        }
        if !(self.eval_tol_frac >= 0.0) {
            return bad(format!("eval.tol_frac must be non-negative, got {}", self.eval_tol_frac));
        }
        let a = &self.aug;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) {
            return bad(format!("invalid scale range [{}, {}]", a.scale_min, a.scale_max));
        }
        if !(a.blur_sigma_min > 0.0 && a.blur_sigma_min <= a.blur_sigma_max) {
            return bad(format!(
                "invalid blur sigma range [{}, {}]",
                a.blur_sigma_min, a.blur_sigma_max
            ));
        }
        if !(a.cutmix_area_min > 0.0 && a.cutmix_area_min <= a.cutmix_area_max && a.cutmix_area_max <= 1.0) {
            return bad(format!(
                "invalid cutmix area range [{}, {}]",
                a.cutmix_area_min, a.cutmix_area_max
            ));
        }
        for (name, p) in [
            ("aug.flip_prob", a.flip_prob),
            ("aug.jitter_prob", a.jitter_prob),
            ("aug.gray_prob", a.gray_prob),
            ("aug.blur_prob", a.blur_prob),
            ("aug.cutmix_prob", a.cutmix_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        self.weights.validate()?;
        self.scales.validate()?;
        let model = self.model_config(2);
        model.validate()?;
        model.check_input(a.crop_size, a.crop_size)?;
        let c = self.mode.components();
        if c.lcr {
            self.mask.validate(a.crop_size, a.crop_size)?;
        }
        if c.multi_scale {
            let m = model.stride_multiple();
            if a.crop_size % m != 0 {
                return bad(format!("crop {} must be a multiple of {m}", a.crop_size));
            }
        }
        Ok(())
    }

    /// Iterations per run: `epochs * ceil(unlabeled / batch_unlabeled)` unless
    /// `max_iter` is set. Supervised-only runs count epochs over the labeled set.
    pub fn total_iterations(&self, labeled: usize, unlabeled: usize) -> usize {
        if self.max_iter > 0 {
            return self.max_iter;
        }
        let (n, b) = if self.mode == Mode::SupervisedOnly || unlabeled == 0 {
            (labeled, self.batch_labeled)
        } else {
            (unlabeled, self.batch_unlabeled)
        };
        self.epochs * n.div_ceil(b).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.tau, 0.9);
        assert_eq!(c.ema_alpha, 0.999);
        assert_eq!(c.base_lr, 0.001);
        assert_eq!((c.momentum, c.weight_decay), (0.9, 0.0005));
        assert_eq!((c.batch_labeled, c.batch_unlabeled), (8, 8));
        assert_eq!((c.scales.sigma1, c.scales.sigma2), (0.7, 1.5));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_text("train.mode = baseline_lcr # ablation\n\nmask.ratio=0.5\nlcr.region = unmasked_only\n")
            .unwrap();
        assert_eq!(c.mode, Mode::BaselineLcr);
        assert_eq!(c.mask.ratio, 0.5);
        let mut d = TrainConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        let mut c = TrainConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("train.tau", "high").is_err());
        assert!(c.apply_text("train.tau 0.5").is_err());
        c.set("train.tau", "1.5").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_components() {
        let full = Mode::Full.components();
        assert!(full.mean_teacher && full.weak_strong && full.selection && full.multi_scale && full.lcr);
        let sup = Mode::SupervisedOnly.components();
        assert!(!sup.mean_teacher && !sup.lcr && !sup.multi_scale);
        assert_eq!("baseline_ws".parse::<Mode>().unwrap(), Mode::Baseline);
    }

    #[test]
    fn iteration_count() {
        let c = TrainConfig::default();
        assert_eq!(c.total_iterations(20, 200), 10 * 25);
        let c = TrainConfig { max_iter: 7, ..TrainConfig::default() };
        assert_eq!(c.total_iterations(20, 200), 7);
    }
}
