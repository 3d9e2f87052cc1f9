//! Flat `key = value` run configuration.
//!
//! Every key, its default and its meaning lives in [`KEYS`]. Parsing collects
//! all problems before failing so a broken file is reported in one go.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coupling::MatchStrategy;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nnet::AdamConfig;
use crate::rng::hash_text;
use crate::scenes::SceneConfig;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                    format!("expected one of {}", names.join(", "))
                })
            }
        }
    };
}

named_enum!(Objective { Cfm => "cfm", Ddpm => "ddpm" });
named_enum!(PriorKind { Gauss => "gauss", Derived => "derived", Bucketed => "bucketed", Dependent => "dependent" });
named_enum!(SolverKind { Euler => "euler", Heun => "heun", Rk4 => "rk4", Dopri5 => "dopri5", Ddim => "ddim" });

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialisation, training and sampling"),
    ("data.seed", "0", "seed for scene generation (below 2^32)"),
    ("data.classes", "3", "number of object classes K"),
    ("data.channels", "3", "raster channels C"),
    ("data.size", "64", "raster height and width"),
    ("data.min_objects", "1", "fewest objects per scene"),
    ("data.max_objects", "4", "most objects per scene"),
    ("data.min_size", "0.15", "smallest object extent (fraction of the image)"),
    ("data.max_size", "0.45", "largest object extent"),
    ("data.noise_std", "0.05", "additive raster noise"),
    ("data.max_pair_iou", "0.5", "largest IoU allowed between two objects"),
    ("data.train_scenes", "2000", "training split size"),
    ("data.val_scenes", "200", "validation split size"),
    ("n_train", "64", "boxes per image during training (ground truth plus padding)"),
    ("n_stages", "2", "decoder stages"),
    ("model.pooled", "7", "RoI crop resolution"),
    ("model.hidden", "64", "object feature width"),
    ("model.ffn", "128", "feed-forward width"),
    ("model.time_dim", "32", "sinusoidal time embedding width"),
    ("model.roi_context", "1.0", "RoI crop size relative to the box"),
    ("model.global_pool", "0", "side of the coarse whole-image crop given to every box (0 disables)"),
    ("model.relative_offsets", "false", "scale predicted box offsets by the input box size"),
    ("objective", "cfm", "training objective: cfm or ddpm"),
    ("train_steps", "5000", "optimiser steps"),
    ("batch_size", "4", "scenes per optimiser step"),
    ("lr", "0.0005", "peak learning rate"),
    ("weight_decay", "0.0001", "decoupled weight decay"),
    ("warmup", "200", "linear warm-up steps"),
    ("clip_norm", "1.0", "global gradient norm cap (0 disables)"),
    ("lambda_cls", "2.0", "classification loss and cost weight"),
    ("lambda_l1", "5.0", "L1 box loss and cost weight"),
    ("lambda_giou", "2.0", "gIoU loss and cost weight"),
    ("top_k", "4", "predictions assigned per ground truth"),
    ("loss.ignore_unselected", "false", "drop unassigned predictions from the classification loss"),
    ("prior.kind", "gauss", "gauss, derived, bucketed or dependent"),
    ("prior.n_buckets", "3", "size buckets of the bucketed prior"),
    ("prior.hidden", "32", "hidden width of the dependent prior's statistics head"),
    ("match.strategy", "rand", "rand, hung-c, hung-g or hung-i"),
    ("solver.kind", "euler", "euler, heun, rk4, dopri5 or ddim"),
    ("solver.atol", "0.001", "DOPRI5 absolute tolerance"),
    ("solver.max_steps", "32", "DOPRI5 accepted-plus-rejected step cap"),
    ("steps", "1", "sampling steps S"),
    ("n_eval", "32", "boxes sampled per image at inference"),
    ("nms_iou", "0.6", "class-wise NMS IoU threshold"),
    ("renewal_threshold", "0.5", "boxes scoring below this are replaced between steps"),
    ("ensemble", "true", "merge detections across steps before NMS"),
    ("ddpm.timesteps", "1000", "diffusion timesteps T"),
    ("ddpm.scale", "2.0", "diffusion signal scale"),
    ("eval_every", "0", "steps between validation runs during training (0 disables)"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub data_classes: usize,
    pub data_channels: usize,
    pub data_size: usize,
    pub data_min_objects: usize,
    pub data_max_objects: usize,
    pub data_min_size: f64,
    pub data_max_size: f64,
    pub data_noise_std: f64,
    pub data_max_pair_iou: f64,
    pub data_train_scenes: usize,
    pub data_val_scenes: usize,
    pub n_train: usize,
    pub n_stages: usize,
    pub model_pooled: usize,
    pub model_hidden: usize,
    pub model_ffn: usize,
    pub model_time_dim: usize,
    pub model_roi_context: f64,
    pub model_global_pool: usize,
    pub model_relative_offsets: bool,
    pub objective: Objective,
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub top_k: usize,
    pub ignore_unselected: bool,
    pub prior_kind: PriorKind,
    pub prior_n_buckets: usize,
    pub prior_hidden: usize,
    pub match_strategy: MatchStrategy,
    pub solver_kind: SolverKind,
    pub solver_atol: f64,
    pub solver_max_steps: usize,
    pub steps: usize,
    pub n_eval: usize,
    pub nms_iou: f64,
    pub renewal_threshold: f64,
    pub ensemble: bool,
    pub ddpm_timesteps: usize,
    pub ddpm_scale: f64,
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            data_seed: 0,
            data_classes: 0,
            data_channels: 0,
            data_size: 0,
            data_min_objects: 0,
            data_max_objects: 0,
            data_min_size: 0.0,
            data_max_size: 0.0,
            data_noise_std: 0.0,
            data_max_pair_iou: 0.0,
            data_train_scenes: 0,
            data_val_scenes: 0,
            n_train: 0,
            n_stages: 0,
            model_pooled: 0,
            model_hidden: 0,
            model_ffn: 0,
            model_time_dim: 0,
            model_roi_context: 0.0,
            model_global_pool: 0,
            model_relative_offsets: false,
            objective: Objective::Cfm,
            train_steps: 0,
            batch_size: 0,
            lr: 0.0,
            weight_decay: 0.0,
            warmup: 0,
            clip_norm: 0.0,
            lambda_cls: 0.0,
            lambda_l1: 0.0,
            lambda_giou: 0.0,
            top_k: 0,
            ignore_unselected: false,
            prior_kind: PriorKind::Gauss,
            prior_n_buckets: 0,
            prior_hidden: 0,
            match_strategy: MatchStrategy::Rand,
            solver_kind: SolverKind::Euler,
            solver_atol: 0.0,
            solver_max_steps: 0,
            steps: 0,
            n_eval: 0,
            nms_iou: 0.0,
            renewal_threshold: 0.0,
            ensemble: false,
            ddpm_timesteps: 0,
            ddpm_scale: 0.0,
            eval_every: 0,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_match(key: &str, value: &str) -> std::result::Result<MatchStrategy, String> {
    value.parse::<MatchStrategy>().map_err(|_| format!("{key}: expected one of rand, hung-c, hung-g, hung-i"))
}

impl RunConfig {
    /// Assign one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.classes" => self.data_classes = parse(key, v)?,
            "data.channels" => self.data_channels = parse(key, v)?,
            "data.size" => self.data_size = parse(key, v)?,
            "data.min_objects" => self.data_min_objects = parse(key, v)?,
            "data.max_objects" => self.data_max_objects = parse(key, v)?,
            "data.min_size" => self.data_min_size = parse(key, v)?,
            "data.max_size" => self.data_max_size = parse(key, v)?,
            "data.noise_std" => self.data_noise_std = parse(key, v)?,
            "data.max_pair_iou" => self.data_max_pair_iou = parse(key, v)?,
            "data.train_scenes" => self.data_train_scenes = parse(key, v)?,
            "data.val_scenes" => self.data_val_scenes = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_stages" => self.n_stages = parse(key, v)?,
            "model.pooled" => self.model_pooled = parse(key, v)?,
            "model.hidden" => self.model_hidden = parse(key, v)?,
            "model.ffn" => self.model_ffn = parse(key, v)?,
            "model.time_dim" => self.model_time_dim = parse(key, v)?,
            "model.roi_context" => self.model_roi_context = parse(key, v)?,
            "model.global_pool" => self.model_global_pool = parse(key, v)?,
            "model.relative_offsets" => self.model_relative_offsets = parse(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "lambda_cls" => self.lambda_cls = parse(key, v)?,
            "lambda_l1" => self.lambda_l1 = parse(key, v)?,
            "lambda_giou" => self.lambda_giou = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "loss.ignore_unselected" => self.ignore_unselected = parse(key, v)?,
            "prior.kind" => self.prior_kind = parse(key, v)?,
            "prior.n_buckets" => self.prior_n_buckets = parse(key, v)?,
            "prior.hidden" => self.prior_hidden = parse(key, v)?,
            "match.strategy" => self.match_strategy = parse_match(key, v)?,
            "solver.kind" => self.solver_kind = parse(key, v)?,
            "solver.atol" => self.solver_atol = parse(key, v)?,
            "solver.max_steps" => self.solver_max_steps = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "n_eval" => self.n_eval = parse(key, v)?,
            "nms_iou" => self.nms_iou = parse(key, v)?,
            "renewal_threshold" => self.renewal_threshold = parse(key, v)?,
            "ensemble" => self.ensemble = parse(key, v)?,
            "ddpm.timesteps" => self.ddpm_timesteps = parse(key, v)?,
            "ddpm.scale" => self.ddpm_scale = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Current value of a key rendered as text.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.classes" => self.data_classes.to_string(),
            "data.channels" => self.data_channels.to_string(),
            "data.size" => self.data_size.to_string(),
            "data.min_objects" => self.data_min_objects.to_string(),
            "data.max_objects" => self.data_max_objects.to_string(),
            "data.min_size" => self.data_min_size.to_string(),
            "data.max_size" => self.data_max_size.to_string(),
            "data.noise_std" => self.data_noise_std.to_string(),
            "data.max_pair_iou" => self.data_max_pair_iou.to_string(),
            "data.train_scenes" => self.data_train_scenes.to_string(),
            "data.val_scenes" => self.data_val_scenes.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_stages" => self.n_stages.to_string(),
            "model.pooled" => self.model_pooled.to_string(),
            "model.hidden" => self.model_hidden.to_string(),
            "model.ffn" => self.model_ffn.to_string(),
            "model.time_dim" => self.model_time_dim.to_string(),
            "model.roi_context" => self.model_roi_context.to_string(),
            "model.global_pool" => self.model_global_pool.to_string(),
            "model.relative_offsets" => self.model_relative_offsets.to_string(),
            "objective" => self.objective.to_string(),
            "train_steps" => self.train_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup" => self.warmup.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "lambda_cls" => self.lambda_cls.to_string(),
            "lambda_l1" => self.lambda_l1.to_string(),
            "lambda_giou" => self.lambda_giou.to_string(),
            "top_k" => self.top_k.to_string(),
            "loss.ignore_unselected" => self.ignore_unselected.to_string(),
            "prior.kind" => self.prior_kind.to_string(),
            "prior.n_buckets" => self.prior_n_buckets.to_string(),
            "prior.hidden" => self.prior_hidden.to_string(),
            "match.strategy" => self.match_strategy.to_string(),
            "solver.kind" => self.solver_kind.to_string(),
            "solver.atol" => self.solver_atol.to_string(),
            "solver.max_steps" => self.solver_max_steps.to_string(),
            "steps" => self.steps.to_string(),
            "n_eval" => self.n_eval.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "renewal_threshold" => self.renewal_threshold.to_string(),
            "ensemble" => self.ensemble.to_string(),
            "ddpm.timesteps" => self.ddpm_timesteps.to_string(),
            "ddpm.scale" => self.ddpm_scale.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    /// Parse config text on top of the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errs.push(format!("line {}: expected key = value", i + 1));
                continue;
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                errs.push(format!("line {}: duplicate key {key:?}", i + 1));
                continue;
            }
            if let Err(e) = cfg.set(key, value) {
                errs.push(format!("line {}: {e}", i + 1));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` overrides, then validate.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut errs = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(e);
                    }
                }
                None => errs.push(format!("override {o:?} is not key=value")),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.data_seed < 1 << 32, "data.seed must be below 2^32");
        check(self.data_classes >= 2, "data.classes must be at least 2");
        check(self.n_train >= 1, "n_train must be at least 1");
        check(self.n_train >= self.data_max_objects, "n_train must be at least data.max_objects");
        check(self.train_steps >= 1, "train_steps must be at least 1");
        check(self.batch_size >= 1, "batch_size must be at least 1");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive");
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay must be finite and non-negative");
        check(self.clip_norm >= 0.0 && self.clip_norm.is_finite(), "clip_norm must be finite and non-negative");
        check(self.prior_n_buckets >= 1, "prior.n_buckets must be at least 1");
        check(self.prior_hidden >= 1, "prior.hidden must be at least 1");
        check(self.solver_atol > 0.0 && self.solver_atol.is_finite(), "solver.atol must be positive");
        check(self.solver_max_steps >= 1, "solver.max_steps must be at least 1");
        check(self.steps >= 1, "steps must be at least 1");
        check(self.n_eval >= 1, "n_eval must be at least 1");
        check((0.0..=1.0).contains(&self.nms_iou), "nms_iou must lie in [0, 1]");
        check((0.0..=1.0).contains(&self.renewal_threshold), "renewal_threshold must lie in [0, 1]");
        check(self.ddpm_timesteps >= 2, "ddpm.timesteps must be at least 2");
        check(self.ddpm_scale > 0.0 && self.ddpm_scale.is_finite(), "ddpm.scale must be positive");
        check(
            (self.solver_kind == SolverKind::Ddim) == (self.objective == Objective::Ddpm),
            "solver.kind = ddim goes with objective = ddpm and only with it",
        );
        if let Err(Error::Config(e)) = self.scene_config().validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.decoder_config().validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.loss_weights().validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Canonical text: every key in table order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("table key")))
            .collect()
    }

    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }

    /// First scene id of the training split; the validation split starts
    /// half-way through the same 2^32 block.
    pub fn train_first_id(&self) -> u64 {
        self.data_seed << 32
    }

    pub fn val_first_id(&self) -> u64 {
        (self.data_seed << 32) | (1 << 31)
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            channels: self.data_channels,
            height: self.data_size,
            width: self.data_size,
            n_classes: self.data_classes,
            min_objects: self.data_min_objects,
            max_objects: self.data_max_objects,
            min_size: self.data_min_size,
            max_size: self.data_max_size,
            noise_std: self.data_noise_std,
            max_pair_iou: self.data_max_pair_iou,
            ..SceneConfig::default()
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            n_stages: self.n_stages,
            pooled: self.model_pooled,
            hidden: self.model_hidden,
            ffn: self.model_ffn,
            n_classes: self.data_classes,
            in_channels: self.data_channels,
            time_dim: self.model_time_dim,
            roi_context: self.model_roi_context,
            global_pool: self.model_global_pool,
            relative_offsets: self.model_relative_offsets,
            ..DecoderConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_l1: self.lambda_l1,
            lambda_giou: self.lambda_giou,
            top_k: self.top_k,
            ignore_unselected: self.ignore_unselected,
            ..LossWeights::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    /// Learning rate at `step` (0-based): linear warm-up, then a single
    /// decay by 10x after two thirds of training.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup { (step + 1) as f64 / self.warmup as f64 } else { 1.0 };
        let decay = if step * 3 >= self.train_steps * 2 { 0.1 } else { 1.0 };
        self.lr * warm * decay
    }
}

/// Markdown table of every key, used by the CLI help and the README.
pub fn defaults_table() -> String {
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (k, d, m) in KEYS {
        out.push_str(&format!("| `{k}` | `{d}` | {m} |\n"));
    }
    out
}
