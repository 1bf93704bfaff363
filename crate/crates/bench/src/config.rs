//! Experiment configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, blank lines are
//! ignored. Every key is optional and falls back to [`ExperimentConfig::default`];
//! unknown or repeated keys are errors. Stage lists are written as
//! `channels/stride` pairs separated by commas, e.g. `8/2, 16/2`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use vidprop_core::network::{EncoderConfig, NetworkConfig, Propagation, Routing, Stage, TaskKind};
use vidprop_core::network::Branch;
use vidprop_core::training::{AdamConfig, LossConfig};

use crate::data::SyntheticParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,

    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub frames_per_sequence: usize,
    pub max_speed: usize,
    pub train_sequences: usize,
    pub eval_sequences: usize,

    pub steps: usize,
    pub batch_size: usize,
    /// Frames per training clip; each clip starts on a keyframe.
    pub clip_frames: usize,
    pub log_every: usize,

    pub k: usize,
    pub window: usize,
    pub propagation: Propagation,
    pub routing: Routing,
    pub slow_stages: Vec<Stage>,
    pub fast_stages: Vec<Stage>,
    pub se_reduction: usize,
    pub decoder_widths: (usize, usize),
    pub global_cap: usize,

    pub alpha: f64,
    pub beta: f64,
    pub grl_lambda: f64,
    pub seg_weight: f64,
    pub depth_weight: f64,
    pub disc_hidden: usize,

    pub lr: f64,
    /// Learning rate of the discriminator's optimizer.
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            height: 64,
            width: 96,
            num_objects: 3,
            frames_per_sequence: 8,
            max_speed: 4,
            train_sequences: 32,
            eval_sequences: 8,
            steps: 300,
            batch_size: 1,
            clip_frames: 5,
            log_every: 10,
            k: 5,
            window: net.window,
            propagation: net.propagation,
            routing: net.routing,
            slow_stages: net.slow.stages,
            fast_stages: net.fast.stages,
            se_reduction: net.se_reduction,
            decoder_widths: net.decoder_widths,
            global_cap: net.global_cap,
            alpha: 1.0,
            beta: 1.0,
            grl_lambda: 1.0,
            seg_weight: 1.0,
            depth_weight: 1.0,
            disc_hidden: 16,
            lr: 1e-3,
            disc_lr: 1e-4,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_stages(v: &str) -> Result<Vec<Stage>, String> {
    v.split(',')
        .map(|item| {
            let (c, s) = item.trim().split_once('/').ok_or_else(|| format!("stage `{}` is not channels/stride", item.trim()))?;
            Ok(Stage::new(parse_num(c.trim())?, parse_num(s.trim())?))
        })
        .collect()
}

fn format_stages(stages: &[Stage]) -> String {
    stages.iter().map(|s| format!("{}/{}", s.out_channels, s.stride)).collect::<Vec<_>>().join(", ")
}

pub fn parse_propagation(v: &str) -> Result<Propagation, String> {
    match v {
        "none" => Ok(Propagation::None),
        "local" => Ok(Propagation::Local),
        "global" => Ok(Propagation::Global),
        other => Err(format!("expected none, local or global, got `{other}`")),
    }
}

pub fn propagation_name(p: Propagation) -> &'static str {
    match p {
        Propagation::None => "none",
        Propagation::Local => "local",
        Propagation::Global => "global",
    }
}

fn parse_routing(v: &str) -> Result<Routing, String> {
    match v {
        "previous_frame" => Ok(Routing::PreviousFrame),
        "last_non_keyframe" => Ok(Routing::LastNonKeyframe),
        other => Err(format!("expected previous_frame or last_non_keyframe, got `{other}`")),
    }
}

fn routing_name(r: Routing) -> &'static str {
    match r {
        Routing::PreviousFrame => "previous_frame",
        Routing::LastNonKeyframe => "last_non_keyframe",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line, msg: "empty key or value".into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey { line, key: key.into() },
                SetError::Value(msg) => ConfigError::Value { line, key: key.into(), msg },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value, as in a config file line.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        let e = SetError::Value;
        match key {
            "seed" => self.seed = parse_num(v).map_err(e)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "height" => self.height = parse_num(v).map_err(e)?,
            "width" => self.width = parse_num(v).map_err(e)?,
            "num_objects" => self.num_objects = parse_num(v).map_err(e)?,
            "frames_per_sequence" => self.frames_per_sequence = parse_num(v).map_err(e)?,
            "max_speed" => self.max_speed = parse_num(v).map_err(e)?,
            "train_sequences" => self.train_sequences = parse_num(v).map_err(e)?,
            "eval_sequences" => self.eval_sequences = parse_num(v).map_err(e)?,
            "steps" => self.steps = parse_num(v).map_err(e)?,
            "batch_size" => self.batch_size = parse_num(v).map_err(e)?,
            "clip_frames" => self.clip_frames = parse_num(v).map_err(e)?,
            "log_every" => self.log_every = parse_num(v).map_err(e)?,
            "k" => self.k = parse_num(v).map_err(e)?,
            "window" => self.window = parse_num(v).map_err(e)?,
            "propagation" => self.propagation = parse_propagation(v).map_err(e)?,
            "routing" => self.routing = parse_routing(v).map_err(e)?,
            "slow_stages" => self.slow_stages = parse_stages(v).map_err(e)?,
            "fast_stages" => self.fast_stages = parse_stages(v).map_err(e)?,
            "se_reduction" => self.se_reduction = parse_num(v).map_err(e)?,
            "decoder_widths" => {
                let (a, b) = v.split_once(',').ok_or_else(|| e("expected two comma-separated widths".into()))?;
                self.decoder_widths = (parse_num(a.trim()).map_err(e)?, parse_num(b.trim()).map_err(e)?);
            }
            "global_cap" => self.global_cap = parse_num(v).map_err(e)?,
            "alpha" => self.alpha = parse_num(v).map_err(e)?,
            "beta" => self.beta = parse_num(v).map_err(e)?,
            "grl_lambda" => self.grl_lambda = parse_num(v).map_err(e)?,
            "seg_weight" => self.seg_weight = parse_num(v).map_err(e)?,
            "depth_weight" => self.depth_weight = parse_num(v).map_err(e)?,
            "disc_hidden" => self.disc_hidden = parse_num(v).map_err(e)?,
            "lr" => self.lr = parse_num(v).map_err(e)?,
            "disc_lr" => self.disc_lr = parse_num(v).map_err(e)?,
            "adam_beta1" => self.adam_beta1 = parse_num(v).map_err(e)?,
            "adam_beta2" => self.adam_beta2 = parse_num(v).map_err(e)?,
            "adam_eps" => self.adam_eps = parse_num(v).map_err(e)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("num_objects", self.num_objects.to_string());
        kv("frames_per_sequence", self.frames_per_sequence.to_string());
        kv("max_speed", self.max_speed.to_string());
        kv("train_sequences", self.train_sequences.to_string());
        kv("eval_sequences", self.eval_sequences.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("clip_frames", self.clip_frames.to_string());
        kv("log_every", self.log_every.to_string());
        kv("k", self.k.to_string());
        kv("window", self.window.to_string());
        kv("propagation", propagation_name(self.propagation).into());
        kv("routing", routing_name(self.routing).into());
        kv("slow_stages", format_stages(&self.slow_stages));
        kv("fast_stages", format_stages(&self.fast_stages));
        kv("se_reduction", self.se_reduction.to_string());
        kv("decoder_widths", format!("{}, {}", self.decoder_widths.0, self.decoder_widths.1));
        kv("global_cap", self.global_cap.to_string());
        kv("alpha", format!("{:?}", self.alpha));
        kv("beta", format!("{:?}", self.beta));
        kv("grl_lambda", format!("{:?}", self.grl_lambda));
        kv("seg_weight", format!("{:?}", self.seg_weight));
        kv("depth_weight", format!("{:?}", self.depth_weight));
        kv("disc_hidden", self.disc_hidden.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("disc_lr", format!("{:?}", self.disc_lr));
        kv("adam_beta1", format!("{:?}", self.adam_beta1));
        kv("adam_beta2", format!("{:?}", self.adam_beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        s
    }

    pub fn data_params(&self) -> SyntheticParams {
        SyntheticParams {
            height: self.height,
            width: self.width,
            num_objects: self.num_objects,
            num_frames: self.frames_per_sequence,
            max_speed: self.max_speed,
            window: self.window,
            feature_stride: self.slow_stages.iter().map(|s| s.stride).product(),
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            slow: EncoderConfig { branch: Branch::Slow, stages: self.slow_stages.clone() },
            fast: EncoderConfig { branch: Branch::Fast, stages: self.fast_stages.clone() },
            se_reduction: self.se_reduction,
            window: self.window,
            propagation: self.propagation,
            routing: self.routing,
            decoder_widths: self.decoder_widths,
            tasks: vec![TaskKind::Segmentation { num_classes: self.num_objects + 1 }, TaskKind::Depth],
            global_cap: self.global_cap,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            task_weights: vec![self.seg_weight, self.depth_weight],
            grl_lambda: self.grl_lambda,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn disc_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.disc_lr, ..self.adam() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.network().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adam().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.disc_adam().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let stride = self.network().total_stride();
        if self.height % stride != 0 || self.width % stride != 0 {
            return inv(format!("height and width must be multiples of the feature stride {stride}"));
        }
        if self.k == 0 {
            return inv("k must be at least 1".into());
        }
        if self.clip_frames == 0 || self.clip_frames > self.frames_per_sequence {
            return inv(format!("clip_frames must be in 1..={}", self.frames_per_sequence));
        }
        if self.frames_per_sequence < self.k {
            return inv(format!("frames_per_sequence must be at least k = {} for offset evaluation", self.k));
        }
        if self.train_sequences == 0 || self.eval_sequences == 0 {
            return inv("train_sequences and eval_sequences must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > self.train_sequences {
            return inv(format!("batch_size must be in 1..={}", self.train_sequences));
        }
        if self.log_every == 0 {
            return inv("log_every must be positive".into());
        }
        if self.disc_hidden == 0 {
            return inv("disc_hidden must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, PartialEq)]
pub enum SetError {
    Unknown,
    Value(String),
}
