use crate::error::{Error, Result};

use super::schedule::{Branch, Routing};

/// One conv block of an encoder: a 3×3 convolution (stride 1) or a 4×4
/// convolution (stride 2), both with padding 1, followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub out_channels: usize,
    pub stride: usize,
}

impl Stage {
    pub const fn new(out_channels: usize, stride: usize) -> Self {
        Self { out_channels, stride }
    }

    pub fn kernel(&self) -> usize {
        if self.stride == 2 {
            4
        } else {
            3
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub branch: Branch,
    pub stages: Vec<Stage>,
}

impl EncoderConfig {
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("{:?} encoder has no stages", self.branch)));
        }
        for s in &self.stages {
            if s.out_channels == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(Error::Config(format!(
                    "{:?} encoder stage {s:?}: channels must be positive and stride 1 or 2",
                    self.branch
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Propagation {
    /// Self-fill both propagation slots with the current features.
    None,
    /// Inter-frame local attention.
    #[default]
    Local,
    /// Attention over the whole feature map.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Segmentation { num_classes: usize },
    Depth,
}

impl TaskKind {
    pub fn out_channels(&self) -> usize {
        match self {
            TaskKind::Segmentation { num_classes } => *num_classes,
            TaskKind::Depth => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Segmentation { .. } => "seg",
            TaskKind::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub slow: EncoderConfig,
    pub fast: EncoderConfig,
    pub se_reduction: usize,
    pub window: usize,
    pub propagation: Propagation,
    pub routing: Routing,
    /// Widths of the 3×3 and 1×1 decoder convolutions before the head.
    pub decoder_widths: (usize, usize),
    pub tasks: Vec<TaskKind>,
    pub global_cap: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            slow: EncoderConfig {
                branch: Branch::Slow,
                stages: vec![
                    Stage::new(16, 2),
                    Stage::new(32, 1),
                    Stage::new(32, 2),
                    Stage::new(32, 1),
                    Stage::new(32, 1),
                    Stage::new(16, 1),
                ],
            },
            fast: EncoderConfig {
                branch: Branch::Fast,
                stages: vec![Stage::new(8, 2), Stage::new(16, 2)],
            },
            se_reduction: 4,
            window: crate::attention::DEFAULT_WINDOW,
            propagation: Propagation::Local,
            routing: Routing::PreviousFrame,
            decoder_widths: (32, 16),
            tasks: vec![TaskKind::Segmentation { num_classes: 4 }, TaskKind::Depth],
            global_cap: crate::attention::DEFAULT_GLOBAL_CAP,
        }
    }
}

impl NetworkConfig {
    pub fn feature_channels(&self) -> usize {
        self.slow.feature_channels()
    }

    pub fn total_stride(&self) -> usize {
        self.slow.total_stride()
    }

    pub fn se_hidden(&self) -> usize {
        (self.feature_channels() / self.se_reduction).max(1)
    }

    pub fn encoder(&self, branch: Branch) -> &EncoderConfig {
        match branch {
            Branch::Slow => &self.slow,
            Branch::Fast => &self.fast,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.slow.validate()?;
        self.fast.validate()?;
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.slow.feature_channels() != self.fast.feature_channels() {
            return Err(Error::Config(format!(
                "slow and fast encoders must end at the same width ({} vs {})",
                self.slow.feature_channels(),
                self.fast.feature_channels()
            )));
        }
        if self.slow.total_stride() != self.fast.total_stride() {
            return Err(Error::Config(format!(
                "slow and fast encoders must end at the same resolution (stride {} vs {})",
                self.slow.total_stride(),
                self.fast.total_stride()
            )));
        }
        let slow_width: usize = self.slow.stages.iter().map(|s| s.out_channels).sum();
        let fast_width: usize = self.fast.stages.iter().map(|s| s.out_channels).sum();
        if self.slow.stages.len() < self.fast.stages.len()
            || (self.slow.stages.len() == self.fast.stages.len() && slow_width <= fast_width)
        {
            return Err(Error::Config("the slow encoder must be deeper or wider than the fast one".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("SE reduction must be positive".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd and positive, got {}", self.window)));
        }
        if self.decoder_widths.0 == 0 || self.decoder_widths.1 == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for t in &self.tasks {
            if let TaskKind::Segmentation { num_classes } = t {
                if *num_classes < 2 {
                    return Err(Error::Config("segmentation needs at least two classes".into()));
                }
            }
        }
        Ok(())
    }
}
