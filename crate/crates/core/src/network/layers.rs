use rand::Rng;

use super::config::{EncoderConfig, NetworkConfig, Propagation, TaskKind};
use crate::attention::{self, IlaConfig, IlaModule};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Conv2d, ParamStore};

/// A stack of conv + ReLU blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub convs: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let mut c_in = in_channels;
        let convs = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let conv = Conv2d::new(store, &format!("{prefix}.conv{i}"), c_in, s.out_channels, s.kernel(), s.stride, 1, true, rng);
                c_in = s.out_channels;
                conv
            })
            .collect();
        Self { config: config.clone(), convs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, store, h)?;
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// Squeeze-and-excitation: global pooling, a bottleneck of two 1×1
/// convolutions and a sigmoid gate that rescales each channel.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            reduce: Conv2d::new(store, &format!("{prefix}.reduce"), channels, hidden, 1, 1, 0, true, rng),
            expand: Conv2d::new(store, &format!("{prefix}.expand"), hidden, channels, 1, 1, 0, true, rng),
        }
    }

    /// Per-channel gate in (0, 1), shape `[B, C, 1, 1]`.
    pub fn gate(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.global_avg_pool(x)?;
        let s = self.reduce.forward(g, store, s)?;
        let s = g.relu(s);
        let s = self.expand.forward(g, store, s)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gate = self.gate(g, store, x)?;
        g.channel_scale(x, gate)
    }
}

/// One propagation edge (key→current or previous→current) of a task.
#[derive(Clone, Debug)]
pub struct IlaEdge {
    pub h: Conv2d,
    pub config: IlaConfig,
}

impl IlaEdge {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: IlaConfig, rng: &mut R) -> Self {
        let c = config.channels;
        Self {
            h: Conv2d::new(store, &format!("{prefix}.h"), c, c, 3, 1, 1, true, rng),
            config,
        }
    }

    /// Propagates `source` onto `current` with local or global attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: Var,
        current: Var,
        mode: Propagation,
    ) -> Result<Var> {
        let w = g.param(store, self.h.weight);
        let b = self.h.bias.map(|b| g.param(store, b));
        match mode {
            Propagation::None => Ok(current),
            Propagation::Local => attention::ila_vars(g, w, b, source, current, &self.config),
            Propagation::Global => attention::global_vars(g, w, b, source, current, &self.config),
        }
    }

    pub fn module(&self, store: &ParamStore) -> Result<IlaModule> {
        IlaModule::new(self.h.snapshot(store), self.config.clone())
    }
}

/// Everything task-specific: SE block, two propagation edges, decoder.
#[derive(Clone, Debug)]
pub struct TaskBranch {
    pub task_id: usize,
    pub kind: TaskKind,
    pub se: SeBlock,
    pub ila_key_edge: IlaEdge,
    pub ila_prev_edge: IlaEdge,
    /// 3×3 fuse convolution, then a 1×1; the head is the third convolution.
    pub decode: [Conv2d; 2],
    pub head: Conv2d,
}

impl TaskBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        task_id: usize,
        kind: TaskKind,
        config: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.feature_channels();
        let prefix = format!("task{task_id}.{}", kind.name());
        let mut ila_cfg = IlaConfig::new(c, config.window)?;
        ila_cfg.global_cap = config.global_cap;
        let (d1, d2) = config.decoder_widths;
        Ok(Self {
            task_id,
            kind,
            se: SeBlock::new(store, &format!("{prefix}.se"), c, config.se_hidden(), rng),
            ila_key_edge: IlaEdge::new(store, &format!("{prefix}.ila_key"), ila_cfg.clone(), rng),
            ila_prev_edge: IlaEdge::new(store, &format!("{prefix}.ila_prev"), ila_cfg, rng),
            decode: [
                Conv2d::new(store, &format!("{prefix}.dec0"), 3 * c, d1, 3, 1, 1, true, rng),
                Conv2d::new(store, &format!("{prefix}.dec1"), d1, d2, 1, 1, 0, true, rng),
            ],
            head: Conv2d::new(store, &format!("{prefix}.head"), d2, kind.out_channels(), 1, 1, 0, true, rng),
        })
    }

    /// Decodes `[current, propagated_key, propagated_prev]` into the task
    /// output at feature resolution.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, current: Var, key: Var, prev: Var) -> Result<Var> {
        let x = g.concat_channels(&[current, key, prev])?;
        let x = self.decode[0].forward(g, store, x)?;
        let x = g.relu(x);
        let x = self.decode[1].forward(g, store, x)?;
        let x = g.relu(x);
        self.head.forward(g, store, x)
    }
}
