use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{NetworkConfig, Propagation};
use super::layers::{Encoder, TaskBranch};
use super::schedule::{build_schedule_routed, Branch, ScheduleEntry, ScheduleMode};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Slow/fast multi-task video network. All weights live in `store`.
#[derive(Clone, Debug)]
pub struct SlowFastNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub slow: Encoder,
    pub fast: Encoder,
    pub branches: Vec<TaskBranch>,
}

/// Per-task features cached for one processed frame.
#[derive(Clone, Debug)]
pub struct CachedFrame {
    pub frame_index: usize,
    pub features: Vec<Var>,
}

/// Features of earlier frames available for propagation. Caches hold
/// post-SE task features and are only ever written after a frame is done.
#[derive(Clone, Debug, Default)]
pub struct PropagationState {
    pub last_keyframe: Option<CachedFrame>,
    pub last_frame: Option<CachedFrame>,
    pub last_non_keyframe: Option<CachedFrame>,
}

impl PropagationState {
    pub fn new() -> Self {
        Self::default()
    }

    fn lookup(&self, frame_index: usize) -> Option<&CachedFrame> {
        [&self.last_keyframe, &self.last_frame, &self.last_non_keyframe]
            .into_iter()
            .flatten()
            .find(|c| c.frame_index == frame_index)
    }

    fn update(&mut self, entry: &ScheduleEntry, features: Vec<Var>) {
        let cached = CachedFrame { frame_index: entry.frame_index, features };
        if entry.is_keyframe() {
            self.last_keyframe = Some(cached.clone());
        } else {
            self.last_non_keyframe = Some(cached.clone());
        }
        self.last_frame = Some(cached);
    }

    /// Copies every cached value from `old` into `new` as constants, so a
    /// long sequence can be processed one graph per frame.
    pub fn rebase(&self, old: &Graph, new: &mut Graph) -> Self {
        let mut moved = std::collections::HashMap::new();
        let mut copy = |c: &Option<CachedFrame>| {
            c.as_ref().map(|c| CachedFrame {
                frame_index: c.frame_index,
                features: c
                    .features
                    .iter()
                    .map(|&v| *moved.entry(v).or_insert_with(|| new.constant(old.value(v).clone())))
                    .collect(),
            })
        };
        Self {
            last_keyframe: copy(&self.last_keyframe),
            last_frame: copy(&self.last_frame),
            last_non_keyframe: copy(&self.last_non_keyframe),
        }
    }
}

/// Graph handles produced by one frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// Per-task predictions at input resolution.
    pub predictions: Vec<Var>,
    /// Encoder output (slow or fast, per the schedule).
    pub encoder_features: Var,
    /// Per-task SE outputs.
    pub task_features: Vec<Var>,
    /// Per-task decoder inputs `[current, key, prev]` concatenated.
    pub decoder_inputs: Vec<Var>,
}

impl SlowFastNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slow = Encoder::new(&mut store, "slow", config.in_channels, &config.slow, &mut rng);
        let fast = Encoder::new(&mut store, "fast", config.in_channels, &config.fast, &mut rng);
        let branches = config
            .tasks
            .iter()
            .enumerate()
            .map(|(i, &kind)| TaskBranch::new(&mut store, i, kind, &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, store, slow, fast, branches })
    }

    pub fn encoder(&self, branch: Branch) -> &Encoder {
        match branch {
            Branch::Slow => &self.slow,
            Branch::Fast => &self.fast,
        }
    }

    fn check_frame(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.total_stride();
        match shape {
            &[_, c, h, w] if c == self.config.in_channels && h % s == 0 && w % s == 0 && h >= s && w >= s => Ok(()),
            other => Err(Error::Shape(format!(
                "frame must be [B, {}, H, W] with H and W multiples of {s}; got {other:?}",
                self.config.in_channels
            ))),
        }
    }

    /// Runs one encoder on the graph.
    pub fn encode_var(&self, g: &mut Graph, frame: Var, branch: Branch) -> Result<Var> {
        self.encode_var_with(&self.store, g, frame, branch)
    }

    /// [`Self::encode_var`] with weights taken from `store`, which must
    /// have this network's parameter layout (e.g. a perturbed copy).
    pub fn encode_var_with(&self, store: &ParamStore, g: &mut Graph, frame: Var, branch: Branch) -> Result<Var> {
        self.check_frame(g.shape(frame))?;
        self.encoder(branch).forward(g, store, frame)
    }

    pub fn encode(&self, frame: &Tensor, branch: Branch) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(frame.clone());
        let y = self.encode_var(&mut g, x, branch)?;
        Ok(g.value(y).clone())
    }

    /// Encodes, applies per-task SE, propagates from the cached sources
    /// named by `entry` (self-filling missing ones), decodes, and updates
    /// `state`.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        frame: Var,
        entry: &ScheduleEntry,
        state: &mut PropagationState,
    ) -> Result<FrameOutput> {
        self.forward_frame_with(&self.store, g, frame, entry, state)
    }

    pub fn forward_frame_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        frame: Var,
        entry: &ScheduleEntry,
        state: &mut PropagationState,
    ) -> Result<FrameOutput> {
        let source = |idx: Option<usize>, what: &str| -> Result<Option<&CachedFrame>> {
            match idx {
                None => Ok(None),
                Some(i) if i >= entry.frame_index => Err(Error::State(format!(
                    "frame {} names a future {what} source {i}",
                    entry.frame_index
                ))),
                Some(i) => state.lookup(i).map(Some).ok_or_else(|| {
                    Error::State(format!(
                        "frame {} needs cached {what} features of frame {i}, which are not in the state",
                        entry.frame_index
                    ))
                }),
            }
        };
        let key_src = source(entry.keyframe_source, "keyframe")?.map(|c| c.features.clone());
        let prev_src = source(entry.previous_source, "previous")?.map(|c| c.features.clone());

        let encoded = self.encode_var_with(store, g, frame, entry.branch)?;
        let mode = self.config.propagation;
        let upsample = self.config.total_stride();
        let mut predictions = Vec::with_capacity(self.branches.len());
        let mut task_features = Vec::with_capacity(self.branches.len());
        let mut decoder_inputs = Vec::with_capacity(self.branches.len());
        for (m, branch) in self.branches.iter().enumerate() {
            let current = branch.se.forward(g, store, encoded)?;
            let (key, prev) = if mode == Propagation::None {
                (current, current)
            } else {
                let key = match &key_src {
                    Some(f) => branch.ila_key_edge.forward(g, store, f[m], current, mode)?,
                    None => current,
                };
                let prev = match &prev_src {
                    Some(f) => branch.ila_prev_edge.forward(g, store, f[m], current, mode)?,
                    None => current,
                };
                (key, prev)
            };
            let y = branch.decode(g, store, current, key, prev)?;
            let y = g.upsample_nearest(y, upsample)?;
            decoder_inputs.push(g.concat_channels(&[current, key, prev])?);
            predictions.push(y);
            task_features.push(current);
        }
        state.update(entry, task_features.clone());
        Ok(FrameOutput { predictions, encoder_features: encoded, task_features, decoder_inputs })
    }

    /// Runs a schedule over `frames` inside one graph (for training).
    pub fn forward_clip(&self, g: &mut Graph, frames: &[Var], schedule: &[ScheduleEntry]) -> Result<Vec<FrameOutput>> {
        self.forward_clip_with(&self.store, g, frames, schedule)
    }

    pub fn forward_clip_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        frames: &[Var],
        schedule: &[ScheduleEntry],
    ) -> Result<Vec<FrameOutput>> {
        if frames.len() != schedule.len() {
            return Err(Error::State(format!("{} frames for a {}-entry schedule", frames.len(), schedule.len())));
        }
        let mut state = PropagationState::new();
        frames
            .iter()
            .zip(schedule)
            .map(|(&f, e)| self.forward_frame_with(store, g, f, e, &mut state))
            .collect()
    }

    /// Per-frame, per-task predictions under a periodic schedule with
    /// keyframe interval `k`. Each frame gets its own graph; only cached
    /// features cross frames.
    pub fn forward_sequence(&self, frames: &[Tensor], k: usize) -> Result<Vec<Vec<Tensor>>> {
        let schedule = build_schedule_routed(frames.len(), k, ScheduleMode::Periodic, self.config.routing)?;
        self.run_schedule(frames, &schedule)
    }

    pub fn run_schedule(&self, frames: &[Tensor], schedule: &[ScheduleEntry]) -> Result<Vec<Vec<Tensor>>> {
        if frames.is_empty() {
            return Err(Error::Config("empty frame sequence".into()));
        }
        if frames.len() != schedule.len() {
            return Err(Error::State(format!("{} frames for a {}-entry schedule", frames.len(), schedule.len())));
        }
        let shape = frames[0].shape();
        let mut g = Graph::new();
        let mut state = PropagationState::new();
        let mut out = Vec::with_capacity(frames.len());
        for (frame, entry) in frames.iter().zip(schedule) {
            if frame.shape() != shape {
                return Err(Error::Shape(format!("frame {} has shape {:?}, expected {shape:?}", entry.frame_index, frame.shape())));
            }
            let mut next = Graph::new();
            state = state.rebase(&g, &mut next);
            g = next;
            let x = g.constant(frame.clone());
            let o = self.forward_frame(&mut g, x, entry, &mut state)?;
            out.push(o.predictions.iter().map(|&p| g.value(p).clone()).collect());
        }
        Ok(out)
    }

    /// Post-SE task features for the last frame of `frames` under `schedule`.
    pub fn task_features(&self, frames: &[Tensor], schedule: &[ScheduleEntry]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let outs = self.forward_clip(&mut g, &vars, schedule)?;
        let last = outs.last().ok_or_else(|| Error::Config("empty frame sequence".into()))?;
        Ok(last.task_features.iter().map(|&v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_schedule, eval_offset_averaged, TaskKind};
    use rand::SeedableRng;

    fn tiny_net(seed: u64) -> SlowFastNet {
        SlowFastNet::new(NetworkConfig::default(), seed).unwrap()
    }

    fn frames(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn slow_and_fast_shapes_match() {
        let net = tiny_net(1);
        let f = &frames(1, 2)[0];
        let s = net.encode(f, Branch::Slow).unwrap();
        let q = net.encode(f, Branch::Fast).unwrap();
        assert_eq!(s.shape(), &[1, 16, 4, 4]);
        assert_eq!(s.shape(), q.shape());
        assert!(net.encode(&Tensor::zeros(&[1, 3, 15, 16]), Branch::Slow).is_err());
        assert!(net.encode(&Tensor::zeros(&[1, 2, 16, 16]), Branch::Slow).is_err());
    }

    #[test]
    fn boot_frame_self_fills() {
        let net = tiny_net(3);
        let mut g = Graph::new();
        let x = g.constant(frames(1, 4).remove(0));
        let entry = build_schedule(1, 5, ScheduleMode::Periodic).unwrap()[0];
        let mut state = PropagationState::new();
        let out = net.forward_frame(&mut g, x, &entry, &mut state).unwrap();
        assert_eq!(g.shape(out.predictions[0]), &[1, 4, 16, 16]);
        assert_eq!(g.shape(out.predictions[1]), &[1, 1, 16, 16]);
        for (m, &d) in out.decoder_inputs.iter().enumerate() {
            assert_eq!(g.shape(d)[1], 48);
            let v = g.value(d).data();
            let cur = g.value(out.task_features[m]).data();
            // [cur, cur, cur] per batch element
            assert_eq!(&v[..cur.len()], cur);
            assert_eq!(&v[cur.len()..2 * cur.len()], cur);
        }
        assert!(out.predictions.iter().all(|&p| g.value(p).all_finite()));
        assert_eq!(state.last_keyframe.as_ref().unwrap().frame_index, 0);
    }

    #[test]
    fn missing_cache_is_an_error() {
        let net = tiny_net(5);
        let mut g = Graph::new();
        let x = g.constant(frames(1, 6).remove(0));
        let entry = build_schedule(2, 5, ScheduleMode::Periodic).unwrap()[1];
        assert!(matches!(
            net.forward_frame(&mut g, x, &entry, &mut PropagationState::new()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn single_frame_sequence_matches_forward_frame() {
        let net = tiny_net(7);
        let f = frames(1, 8);
        let seq = net.forward_sequence(&f, 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(f[0].clone());
        let entry = build_schedule(1, 5, ScheduleMode::Periodic).unwrap()[0];
        let out = net.forward_frame(&mut g, x, &entry, &mut PropagationState::new()).unwrap();
        for (a, &b) in seq[0].iter().zip(&out.predictions) {
            assert_eq!(a.data(), g.value(b).data());
        }
    }

    #[test]
    fn sequence_matches_single_graph_clip() {
        let net = tiny_net(9);
        let f = frames(4, 10);
        let sched = build_schedule(4, 3, ScheduleMode::Periodic).unwrap();
        let seq = net.run_schedule(&f, &sched).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let outs = net.forward_clip(&mut g, &vars, &sched).unwrap();
        for (a, o) in seq.iter().zip(&outs) {
            for (x, &y) in a.iter().zip(&o.predictions) {
                assert_eq!(x.data(), g.value(y).data());
            }
        }
    }

    #[test]
    fn constant_frames_differ_only_through_encoders() {
        let net = tiny_net(11);
        let f = vec![Tensor::full(&[1, 3, 64, 64], 0.5); 2];
        let sched = build_schedule(2, 5, ScheduleMode::Periodic).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let outs = net.forward_clip(&mut g, &vars, &sched).unwrap();
        // interior pixels of a constant frame see constant features, so
        // propagation returns the source features there
        let key = g.value(outs[0].task_features[0]).clone();
        let fast_in = g.value(outs[1].decoder_inputs[0]).clone();
        let c = 16;
        for ch in 0..c {
            let (y, x) = (8, 8);
            let src = key.at4(0, ch, y, x);
            assert!((fast_in.at4(0, c + ch, y, x) - src).abs() < 1e-9);
            assert!((fast_in.at4(0, 2 * c + ch, y, x) - src).abs() < 1e-9);
        }
    }

    #[test]
    fn tasks_have_their_own_heads() {
        let mut cfg = NetworkConfig::default();
        cfg.tasks = vec![TaskKind::Segmentation { num_classes: 3 }, TaskKind::Depth, TaskKind::Segmentation { num_classes: 2 }];
        let net = SlowFastNet::new(cfg, 0).unwrap();
        let out = net.forward_sequence(&frames(1, 1), 5).unwrap();
        let ch: Vec<usize> = out[0].iter().map(|t| t.shape()[1]).collect();
        assert_eq!(ch, vec![3, 1, 2]);
    }

    #[test]
    fn offset_eval_constant_metric() {
        let net = tiny_net(13);
        let clips = vec![frames(3, 14), frames(4, 15)];
        let r = eval_offset_averaged(&net, &clips, 3, |p| {
            assert_eq!(p.len(), 2);
            Ok(vec![1.0, 2.0])
        })
        .unwrap();
        assert_eq!(r.per_offset.len(), 3);
        assert!(r.per_offset.iter().all(|m| m == &r.mean));
        assert!(r.gflops_per_offset[0] > r.gflops_per_offset[1]);
        assert_eq!(r.gflops_per_offset[1], r.gflops_per_offset[2]);
        let k1 = eval_offset_averaged(&net, &clips, 1, |_| Ok(vec![0.25])).unwrap();
        assert_eq!(k1.mean, vec![0.25]);
        assert!(eval_offset_averaged(&net, &clips, 4, |_| Ok(vec![])).is_err());
        assert!(eval_offset_averaged(&net, &[], 1, |_| Ok(vec![])).is_err());
    }
}
