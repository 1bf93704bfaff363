use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::discriminator::Discriminator;
use super::loss::{mimic_loss, task_loss, LossConfig, TaskTarget};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::network::{build_schedule_routed, Branch, ScheduleMode, SlowFastNet};
use crate::tensor::Tensor;

/// Consecutive frames (`[B, 3, H, W]` each) with per-frame, per-task targets.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub frames: Vec<Tensor>,
    pub targets: Vec<Vec<TaskTarget>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Unweighted per-task losses, averaged over the clip's frames.
    pub task: Vec<f64>,
    /// L1 mimicking term, averaged over keyframes.
    pub l1: f64,
    /// Adversarial term, averaged over keyframes.
    pub adversarial: f64,
    /// Fraction of slow/fast features the discriminator labels correctly.
    pub d_accuracy: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the parts.
    pub fn weighted_sum(&self, config: &LossConfig) -> f64 {
        let tasks: f64 = self.task.iter().zip(&config.task_weights).map(|(l, w)| l * w).sum();
        tasks + config.alpha * self.l1 + config.beta * self.adversarial
    }
}

struct Built {
    total: Var,
    task: Vec<Var>,
    l1: Option<Var>,
    adversarial: Option<Var>,
    probs: Vec<(Var, Var)>,
}

/// Owns the network, the discriminator and both optimizers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: SlowFastNet,
    pub disc: Discriminator,
    pub loss: LossConfig,
    pub model_opt: AdamState,
    pub disc_opt: AdamState,
    /// Keyframe interval used to schedule training clips.
    pub k: usize,
}

impl Trainer {
    pub fn new(net: SlowFastNet, disc_hidden: usize, loss: LossConfig, adam: AdamConfig, k: usize, seed: u64) -> Result<Self> {
        loss.validate()?;
        adam.validate()?;
        if loss.task_weights.len() != net.branches.len() {
            return Err(Error::Config(format!(
                "{} task weights for {} tasks",
                loss.task_weights.len(),
                net.branches.len()
            )));
        }
        if k == 0 {
            return Err(Error::Config("keyframe interval K must be at least 1".into()));
        }
        let disc = Discriminator::new(net.config.feature_channels(), disc_hidden, &mut ChaCha8Rng::seed_from_u64(seed));
        let model_opt = AdamState::new(&net.store, adam);
        let disc_opt = AdamState::new(&disc.store, adam);
        Ok(Self { net, disc, loss, model_opt, disc_opt, k })
    }

    fn build(&self, g: &mut Graph, clip: &TrainClip) -> Result<Built> {
        let n = clip.frames.len();
        if n == 0 || clip.targets.len() != n {
            return Err(Error::Config(format!("clip has {n} frames and {} target sets", clip.targets.len())));
        }
        let schedule = build_schedule_routed(n, self.k, ScheduleMode::Periodic, self.net.config.routing)?;
        let frames: Vec<Var> = clip.frames.iter().map(|f| g.constant(f.clone())).collect();
        let outs = self.net.forward_clip(g, &frames, &schedule)?;

        let num_tasks = self.net.branches.len();
        let mut sums: Vec<Option<Var>> = vec![None; num_tasks];
        for (out, targets) in outs.iter().zip(&clip.targets) {
            let (_, terms) = task_loss(g, &out.predictions, targets, &self.loss.task_weights)?;
            for (acc, t) in sums.iter_mut().zip(terms) {
                *acc = Some(match *acc {
                    None => t,
                    Some(a) => g.add(a, t)?,
                });
            }
        }
        let task: Vec<Var> = sums.into_iter().map(|s| g.scale(s.expect("non-empty clip"), 1.0 / n as f64)).collect();
        let mut total = None;
        for (&t, &w) in task.iter().zip(&self.loss.task_weights) {
            let wt = g.scale(t, w);
            total = Some(match total {
                None => wt,
                Some(a) => g.add(a, wt)?,
            });
        }
        let mut total = total.expect("at least one task");

        let mut l1_sum = None;
        let mut adv_sum = None;
        let mut probs = Vec::new();
        let keyframes: Vec<usize> = schedule.iter().filter(|e| e.is_keyframe()).map(|e| e.frame_index).collect();
        for &i in &keyframes {
            let fast = self.net.encode_var(g, frames[i], Branch::Fast)?;
            let m = mimic_loss(g, outs[i].encoder_features, fast, &self.disc, &self.loss)?;
            l1_sum = Some(match l1_sum {
                None => m.l1,
                Some(a) => g.add(a, m.l1)?,
            });
            adv_sum = Some(match adv_sum {
                None => m.adversarial,
                Some(a) => g.add(a, m.adversarial)?,
            });
            probs.push((m.d_slow, m.d_fast));
        }
        let inv = 1.0 / keyframes.len().max(1) as f64;
        let l1 = l1_sum.map(|v| g.scale(v, inv));
        let adversarial = adv_sum.map(|v| g.scale(v, inv));
        if let (Some(l), Some(a)) = (l1, adversarial) {
            let wl = g.scale(l, self.loss.alpha);
            let wa = g.scale(a, self.loss.beta);
            let mimic = g.add(wl, wa)?;
            total = g.add(total, mimic)?;
        }
        Ok(Built { total, task, l1, adversarial, probs })
    }

    fn breakdown(g: &Graph, b: &Built) -> LossBreakdown {
        let scalar = |v: Var| g.value(v).data()[0];
        let (mut correct, mut count) = (0usize, 0usize);
        for &(s, f) in &b.probs {
            correct += g.value(s).data().iter().filter(|&&p| p > 0.5).count();
            correct += g.value(f).data().iter().filter(|&&p| p < 0.5).count();
            count += g.value(s).numel() + g.value(f).numel();
        }
        LossBreakdown {
            task: b.task.iter().map(|&v| scalar(v)).collect(),
            l1: b.l1.map_or(0.0, scalar),
            adversarial: b.adversarial.map_or(0.0, scalar),
            d_accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
            total: scalar(b.total),
        }
    }

    /// Loss on `clip` without updating anything.
    pub fn evaluate(&self, clip: &TrainClip) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.build(&mut g, clip)?;
        Ok(Self::breakdown(&g, &b))
    }

    /// One joint backward pass over task and mimicking losses, then one
    /// Adam step for the network and one for the discriminator.
    pub fn step(&mut self, clip: &TrainClip) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.build(&mut g, clip)?;
        let report = Self::breakdown(&g, &b);
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {}", report.total)));
        }
        g.backward(b.total)?;
        self.net.store.zero_grads();
        self.net.store.accumulate_grads(&g);
        self.disc.store.zero_grads();
        self.disc.store.accumulate_grads(&g);
        self.model_opt.step(&mut self.net.store)?;
        self.disc_opt.step(&mut self.disc.store)?;
        Ok(report)
    }
}
