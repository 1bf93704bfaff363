use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

use super::discriminator::Discriminator;

/// Discriminator outputs are clamped to `[D_EPS, 1 - D_EPS]` before logs.
pub const D_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the L1 feature-mimicking term.
    pub alpha: f64,
    /// Weight of the adversarial term.
    pub beta: f64,
    pub task_weights: Vec<f64>,
    pub grl_lambda: f64,
}

impl LossConfig {
    pub fn new(num_tasks: usize) -> Self {
        Self { alpha: 1.0, beta: 1.0, task_weights: vec![1.0; num_tasks], grl_lambda: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.beta) || !finite_nonneg(self.grl_lambda) {
            return Err(Error::Config(format!(
                "alpha, beta and lambda must be finite and non-negative (got {}, {}, {})",
                self.alpha, self.beta, self.grl_lambda
            )));
        }
        if !self.task_weights.iter().all(|&w| finite_nonneg(w)) {
            return Err(Error::Config(format!("task weights must be non-negative: {:?}", self.task_weights)));
        }
        Ok(())
    }
}

/// Ground truth for one task on one frame, flattened in `[B, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    Segmentation(Vec<usize>),
    Depth { values: Vec<f64>, mask: Vec<bool> },
}

/// Weighted sum of per-task losses (pixel-wise cross-entropy, masked
/// mean absolute depth error). Returns the total and each unweighted term.
pub fn task_loss(g: &mut Graph, preds: &[Var], targets: &[TaskTarget], weights: &[f64]) -> Result<(Var, Vec<Var>)> {
    if preds.len() != targets.len() || preds.len() != weights.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions, {} targets, {} weights",
            preds.len(),
            targets.len(),
            weights.len()
        )));
    }
    let mut terms = Vec::with_capacity(preds.len());
    let mut total: Option<Var> = None;
    for ((&p, t), &w) in preds.iter().zip(targets).zip(weights) {
        let term = match t {
            TaskTarget::Segmentation(labels) => g.cross_entropy(p, labels)?,
            TaskTarget::Depth { values, mask } => {
                if g.shape(p).get(1) != Some(&1) {
                    return Err(Error::Shape(format!("depth prediction must have one channel, got {:?}", g.shape(p))));
                }
                g.masked_l1(p, values, mask)?
            }
        };
        terms.push(term);
        let weighted = g.scale(term, w);
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    Ok((total.expect("at least one task"), terms))
}

/// The pieces of the feature-mimicking objective.
#[derive(Clone, Copy, Debug)]
pub struct MimicTerms {
    /// `alpha * l1 + beta * adversarial`.
    pub total: Var,
    pub l1: Var,
    pub adversarial: Var,
    /// Probabilities `D(slow)` and `D(fast)`, `[B, 1, 1, 1]` each.
    pub d_slow: Var,
    pub d_fast: Var,
}

/// `alpha * mean|stopgrad(slow) - fast| + beta * L_D`, where
/// `L_D = -mean_b[ln D(stopgrad(slow)) + ln(1 - D(GRL(fast)))]`.
/// Minimizing the total trains D to tell the branches apart while the
/// reversed gradient pushes the fast features to fool it.
pub fn mimic_loss(g: &mut Graph, slow: Var, fast: Var, disc: &Discriminator, config: &LossConfig) -> Result<MimicTerms> {
    if g.shape(slow) != g.shape(fast) {
        return Err(Error::Shape(format!(
            "slow features {:?} and fast features {:?} differ",
            g.shape(slow),
            g.shape(fast)
        )));
    }
    // slow features are the target of both terms and get no gradient
    let target = g.detach(slow);
    let diff = g.sub(target, fast)?;
    let diff = g.abs(diff);
    let l1 = g.mean(diff);

    let d_slow = disc.forward(g, target)?;
    let reversed = g.gradient_reversal(fast, config.grl_lambda);
    let d_fast = disc.forward(g, reversed)?;
    let ps = g.clamp(d_slow, D_EPS, 1.0 - D_EPS);
    let log_real = g.ln(ps)?;
    let pf = g.clamp(d_fast, D_EPS, 1.0 - D_EPS);
    let neg = g.scale(pf, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_fake = g.ln(one_minus)?;
    let both = g.add(log_real, log_fake)?;
    let mean = g.mean(both);
    let adversarial = g.scale(mean, -1.0);

    let a = g.scale(l1, config.alpha);
    let b = g.scale(adversarial, config.beta);
    let total = g.add(a, b)?;
    Ok(MimicTerms { total, l1, adversarial, d_slow, d_fast })
}
