use std::io::Write;

use crate::error::Result;

use super::step::LossBreakdown;

/// Appends one CSV row per training step: `step`, one `loss_<task>` column
/// per task, `l1`, `adversarial`, `d_accuracy`, `total`, `wall_ms`.
pub struct TrainLog<W: Write> {
    out: W,
}

impl<W: Write> TrainLog<W> {
    pub fn new(mut out: W, task_names: &[String]) -> Result<Self> {
        let tasks: Vec<String> = task_names.iter().map(|n| format!("loss_{n}")).collect();
        writeln!(out, "step,{},l1,adversarial,d_accuracy,total,wall_ms", tasks.join(","))?;
        Ok(Self { out })
    }

    pub fn record(&mut self, step: usize, b: &LossBreakdown, wall_ms: u128) -> Result<()> {
        let tasks: Vec<String> = b.task.iter().map(|x| format!("{x:.9}")).collect();
        writeln!(
            self.out,
            "{step},{},{:.9},{:.9},{:.4},{:.9},{wall_ms}",
            tasks.join(","),
            b.l1,
            b.adversarial,
            b.d_accuracy,
            b.total
        )?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
