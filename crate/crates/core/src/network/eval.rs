use super::model::SlowFastNet;
use super::schedule::{build_schedule_routed, ScheduleMode};
use crate::error::{Error, Result};
use crate::flops::{model_report, CountingMode};
use crate::tensor::Tensor;

/// Metrics at each keyframe offset and their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetMetrics {
    /// `per_offset[d]` is what the metrics function returned for offset `d`.
    pub per_offset: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Cost of the evaluated frame at each offset.
    pub gflops_per_offset: Vec<f64>,
    pub mean_gflops: f64,
}

/// Evaluates the last frame of every clip at each offset `d` in `0..k`:
/// the last `d + 1` frames are run with the keyframe `d` frames back.
///
/// `metrics_fn` receives, for one offset, the per-task predictions on the
/// annotated frame of every clip (indexed `[clip][task]`) and returns a
/// fixed-length metric vector.
pub fn eval_offset_averaged<F>(net: &SlowFastNet, clips: &[Vec<Tensor>], k: usize, mut metrics_fn: F) -> Result<OffsetMetrics>
where
    F: FnMut(&[Vec<Tensor>]) -> Result<Vec<f64>>,
{
    if clips.is_empty() {
        return Err(Error::Config("no evaluation clips".into()));
    }
    if k == 0 {
        return Err(Error::Config("keyframe interval K must be at least 1".into()));
    }
    for (i, c) in clips.iter().enumerate() {
        if c.len() < k {
            return Err(Error::Config(format!("clip {i} has {} frames; K = {k} needs at least {k}", c.len())));
        }
    }
    let mut per_offset = Vec::with_capacity(k);
    let mut gflops_per_offset = Vec::with_capacity(k);
    for d in 0..k {
        let schedule = build_schedule_routed(d + 1, k, ScheduleMode::EvalClip(d), net.config.routing)?;
        let mut preds = Vec::with_capacity(clips.len());
        for clip in clips {
            let frames = &clip[clip.len() - d - 1..];
            let mut out = net.run_schedule(frames, &schedule)?;
            preds.push(out.pop().expect("non-empty schedule"));
        }
        let metrics = metrics_fn(&preds)?;
        if let Some(first) = per_offset.first() {
            let first: &Vec<f64> = first;
            if first.len() != metrics.len() {
                return Err(Error::Config("metrics function returned vectors of different lengths".into()));
            }
        }
        per_offset.push(metrics);
        let shape = clips[0][0].shape();
        let report = model_report(&net.config, (shape[2], shape[3]), &schedule[d..], CountingMode::default())?;
        gflops_per_offset.push(report.gflops_per_frame());
    }
    let n = per_offset[0].len();
    let mean = (0..n).map(|j| per_offset.iter().map(|m| m[j]).sum::<f64>() / k as f64).collect();
    let mean_gflops = gflops_per_offset.iter().sum::<f64>() / k as f64;
    Ok(OffsetMetrics { per_offset, mean, gflops_per_offset, mean_gflops })
}
