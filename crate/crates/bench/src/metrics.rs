//! Segmentation and depth metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("class {0} out of range for {1} classes")]
    Class(usize, usize),
    #[error("ground-truth depth must be positive on the mask, found {0}")]
    Depth(f64),
}

/// Accumulates a `num_classes × num_classes` confusion matrix, rows are
/// ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<(), MetricError> {
        if pred.len() != gt.len() {
            return Err(MetricError::Length(pred.len(), gt.len()));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= n {
                return Err(MetricError::Class(p, n));
            }
            if g >= n {
                return Err(MetricError::Class(g, n));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean IoU over classes that occur in ground truth or prediction.
    pub fn miou(&self) -> Result<f64, MetricError> {
        if self.total() == 0 {
            return Err(MetricError::Empty);
        }
        let n = self.num_classes;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..n {
            let tp = self.counts[c * n + c];
            let gt: u64 = (0..n).map(|p| self.counts[c * n + p]).sum();
            let pred: u64 = (0..n).map(|g| self.counts[g * n + c]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        Ok(sum / present as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64, MetricError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricError::Empty);
        }
        let n = self.num_classes;
        let correct: u64 = (0..n).map(|c| self.counts[c * n + c]).sum();
        Ok(correct as f64 / total as f64)
    }
}

pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<f64, MetricError> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    c.miou()
}

pub fn pixel_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / pred.len() as f64)
}

/// Running sums for [`depth_errors`] across several maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    abs: f64,
    rel: f64,
    count: usize,
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(), MetricError> {
        if pred.len() != gt.len() {
            return Err(MetricError::Length(pred.len(), gt.len()));
        }
        if mask.len() != gt.len() {
            return Err(MetricError::Length(mask.len(), gt.len()));
        }
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            if g <= 0.0 {
                return Err(MetricError::Depth(g));
            }
            let d = (p - g).abs();
            self.abs += d;
            self.rel += d / g;
            self.count += 1;
        }
        Ok(())
    }

    /// `(mean absolute error, mean relative error)`.
    pub fn finish(&self) -> Result<(f64, f64), MetricError> {
        if self.count == 0 {
            return Err(MetricError::Empty);
        }
        Ok((self.abs / self.count as f64, self.rel / self.count as f64))
    }
}

pub fn depth_errors(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64), MetricError> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// Per-pixel argmax over channels of a `[C, H, W]` slice.
pub fn argmax_channels(logits: &[f64], channels: usize) -> Vec<usize> {
    let hw = logits.len() / channels;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..channels {
                if logits[c * hw + p] > logits[best * hw + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_miou() {
        let m = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_halves_its_iou() {
        let gt = [0, 0, 1, 1, 1];
        let m = miou(&[1; 5], &gt, 2).unwrap();
        assert!((m - 0.6 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_skipped() {
        assert_eq!(miou(&[2, 2], &[2, 2], 5).unwrap(), 1.0);
    }

    #[test]
    fn depth_hand_arithmetic() {
        let (abs, rel) = depth_errors(&[3.0; 4], &[2.0; 4], &[true; 4]).unwrap();
        assert!((abs - 1.0).abs() < 1e-12 && (rel - 0.5).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(miou(&[], &[], 2), Err(MetricError::Empty));
        assert_eq!(miou(&[3], &[0], 2), Err(MetricError::Class(3, 2)));
        assert_eq!(depth_errors(&[1.0], &[1.0], &[false]), Err(MetricError::Empty));
        assert_eq!(depth_errors(&[1.0], &[0.0], &[true]), Err(MetricError::Depth(0.0)));
        assert!(pixel_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn argmax_picks_largest_channel() {
        // two channels, three pixels
        assert_eq!(argmax_channels(&[0.0, 2.0, 1.0, 1.0, 1.0, 1.0], 2), vec![1, 0, 0]);
    }
}
