//! Keyframe scheduling and propagation-source routing.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Slow,
    Fast,
}

/// Which earlier frame feeds the "previous" propagation edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Routing {
    /// The immediately preceding frame, whatever its branch.
    #[default]
    PreviousFrame,
    /// The most recent non-keyframe (none if there has not been one).
    LastNonKeyframe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Frame `i` is a keyframe iff `i % K == 0`.
    Periodic,
    /// Evaluation clip ending `d` frames after its keyframe: frame 0 is the
    /// keyframe and frames `1..=d` run the fast branch.
    EvalClip(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub frame_index: usize,
    pub branch: Branch,
    pub keyframe_source: Option<usize>,
    pub previous_source: Option<usize>,
}

impl ScheduleEntry {
    pub fn is_keyframe(&self) -> bool {
        self.branch == Branch::Slow
    }
}

pub fn build_schedule(num_frames: usize, k: usize, mode: ScheduleMode) -> Result<Vec<ScheduleEntry>> {
    build_schedule_routed(num_frames, k, mode, Routing::PreviousFrame)
}

pub fn build_schedule_routed(
    num_frames: usize,
    k: usize,
    mode: ScheduleMode,
    routing: Routing,
) -> Result<Vec<ScheduleEntry>> {
    if num_frames == 0 {
        return Err(Error::Config("schedule needs at least one frame".into()));
    }
    if k == 0 {
        return Err(Error::Config("keyframe interval K must be at least 1".into()));
    }
    let is_key: Box<dyn Fn(usize) -> bool> = match mode {
        ScheduleMode::Periodic => Box::new(move |i| i % k == 0),
        ScheduleMode::EvalClip(d) => {
            if d >= k {
                return Err(Error::Config(format!("offset d = {d} must lie in [0, K-1] = [0, {}]", k - 1)));
            }
            if num_frames != d + 1 {
                return Err(Error::Config(format!(
                    "an eval clip at offset {d} has {} frames, not {num_frames}",
                    d + 1
                )));
            }
            Box::new(|i| i == 0)
        }
    };

    let mut entries = Vec::with_capacity(num_frames);
    let mut last_key: Option<usize> = None;
    let mut last_non_key: Option<usize> = None;
    for i in 0..num_frames {
        let key = is_key(i);
        let previous_source = match routing {
            Routing::PreviousFrame => i.checked_sub(1),
            Routing::LastNonKeyframe => last_non_key,
        };
        let entry = if key {
            ScheduleEntry {
                frame_index: i,
                branch: Branch::Slow,
                keyframe_source: None,
                previous_source,
            }
        } else {
            ScheduleEntry {
                frame_index: i,
                branch: Branch::Fast,
                keyframe_source: last_key,
                previous_source,
            }
        };
        if key {
            last_key = Some(i);
        } else {
            last_non_key = Some(i);
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_seven_frames() {
        let s = build_schedule(7, 5, ScheduleMode::Periodic).unwrap();
        let keys: Vec<usize> = s.iter().filter(|e| e.is_keyframe()).map(|e| e.frame_index).collect();
        assert_eq!(keys, vec![0, 5]);
        assert_eq!(s[6].keyframe_source, Some(5));
        assert_eq!(s[6].previous_source, Some(5));
        assert_eq!(s[5].keyframe_source, None);
        assert_eq!(s[5].previous_source, Some(4));
        assert_eq!(s[0].previous_source, None);
    }

    #[test]
    fn k_one_is_all_slow() {
        let s = build_schedule(4, 1, ScheduleMode::Periodic).unwrap();
        for (i, e) in s.iter().enumerate() {
            assert_eq!(e.branch, Branch::Slow);
            assert_eq!(e.keyframe_source, None);
            assert_eq!(e.previous_source, i.checked_sub(1));
        }
    }

    #[test]
    fn eval_clip_two() {
        let s = build_schedule(3, 5, ScheduleMode::EvalClip(2)).unwrap();
        assert_eq!(
            s,
            vec![
                ScheduleEntry { frame_index: 0, branch: Branch::Slow, keyframe_source: None, previous_source: None },
                ScheduleEntry { frame_index: 1, branch: Branch::Fast, keyframe_source: Some(0), previous_source: Some(0) },
                ScheduleEntry { frame_index: 2, branch: Branch::Fast, keyframe_source: Some(0), previous_source: Some(1) },
            ]
        );
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_schedule(0, 5, ScheduleMode::Periodic).is_err());
        assert!(build_schedule(3, 0, ScheduleMode::Periodic).is_err());
        assert!(build_schedule(6, 5, ScheduleMode::EvalClip(5)).is_err());
        assert!(build_schedule(4, 5, ScheduleMode::EvalClip(2)).is_err());
    }

    #[test]
    fn last_non_keyframe_routing() {
        let s = build_schedule_routed(8, 3, ScheduleMode::Periodic, Routing::LastNonKeyframe).unwrap();
        assert_eq!(s[1].previous_source, None);
        assert_eq!(s[3].previous_source, Some(2));
        assert_eq!(s[4].previous_source, Some(2));
        assert_eq!(s[4].keyframe_source, Some(3));
        assert_eq!(s[5].previous_source, Some(4));
    }
}
