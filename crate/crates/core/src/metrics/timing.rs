use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Stage timings of one frame in one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run: u32,
    pub frame_id: u64,
    pub pre_ms: f64,
    pub infer_ms: f64,
    pub post_ms: f64,
}

impl TimingRecord {
    pub fn new(run: u32, frame_id: u64, pre_ms: f64, infer_ms: f64, post_ms: f64) -> Result<Self, MetricsError> {
        for v in [pre_ms, infer_ms, post_ms] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MetricsError::InvalidTiming(v));
            }
        }
        Ok(TimingRecord { run, frame_id, pre_ms, infer_ms, post_ms })
    }

    pub fn total_ms(&self) -> f64 {
        self.pre_ms + self.infer_ms + self.post_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub count: usize,
    pub mean_pre_ms: f64,
    pub mean_infer_ms: f64,
    pub mean_post_ms: f64,
    pub mean_total_ms: f64,
    /// `1000 / mean_total_ms`.
    pub fps: f64,
}

/// Compensated (Neumaier) running sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    sum: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Arithmetic means over every record of every run, and the resulting FPS.
///
/// All runs must cover the same set of frames.
pub fn aggregate_timing(records: &[TimingRecord]) -> Result<TimingSummary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyTiming);
    }
    let mut frames_by_run: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    for r in records {
        frames_by_run.entry(r.run).or_default().insert(r.frame_id);
    }
    let mut runs = frames_by_run.iter();
    let (_, first) = runs.next().expect("non-empty");
    if let Some((&run, _)) = runs.find(|(_, frames)| *frames != first) {
        return Err(MetricsError::MismatchedRuns(run));
    }

    let (mut pre, mut inf, mut post, mut total) = (Sum::default(), Sum::default(), Sum::default(), Sum::default());
    for r in records {
        pre.add(r.pre_ms);
        inf.add(r.infer_ms);
        post.add(r.post_ms);
        total.add(r.total_ms());
    }
    let n = records.len() as f64;
    let mean_total_ms = total.value() / n;
    if mean_total_ms.is_nan() || mean_total_ms <= 0.0 {
        return Err(MetricsError::ZeroLatency);
    }
    Ok(TimingSummary {
        count: records.len(),
        mean_pre_ms: pre.value() / n,
        mean_infer_ms: inf.value() / n,
        mean_post_ms: post.value() / n,
        mean_total_ms,
        fps: 1000.0 / mean_total_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: u32, frame_id: u64, pre: f64, inf: f64, post: f64) -> TimingRecord {
        TimingRecord::new(run, frame_id, pre, inf, post).unwrap()
    }

    #[test]
    fn table2_maxn_column_sums() {
        assert_eq!(rec(1, 0, 8.78, 22.0, 39.45).total_ms(), 70.23);
    }

    #[test]
    fn constant_totals() {
        let records: Vec<_> = (0..10).map(|f| rec(1, f, 8.78, 22.0, 39.45)).collect();
        let s = aggregate_timing(&records).unwrap();
        assert!((s.mean_total_ms - 70.23).abs() < 1e-12);
        assert!((s.fps - 14.238929232521713).abs() < 1e-9);
    }

    #[test]
    fn single_record() {
        let s = aggregate_timing(&[rec(1, 4, 1.5, 2.25, 3.0)]).unwrap();
        assert_eq!((s.mean_pre_ms, s.mean_infer_ms, s.mean_post_ms, s.mean_total_ms), (1.5, 2.25, 3.0, 6.75));
        assert_eq!(s.count, 1);
    }

    #[test]
    fn errors() {
        assert_eq!(aggregate_timing(&[]), Err(MetricsError::EmptyTiming));
        assert_eq!(aggregate_timing(&[rec(1, 0, 0.0, 0.0, 0.0)]), Err(MetricsError::ZeroLatency));
        let mismatched = [rec(1, 0, 1.0, 1.0, 1.0), rec(1, 1, 1.0, 1.0, 1.0), rec(2, 0, 1.0, 1.0, 1.0)];
        assert_eq!(aggregate_timing(&mismatched), Err(MetricsError::MismatchedRuns(2)));
        assert!(TimingRecord::new(1, 0, -1.0, 0.0, 0.0).is_err());
        assert!(TimingRecord::new(1, 0, f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn million_records_mean_is_exact_to_1e9() {
        // Values are whole microseconds, so the exact mean is an integer
        // ratio computed independently of floating-point summation.
        let n = 1_000_000u64;
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut micros_sum: u128 = 0;
        let records: Vec<TimingRecord> = (0..n)
            .map(|i| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let us = 5_000 + state % 200_000; // 5 ms .. 205 ms
                micros_sum += us as u128;
                rec(1, i, 0.0, us as f64 / 1000.0, 0.0)
            })
            .collect();
        let s = aggregate_timing(&records).unwrap();
        let exact = micros_sum as f64 / n as f64 / 1000.0;
        assert!((s.mean_infer_ms - exact).abs() < 1e-9, "{} vs {}", s.mean_infer_ms, exact);
        assert!((s.mean_total_ms - exact).abs() < 1e-9);
    }
}
