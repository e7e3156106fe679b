use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since the session epoch.
    #[serde(rename = "t_seconds")]
    pub t: f64,
    pub watts: f64,
}

/// Time-ordered power readings for one device.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerLog {
    samples: Vec<PowerSample>,
}

impl PowerLog {
    pub fn new(samples: Vec<PowerSample>) -> Result<Self, MetricsError> {
        for (i, s) in samples.iter().enumerate() {
            if !(s.t.is_finite() && s.watts.is_finite() && s.watts >= 0.0) {
                return Err(MetricsError::InvalidSample { index: i, reason: format!("{s:?}") });
            }
            if i > 0 && samples[i - 1].t > s.t {
                return Err(MetricsError::InvalidSample { index: i, reason: "samples out of time order".into() });
            }
        }
        Ok(PowerLog { samples })
    }

    /// Reads CSV with header `t_seconds,watts`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| MetricsError::Csv(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["t_seconds", "watts"] {
            return Err(MetricsError::Csv(format!("expected header t_seconds,watts, found {:?}", headers)));
        }
        let samples = rdr
            .deserialize::<PowerSample>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| MetricsError::Csv(e.to_string()))?;
        Self::new(samples)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, MetricsError> {
        let file = std::fs::File::open(path).map_err(|e| MetricsError::Csv(format!("{}: {e}", path.display())))?;
        Self::from_csv(file)
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerReading {
    pub absolute_w: f64,
    pub relative_w: f64,
    /// Set when the absolute draw was below idle and relative power was
    /// clamped to zero.
    pub clamped: bool,
}

/// Relative power is absolute minus idle, floored at zero.
pub fn relative_power(absolute_w: f64, idle_w: f64) -> PowerReading {
    let diff = absolute_w - idle_w;
    if diff < 0.0 {
        log::warn!("absolute power {absolute_w} W is below idle {idle_w} W; relative power clamped to 0");
        PowerReading { absolute_w, relative_w: 0.0, clamped: true }
    } else {
        PowerReading { absolute_w, relative_w: diff, clamped: false }
    }
}

/// Mean draw over the samples inside `[start, end]` (inclusive) and the
/// corresponding relative power.
pub fn power_from_log(log: &PowerLog, window: (f64, f64), idle_w: f64) -> Result<PowerReading, MetricsError> {
    let (start, end) = window;
    if start.is_nan() || end.is_nan() || start > end {
        return Err(MetricsError::EmptyWindow { start, end });
    }
    if !(idle_w.is_finite() && idle_w >= 0.0) {
        return Err(MetricsError::InvalidIdle(idle_w));
    }
    let inside: Vec<f64> = log.samples.iter().filter(|s| s.t >= start && s.t <= end).map(|s| s.watts).collect();
    if inside.is_empty() {
        return Err(MetricsError::NoSamplesInWindow { start, end });
    }
    let absolute = inside.iter().sum::<f64>() / inside.len() as f64;
    Ok(relative_power(absolute, idle_w))
}

/// Frames per second per watt of relative power.
pub fn efficiency(fps: f64, relative_power_w: f64) -> Result<f64, MetricsError> {
    if relative_power_w.is_nan() || relative_power_w <= 0.0 {
        return Err(MetricsError::NonPositivePower(relative_power_w));
    }
    Ok(fps / relative_power_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_log(watts: f64) -> PowerLog {
        PowerLog::new((0..100).map(|i| PowerSample { t: i as f64 * 0.5, watts }).collect()).unwrap()
    }

    #[test]
    fn jetson_int8_relative_power() {
        let r = relative_power(16.5, 9.5);
        assert_eq!(r.relative_w, 7.0);
        assert!(!r.clamped);
    }

    #[test]
    fn zcu104_relative_power() {
        assert_eq!(relative_power(23.0, 16.0).relative_w, 7.0);
        assert_eq!(relative_power(22.5, 16.0).relative_w, 6.5);
        assert_eq!(relative_power(21.6, 16.0).relative_w, 21.6 - 16.0);
    }

    #[test]
    fn constant_log_any_window() {
        let log = constant_log(12.25);
        for w in [(0.0, 0.0), (3.0, 7.5), (0.0, 49.5), (-10.0, 100.0)] {
            assert_eq!(power_from_log(&log, w, 0.0).unwrap().absolute_w, 12.25);
        }
    }

    #[test]
    fn window_selects_samples() {
        let log = PowerLog::new(vec![
            PowerSample { t: 0.0, watts: 100.0 },
            PowerSample { t: 1.0, watts: 10.0 },
            PowerSample { t: 2.0, watts: 20.0 },
            PowerSample { t: 3.0, watts: 100.0 },
        ])
        .unwrap();
        let r = power_from_log(&log, (1.0, 2.0), 5.0).unwrap();
        assert_eq!((r.absolute_w, r.relative_w), (15.0, 10.0));
    }

    #[test]
    fn clamped_when_below_idle() {
        let r = power_from_log(&constant_log(4.0), (0.0, 10.0), 9.5).unwrap();
        assert_eq!(r.relative_w, 0.0);
        assert!(r.clamped);
    }

    #[test]
    fn window_errors() {
        let log = constant_log(1.0);
        assert!(matches!(power_from_log(&log, (60.0, 70.0), 0.0), Err(MetricsError::NoSamplesInWindow { .. })));
        assert!(matches!(power_from_log(&log, (2.0, 1.0), 0.0), Err(MetricsError::EmptyWindow { .. })));
        assert!(matches!(power_from_log(&log, (0.0, 1.0), -1.0), Err(MetricsError::InvalidIdle(_))));
    }

    #[test]
    fn log_validation() {
        let bad_order = vec![PowerSample { t: 1.0, watts: 1.0 }, PowerSample { t: 0.5, watts: 1.0 }];
        assert!(PowerLog::new(bad_order).is_err());
        assert!(PowerLog::new(vec![PowerSample { t: 0.0, watts: -1.0 }]).is_err());
    }

    #[test]
    fn csv_parsing() {
        let log = PowerLog::from_csv("t_seconds,watts\n0.0,16.5\n0.5,16.5\n".as_bytes()).unwrap();
        assert_eq!(log.samples().len(), 2);
        assert!(PowerLog::from_csv("time,w\n0,1\n".as_bytes()).is_err());
        assert!(PowerLog::from_csv("t_seconds,watts\n0,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn efficiency_fixtures() {
        assert_eq!(efficiency(14.0, 7.0).unwrap(), 2.0);
        let fps = 1000.0 / 70.23;
        let e = efficiency(fps, 7.0).unwrap();
        assert!((e - 2.0341327475031017).abs() < 1e-12);
        assert!((e - 2.05).abs() < 0.03);
        assert!(efficiency(10.0, 0.0).is_err());
        assert!(efficiency(10.0, -1.0).is_err());
    }

    #[test]
    fn efficiency_inverts_to_fps() {
        // A reported 1.40 FPS/W at 6.5 W relative implies about 9.1 FPS, ~110 ms per frame.
        let implied_fps = 1.40 * 6.5;
        assert!((efficiency(implied_fps, 6.5).unwrap() - 1.40).abs() < 1e-12);
        let total_ms = 1000.0 / implied_fps;
        assert!((total_ms - 109.89).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn relative_plus_idle_reconstructs_absolute(idle in 0.0..50.0f64, extra in 0.0..50.0f64) {
            let absolute = idle + extra;
            let r = relative_power(absolute, idle);
            prop_assert!(!r.clamped);
            prop_assert_eq!(r.relative_w + idle, absolute);
        }
    }
}
