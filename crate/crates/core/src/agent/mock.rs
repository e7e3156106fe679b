//! Ground-truth replay detector.
//!
//! Stands in for a real network: it answers every frame with that frame's
//! annotations, optionally perturbed. All randomness is seeded. Perturbations
//! of a frame depend only on the seed and the frame id, so repeated runs and
//! redelivered frames see identical detections.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::plugin::{DetectorError, DetectorPlugin, PluginRegistry};
use crate::metrics::FrameGroundTruth;
use crate::protocol::FrameMessage;
use crate::vision::{BBox, Detection, Preprocessed, ScaleFactors};

/// Registry name of the replay detector in [`replay_registry`].
pub const REPLAY_DETECTOR: &str = "gt-replay";

/// A registry holding one replay detector named [`REPLAY_DETECTOR`].
pub fn replay_registry(config: MockDetectorConfig) -> Result<PluginRegistry, String> {
    config.validate()?;
    let mut registry = PluginRegistry::new();
    registry
        .register(REPLAY_DETECTOR, move || {
            Box::new(MockDetector::new(REPLAY_DETECTOR, config.clone()).expect("config validated above"))
        })
        .map_err(|e| e.to_string())?;
    Ok(registry)
}

/// Stream reserved for latency draws; frame streams use the frame id.
const LATENCY_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct MockDetectorConfig {
    pub ground_truth: Arc<FrameGroundTruth>,
    /// Chance that a ground-truth box is left out.
    pub drop_probability: f64,
    /// Chance per frame of one extra box that matches nothing.
    pub false_positive_rate: f64,
    /// Each corner coordinate moves by up to this many source pixels.
    pub coordinate_jitter_px: f64,
    /// Confidence is `1 - confidence_noise * u` with `u` uniform in `[0, 1)`.
    pub confidence_noise: f64,
    pub synthetic_pre_ms: f64,
    pub synthetic_infer_ms: f64,
    pub synthetic_post_ms: f64,
    /// Extra latency per stage, uniform in `[0, latency_jitter_ms)`.
    pub latency_jitter_ms: f64,
    pub seed: u64,
}

impl MockDetectorConfig {
    /// Exact replay: no perturbation, no synthetic latency.
    pub fn exact(ground_truth: Arc<FrameGroundTruth>) -> Self {
        MockDetectorConfig {
            ground_truth,
            drop_probability: 0.0,
            false_positive_rate: 0.0,
            coordinate_jitter_px: 0.0,
            confidence_noise: 0.0,
            synthetic_pre_ms: 0.0,
            synthetic_infer_ms: 0.0,
            synthetic_post_ms: 0.0,
            latency_jitter_ms: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("drop_probability", self.drop_probability),
            ("false_positive_rate", self.false_positive_rate),
            ("confidence_noise", self.confidence_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} {p} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("coordinate_jitter_px", self.coordinate_jitter_px),
            ("synthetic_pre_ms", self.synthetic_pre_ms),
            ("synthetic_infer_ms", self.synthetic_infer_ms),
            ("synthetic_post_ms", self.synthetic_post_ms),
            ("latency_jitter_ms", self.latency_jitter_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

pub struct MockDetector {
    name: String,
    config: MockDetectorConfig,
    latency_rng: ChaCha8Rng,
}

impl MockDetector {
    pub fn new(name: &str, config: MockDetectorConfig) -> Result<Self, String> {
        config.validate()?;
        let mut latency_rng = ChaCha8Rng::seed_from_u64(config.seed);
        latency_rng.set_stream(LATENCY_STREAM);
        Ok(MockDetector { name: name.to_string(), config, latency_rng })
    }

    fn pause(&mut self, base_ms: f64) {
        let jitter = if self.config.latency_jitter_ms > 0.0 {
            self.latency_rng.random_range(0.0..self.config.latency_jitter_ms)
        } else {
            0.0
        };
        let ms = base_ms + jitter;
        if ms > 0.0 {
            thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
    }

    /// Detections for one frame in source-image coordinates.
    pub fn detections_for(&self, frame_id: u64) -> Vec<Detection> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(frame_id);
        let gts = cfg.ground_truth.get(&frame_id).map(Vec::as_slice).unwrap_or(&[]);

        let mut out = Vec::with_capacity(gts.len() + 1);
        for gt in gts {
            // Draw every variate even for dropped boxes so one knob does not
            // shift the random sequence seen by the others.
            let dropped = rng.random::<f64>() < cfg.drop_probability;
            let mut jitter = [0.0f64; 4];
            for j in &mut jitter {
                *j = if cfg.coordinate_jitter_px > 0.0 {
                    rng.random_range(-cfg.coordinate_jitter_px..=cfg.coordinate_jitter_px)
                } else {
                    0.0
                };
            }
            let u: f64 = rng.random();
            if dropped {
                continue;
            }
            let b = gt.bbox;
            let (xa, xb) = (b.x0 + jitter[0], b.x1 + jitter[2]);
            let (ya, yb) = (b.y0 + jitter[1], b.y1 + jitter[3]);
            let bbox = BBox { x0: xa.min(xb), y0: ya.min(yb), x1: xa.max(xb), y1: ya.max(yb) };
            out.push(Detection { bbox, class_id: gt.class_id, confidence: 1.0 - cfg.confidence_noise * u });
        }

        if rng.random::<f64>() < cfg.false_positive_rate {
            let extent = gts.iter().fold((1.0f64, 1.0f64), |(w, h), g| (w.max(g.bbox.x1), h.max(g.bbox.y1)));
            let x0 = rng.random_range(0.0..extent.0);
            let y0 = rng.random_range(0.0..extent.1);
            let w = rng.random_range(0.0..extent.0 / 4.0 + 1.0);
            let h = rng.random_range(0.0..extent.1 / 4.0 + 1.0);
            let class_id = gts.first().map_or(0, |g| g.class_id);
            let confidence = rng.random::<f64>();
            out.push(Detection { bbox: BBox { x0, y0, x1: x0 + w, y1: y0 + h }, class_id, confidence });
        }
        out
    }
}

impl DetectorPlugin for MockDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn preprocess(&mut self, frame: &FrameMessage, width: u32, height: u32) -> Result<Preprocessed, DetectorError> {
        self.pause(self.config.synthetic_pre_ms);
        Ok(crate::vision::preprocess(frame, width, height)?)
    }

    fn infer(&mut self, input: &Preprocessed, frame_id: u64) -> Result<Vec<Detection>, DetectorError> {
        self.pause(self.config.synthetic_infer_ms);
        let s = input.scale;
        Ok(self
            .detections_for(frame_id)
            .into_iter()
            .map(|d| if s == ScaleFactors::UNIT { d } else { Detection { bbox: d.bbox.scaled(s.sx, s.sy), ..d } })
            .collect())
    }

    fn postprocess(
        &mut self,
        raw: &[Detection],
        scale: ScaleFactors,
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>, DetectorError> {
        self.pause(self.config.synthetic_post_ms);
        Ok(crate::vision::postprocess(raw, scale, confidence_threshold, nms_threshold))
    }
}
