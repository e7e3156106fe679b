//! Target-side application.
//!
//! [`AgentCore`] is the agent's state machine with no transport attached: it
//! takes configs and frames and returns what to publish. [`AgentRunner`]
//! wires a core to an [`Endpoint`](crate::transport::Endpoint), feeding it
//! from a bounded queue on a single processing thread so frames are handled
//! strictly one at a time in arrival order.

mod mock;
mod plugin;
mod runner;

pub use mock::{replay_registry, MockDetector, MockDetectorConfig, REPLAY_DETECTOR};
pub use plugin::{DetectorError, DetectorPlugin, PluginFactory, PluginRegistry};
pub use runner::{AgentRunner, RUNNER_QUEUE_CAPACITY};

use std::collections::BTreeMap;
use std::time::Instant;

use crate::protocol::{
    encode_message, topic_for, FrameMessage, ResultMessage, SessionConfig, StatusMessage, TargetState, TopicKind,
    BOOT_SESSION,
};
use crate::transport::TransportError;
use crate::vision::{filter_by_confidence, Detection};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("a detector named {0:?} is already registered")]
    DuplicatePlugin(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid target id: {0}")]
    InvalidTargetId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentState {
    Booted,
    Configured,
    Processing,
}

/// Pipeline stage, for the optional timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Infer,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageInterval {
    pub frame_id: u64,
    pub stage: Stage,
    pub start: Instant,
    pub end: Instant,
}

/// Subscription change requested by a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputChange {
    pub subscribe: String,
    pub unsubscribe: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigOutcome {
    pub status: StatusMessage,
    pub input: Option<InputChange>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    /// An encoded [`ResultMessage`] for the session's result topic.
    /// `duplicate` is set when it repeats an earlier publication.
    Result { payload: Vec<u8>, duplicate: bool },
    /// A run ended; the agent is configured again.
    EndOfStream,
    /// A stale end-of-stream marker.
    Ignored,
    Rejected(StatusMessage),
}

struct ActiveSession {
    config: SessionConfig,
    plugin: Box<dyn DetectorPlugin>,
    /// Encoded result per frame id, for the current run.
    results: BTreeMap<u64, Vec<u8>>,
    last_end_of_stream: Option<u64>,
}

pub struct AgentCore {
    target_id: String,
    registry: PluginRegistry,
    state: AgentState,
    session: Option<ActiveSession>,
    frames_processed: u64,
    timeline: Option<Vec<StageInterval>>,
}

impl AgentCore {
    pub fn new(target_id: &str, registry: PluginRegistry) -> Result<Self, AgentError> {
        topic_for(BOOT_SESSION, TopicKind::Status, Some(target_id))
            .map_err(|e| AgentError::InvalidTargetId(e.to_string()))?;
        Ok(AgentCore {
            target_id: target_id.to_string(),
            registry,
            state: AgentState::Booted,
            session: None,
            frames_processed: 0,
            timeline: None,
        })
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }

    pub fn state(&self) -> AgentState {
        self.state
    }

    pub fn config(&self) -> Option<&SessionConfig> {
        self.session.as_ref().map(|s| &s.config)
    }

    /// Distinct frames run through the detector since boot.
    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    pub fn registry(&self) -> &PluginRegistry {
        &self.registry
    }

    /// Starts recording stage intervals.
    pub fn record_timeline(&mut self) {
        self.timeline.get_or_insert_with(Vec::new);
    }

    pub fn timeline(&self) -> &[StageInterval] {
        self.timeline.as_deref().unwrap_or(&[])
    }

    pub fn ready_status(&self) -> StatusMessage {
        StatusMessage::new(&self.target_id, TargetState::Ready, "")
    }

    /// Topic a status about `session_id` goes to. Falls back to the boot
    /// session when the id cannot form a topic.
    pub fn status_topic(&self, session_id: &str) -> String {
        topic_for(session_id, TopicKind::Status, Some(&self.target_id))
            .or_else(|_| topic_for(BOOT_SESSION, TopicKind::Status, Some(&self.target_id)))
            .expect("target id validated at construction")
    }

    pub fn result_topic(&self) -> Option<String> {
        self.config().map(|c| format!("{}/{}", c.result_topic, self.target_id))
    }

    fn error(&self, detail: impl Into<String>) -> StatusMessage {
        StatusMessage::new(&self.target_id, TargetState::Error, detail)
    }

    pub fn handle_config(&mut self, config: SessionConfig) -> ConfigOutcome {
        let reject = |core: &Self, detail: String| {
            log::warn!("{}: rejecting config for session {:?}: {detail}", core.target_id, config.session_id);
            ConfigOutcome { status: core.error(detail), input: None }
        };
        if let Err(e) = config.validate() {
            return reject(self, format!("invalid config: {e}"));
        }
        if let Some(active) = &self.session {
            if active.config == config {
                // Redelivered or republished config: acknowledge again.
                return ConfigOutcome {
                    status: StatusMessage::new(&self.target_id, TargetState::Configured, ""),
                    input: None,
                };
            }
            if self.state == AgentState::Processing {
                return reject(
                    self,
                    format!("busy with session {:?}; config arrived mid-session", active.config.session_id),
                );
            }
        }
        let Some(plugin) = self.registry.create(&config.detector_name) else {
            return reject(
                self,
                format!("unknown detector {:?}; registered: {:?}", config.detector_name, self.registry.names()),
            );
        };
        let previous = self.session.take().map(|s| s.config.input_topic);
        let input = InputChange {
            subscribe: config.input_topic.clone(),
            unsubscribe: previous,
        };
        log::info!("{}: configured for session {:?} with {:?}", self.target_id, config.session_id, plugin.name());
        self.session = Some(ActiveSession {
            config,
            plugin,
            results: BTreeMap::new(),
            last_end_of_stream: None,
        });
        self.state = AgentState::Configured;
        ConfigOutcome {
            status: StatusMessage::new(&self.target_id, TargetState::Configured, ""),
            input: Some(input),
        }
    }

    pub fn process_frame(&mut self, frame: FrameMessage) -> FrameOutcome {
        let Some(session) = self.session.as_mut() else {
            return FrameOutcome::Rejected(self.error(format!("frame {} arrived before any config", frame.frame_id)));
        };
        if frame.session_id != session.config.session_id {
            let detail = format!(
                "frame {} belongs to unknown session {:?} (active: {:?})",
                frame.frame_id, frame.session_id, session.config.session_id
            );
            return FrameOutcome::Rejected(self.error(detail));
        }
        if frame.end_of_stream {
            if session.last_end_of_stream.is_some_and(|last| frame.frame_id <= last) {
                return FrameOutcome::Ignored;
            }
            session.last_end_of_stream = Some(frame.frame_id);
            session.results.clear();
            self.state = AgentState::Configured;
            return FrameOutcome::EndOfStream;
        }
        if let Err(e) = frame.validate() {
            return FrameOutcome::Rejected(self.error(format!("malformed frame {}: {e}", frame.frame_id)));
        }
        if let Some(payload) = session.results.get(&frame.frame_id) {
            return FrameOutcome::Result { payload: payload.clone(), duplicate: true };
        }
        self.state = AgentState::Processing;

        match run_pipeline(&self.target_id, session, &frame, self.timeline.as_mut()) {
            Ok(result) => {
                let payload = encode_message(&result.into()).expect("agent builds valid results");
                self.frames_processed += 1;
                session.results.insert(frame.frame_id, payload.clone());
                FrameOutcome::Result { payload, duplicate: false }
            }
            Err(detail) => FrameOutcome::Rejected(self.error(format!("frame {}: {detail}", frame.frame_id))),
        }
    }
}

fn run_pipeline(
    target_id: &str,
    session: &mut ActiveSession,
    frame: &FrameMessage,
    mut timeline: Option<&mut Vec<StageInterval>>,
) -> Result<ResultMessage, String> {
    let cfg = &session.config;
    let mut record = |stage, start: Instant, end: Instant| {
        if let Some(t) = timeline.as_deref_mut() {
            t.push(StageInterval { frame_id: frame.frame_id, stage, start, end });
        }
        (end - start).as_secs_f64() * 1000.0
    };
    let plugin = &mut session.plugin;

    let t0 = Instant::now();
    let input = plugin
        .preprocess(frame, cfg.model_input_width, cfg.model_input_height)
        .map_err(|e| format!("preprocess: {e}"))?;
    let t1 = Instant::now();
    let pre_ms = record(Stage::Pre, t0, t1);

    let t0 = Instant::now();
    let raw = plugin.infer(&input, frame.frame_id).map_err(|e| format!("inference: {e}"))?;
    let t1 = Instant::now();
    let infer_ms = record(Stage::Infer, t0, t1);

    let t0 = Instant::now();
    let dets = plugin
        .postprocess(&raw, input.scale, cfg.confidence_threshold, cfg.nms_threshold)
        .map_err(|e| format!("postprocess: {e}"))?;
    let t1 = Instant::now();
    let post_ms = record(Stage::Post, t0, t1);

    let mut detections = Vec::with_capacity(dets.len());
    for d in filter_by_confidence(&dets, cfg.confidence_threshold) {
        match d.validate() {
            Ok(()) => detections.push(d),
            Err(e) => return Err(format!("detector {:?} produced an invalid detection: {e}", plugin.name())),
        }
    }

    let annotated_image = cfg.echo_annotated_images.then(|| annotate(frame, &detections));
    Ok(ResultMessage {
        session_id: cfg.session_id.clone(),
        target_id: target_id.to_string(),
        frame_id: frame.frame_id,
        detections,
        pre_ms,
        infer_ms,
        post_ms,
        annotated_image,
    })
}

/// Copy of `frame` with a 1-px outline around every detection, green in
/// 3-channel (BGR) images and white otherwise.
pub fn annotate(frame: &FrameMessage, detections: &[Detection]) -> FrameMessage {
    let mut out = frame.clone();
    let (cols, rows, ch) = (frame.cols as i64, frame.rows as i64, frame.channels as usize);
    if cols == 0 || rows == 0 || ch == 0 {
        return out;
    }
    let color: Vec<u8> = if ch == 3 { vec![0, 255, 0] } else { vec![255; ch] };
    let mut put = |x: i64, y: i64| {
        if (0..cols).contains(&x) && (0..rows).contains(&y) {
            let i = (y as usize * cols as usize + x as usize) * ch;
            out.pixel_data[i..i + ch].copy_from_slice(&color);
        }
    };
    for d in detections {
        let b = d.bbox;
        let clamp_x = |v: f64| (v.round() as i64).clamp(0, cols - 1);
        let clamp_y = |v: f64| (v.round() as i64).clamp(0, rows - 1);
        let (x0, x1, y0, y1) = (clamp_x(b.x0), clamp_x(b.x1), clamp_y(b.y0), clamp_y(b.y1));
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FrameGroundTruth;
    use crate::protocol::{decode_message, ElementType, Message, MessageKind};
    use crate::vision::{BBox, GroundTruthBox};
    use std::sync::Arc;

    fn ground_truth() -> Arc<FrameGroundTruth> {
        let mut gt = FrameGroundTruth::new();
        for f in 0..5u64 {
            gt.insert(
                f,
                vec![
                    GroundTruthBox { bbox: BBox::new(2.0, 2.0, 10.0, 12.0).unwrap(), class_id: 0, frame_id: f },
                    GroundTruthBox { bbox: BBox::new(20.0, 4.0, 30.0, 14.0).unwrap(), class_id: 1, frame_id: f },
                ],
            );
        }
        Arc::new(gt)
    }

    fn registry(infer_ms: f64) -> PluginRegistry {
        let gt = ground_truth();
        let mut reg = PluginRegistry::new();
        let exact = MockDetectorConfig::exact(gt.clone());
        reg.register("replay", move || Box::new(MockDetector::new("replay", exact.clone()).unwrap())).unwrap();
        let mut slow = MockDetectorConfig::exact(gt);
        slow.synthetic_infer_ms = infer_ms;
        reg.register("slow", move || Box::new(MockDetector::new("slow", slow.clone()).unwrap())).unwrap();
        reg
    }

    fn config(sid: &str, det: &str) -> SessionConfig {
        let mut c = SessionConfig::standard(sid, det).unwrap();
        c.confidence_threshold = 0.0;
        c.model_input_width = 32;
        c.model_input_height = 16;
        c
    }

    fn frame(sid: &str, id: u64) -> FrameMessage {
        FrameMessage {
            session_id: sid.into(),
            frame_id: id,
            rows: 16,
            cols: 32,
            channels: 3,
            element_type: ElementType::U8,
            pixel_data: vec![7; 16 * 32 * 3],
            end_of_stream: false,
        }
    }

    fn decode_result(payload: &[u8]) -> ResultMessage {
        match decode_message(payload, MessageKind::Result).unwrap() {
            Message::Result(r) => r,
            other => panic!("expected result, got {other:?}"),
        }
    }

    fn configured(core: &mut AgentCore, cfg: SessionConfig) {
        let out = core.handle_config(cfg);
        assert_eq!(out.status.state, TargetState::Configured, "{}", out.status.detail);
    }

    #[test]
    fn registered_detector_configures() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        assert_eq!(core.state(), AgentState::Booted);
        let out = core.handle_config(config("s1", "replay"));
        assert_eq!(out.status.state, TargetState::Configured);
        assert_eq!(out.input, Some(InputChange { subscribe: "bench/s1/input".into(), unsubscribe: None }));
        assert_eq!(core.state(), AgentState::Configured);
        assert_eq!(core.result_topic().unwrap(), "bench/s1/result/t1");
    }

    #[test]
    fn unknown_detector_is_an_error_status() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        let out = core.handle_config(config("s1", "nonexistent"));
        assert_eq!(out.status.state, TargetState::Error);
        assert!(out.status.detail.contains("nonexistent"));
        assert_eq!(out.input, None);
        assert_eq!(core.state(), AgentState::Booted);
    }

    #[test]
    fn invalid_target_id_rejected() {
        assert!(AgentCore::new("a/b", PluginRegistry::new()).is_err());
        assert!(AgentCore::new("", PluginRegistry::new()).is_err());
    }

    #[test]
    fn exact_replay_returns_ground_truth() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        configured(&mut core, config("s1", "replay"));
        let FrameOutcome::Result { payload, duplicate } = core.process_frame(frame("s1", 3)) else { panic!() };
        assert!(!duplicate);
        let r = decode_result(&payload);
        assert_eq!((r.session_id.as_str(), r.target_id.as_str(), r.frame_id), ("s1", "t1", 3));
        let gt = &ground_truth()[&3];
        assert_eq!(r.detections.len(), 2);
        for (d, g) in r.detections.iter().zip(gt) {
            assert_eq!((d.bbox, d.class_id, d.confidence), (g.bbox, g.class_id, 1.0));
        }
        assert_eq!(core.state(), AgentState::Processing);
    }

    #[test]
    fn duplicate_frame_is_processed_once() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        configured(&mut core, config("s1", "replay"));
        let first = core.process_frame(frame("s1", 1));
        let second = core.process_frame(frame("s1", 1));
        let (FrameOutcome::Result { payload: a, duplicate: false }, FrameOutcome::Result { payload: b, duplicate: true }) =
            (first, second)
        else {
            panic!("unexpected outcomes")
        };
        assert_eq!(a, b);
        assert_eq!(core.frames_processed(), 1);
    }

    #[test]
    fn end_of_stream_resets_run() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        configured(&mut core, config("s1", "replay"));
        core.process_frame(frame("s1", 0));
        assert_eq!(core.process_frame(FrameMessage::end_of_stream("s1", 1)), FrameOutcome::EndOfStream);
        assert_eq!(core.state(), AgentState::Configured);
        assert_eq!(core.process_frame(FrameMessage::end_of_stream("s1", 1)), FrameOutcome::Ignored);
        // Next run processes frame 0 afresh.
        assert!(matches!(core.process_frame(frame("s1", 0)), FrameOutcome::Result { duplicate: false, .. }));
        assert_eq!(core.frames_processed(), 2);
    }

    #[test]
    fn foreign_and_malformed_frames_rejected() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        assert!(matches!(core.process_frame(frame("s1", 0)), FrameOutcome::Rejected(_)));
        configured(&mut core, config("s1", "replay"));
        let FrameOutcome::Rejected(st) = core.process_frame(frame("other", 0)) else { panic!() };
        assert!(st.detail.contains("other"));
        let mut bad = frame("s1", 0);
        bad.pixel_data.pop();
        assert!(matches!(core.process_frame(bad), FrameOutcome::Rejected(_)));
    }

    #[test]
    fn config_rules() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        let cfg = config("s1", "replay");
        configured(&mut core, cfg.clone());
        core.process_frame(frame("s1", 0));
        // Same config again: re-acknowledged without resubscribing.
        let again = core.handle_config(cfg.clone());
        assert_eq!((again.status.state, again.input), (TargetState::Configured, None));
        // A different session mid-run is rejected and changes nothing.
        let busy = core.handle_config(config("s2", "replay"));
        assert_eq!(busy.status.state, TargetState::Error);
        assert_eq!(core.config().unwrap().session_id, "s1");
        // After the run ends, a new session reconfigures cleanly.
        core.process_frame(FrameMessage::end_of_stream("s1", 1));
        let next = core.handle_config(config("s2", "slow"));
        assert_eq!(next.status.state, TargetState::Configured);
        assert_eq!(
            next.input,
            Some(InputChange { subscribe: "bench/s2/input".into(), unsubscribe: Some("bench/s1/input".into()) })
        );
        assert_eq!(core.config().unwrap().detector_name, "slow");
    }

    #[test]
    fn synthetic_latency_lower_bounds_infer_time() {
        let mut core = AgentCore::new("t1", registry(25.0)).unwrap();
        configured(&mut core, config("s1", "slow"));
        let FrameOutcome::Result { payload, .. } = core.process_frame(frame("s1", 0)) else { panic!() };
        assert!(decode_result(&payload).infer_ms >= 25.0);
    }

    #[test]
    fn stage_intervals_never_overlap() {
        let mut core = AgentCore::new("t1", registry(1.0)).unwrap();
        core.record_timeline();
        configured(&mut core, config("s1", "slow"));
        for f in 0..5 {
            core.process_frame(frame("s1", f));
        }
        let t = core.timeline();
        assert_eq!(t.len(), 15);
        for w in t.windows(2) {
            assert!(w[0].start <= w[0].end && w[0].end <= w[1].start);
        }
    }

    #[test]
    fn confidence_threshold_rechecked() {
        let mut gt = FrameGroundTruth::new();
        gt.insert(0, vec![GroundTruthBox { bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), class_id: 0, frame_id: 0 }]);
        let mut cfg = MockDetectorConfig::exact(Arc::new(gt));
        cfg.confidence_noise = 1.0;
        cfg.seed = 3;
        // A plugin whose postprocess ignores the threshold.
        struct Sloppy(MockDetector);
        impl DetectorPlugin for Sloppy {
            fn name(&self) -> &str {
                "sloppy"
            }
            fn infer(&mut self, input: &crate::vision::Preprocessed, id: u64) -> Result<Vec<Detection>, DetectorError> {
                self.0.infer(input, id)
            }
            fn postprocess(
                &mut self,
                raw: &[Detection],
                _: crate::vision::ScaleFactors,
                _: f64,
                _: f64,
            ) -> Result<Vec<Detection>, DetectorError> {
                Ok(raw.to_vec())
            }
        }
        let mut reg = PluginRegistry::new();
        reg.register("sloppy", move || Box::new(Sloppy(MockDetector::new("m", cfg.clone()).unwrap()))).unwrap();
        let mut core = AgentCore::new("t1", reg).unwrap();
        let mut sc = config("s1", "sloppy");
        sc.model_input_width = 32;
        sc.model_input_height = 16;
        sc.confidence_threshold = 1.0;
        configured(&mut core, sc);
        let FrameOutcome::Result { payload, .. } = core.process_frame(frame("s1", 0)) else { panic!() };
        assert!(decode_result(&payload).detections.iter().all(|d| d.confidence >= 1.0));
    }

    #[test]
    fn echo_draws_green_outlines() {
        let f = frame("s1", 0);
        let d = Detection::new(BBox::new(2.0, 3.0, 6.0, 8.0).unwrap(), 0, 1.0).unwrap();
        let out = annotate(&f, &[d]);
        let px = |x: usize, y: usize| &out.pixel_data[(y * 32 + x) * 3..(y * 32 + x) * 3 + 3];
        assert_eq!(px(2, 3), [0, 255, 0]);
        assert_eq!(px(6, 8), [0, 255, 0]);
        assert_eq!(px(4, 3), [0, 255, 0]);
        assert_eq!(px(4, 5), [7, 7, 7]);
        assert_eq!(px(0, 0), [7, 7, 7]);
        let changed = out.pixel_data.chunks(3).filter(|p| *p == [0, 255, 0]).count();
        assert_eq!(changed, 2 * 5 + 2 * 4);
    }

    #[test]
    fn echo_attached_when_requested() {
        let mut core = AgentCore::new("t1", registry(0.0)).unwrap();
        let mut cfg = config("s1", "replay");
        cfg.echo_annotated_images = true;
        configured(&mut core, cfg);
        let FrameOutcome::Result { payload, .. } = core.process_frame(frame("s1", 0)) else { panic!() };
        let img = decode_result(&payload).annotated_image.unwrap();
        assert_eq!((img.rows, img.cols, img.frame_id), (16, 32, 0));
        assert!(img.pixel_data.chunks(3).any(|p| p == [0, 255, 0]));
    }
}
