//! Messages exchanged between host and targets.
//!
//! Every message has a canonical binary encoding: a MessagePack map with
//! fixed string keys written in a fixed order, integers in their shortest
//! form and all reals as 64-bit floats. Equal messages always encode to the
//! same bytes. See [`encode_message`] and [`decode_message`].

mod topic;
mod wire;

pub use topic::{
    filter_matches, topic_for, validate_filter, validate_topic, TopicError, TopicKind, ALL_CONFIGS, ALL_STATUSES,
    BOOT_SESSION,
};
pub use wire::{decode_message, encode_message, DecodeError, EncodeError};

use serde::{Deserialize, Serialize};

use crate::vision::Detection;

/// Experiment description the host publishes to every target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub detector_name: String,
    pub input_topic: String,
    pub result_topic: String,
    pub confidence_threshold: f64,
    pub nms_threshold: f64,
    pub run_count: u32,
    pub echo_annotated_images: bool,
    pub model_input_width: u32,
    pub model_input_height: u32,
}

impl SessionConfig {
    /// Builds a config whose topics follow the standard scheme. The result
    /// topic stored here is the per-session prefix; each target appends its
    /// own id (see [`topic_for`]).
    pub fn standard(session_id: &str, detector_name: &str) -> Result<Self, TopicError> {
        Ok(SessionConfig {
            session_id: session_id.to_string(),
            detector_name: detector_name.to_string(),
            input_topic: topic_for(session_id, TopicKind::Input, None)?,
            result_topic: format!("bench/{session_id}/result"),
            confidence_threshold: 0.25,
            nms_threshold: 0.45,
            run_count: 1,
            echo_annotated_images: false,
            model_input_width: 416,
            model_input_height: 416,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.session_id.is_empty() {
            return Err("session_id is empty".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(format!("confidence_threshold {} outside [0, 1]", self.confidence_threshold));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(format!("nms_threshold {} outside [0, 1]", self.nms_threshold));
        }
        if self.run_count == 0 {
            return Err("run_count must be at least 1".into());
        }
        if self.input_topic == self.result_topic {
            return Err(format!("input and result topics are both {:?}", self.input_topic));
        }
        if self.model_input_width == 0 || self.model_input_height == 0 {
            return Err("model input size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    U8,
}

impl ElementType {
    pub fn as_str(self) -> &'static str {
        match self {
            ElementType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "u8" => Some(ElementType::U8),
            _ => None,
        }
    }
}

/// One image, row-major with interleaved BGR channels, or an end-of-stream
/// marker carrying no pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub session_id: String,
    pub frame_id: u64,
    pub rows: u32,
    pub cols: u32,
    pub channels: u32,
    pub element_type: ElementType,
    pub pixel_data: Vec<u8>,
    pub end_of_stream: bool,
}

impl FrameMessage {
    /// End-of-stream marker. The host uses the run index as `frame_id` so a
    /// late duplicate of one run's marker cannot terminate the next run.
    pub fn end_of_stream(session_id: &str, marker_id: u64) -> Self {
        FrameMessage {
            session_id: session_id.to_string(),
            frame_id: marker_id,
            rows: 0,
            cols: 0,
            channels: 0,
            element_type: ElementType::U8,
            pixel_data: Vec::new(),
            end_of_stream: true,
        }
    }

    pub fn expected_len(&self) -> u64 {
        self.rows as u64 * self.cols as u64 * self.channels as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.end_of_stream {
            if !self.pixel_data.is_empty() {
                return Err(format!("end-of-stream frame carries {} pixel bytes", self.pixel_data.len()));
            }
        } else if self.expected_len() != self.pixel_data.len() as u64 {
            return Err(format!(
                "pixel_data holds {} bytes but {}x{}x{} needs {}",
                self.pixel_data.len(),
                self.rows,
                self.cols,
                self.channels,
                self.expected_len()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultMessage {
    pub session_id: String,
    pub target_id: String,
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    pub pre_ms: f64,
    pub infer_ms: f64,
    pub post_ms: f64,
    pub annotated_image: Option<FrameMessage>,
}

impl ResultMessage {
    pub fn total_ms(&self) -> f64 {
        self.pre_ms + self.infer_ms + self.post_ms
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("pre", self.pre_ms), ("inf", self.infer_ms), ("post", self.post_ms)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} timing {v} is not a non-negative finite value"));
            }
        }
        for d in &self.detections {
            d.validate().map_err(|e| e.to_string())?;
        }
        if let Some(img) = &self.annotated_image {
            img.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetState {
    Ready,
    Configured,
    Error,
}

impl TargetState {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetState::Ready => "ready",
            TargetState::Configured => "configured",
            TargetState::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ready" => Some(TargetState::Ready),
            "configured" => Some(TargetState::Configured),
            "error" => Some(TargetState::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusMessage {
    pub target_id: String,
    pub state: TargetState,
    pub detail: String,
}

impl StatusMessage {
    pub fn new(target_id: &str, state: TargetState, detail: impl Into<String>) -> Self {
        StatusMessage { target_id: target_id.to_string(), state, detail: detail.into() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.state == TargetState::Error && self.detail.is_empty() {
            return Err("error status needs a detail".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Config,
    Frame,
    Result,
    Status,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Config(SessionConfig),
    Frame(FrameMessage),
    Result(ResultMessage),
    Status(StatusMessage),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Config(_) => MessageKind::Config,
            Message::Frame(_) => MessageKind::Frame,
            Message::Result(_) => MessageKind::Result,
            Message::Status(_) => MessageKind::Status,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Message::Config(m) => m.validate(),
            Message::Frame(m) => m.validate(),
            Message::Result(m) => m.validate(),
            Message::Status(m) => m.validate(),
        }
    }
}

impl From<SessionConfig> for Message {
    fn from(m: SessionConfig) -> Self {
        Message::Config(m)
    }
}

impl From<FrameMessage> for Message {
    fn from(m: FrameMessage) -> Self {
        Message::Frame(m)
    }
}

impl From<ResultMessage> for Message {
    fn from(m: ResultMessage) -> Self {
        Message::Result(m)
    }
}

impl From<StatusMessage> for Message {
    fn from(m: StatusMessage) -> Self {
        Message::Status(m)
    }
}
