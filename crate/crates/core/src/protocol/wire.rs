use std::io::ErrorKind;

use rmpv::Value;
use thiserror::Error;

use super::{
    ElementType, FrameMessage, Message, MessageKind, ResultMessage, SessionConfig, StatusMessage, TargetState,
};
use crate::vision::{BBox, Detection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("refusing to encode {kind:?} message: {reason}")]
    Invariant { kind: MessageKind, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("buffer ends before the message is complete")]
    Truncated,
    #[error("expected a {expected:?} message, found {found:?}")]
    KindMismatch { expected: MessageKind, found: MessageKind },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("{kind:?} message violates an invariant: {reason}")]
    Invariant { kind: MessageKind, reason: String },
}

/// Encodes a message into its canonical wire form.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    msg.validate().map_err(|reason| EncodeError::Invariant { kind: msg.kind(), reason })?;
    let value = match msg {
        Message::Config(m) => config_value(m),
        Message::Frame(m) => frame_value(m),
        Message::Result(m) => result_value(m),
        Message::Status(m) => status_value(m),
    };
    let mut buf = Vec::new();
    rmpv::encode::write_value(&mut buf, &value).expect("writing to a Vec cannot fail");
    Ok(buf)
}

/// Decodes a buffer that is expected to hold a message of `expected` kind.
pub fn decode_message(buf: &[u8], expected: MessageKind) -> Result<Message, DecodeError> {
    let mut rd = buf;
    let value = rmpv::decode::read_value(&mut rd).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => DecodeError::Truncated,
        _ => DecodeError::Malformed(e.to_string()),
    })?;
    if !rd.is_empty() {
        return Err(DecodeError::Malformed(format!("{} trailing bytes", rd.len())));
    }
    let map = Fields::new(&value)?;
    let found = map.kind()?;
    if found != expected {
        return Err(DecodeError::KindMismatch { expected, found });
    }
    let msg = match found {
        MessageKind::Config => Message::Config(read_config(&map)?),
        MessageKind::Frame => Message::Frame(read_frame(&map)?),
        MessageKind::Result => Message::Result(read_result(&map)?),
        MessageKind::Status => Message::Status(read_status(&map)?),
    };
    msg.validate().map_err(|reason| DecodeError::Invariant { kind: found, reason })?;
    Ok(msg)
}

fn str_v(s: &str) -> Value {
    Value::from(s)
}

// -0.0 and 0.0 compare equal, so they must share one encoding.
fn f64_v(v: f64) -> Value {
    Value::F64(if v == 0.0 { 0.0 } else { v })
}

fn entry(key: &str, v: Value) -> (Value, Value) {
    (str_v(key), v)
}

fn config_value(m: &SessionConfig) -> Value {
    Value::Map(vec![
        entry("sid", str_v(&m.session_id)),
        entry("det", str_v(&m.detector_name)),
        entry("tin", str_v(&m.input_topic)),
        entry("tres", str_v(&m.result_topic)),
        entry("cthr", f64_v(m.confidence_threshold)),
        entry("nthr", f64_v(m.nms_threshold)),
        entry("runs", Value::from(m.run_count)),
        entry("echo", Value::Boolean(m.echo_annotated_images)),
        entry("w", Value::from(m.model_input_width)),
        entry("h", Value::from(m.model_input_height)),
    ])
}

fn frame_value(m: &FrameMessage) -> Value {
    Value::Map(vec![
        entry("sid", str_v(&m.session_id)),
        entry("fid", Value::from(m.frame_id)),
        entry("rows", Value::from(m.rows)),
        entry("cols", Value::from(m.cols)),
        entry("ch", Value::from(m.channels)),
        entry("et", str_v(m.element_type.as_str())),
        entry("px", Value::Binary(m.pixel_data.clone())),
        entry("eos", Value::Boolean(m.end_of_stream)),
    ])
}

fn detection_value(d: &Detection) -> Value {
    Value::Map(vec![
        entry("cls", Value::from(d.class_id)),
        entry("conf", f64_v(d.confidence)),
        entry("x0", f64_v(d.bbox.x0)),
        entry("y0", f64_v(d.bbox.y0)),
        entry("x1", f64_v(d.bbox.x1)),
        entry("y1", f64_v(d.bbox.y1)),
    ])
}

fn result_value(m: &ResultMessage) -> Value {
    let mut fields = vec![
        entry("sid", str_v(&m.session_id)),
        entry("tid", str_v(&m.target_id)),
        entry("fid", Value::from(m.frame_id)),
        entry("dets", Value::Array(m.detections.iter().map(detection_value).collect())),
        entry("pre", f64_v(m.pre_ms)),
        entry("inf", f64_v(m.infer_ms)),
        entry("post", f64_v(m.post_ms)),
    ];
    if let Some(img) = &m.annotated_image {
        fields.push(entry("img", frame_value(img)));
    }
    Value::Map(fields)
}

fn status_value(m: &StatusMessage) -> Value {
    Value::Map(vec![
        entry("tid", str_v(&m.target_id)),
        entry("st", str_v(m.state.as_str())),
        entry("msg", str_v(&m.detail)),
    ])
}

/// String-keyed view over a decoded map. Unknown keys are ignored.
struct Fields<'a> {
    entries: &'a [(Value, Value)],
}

impl<'a> Fields<'a> {
    fn new(v: &'a Value) -> Result<Self, DecodeError> {
        match v {
            Value::Map(entries) => Ok(Fields { entries }),
            other => Err(DecodeError::Malformed(format!("expected a map, found {other}"))),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.entries.iter().find(|(k, _)| k.as_str() == Some(key)).map(|(_, v)| v)
    }

    fn has(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    /// Each kind carries a key no other kind uses.
    fn kind(&self) -> Result<MessageKind, DecodeError> {
        if self.has("px") {
            Ok(MessageKind::Frame)
        } else if self.has("dets") {
            Ok(MessageKind::Result)
        } else if self.has("det") {
            Ok(MessageKind::Config)
        } else if self.has("st") {
            Ok(MessageKind::Status)
        } else {
            Err(DecodeError::Malformed("map matches no known message kind".into()))
        }
    }

    fn req(&self, key: &str) -> Result<&'a Value, DecodeError> {
        self.get(key).ok_or_else(|| DecodeError::Malformed(format!("missing field {key:?}")))
    }

    fn string(&self, key: &str) -> Result<String, DecodeError> {
        self.req(key)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| type_error(key, "a UTF-8 string"))
    }

    fn u64(&self, key: &str) -> Result<u64, DecodeError> {
        self.req(key)?.as_u64().ok_or_else(|| type_error(key, "an unsigned integer"))
    }

    fn u32(&self, key: &str) -> Result<u32, DecodeError> {
        u32::try_from(self.u64(key)?).map_err(|_| type_error(key, "a 32-bit unsigned integer"))
    }

    fn f64(&self, key: &str) -> Result<f64, DecodeError> {
        let v = self.req(key)?;
        v.as_f64()
            .or_else(|| v.as_i64().map(|i| i as f64))
            .or_else(|| v.as_u64().map(|u| u as f64))
            .ok_or_else(|| type_error(key, "a number"))
    }

    fn bool(&self, key: &str) -> Result<bool, DecodeError> {
        self.req(key)?.as_bool().ok_or_else(|| type_error(key, "a boolean"))
    }
}

fn type_error(key: &str, what: &str) -> DecodeError {
    DecodeError::Malformed(format!("field {key:?} is not {what}"))
}

fn read_config(f: &Fields) -> Result<SessionConfig, DecodeError> {
    Ok(SessionConfig {
        session_id: f.string("sid")?,
        detector_name: f.string("det")?,
        input_topic: f.string("tin")?,
        result_topic: f.string("tres")?,
        confidence_threshold: f.f64("cthr")?,
        nms_threshold: f.f64("nthr")?,
        run_count: f.u32("runs")?,
        echo_annotated_images: f.bool("echo")?,
        model_input_width: f.u32("w")?,
        model_input_height: f.u32("h")?,
    })
}

fn read_frame(f: &Fields) -> Result<FrameMessage, DecodeError> {
    let et = f.string("et")?;
    let element_type =
        ElementType::parse(&et).ok_or_else(|| DecodeError::Malformed(format!("unknown element type {et:?}")))?;
    let pixel_data = match f.req("px")? {
        Value::Binary(b) => b.clone(),
        _ => return Err(type_error("px", "a binary buffer")),
    };
    Ok(FrameMessage {
        session_id: f.string("sid")?,
        frame_id: f.u64("fid")?,
        rows: f.u32("rows")?,
        cols: f.u32("cols")?,
        channels: f.u32("ch")?,
        element_type,
        pixel_data,
        end_of_stream: f.bool("eos")?,
    })
}

fn read_detection(v: &Value) -> Result<Detection, DecodeError> {
    let f = Fields::new(v)?;
    Ok(Detection {
        bbox: BBox { x0: f.f64("x0")?, y0: f.f64("y0")?, x1: f.f64("x1")?, y1: f.f64("y1")? },
        class_id: f.u32("cls")?,
        confidence: f.f64("conf")?,
    })
}

fn read_result(f: &Fields) -> Result<ResultMessage, DecodeError> {
    let detections = match f.req("dets")? {
        Value::Array(items) => items.iter().map(read_detection).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(type_error("dets", "an array")),
    };
    let annotated_image = match f.get("img") {
        None | Some(Value::Nil) => None,
        Some(v) => Some(read_frame(&Fields::new(v)?)?),
    };
    Ok(ResultMessage {
        session_id: f.string("sid")?,
        target_id: f.string("tid")?,
        frame_id: f.u64("fid")?,
        detections,
        pre_ms: f.f64("pre")?,
        infer_ms: f.f64("inf")?,
        post_ms: f.f64("post")?,
        annotated_image,
    })
}

fn read_status(f: &Fields) -> Result<StatusMessage, DecodeError> {
    let st = f.string("st")?;
    let state = TargetState::parse(&st).ok_or_else(|| DecodeError::Malformed(format!("unknown state {st:?}")))?;
    Ok(StatusMessage { target_id: f.string("tid")?, state, detail: f.string("msg")? })
}
