use thiserror::Error;

/// Session id used for announcements made before any session exists, such as
/// a target's boot-time `ready` status.
pub const BOOT_SESSION: &str = "_";

/// Matches the config topic of every session.
pub const ALL_CONFIGS: &str = "bench/+/config";

/// Matches every target's status topic in every session.
pub const ALL_STATUSES: &str = "bench/+/status/+";

const ROOT: &str = "bench";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopicKind {
    Config,
    Input,
    Result,
    Status,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{what} {value:?} contains a reserved character ('/', '+', '#' or NUL)")]
    Reserved { what: &'static str, value: String },
    #[error("{0:?} topics need a target id")]
    MissingTarget(TopicKind),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
}

fn check_segment(what: &'static str, value: &str) -> Result<(), TopicError> {
    if value.is_empty() {
        return Err(TopicError::Empty(what));
    }
    if value.contains(['/', '+', '#', '\0']) {
        return Err(TopicError::Reserved { what, value: value.to_string() });
    }
    Ok(())
}

/// Topic for one message stream of a session:
/// `bench/<sid>/config`, `bench/<sid>/input`, `bench/<sid>/result/<tid>`,
/// `bench/<sid>/status/<tid>`.
///
/// Session and target ids may not contain topic separators or wildcards, so
/// distinct arguments always produce distinct topics. `target_id` is ignored
/// for config and input topics.
pub fn topic_for(session_id: &str, kind: TopicKind, target_id: Option<&str>) -> Result<String, TopicError> {
    check_segment("session id", session_id)?;
    let per_target = |leaf: &str| -> Result<String, TopicError> {
        let tid = target_id.ok_or(TopicError::MissingTarget(kind))?;
        check_segment("target id", tid)?;
        Ok(format!("{ROOT}/{session_id}/{leaf}/{tid}"))
    };
    match kind {
        TopicKind::Config => Ok(format!("{ROOT}/{session_id}/config")),
        TopicKind::Input => Ok(format!("{ROOT}/{session_id}/input")),
        TopicKind::Result => per_target("result"),
        TopicKind::Status => per_target("status"),
    }
}

/// Checks a concrete publish topic: non-empty levels, no wildcards.
pub fn validate_topic(topic: &str) -> Result<(), TopicError> {
    if topic.is_empty() || topic.contains(['+', '#', '\0']) || topic.split('/').any(str::is_empty) {
        return Err(TopicError::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

/// Checks a subscription filter. Levels are literal or a lone `+`, which
/// matches exactly one level. Multi-level `#` is not supported.
pub fn validate_filter(filter: &str) -> Result<(), TopicError> {
    let bad = filter.is_empty()
        || filter.contains(['#', '\0'])
        || filter
            .split('/')
            .any(|level| level.is_empty() || (level.contains('+') && level != "+"));
    if bad {
        Err(TopicError::InvalidFilter(filter.to_string()))
    } else {
        Ok(())
    }
}

/// Matches a concrete topic against a validated filter.
pub fn filter_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (None, None) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            _ => return false,
        }
    }
}
