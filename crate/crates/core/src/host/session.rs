use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::{decode_message, Message, MessageKind, ResultMessage, SessionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Configuring,
    Streaming,
    Draining,
    Evaluating,
    Done,
    Failed,
}

impl SessionState {
    pub fn is_active(self) -> bool {
        matches!(self, Self::Configuring | Self::Streaming | Self::Draining | Self::Evaluating)
    }

    /// Legal successor states.
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        match (self, next) {
            (Idle, Configuring) | (Configuring, Streaming) | (Streaming, Draining) => true,
            // Draining ends a run: either the next run streams or evaluation starts.
            (Draining, Streaming) | (Draining, Evaluating) | (Evaluating, Done) => true,
            (s, Failed) => s.is_active(),
            _ => false,
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("state serializes");
        f.write_str(s.as_str().expect("state is a string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResultKey {
    pub target_id: String,
    pub run: u32,
    pub frame_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredResult {
    pub bytes: Vec<u8>,
    pub result: ResultMessage,
}

/// Collected results, at most one per (target, run, frame).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultStore {
    entries: BTreeMap<ResultKey, StoredResult>,
}

impl ResultStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &ResultKey) -> Option<&StoredResult> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ResultKey, &StoredResult)> {
        self.entries.iter()
    }

    /// Results of one target, ordered by run then frame.
    pub fn for_target<'a>(&'a self, target_id: &'a str) -> impl Iterator<Item = (&'a ResultKey, &'a ResultMessage)> {
        self.entries.iter().filter(move |(k, _)| k.target_id == target_id).map(|(k, v)| (k, &v.result))
    }

    pub fn for_run<'a>(&'a self, target_id: &'a str, run: u32) -> impl Iterator<Item = &'a ResultMessage> {
        self.for_target(target_id).filter(move |(k, _)| k.run == run).map(|(_, r)| r)
    }

    pub fn count(&self, target_id: &str, run: u32) -> usize {
        self.for_run(target_id, run).count()
    }

    pub fn target_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|k| k.target_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: SessionState, to: SessionState },
    #[error("session has no targets")]
    NoTargets,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("invalid target id {0:?}")]
    InvalidTarget(String),
}

/// What [`Session::collect_result`] did with a payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Collected {
    Stored(ResultKey),
    /// Byte-identical to the stored result for its key.
    Duplicate,
    /// Byte-identical to a result stored in an earlier run: a late redelivery.
    Stale,
    /// Dropped without affecting the session.
    Rejected(String),
    /// The session has been failed.
    Failed(String),
}

/// Host-side session state: lifecycle and collected results.
///
/// All mutation goes through one owner; the orchestrator serializes
/// transport events into it.
#[derive(Debug, Clone)]
pub struct Session {
    config: SessionConfig,
    targets: BTreeSet<String>,
    frame_ids: BTreeSet<u64>,
    state: SessionState,
    run: u32,
    store: ResultStore,
    failure: Option<String>,
}

impl Session {
    pub fn new(
        config: SessionConfig,
        targets: impl IntoIterator<Item = String>,
        frame_ids: BTreeSet<u64>,
    ) -> Result<Self, SessionError> {
        config.validate().map_err(SessionError::InvalidConfig)?;
        let targets: BTreeSet<String> = targets.into_iter().collect();
        if targets.is_empty() {
            return Err(SessionError::NoTargets);
        }
        for t in &targets {
            crate::protocol::topic_for(&config.session_id, crate::protocol::TopicKind::Result, Some(t))
                .map_err(|_| SessionError::InvalidTarget(t.clone()))?;
        }
        if frame_ids.is_empty() {
            return Err(SessionError::EmptyDataset);
        }
        Ok(Session { config, targets, frame_ids, state: SessionState::Idle, run: 0, store: ResultStore::default(), failure: None })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn targets(&self) -> &BTreeSet<String> {
        &self.targets
    }

    pub fn frame_ids(&self) -> &BTreeSet<u64> {
        &self.frame_ids
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Current run, 1-based; 0 before streaming starts.
    pub fn run(&self) -> u32 {
        self.run
    }

    pub fn store(&self) -> &ResultStore {
        &self.store
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn transition(&mut self, next: SessionState) -> Result<(), SessionError> {
        if !self.state.can_become(next) {
            return Err(SessionError::IllegalTransition { from: self.state, to: next });
        }
        if next == SessionState::Streaming {
            self.run += 1;
        }
        log::debug!("session {}: {} -> {}", self.config.session_id, self.state, next);
        self.state = next;
        Ok(())
    }

    /// Moves to `failed` from any active state, keeping the first reason.
    pub fn fail(&mut self, reason: impl Into<String>) {
        let reason = reason.into();
        if self.state.is_active() {
            log::error!("session {} failed: {reason}", self.config.session_id);
            self.state = SessionState::Failed;
            self.failure.get_or_insert(reason);
        }
    }

    /// Results still outstanding for the current run.
    pub fn missing_in_run(&self) -> Vec<ResultKey> {
        let mut missing = Vec::new();
        for t in &self.targets {
            for &frame_id in &self.frame_ids {
                let key = ResultKey { target_id: t.clone(), run: self.run, frame_id };
                if self.store.get(&key).is_none() {
                    missing.push(key);
                }
            }
        }
        missing
    }

    pub fn run_complete(&self) -> bool {
        self.targets.iter().all(|t| self.store.count(t, self.run) == self.frame_ids.len())
    }

    /// Stores one encoded result under the current run.
    pub fn collect_result(&mut self, payload: &[u8]) -> Collected {
        if !matches!(self.state, SessionState::Streaming | SessionState::Draining) {
            return Collected::Rejected(format!("result arrived while {}", self.state));
        }
        let result = match decode_message(payload, MessageKind::Result) {
            Ok(Message::Result(r)) => r,
            Ok(_) => unreachable!("decoder returns the requested kind"),
            Err(e) => return Collected::Rejected(format!("undecodable result: {e}")),
        };
        if result.session_id != self.config.session_id {
            let reason = format!(
                "result from {:?} carries session id {:?}, expected {:?}",
                result.target_id, result.session_id, self.config.session_id
            );
            self.fail(reason.clone());
            return Collected::Failed(reason);
        }
        if !self.targets.contains(&result.target_id) {
            return Collected::Rejected(format!("result from undeclared target {:?}", result.target_id));
        }
        if !self.frame_ids.contains(&result.frame_id) {
            return Collected::Rejected(format!("result for frame {} outside the dataset", result.frame_id));
        }
        for earlier in 1..self.run {
            let key = ResultKey { target_id: result.target_id.clone(), run: earlier, frame_id: result.frame_id };
            if self.store.get(&key).is_some_and(|s| s.bytes == payload) {
                return Collected::Stale;
            }
        }
        let key = ResultKey { target_id: result.target_id.clone(), run: self.run, frame_id: result.frame_id };
        match self.store.entries.get(&key) {
            Some(stored) if stored.bytes == payload => Collected::Duplicate,
            Some(_) => {
                let reason = format!(
                    "conflicting results from {:?} for run {} frame {}",
                    key.target_id, key.run, key.frame_id
                );
                self.fail(reason.clone());
                Collected::Failed(reason)
            }
            None => {
                self.store.entries.insert(key.clone(), StoredResult { bytes: payload.to_vec(), result });
                Collected::Stored(key)
            }
        }
    }
}
