use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::evaluator::{EvaluationContext, EvaluatorRegistry, PowerInput, TargetReport};
use super::session::{Collected, ResultKey, ResultStore, Session, SessionError, SessionState};
use crate::protocol::{
    decode_message, encode_message, topic_for, FrameMessage, Message, MessageKind, SessionConfig, TargetState, TopicKind,
};
use crate::transport::{handler, DeliveryPolicy, Endpoint, SubscriptionId};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    pub targets: Vec<String>,
    pub policy: DeliveryPolicy,
    /// Wait for every target's `configured` status.
    pub config_timeout: Duration,
    /// Config is published again at this interval until all targets ack.
    pub config_republish: Duration,
    /// Wait for outstanding results after the last frame of a run, and the
    /// longest a stalled stream may wait for in-flight capacity.
    pub drain_timeout: Duration,
}

impl SessionOptions {
    pub fn new(targets: impl IntoIterator<Item = impl Into<String>>) -> Self {
        SessionOptions {
            targets: targets.into_iter().map(Into::into).collect(),
            policy: DeliveryPolicy::default(),
            config_timeout: Duration::from_secs(10),
            config_republish: Duration::from_millis(500),
            drain_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub config_publications: u32,
    pub frames_published: u64,
    pub results_stored: u64,
    pub duplicates_ignored: u64,
    pub stale_ignored: u64,
    pub rejected: u64,
    /// Highest in-flight count per target seen right after a frame publish.
    pub max_in_flight_observed: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub state: SessionState,
    pub failure: Option<String>,
    pub config: SessionConfig,
    /// Wall-clock time of the session epoch, milliseconds since 1970.
    pub started_at_unix_ms: u64,
    pub elapsed: Duration,
    /// Empty unless the session reached evaluation.
    pub reports: Vec<TargetReport>,
    /// Results never received, when a run timed out.
    pub missing: Vec<ResultKey>,
    pub store: ResultStore,
    pub stats: SessionStats,
}

impl SessionOutcome {
    pub fn is_done(&self) -> bool {
        self.state == SessionState::Done
    }

    pub fn report(&self, target_id: &str) -> Option<&TargetReport> {
        self.reports.iter().find(|r| r.target_id == target_id)
    }
}

enum Event {
    Status { topic: String, bytes: Vec<u8> },
    Result { bytes: Vec<u8>, at: Instant },
}

struct Coordinator<'a> {
    endpoint: &'a dyn Endpoint,
    session: Session,
    dataset: &'a Dataset,
    options: &'a SessionOptions,
    events: Receiver<Event>,
    epoch: Instant,
    stats: SessionStats,
    /// Frames published in the current run.
    published: usize,
    /// Per target, per run: time of the last stored result.
    last_result: BTreeMap<String, BTreeMap<u32, Instant>>,
    run_started: BTreeMap<u32, Instant>,
}

/// Runs one session from config through evaluation.
///
/// Publishes the config and waits for every target to acknowledge it, then
/// for each run streams all frames under the in-flight limit, ends the run
/// with an end-of-stream marker whose id is the run number, and waits for
/// the run's results. Finally runs every evaluator once per target.
pub fn run_session(
    config: SessionConfig,
    endpoint: Arc<dyn Endpoint>,
    dataset: &Dataset,
    options: &SessionOptions,
    evaluators: &EvaluatorRegistry,
    power: &BTreeMap<String, PowerInput>,
) -> Result<SessionOutcome, SessionError> {
    let session = Session::new(config.clone(), options.targets.iter().cloned(), dataset.frame_ids())?;
    let started_at_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
    let epoch = Instant::now();

    let (tx, rx) = unbounded();
    let sid = &config.session_id;
    let status_tx = tx.clone();
    let result_tx = tx;
    let subscribe = |filter: String, h| endpoint.subscribe(&filter, h);
    let mut subs: Vec<SubscriptionId> = Vec::new();
    let status_filter = format!("bench/{sid}/status/+");
    let result_filter = format!("{}/+", config.result_topic);
    let setup = subscribe(
        status_filter,
        handler(move |topic, bytes| {
            let _ = status_tx.send(Event::Status { topic: topic.to_string(), bytes: bytes.to_vec() });
        }),
    )
    .and_then(|id| {
        subs.push(id);
        subscribe(
            result_filter,
            handler(move |_, bytes| {
                let _ = result_tx.send(Event::Result { bytes: bytes.to_vec(), at: Instant::now() });
            }),
        )
    })
    .map(|id| subs.push(id));

    let mut c = Coordinator {
        endpoint: endpoint.as_ref(),
        session,
        dataset,
        options,
        events: rx,
        epoch,
        stats: SessionStats::default(),
        published: 0,
        last_result: BTreeMap::new(),
        run_started: BTreeMap::new(),
    };
    let mut missing = Vec::new();
    match setup {
        Ok(()) => {
            if let Err(reason) = c.drive(&mut missing) {
                c.session.fail(reason);
            }
        }
        Err(e) => {
            c.session.transition(SessionState::Configuring)?;
            c.session.fail(format!("subscribing: {e}"));
        }
    }
    for id in subs {
        let _ = endpoint.unsubscribe(id);
    }

    let mut reports = Vec::new();
    if c.session.state() == SessionState::Evaluating {
        let windows = c.run_windows();
        for t in c.session.targets() {
            let ctx = EvaluationContext {
                config: c.session.config(),
                target_id: t,
                dataset,
                results: c.session.store(),
                run_windows: windows.get(t).map_or(&[], Vec::as_slice),
                power: power.get(t),
            };
            reports.push(evaluators.evaluate(&ctx));
        }
        c.session.transition(SessionState::Done)?;
    }
    Ok(SessionOutcome {
        state: c.session.state(),
        failure: c.session.failure().map(str::to_string),
        config,
        started_at_unix_ms,
        elapsed: epoch.elapsed(),
        reports,
        missing,
        store: c.session.store().clone(),
        stats: c.stats,
    })
}

impl Coordinator<'_> {
    fn secs(&self, t: Instant) -> f64 {
        (t - self.epoch).as_secs_f64()
    }

    fn run_windows(&self) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut out = BTreeMap::new();
        for t in self.session.targets() {
            let windows = (1..=self.session.run())
                .filter_map(|run| {
                    let start = *self.run_started.get(&run)?;
                    let end = *self.last_result.get(t)?.get(&run)?;
                    Some((self.secs(start), self.secs(end)))
                })
                .collect();
            out.insert(t.clone(), windows);
        }
        out
    }

    fn drive(&mut self, missing: &mut Vec<ResultKey>) -> Result<(), String> {
        self.configure()?;
        let run_count = self.session.config().run_count;
        for run in 1..=run_count {
            self.session.transition(SessionState::Streaming).map_err(|e| e.to_string())?;
            self.stream_run()?;
            self.session.transition(SessionState::Draining).map_err(|e| e.to_string())?;
            let deadline = Instant::now() + self.options.drain_timeout;
            while !self.session.run_complete() {
                if !self.pump_until(deadline)? {
                    *missing = self.session.missing_in_run();
                    return Err(format!(
                        "run {run}: {} result(s) missing after the {:?} drain timeout",
                        missing.len(),
                        self.options.drain_timeout
                    ));
                }
            }
        }
        self.session.transition(SessionState::Evaluating).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn configure(&mut self) -> Result<(), String> {
        self.session.transition(SessionState::Configuring).map_err(|e| e.to_string())?;
        let cfg = self.session.config().clone();
        let topic = topic_for(&cfg.session_id, TopicKind::Config, None).map_err(|e| e.to_string())?;
        let payload = encode_message(&cfg.into()).map_err(|e| e.to_string())?;
        let deadline = Instant::now() + self.options.config_timeout;
        let mut acked: BTreeMap<String, bool> = self.session.targets().iter().map(|t| (t.clone(), false)).collect();
        while acked.values().any(|a| !a) {
            self.endpoint.publish(&topic, &payload).map_err(|e| format!("publishing config: {e}"))?;
            self.stats.config_publications += 1;
            let next_publish = (Instant::now() + self.options.config_republish).min(deadline);
            loop {
                let now = Instant::now();
                if now >= deadline {
                    let waiting: Vec<&String> = acked.iter().filter(|(_, a)| !**a).map(|(t, _)| t).collect();
                    return Err(format!("targets {waiting:?} did not acknowledge the config in time"));
                }
                if now >= next_publish {
                    break;
                }
                match self.events.recv_timeout(next_publish - now) {
                    Ok(Event::Status { topic, bytes }) => {
                        let status = match decode_message(&bytes, MessageKind::Status) {
                            Ok(Message::Status(s)) => s,
                            _ => {
                                log::warn!("undecodable status on {topic}");
                                continue;
                            }
                        };
                        let Some(done) = acked.get_mut(&status.target_id) else {
                            log::debug!("status from undeclared target {:?}", status.target_id);
                            continue;
                        };
                        match status.state {
                            TargetState::Configured => *done = true,
                            TargetState::Error => {
                                return Err(format!("target {:?} rejected the config: {}", status.target_id, status.detail))
                            }
                            TargetState::Ready => {}
                        }
                        if acked.values().all(|a| *a) {
                            break;
                        }
                    }
                    // Results cannot precede configuration; anything here is stale.
                    Ok(Event::Result { .. }) => self.stats.rejected += 1,
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return Err("event channel closed".into()),
                }
            }
        }
        Ok(())
    }

    fn in_flight(&self, target: &str) -> usize {
        self.published.saturating_sub(self.session.store().count(target, self.session.run()))
    }

    fn stream_run(&mut self) -> Result<(), String> {
        let run = self.session.run();
        let sid = self.session.config().session_id.clone();
        let input = self.session.config().input_topic.clone();
        let limit = self.options.policy.max_in_flight;
        self.published = 0;
        let frames = self.dataset.frames();
        for entry in frames {
            let stall_deadline = Instant::now() + self.options.drain_timeout;
            while self.session.targets().iter().any(|t| self.in_flight(t) >= limit) {
                if !self.pump_until(stall_deadline)? {
                    return Err(format!("run {run}: no results for {:?}", self.options.drain_timeout));
                }
            }
            let frame = self.dataset.frame_message(entry, &sid).map_err(|e| e.to_string())?;
            self.publish_frame(&input, frame)?;
            self.run_started.entry(run).or_insert_with(Instant::now);
            self.published += 1;
            self.stats.frames_published += 1;
            for t in self.session.targets().clone() {
                let n = self.in_flight(&t);
                let max = self.stats.max_in_flight_observed.entry(t).or_default();
                *max = (*max).max(n);
            }
            // Take whatever has already arrived without blocking.
            while let Ok(ev) = self.events.try_recv() {
                self.handle(ev)?;
            }
        }
        self.publish_frame(&input, FrameMessage::end_of_stream(&sid, run as u64))
    }

    fn publish_frame(&self, topic: &str, frame: FrameMessage) -> Result<(), String> {
        let payload = encode_message(&frame.into()).map_err(|e| e.to_string())?;
        self.endpoint.publish(topic, &payload).map_err(|e| format!("publishing to {topic}: {e}"))?;
        Ok(())
    }

    /// Handles one event. Returns `false` if the deadline passed first.
    fn pump_until(&mut self, deadline: Instant) -> Result<bool, String> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.events.recv_timeout(wait) {
            Ok(ev) => {
                self.handle(ev)?;
                Ok(true)
            }
            Err(RecvTimeoutError::Timeout) => Ok(false),
            Err(RecvTimeoutError::Disconnected) => Err("event channel closed".into()),
        }
    }

    fn handle(&mut self, ev: Event) -> Result<(), String> {
        match ev {
            Event::Result { bytes, at } => match self.session.collect_result(&bytes) {
                Collected::Stored(key) => {
                    self.stats.results_stored += 1;
                    self.last_result.entry(key.target_id).or_default().insert(key.run, at);
                }
                Collected::Duplicate => self.stats.duplicates_ignored += 1,
                Collected::Stale => self.stats.stale_ignored += 1,
                Collected::Rejected(reason) => {
                    log::warn!("ignoring result: {reason}");
                    self.stats.rejected += 1;
                }
                Collected::Failed(reason) => return Err(reason),
            },
            Event::Status { topic, bytes } => {
                if let Ok(Message::Status(s)) = decode_message(&bytes, MessageKind::Status) {
                    match s.state {
                        TargetState::Error if self.session.targets().contains(&s.target_id) => {
                            log::warn!("target {:?} reported an error on {topic}: {}", s.target_id, s.detail)
                        }
                        _ => log::debug!("status on {topic}: {:?}", s.state),
                    }
                }
            }
        }
        Ok(())
    }
}
