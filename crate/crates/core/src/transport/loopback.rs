//! In-process broker with seeded fault injection.
//!
//! Each connected endpoint owns a FIFO queue drained by its own delivery
//! thread. A publish routes the payload to every endpoint with a matching
//! subscription; the fault profile may enqueue a second copy right behind the
//! first and may hold deliveries back for a random delay. Due times never
//! decrease within one queue, so per-topic publish order is preserved for
//! every subscriber even under faults.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConnectionState, Endpoint, Handler, PublishAck, SubscriptionId, TransportError, DEFAULT_MAX_PAYLOAD};
use crate::protocol::{filter_matches, validate_filter, validate_topic};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayDistribution {
    None,
    Fixed(Duration),
    /// Uniform over `[min, max]`.
    Uniform { min: Duration, max: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultProfile {
    /// Chance that a routed message is delivered a second time.
    pub duplicate_probability: f64,
    pub delay: DelayDistribution,
    pub seed: u64,
}

impl FaultProfile {
    /// Exactly-once, in-order, immediate delivery.
    pub fn none() -> Self {
        FaultProfile { duplicate_probability: 0.0, delay: DelayDistribution::None, seed: 0 }
    }

    pub fn duplicating(probability: f64, seed: u64) -> Self {
        FaultProfile { duplicate_probability: probability, delay: DelayDistribution::None, seed }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.duplicate_probability) {
            return Err(format!("duplicate probability {} outside [0, 1]", self.duplicate_probability));
        }
        if let DelayDistribution::Uniform { min, max } = self.delay {
            if min > max {
                return Err(format!("delay range {min:?}..{max:?} is empty"));
            }
        }
        Ok(())
    }
}

impl Default for FaultProfile {
    fn default() -> Self {
        Self::none()
    }
}

/// One routing decision, recorded at publish time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEvent {
    pub seq: u64,
    pub topic: String,
    pub client_id: String,
    pub copies: u8,
    pub delay: Duration,
}

struct Envelope {
    due: Instant,
    topic: Arc<str>,
    payload: Arc<[u8]>,
}

struct Subscriptions {
    next_id: AtomicU64,
    handlers: Mutex<BTreeMap<SubscriptionId, (String, Handler)>>,
}

impl Subscriptions {
    fn matching(&self, topic: &str) -> Vec<Handler> {
        let map = self.handlers.lock().unwrap();
        map.values().filter(|(f, _)| filter_matches(f, topic)).map(|(_, h)| h.clone()).collect()
    }

    fn any_match(&self, topic: &str) -> bool {
        let map = self.handlers.lock().unwrap();
        map.values().any(|(f, _)| filter_matches(f, topic))
    }
}

struct Route {
    endpoint_id: u64,
    client_id: String,
    subs: Arc<Subscriptions>,
    tx: Sender<Envelope>,
    last_due: Instant,
}

struct State {
    rng: ChaCha8Rng,
    seq: u64,
    next_endpoint: u64,
    routes: Vec<Route>,
    trace: Vec<RouteEvent>,
}

struct Inner {
    faults: FaultProfile,
    max_payload: usize,
    state: Mutex<State>,
}

/// Handle to an in-process broker. Cloning shares the broker.
#[derive(Clone)]
pub struct LoopbackBroker {
    inner: Arc<Inner>,
}

impl LoopbackBroker {
    pub fn new(faults: FaultProfile) -> Result<Self, TransportError> {
        Self::with_max_payload(faults, DEFAULT_MAX_PAYLOAD)
    }

    pub fn with_max_payload(faults: FaultProfile, max_payload: usize) -> Result<Self, TransportError> {
        faults.validate().map_err(TransportError::Client)?;
        Ok(LoopbackBroker {
            inner: Arc::new(Inner {
                faults,
                max_payload,
                state: Mutex::new(State {
                    rng: ChaCha8Rng::seed_from_u64(faults.seed),
                    seq: 0,
                    next_endpoint: 0,
                    routes: Vec::new(),
                    trace: Vec::new(),
                }),
            }),
        })
    }

    pub fn faults(&self) -> FaultProfile {
        self.inner.faults
    }

    /// Connects a new endpoint. Its delivery thread runs until disconnect.
    pub fn connect(&self, client_id: &str) -> Arc<LoopbackEndpoint> {
        let subs = Arc::new(Subscriptions { next_id: AtomicU64::new(1), handlers: Mutex::new(BTreeMap::new()) });
        let (tx, rx) = unbounded();
        let endpoint_id = {
            let mut st = self.inner.state.lock().unwrap();
            let id = st.next_endpoint;
            st.next_endpoint += 1;
            st.routes.push(Route {
                endpoint_id: id,
                client_id: client_id.to_string(),
                subs: subs.clone(),
                tx,
                last_due: Instant::now(),
            });
            id
        };
        let worker_subs = subs.clone();
        let name = format!("loopback-{client_id}");
        thread::Builder::new()
            .name(name)
            .spawn(move || deliver(rx, worker_subs))
            .expect("spawning a delivery thread");
        Arc::new(LoopbackEndpoint {
            client_id: client_id.to_string(),
            endpoint_id,
            subs,
            connected: AtomicBool::new(true),
            broker: self.inner.clone(),
        })
    }

    /// Routing decisions made so far, in publish order.
    pub fn trace(&self) -> Vec<RouteEvent> {
        self.inner.state.lock().unwrap().trace.clone()
    }

    /// Number of messages accepted for publication.
    pub fn published(&self) -> u64 {
        self.inner.state.lock().unwrap().seq
    }
}

fn deliver(rx: Receiver<Envelope>, subs: Arc<Subscriptions>) {
    for env in rx {
        let now = Instant::now();
        if env.due > now {
            thread::sleep(env.due - now);
        }
        for h in subs.matching(&env.topic) {
            if catch_unwind(AssertUnwindSafe(|| h(&env.topic, &env.payload))).is_err() {
                log::error!("handler for {} panicked", env.topic);
            }
        }
    }
}

impl Inner {
    fn route(&self, topic: &str, payload: &[u8]) -> usize {
        let mut st = self.state.lock().unwrap();
        let State { rng, seq, routes, trace, .. } = &mut *st;
        *seq += 1;
        let topic: Arc<str> = Arc::from(topic);
        let payload: Arc<[u8]> = Arc::from(payload);
        let now = Instant::now();
        let mut routed = 0;
        for route in routes.iter_mut() {
            if !route.subs.any_match(&topic) {
                continue;
            }
            routed += 1;
            let copies = if rng.random::<f64>() < self.faults.duplicate_probability { 2 } else { 1 };
            let delay = match self.faults.delay {
                DelayDistribution::None => Duration::ZERO,
                DelayDistribution::Fixed(d) => d,
                DelayDistribution::Uniform { min, max } => {
                    Duration::from_nanos(rng.random_range(min.as_nanos() as u64..=max.as_nanos() as u64))
                }
            };
            let due = (now + delay).max(route.last_due);
            route.last_due = due;
            trace.push(RouteEvent {
                seq: *seq,
                topic: topic.to_string(),
                client_id: route.client_id.clone(),
                copies,
                delay,
            });
            for _ in 0..copies {
                // A closed queue means the endpoint is going away.
                let _ = route.tx.send(Envelope { due, topic: topic.clone(), payload: payload.clone() });
            }
        }
        routed
    }

    fn remove(&self, endpoint_id: u64) {
        let mut st = self.state.lock().unwrap();
        st.routes.retain(|r| r.endpoint_id != endpoint_id);
    }
}

pub struct LoopbackEndpoint {
    client_id: String,
    endpoint_id: u64,
    subs: Arc<Subscriptions>,
    connected: AtomicBool,
    broker: Arc<Inner>,
}

impl LoopbackEndpoint {
    fn ensure_connected(&self) -> Result<(), TransportError> {
        if self.connected.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(TransportError::Disconnected(self.client_id.clone()))
        }
    }
}

impl Endpoint for LoopbackEndpoint {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn state(&self) -> ConnectionState {
        if self.connected.load(Ordering::SeqCst) {
            ConnectionState::Connected
        } else {
            ConnectionState::Disconnected
        }
    }

    fn publish(&self, topic: &str, payload: &[u8]) -> Result<PublishAck, TransportError> {
        self.ensure_connected()?;
        validate_topic(topic)?;
        if payload.len() > self.broker.max_payload {
            return Err(TransportError::PayloadTooLarge { size: payload.len(), limit: self.broker.max_payload });
        }
        let routed = self.broker.route(topic, payload);
        Ok(PublishAck { routed_to: Some(routed) })
    }

    fn subscribe(&self, filter: &str, handler: Handler) -> Result<SubscriptionId, TransportError> {
        self.ensure_connected()?;
        validate_filter(filter)?;
        let id = SubscriptionId(self.subs.next_id.fetch_add(1, Ordering::SeqCst));
        self.subs.handlers.lock().unwrap().insert(id, (filter.to_string(), handler));
        Ok(id)
    }

    fn unsubscribe(&self, id: SubscriptionId) -> Result<(), TransportError> {
        self.ensure_connected()?;
        match self.subs.handlers.lock().unwrap().remove(&id) {
            Some(_) => Ok(()),
            None => Err(TransportError::UnknownSubscription(id)),
        }
    }

    fn disconnect(&self) {
        if self.connected.swap(false, Ordering::SeqCst) {
            self.broker.remove(self.endpoint_id);
        }
    }
}

impl Drop for LoopbackEndpoint {
    fn drop(&mut self) {
        self.disconnect();
    }
}
