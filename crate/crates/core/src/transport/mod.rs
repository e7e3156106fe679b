//! Topic-based publish-subscribe.
//!
//! Host and targets only ever talk to an [`Endpoint`]: they publish to topics
//! and subscribe handlers to topic filters. There is no way to address a peer
//! directly. Two implementations exist:
//!
//! - [`loopback::LoopbackBroker`], an in-process broker with seeded fault
//!   injection (duplicates, delays) for tests and desk-scale runs;
//! - [`mqtt::MqttEndpoint`], a client for an external MQTT 3.1.1 broker.
//!
//! Handlers of one endpoint run one at a time on that endpoint's delivery
//! thread. A handler may call back into its own endpoint (for example to
//! subscribe to a new topic).

pub mod loopback;
pub mod mqtt;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::TopicError;

/// 32 MiB: a 2000x2000 BGR frame fits with room to spare.
pub const DEFAULT_MAX_PAYLOAD: usize = 32 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("endpoint {0:?} is disconnected")]
    Disconnected(String),
    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("unknown subscription {0}")]
    UnknownSubscription(SubscriptionId),
    #[error("broker {addr} unreachable after {attempts} attempts: {last_error}")]
    Unreachable { addr: String, attempts: u32, last_error: String },
    #[error("client error: {0}")]
    Client(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Disconnected,
    Connected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Delivery guarantees requested from the transport and the host's flow
/// control window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryPolicy {
    pub at_least_once: bool,
    /// Frames a target may have outstanding (published, no result yet).
    pub max_in_flight: usize,
}

impl DeliveryPolicy {
    pub fn new(at_least_once: bool, max_in_flight: usize) -> Result<Self, String> {
        if max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        Ok(DeliveryPolicy { at_least_once, max_in_flight })
    }
}

impl Default for DeliveryPolicy {
    fn default() -> Self {
        DeliveryPolicy { at_least_once: true, max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishAck {
    /// Number of endpoints the message was routed to, when the transport
    /// knows it. An external broker does not report this.
    pub routed_to: Option<usize>,
}

/// Callback invoked with `(topic, payload)` for each delivered message.
pub type Handler = Arc<dyn Fn(&str, &[u8]) + Send + Sync>;

pub trait Endpoint: Send + Sync {
    fn client_id(&self) -> &str;

    fn state(&self) -> ConnectionState;

    fn publish(&self, topic: &str, payload: &[u8]) -> Result<PublishAck, TransportError>;

    fn subscribe(&self, filter: &str, handler: Handler) -> Result<SubscriptionId, TransportError>;

    fn unsubscribe(&self, id: SubscriptionId) -> Result<(), TransportError>;

    fn disconnect(&self);
}

/// Wraps a closure as a [`Handler`].
pub fn handler<F>(f: F) -> Handler
where
    F: Fn(&str, &[u8]) + Send + Sync + 'static,
{
    Arc::new(f)
}
