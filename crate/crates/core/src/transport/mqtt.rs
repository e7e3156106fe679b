//! Endpoint backed by an external MQTT 3.1.1 broker.
//!
//! Publishes and subscriptions use QoS 1 (at least once). Incoming publishes
//! are dispatched on the connection thread, one at a time. If the connection
//! drops, the endpoint reports [`ConnectionState::Disconnected`] and refuses
//! to publish until the client has reconnected and restored its
//! subscriptions; a session in progress fails rather than resumes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rumqttc::{Client, Connection, ConnectionError, Event, MqttOptions, Packet, QoS};

use super::{ConnectionState, Endpoint, Handler, PublishAck, SubscriptionId, TransportError, DEFAULT_MAX_PAYLOAD};
use crate::protocol::{filter_matches, validate_filter, validate_topic};

#[derive(Debug, Clone, PartialEq)]
pub struct MqttConfig {
    pub host: String,
    pub port: u16,
    pub client_id: String,
    pub keep_alive: Duration,
    pub max_payload: usize,
    /// Connection attempts before giving up.
    pub connect_attempts: u32,
    /// Wait after the first failed attempt; doubles on each further failure.
    pub initial_backoff: Duration,
}

impl MqttConfig {
    pub fn new(host: &str, port: u16, client_id: &str) -> Self {
        MqttConfig {
            host: host.to_string(),
            port,
            client_id: client_id.to_string(),
            keep_alive: Duration::from_secs(10),
            max_payload: DEFAULT_MAX_PAYLOAD,
            connect_attempts: 5,
            initial_backoff: Duration::from_millis(200),
        }
    }

    /// Parses `host:port`.
    pub fn from_address(addr: &str, client_id: &str) -> Result<Self, TransportError> {
        let (host, port) = addr
            .rsplit_once(':')
            .ok_or_else(|| TransportError::Client(format!("broker address {addr:?} is not host:port")))?;
        let port = port.parse().map_err(|_| TransportError::Client(format!("bad port in {addr:?}")))?;
        Ok(Self::new(host, port, client_id))
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

struct Shared {
    client_id: String,
    max_payload: usize,
    connected: AtomicBool,
    closed: AtomicBool,
    next_id: AtomicU64,
    handlers: Mutex<BTreeMap<SubscriptionId, (String, Handler)>>,
}

pub struct MqttEndpoint {
    client: Client,
    shared: Arc<Shared>,
}

impl MqttEndpoint {
    /// Connects, retrying with exponential backoff. Fails with
    /// [`TransportError::Unreachable`] once all attempts are used up.
    pub fn connect(config: &MqttConfig) -> Result<Arc<Self>, TransportError> {
        let mut opts = MqttOptions::new(config.client_id.clone(), config.host.clone(), config.port);
        opts.set_keep_alive(config.keep_alive);
        opts.set_clean_session(true);
        // Frame payloads plus MQTT framing overhead.
        opts.set_max_packet_size(config.max_payload + 1024, config.max_payload + 1024);
        let (client, mut connection) = Client::new(opts, 64);

        let attempts = config.connect_attempts.max(1);
        let mut backoff = config.initial_backoff;
        let mut last_error = String::new();
        let mut connected = false;
        for attempt in 1..=attempts {
            match wait_for_connack(&mut connection, config.keep_alive.max(Duration::from_secs(5))) {
                Ok(()) => {
                    connected = true;
                    break;
                }
                Err(e) => {
                    log::warn!("connect attempt {attempt}/{attempts} to {} failed: {e}", config.address());
                    last_error = e;
                    if attempt < attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        if !connected {
            return Err(TransportError::Unreachable { addr: config.address(), attempts, last_error });
        }

        let shared = Arc::new(Shared {
            client_id: config.client_id.clone(),
            max_payload: config.max_payload,
            connected: AtomicBool::new(true),
            closed: AtomicBool::new(false),
            next_id: AtomicU64::new(1),
            handlers: Mutex::new(BTreeMap::new()),
        });
        let worker = shared.clone();
        let resubscriber = client.clone();
        thread::Builder::new()
            .name(format!("mqtt-{}", config.client_id))
            .spawn(move || run_connection(connection, worker, resubscriber))
            .map_err(|e| TransportError::Client(e.to_string()))?;
        Ok(Arc::new(MqttEndpoint { client, shared }))
    }
}

fn wait_for_connack(connection: &mut Connection, timeout: Duration) -> Result<(), String> {
    loop {
        match connection.recv_timeout(timeout) {
            Ok(Ok(Event::Incoming(Packet::ConnAck(ack)))) => {
                return match ack.code {
                    rumqttc::ConnectReturnCode::Success => Ok(()),
                    code => Err(format!("broker refused connection: {code:?}")),
                }
            }
            Ok(Ok(_)) => continue,
            Ok(Err(e)) => return Err(e.to_string()),
            Err(_) => return Err("timed out waiting for CONNACK".into()),
        }
    }
}

fn run_connection(mut connection: Connection, shared: Arc<Shared>, client: Client) {
    for event in connection.iter() {
        if shared.closed.load(Ordering::SeqCst) {
            break;
        }
        match event {
            Ok(Event::Incoming(Packet::Publish(p))) => {
                let handlers: Vec<Handler> = {
                    let map = shared.handlers.lock().unwrap();
                    map.values().filter(|(f, _)| filter_matches(f, &p.topic)).map(|(_, h)| h.clone()).collect()
                };
                for h in handlers {
                    h(&p.topic, &p.payload);
                }
            }
            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                let filters: Vec<String> = shared.handlers.lock().unwrap().values().map(|(f, _)| f.clone()).collect();
                for f in filters {
                    if let Err(e) = client.try_subscribe(f.clone(), QoS::AtLeastOnce) {
                        log::error!("re-subscribing to {f} failed: {e}");
                    }
                }
                shared.connected.store(true, Ordering::SeqCst);
                log::info!("{} reconnected", shared.client_id);
            }
            Ok(_) => {}
            Err(e) => {
                if shared.connected.swap(false, Ordering::SeqCst) {
                    log::error!("{} lost its broker connection: {e}", shared.client_id);
                }
                if matches!(e, ConnectionError::RequestsDone) {
                    break;
                }
                thread::sleep(Duration::from_millis(200));
            }
        }
    }
    shared.connected.store(false, Ordering::SeqCst);
}

impl MqttEndpoint {
    fn ensure_connected(&self) -> Result<(), TransportError> {
        if self.shared.connected.load(Ordering::SeqCst) && !self.shared.closed.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(TransportError::Disconnected(self.shared.client_id.clone()))
        }
    }
}

impl Endpoint for MqttEndpoint {
    fn client_id(&self) -> &str {
        &self.shared.client_id
    }

    fn state(&self) -> ConnectionState {
        if self.ensure_connected().is_ok() {
            ConnectionState::Connected
        } else {
            ConnectionState::Disconnected
        }
    }

    fn publish(&self, topic: &str, payload: &[u8]) -> Result<PublishAck, TransportError> {
        self.ensure_connected()?;
        validate_topic(topic)?;
        if payload.len() > self.shared.max_payload {
            return Err(TransportError::PayloadTooLarge { size: payload.len(), limit: self.shared.max_payload });
        }
        self.client
            .publish(topic, QoS::AtLeastOnce, false, payload.to_vec())
            .map_err(|e| TransportError::Client(e.to_string()))?;
        Ok(PublishAck { routed_to: None })
    }

    fn subscribe(&self, filter: &str, handler: Handler) -> Result<SubscriptionId, TransportError> {
        self.ensure_connected()?;
        validate_filter(filter)?;
        let id = SubscriptionId(self.shared.next_id.fetch_add(1, Ordering::SeqCst));
        let already = {
            let mut map = self.shared.handlers.lock().unwrap();
            let already = map.values().any(|(f, _)| f == filter);
            map.insert(id, (filter.to_string(), handler));
            already
        };
        if !already {
            self.client
                .subscribe(filter, QoS::AtLeastOnce)
                .map_err(|e| TransportError::Client(e.to_string()))?;
        }
        Ok(id)
    }

    fn unsubscribe(&self, id: SubscriptionId) -> Result<(), TransportError> {
        self.ensure_connected()?;
        let (filter, still_used) = {
            let mut map = self.shared.handlers.lock().unwrap();
            let (filter, _) = map.remove(&id).ok_or(TransportError::UnknownSubscription(id))?;
            let used = map.values().any(|(f, _)| *f == filter);
            (filter, used)
        };
        if !still_used {
            self.client.unsubscribe(filter).map_err(|e| TransportError::Client(e.to_string()))?;
        }
        Ok(())
    }

    fn disconnect(&self) {
        if !self.shared.closed.swap(true, Ordering::SeqCst) {
            let _ = self.client.disconnect();
        }
    }
}

impl Drop for MqttEndpoint {
    fn drop(&mut self) {
        self.disconnect();
    }
}
