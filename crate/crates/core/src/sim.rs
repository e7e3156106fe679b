//! Host and simulated targets sharing one in-process broker.

use std::sync::Arc;

use crate::agent::{replay_registry, AgentCore, AgentError, AgentRunner, MockDetectorConfig};
use crate::transport::loopback::{FaultProfile, LoopbackBroker};
use crate::transport::{Endpoint, TransportError};

/// A loopback broker with replay-detector targets attached.
pub struct LoopbackLab {
    broker: LoopbackBroker,
    runners: Vec<AgentRunner>,
}

impl LoopbackLab {
    /// Starts one agent per `(target_id, mock)`, each serving the replay
    /// detector. Agents are subscribed to configs when this returns.
    pub fn start(
        faults: FaultProfile,
        targets: impl IntoIterator<Item = (String, MockDetectorConfig)>,
    ) -> Result<Self, AgentError> {
        let broker = LoopbackBroker::new(faults)?;
        let mut runners = Vec::new();
        for (target_id, mock) in targets {
            let registry = replay_registry(mock).map_err(|e| AgentError::Transport(TransportError::Client(e)))?;
            let core = AgentCore::new(&target_id, registry)?;
            runners.push(AgentRunner::start(broker.connect(&target_id), core)?);
        }
        Ok(LoopbackLab { broker, runners })
    }

    pub fn broker(&self) -> &LoopbackBroker {
        &self.broker
    }

    /// A fresh endpoint for the host.
    pub fn host_endpoint(&self) -> Arc<dyn Endpoint> {
        self.broker.connect("host")
    }

    /// Stops every agent and returns their cores.
    pub fn shutdown(self) -> Vec<AgentCore> {
        self.runners.into_iter().filter_map(AgentRunner::shutdown).collect()
    }
}
