use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::protocol::FrameMessage;
use crate::vision::{self, Detection, Preprocessed, ScaleFactors};

use super::AgentError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct DetectorError(pub String);

impl From<vision::VisionError> for DetectorError {
    fn from(e: vision::VisionError) -> Self {
        DetectorError(e.to_string())
    }
}

/// The object-detector interface a target implements.
///
/// The agent calls the three stages in order for every frame and times each
/// one. Only [`DetectorPlugin::infer`] is mandatory; the other stages default
/// to the shared implementations in [`crate::vision`].
pub trait DetectorPlugin: Send {
    fn name(&self) -> &str;

    fn preprocess(&mut self, frame: &FrameMessage, width: u32, height: u32) -> Result<Preprocessed, DetectorError> {
        Ok(vision::preprocess(frame, width, height)?)
    }

    /// Raw detections in model-input coordinates.
    fn infer(&mut self, input: &Preprocessed, frame_id: u64) -> Result<Vec<Detection>, DetectorError>;

    fn postprocess(
        &mut self,
        raw: &[Detection],
        scale: ScaleFactors,
        confidence_threshold: f64,
        nms_threshold: f64,
    ) -> Result<Vec<Detection>, DetectorError> {
        Ok(vision::postprocess(raw, scale, confidence_threshold, nms_threshold))
    }
}

pub type PluginFactory = Arc<dyn Fn() -> Box<dyn DetectorPlugin> + Send + Sync>;

/// Named detector factories. A session config selects one by name.
#[derive(Clone, Default)]
pub struct PluginRegistry {
    factories: BTreeMap<String, PluginFactory>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<(), AgentError>
    where
        F: Fn() -> Box<dyn DetectorPlugin> + Send + Sync + 'static,
    {
        if self.factories.contains_key(name) {
            return Err(AgentError::DuplicatePlugin(name.to_string()));
        }
        self.factories.insert(name.to_string(), Arc::new(factory));
        Ok(())
    }

    pub fn create(&self, name: &str) -> Option<Box<dyn DetectorPlugin>> {
        self.factories.get(name).map(|f| f())
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }
}

impl fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PluginRegistry").field("plugins", &self.names()).finish()
    }
}
