//! Distributed benchmarking harness for real-time object detection.
//!
//! A host streams image frames over publish-subscribe topics to one or more
//! targets. Each target runs a detector plugin, times its pre-processing,
//! inference and post-processing stages, and publishes detections back. The
//! host then scores accuracy (COCO-style mAP over IoU 0.50:0.95), latency,
//! throughput, power and energy efficiency.
//!
//! Module map:
//!
//! - [`protocol`]: message types, canonical binary encoding, topic scheme
//! - [`transport`]: publish-subscribe endpoints (MQTT client, in-process loopback)
//! - [`vision`]: boxes, IoU, confidence filtering, NMS, pre/post-processing
//! - [`metrics`]: mAP, timing aggregation, power and efficiency
//! - [`agent`]: the target-side application and detector plugins
//! - [`host`]: dataset loading, session orchestration, evaluator plugins
//! - [`sim`]: host and simulated targets on one in-process broker

pub mod agent;
pub mod host;
pub mod metrics;
pub mod protocol;
pub mod sim;
pub mod transport;
pub mod vision;
