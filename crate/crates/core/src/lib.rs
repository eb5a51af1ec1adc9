//! Pure model of a bedside coma-patient monitor.
//!
//! Everything in this crate is deterministic and free of IO: vital-sign
//! types and classification, seeded sensor generators, the two simulated
//! communication channels, the device→server wire format, and the emulated
//! firmware main loop. The `comawatch` crate wires these into a server,
//! a discrete-event scenario runner and a CLI.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod device;
pub mod model;
pub mod netsim;
pub mod rng;
pub mod sensor;
pub mod wire;

pub use device::{
    DeadLetter, DevicePolicy, DeviceState, Effect, Led, Mode, OutboundRecord, RecordBody,
    SendResult,
};
pub use model::{
    classify, compute_bpm, detect_edges, AlertCause, AlertEvent, AlertSkeleton, ChannelKind,
    Classification, Debouncer, Dispatch, Measurement, ModelError, Range, Reading, SensorKind,
    Severity, Thresholds, VitalSample,
};
pub use netsim::{
    channel_send, eventual_delivery_prob, is_up, sms_send, ChannelModel, DeliveryResult,
    Outage,
};
pub use sensor::{apply_anomaly, generate_stream, AnomalyShape, AnomalySpec, PatientProfile};
pub use wire::{WireError, WireRecord};
