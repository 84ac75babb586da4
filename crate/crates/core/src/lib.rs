//! Simulated raw NAND storage stack with an attachable flash operation
//! monitor.
//!
//! * [`nand`]: the chip model (geometry, page states, wear, virtual clock).
//! * [`mtd`]: a two-level driver stack of replaceable function slots, with
//!   partitions and probe-target resolution.
//! * [`probe`]: entry pre-handlers attached to slots.
//! * [`monitor`]: spatial counters and the circular temporal log.
//! * [`workloads`]: flash file system models, Postmark, boot and raw tools.
//! * [`analysis`]: trace statistics, phase detection, plot data, overhead.
//! * [`scenario`]: config file loading and end-to-end scenario runs.

pub mod analysis;
pub mod monitor;
pub mod mtd;
pub mod nand;
pub mod probe;
pub mod scenario;
pub mod workloads;

pub use monitor::{ControlCommand, Monitor, MonitorConfig, MonitorError, SpatialCounters, TraceEvent};
pub use mtd::{Level, MtdDevice, MtdError, Partition, PartitionId, SlotId};
pub use nand::{FlashChip, FlashError, FlashGeometry, LatencyModel, Nanos, OpKind, OpReceipt};
pub use probe::{HookInvocation, ProbeHandle, ProbeRegistry, TaskName};
