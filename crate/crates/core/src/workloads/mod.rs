//! Workload generators that drive an [`MtdDevice`](crate::mtd::MtdDevice).

pub mod boot;
pub mod ffs;
pub mod postmark;
pub mod raw;

pub use boot::{boot_scenario_run, install_rootfs, BootConfig, BootTimeline, ScriptStep};
pub use ffs::{BlockUsage, Ffs, FfsError, FfsModelConfig, FileId, Flavor, GcStats};
pub use postmark::{postmark_run, PostmarkAbort, PostmarkConfig, PostmarkReport};
pub use raw::{raw_erase, raw_read, raw_write};
