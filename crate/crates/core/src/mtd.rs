//! Layered driver stack over a [`FlashChip`].
//!
//! The device is a table of named function slots. Upper slots are the
//! generic multi-page entry points (`upper.read`, `upper.write`,
//! `upper.erase`) and split every request into one lower-slot call per page
//! or block (`lower.read_page`, `lower.write_page`, `lower.erase_block`).
//! Each slot call goes through the device's [`ProbeRegistry`] first, so a
//! probe on a lower slot sees every physical operation while a probe on an
//! upper slot sees one call per request.
//!
//! Slots can be rebound after construction to model driver substitution.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nand::{BlockIndex, FlashChip, FlashError, FlashGeometry, OpKind, OpReceipt, PageIndex};
use crate::probe::{HookInvocation, ProbeRegistry, TaskName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotId {
    UpperRead,
    UpperWrite,
    UpperErase,
    LowerReadPage,
    LowerWritePage,
    LowerEraseBlock,
}

impl SlotId {
    pub const COUNT: usize = 6;
    pub const ALL: [SlotId; SlotId::COUNT] = [
        SlotId::UpperRead,
        SlotId::UpperWrite,
        SlotId::UpperErase,
        SlotId::LowerReadPage,
        SlotId::LowerWritePage,
        SlotId::LowerEraseBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotId::UpperRead => "upper.read",
            SlotId::UpperWrite => "upper.write",
            SlotId::UpperErase => "upper.erase",
            SlotId::LowerReadPage => "lower.read_page",
            SlotId::LowerWritePage => "lower.write_page",
            SlotId::LowerEraseBlock => "lower.erase_block",
        }
    }

    pub fn from_name(name: &str) -> Option<SlotId> {
        SlotId::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn level(self) -> Level {
        match self {
            SlotId::UpperRead | SlotId::UpperWrite | SlotId::UpperErase => Level::Upper,
            _ => Level::Lower,
        }
    }

    pub fn kind(self) -> OpKind {
        match self {
            SlotId::UpperRead | SlotId::LowerReadPage => OpKind::Read,
            SlotId::UpperWrite | SlotId::LowerWritePage => OpKind::Write,
            SlotId::UpperErase | SlotId::LowerEraseBlock => OpKind::Erase,
        }
    }

    pub fn upper(kind: OpKind) -> SlotId {
        match kind {
            OpKind::Read => SlotId::UpperRead,
            OpKind::Write => SlotId::UpperWrite,
            OpKind::Erase => SlotId::UpperErase,
        }
    }

    pub fn lower(kind: OpKind) -> SlotId {
        match kind {
            OpKind::Read => SlotId::LowerReadPage,
            OpKind::Write => SlotId::LowerWritePage,
            OpKind::Erase => SlotId::LowerEraseBlock,
        }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionId(pub usize);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub id: PartitionId,
    pub first_block: BlockIndex,
    pub block_count: u32,
    pub label: String,
}

impl Partition {
    pub fn blocks(&self) -> Range<BlockIndex> {
        self.first_block..self.first_block + self.block_count
    }

    pub fn pages(&self, geometry: &FlashGeometry) -> Range<PageIndex> {
        let ppb = geometry.pages_per_block();
        self.first_block * ppb..(self.first_block + self.block_count) * ppb
    }

    pub fn page_count(&self, geometry: &FlashGeometry) -> u32 {
        self.block_count * geometry.pages_per_block()
    }

    pub fn bytes(&self, geometry: &FlashGeometry) -> u64 {
        self.block_count as u64 * geometry.block_bytes()
    }
}

/// Partition entry of the config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub first_block: BlockIndex,
    pub block_count: u32,
    #[serde(default)]
    pub label: String,
}

/// Abort-on-first-error result of a multi-page call: the operations that
/// completed before the failing one keep their effect.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{source} (after {} completed operations)", completed.len())]
pub struct PartialFailure {
    pub completed: Vec<OpReceipt>,
    #[source]
    pub source: FlashError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MtdError {
    #[error("range {start}+{count} exceeds device limit {limit}")]
    Range { start: u64, count: u32, limit: u32 },
    #[error(transparent)]
    Aborted(#[from] PartialFailure),
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error("blocks {first_block}+{block_count} overlap partition {existing}")]
    PartitionOverlap { first_block: BlockIndex, block_count: u32, existing: PartitionId },
    #[error("blocks {first_block}+{block_count} exceed the chip's {total} blocks")]
    PartitionOutOfBounds { first_block: BlockIndex, block_count: u32, total: u32 },
    #[error("partition must contain at least one block")]
    EmptyPartition,
    #[error("no partition {0}")]
    UnknownPartition(PartitionId),
    #[error("slot {0} is not a {1:?}-level slot")]
    WrongLevel(SlotId, Level),
}

impl MtdError {
    /// Receipts of operations that completed before the error.
    pub fn completed(&self) -> &[OpReceipt] {
        match self {
            MtdError::Aborted(p) => &p.completed,
            _ => &[],
        }
    }

    pub fn flash_error(&self) -> Option<&FlashError> {
        match self {
            MtdError::Aborted(p) => Some(&p.source),
            MtdError::Flash(e) => Some(e),
            _ => None,
        }
    }
}

pub type LowerBehavior = Arc<dyn Fn(&mut FlashChip, u32) -> Result<OpReceipt, FlashError> + Send + Sync>;
pub type UpperBehavior =
    Arc<dyn Fn(&mut LowerCalls<'_>, u32, u32) -> Result<Vec<OpReceipt>, MtdError> + Send + Sync>;

struct LowerSlot {
    behavior: LowerBehavior,
    // false on legacy stacks: the slot's arguments do not carry the address
    exposes_address: bool,
}

/// The only thing an upper behavior can reach: lower slots of the same
/// device, each call routed through its probe.
pub struct LowerCalls<'a> {
    chip: &'a mut FlashChip,
    lower: &'a [LowerSlot; 3],
    probes: &'a ProbeRegistry,
    task: TaskName,
}

impl LowerCalls<'_> {
    #[inline]
    pub fn call(&mut self, kind: OpKind, address: u32) -> Result<OpReceipt, FlashError> {
        let slot = SlotId::lower(kind);
        self.probes.fire(&HookInvocation { slot, kind, address, time: self.chip.clock(), task: self.task });
        (self.lower[kind.index()].behavior)(self.chip, address)
    }

    pub fn geometry(&self) -> &FlashGeometry {
        self.chip.geometry()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum StackMode {
    #[default]
    Standard,
    /// Lower slots lack per-page address information, as on older kernels.
    Legacy,
}

/// Which slots a tracer should probe, per operation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeTargetReport {
    pub read: SlotId,
    pub write: SlotId,
    pub erase: SlotId,
    pub fallback_used: bool,
}

impl ProbeTargetReport {
    pub fn slots(&self) -> [SlotId; 3] {
        [self.read, self.write, self.erase]
    }

    pub fn slot_for(&self, kind: OpKind) -> SlotId {
        match kind {
            OpKind::Read => self.read,
            OpKind::Write => self.write,
            OpKind::Erase => self.erase,
        }
    }
}

pub struct MtdDevice {
    chip: FlashChip,
    upper: [UpperBehavior; 3],
    lower: [LowerSlot; 3],
    partitions: Vec<Partition>,
    probes: ProbeRegistry,
    task: TaskName,
    mode: StackMode,
    monitor_attached: bool,
}

impl fmt::Debug for MtdDevice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MtdDevice")
            .field("geometry", self.chip.geometry())
            .field("clock", &self.chip.clock())
            .field("mode", &self.mode)
            .field("partitions", &self.partitions)
            .field("probes", &self.probes)
            .finish_non_exhaustive()
    }
}

fn chunked(kind: OpKind) -> UpperBehavior {
    Arc::new(move |calls: &mut LowerCalls<'_>, start: u32, count: u32| {
        let mut done = Vec::with_capacity(count as usize);
        for address in start..start + count {
            match calls.call(kind, address) {
                Ok(r) => done.push(r),
                Err(source) => return Err(PartialFailure { completed: done, source }.into()),
            }
        }
        Ok(done)
    })
}

fn chip_primitive(kind: OpKind) -> LowerBehavior {
    match kind {
        OpKind::Read => Arc::new(|chip: &mut FlashChip, a: u32| chip.read_page(a)),
        OpKind::Write => Arc::new(|chip: &mut FlashChip, a: u32| chip.write_page(a)),
        OpKind::Erase => Arc::new(|chip: &mut FlashChip, a: u32| chip.erase_block(a)),
    }
}

impl MtdDevice {
    pub fn new(chip: FlashChip) -> Self {
        Self::with_mode(chip, StackMode::Standard)
    }

    pub fn legacy(chip: FlashChip) -> Self {
        Self::with_mode(chip, StackMode::Legacy)
    }

    pub fn with_mode(chip: FlashChip, mode: StackMode) -> Self {
        let exposes_address = mode == StackMode::Standard;
        MtdDevice {
            chip,
            upper: OpKind::ALL.map(chunked),
            lower: OpKind::ALL.map(|k| LowerSlot { behavior: chip_primitive(k), exposes_address }),
            partitions: Vec::new(),
            probes: ProbeRegistry::new(),
            task: TaskName::default(),
            mode,
            monitor_attached: false,
        }
    }

    pub fn chip(&self) -> &FlashChip {
        &self.chip
    }

    pub fn geometry(&self) -> &FlashGeometry {
        self.chip.geometry()
    }

    pub fn mode(&self) -> StackMode {
        self.mode
    }

    pub fn probes(&self) -> &ProbeRegistry {
        &self.probes
    }

    pub fn probes_mut(&mut self) -> &mut ProbeRegistry {
        &mut self.probes
    }

    /// Attributes subsequent operations to `name` (truncated to 16 bytes).
    pub fn set_task(&mut self, name: &str) {
        self.task = TaskName::new(name);
    }

    pub fn task(&self) -> TaskName {
        self.task
    }

    /// Runs `f` with the current task temporarily set to `name`.
    pub fn with_task<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.task;
        self.task = TaskName::new(name);
        let out = f(self);
        self.task = saved;
        out
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn partition(&self, id: PartitionId) -> Result<&Partition, MtdError> {
        self.partitions.get(id.0).ok_or(MtdError::UnknownPartition(id))
    }

    pub fn add_partition(&mut self, first_block: BlockIndex, block_count: u32, label: &str) -> Result<PartitionId, MtdError> {
        if block_count == 0 {
            return Err(MtdError::EmptyPartition);
        }
        let total = self.geometry().blocks_per_chip();
        if first_block as u64 + block_count as u64 > total as u64 {
            return Err(MtdError::PartitionOutOfBounds { first_block, block_count, total });
        }
        let end = first_block + block_count;
        if let Some(p) = self.partitions.iter().find(|p| first_block < p.blocks().end && p.first_block < end) {
            return Err(MtdError::PartitionOverlap { first_block, block_count, existing: p.id });
        }
        let id = PartitionId(self.partitions.len());
        self.partitions.push(Partition { id, first_block, block_count, label: label.to_owned() });
        Ok(id)
    }

    /// Writes pages behind the driver's back, as an external flasher does:
    /// no probes fire and the clock does not move.
    pub fn install_image(&mut self, start_page: PageIndex, page_count: u32) -> Result<(), MtdError> {
        Ok(self.chip.install_image(start_page, page_count)?)
    }

    pub fn mtd_read(&mut self, start_page: PageIndex, page_count: u32) -> Result<Vec<OpReceipt>, MtdError> {
        self.run_upper(OpKind::Read, start_page, page_count)
    }

    pub fn mtd_write(&mut self, start_page: PageIndex, page_count: u32) -> Result<Vec<OpReceipt>, MtdError> {
        self.run_upper(OpKind::Write, start_page, page_count)
    }

    pub fn mtd_erase(&mut self, start_block: BlockIndex, block_count: u32) -> Result<Vec<OpReceipt>, MtdError> {
        self.run_upper(OpKind::Erase, start_block, block_count)
    }

    fn run_upper(&mut self, kind: OpKind, start: u32, count: u32) -> Result<Vec<OpReceipt>, MtdError> {
        let g = self.chip.geometry();
        let limit = match kind {
            OpKind::Erase => g.blocks_per_chip(),
            _ => g.total_pages(),
        };
        if start as u64 + count as u64 > limit as u64 {
            return Err(MtdError::Range { start: start as u64, count, limit });
        }
        let MtdDevice { chip, upper, lower, probes, task, .. } = self;
        let slot = SlotId::upper(kind);
        probes.fire(&HookInvocation { slot, kind, address: start, time: chip.clock(), task: *task });
        let mut calls = LowerCalls { chip, lower, probes, task: *task };
        (upper[kind.index()])(&mut calls, start, count)
    }

    /// Calls one lower slot directly, through its probe.
    pub fn invoke_lower(&mut self, slot: SlotId, address: u32) -> Result<OpReceipt, MtdError> {
        if slot.level() != Level::Lower {
            return Err(MtdError::WrongLevel(slot, Level::Lower));
        }
        let mut calls = LowerCalls { chip: &mut self.chip, lower: &self.lower, probes: &self.probes, task: self.task };
        Ok(calls.call(slot.kind(), address)?)
    }

    pub fn lower_behavior(&self, slot: SlotId) -> Result<LowerBehavior, MtdError> {
        if slot.level() != Level::Lower {
            return Err(MtdError::WrongLevel(slot, Level::Lower));
        }
        Ok(Arc::clone(&self.lower[slot.kind().index()].behavior))
    }

    pub fn upper_behavior(&self, slot: SlotId) -> Result<UpperBehavior, MtdError> {
        if slot.level() != Level::Upper {
            return Err(MtdError::WrongLevel(slot, Level::Upper));
        }
        Ok(Arc::clone(&self.upper[slot.kind().index()]))
    }

    /// Replaces a lower slot's behavior; its address metadata is kept.
    pub fn rebind_lower(&mut self, slot: SlotId, behavior: LowerBehavior) -> Result<(), MtdError> {
        if slot.level() != Level::Lower {
            return Err(MtdError::WrongLevel(slot, Level::Lower));
        }
        self.lower[slot.kind().index()].behavior = behavior;
        Ok(())
    }

    pub fn rebind_upper(&mut self, slot: SlotId, behavior: UpperBehavior) -> Result<(), MtdError> {
        if slot.level() != Level::Upper {
            return Err(MtdError::WrongLevel(slot, Level::Upper));
        }
        self.upper[slot.kind().index()] = behavior;
        Ok(())
    }

    /// Walks from each upper slot to the lower slot it dispatches to and
    /// picks the lowest one whose arguments carry a precise address.
    pub fn resolve_probe_targets(&self, preferred: Level) -> ProbeTargetReport {
        let mut fallback_used = false;
        let mut pick = |kind: OpKind| {
            let upper = SlotId::upper(kind);
            if preferred == Level::Upper {
                return upper;
            }
            if self.lower[kind.index()].exposes_address {
                SlotId::lower(kind)
            } else {
                fallback_used = true;
                upper
            }
        };
        let (read, write, erase) = (pick(OpKind::Read), pick(OpKind::Write), pick(OpKind::Erase));
        ProbeTargetReport { read, write, erase, fallback_used }
    }

    pub(crate) fn monitor_attached(&self) -> bool {
        self.monitor_attached
    }

    pub(crate) fn set_monitor_attached(&mut self, attached: bool) {
        self.monitor_attached = attached;
    }
}
