//! Entry probes on driver function slots.
//!
//! A probe is a pre-handler bound to one named slot of an [`MtdDevice`]
//! (see [`crate::mtd`]). It runs synchronously with the call's arguments
//! before the slot's behavior and observes them through a
//! [`HookInvocation`]. Handlers only get a shared reference to the
//! invocation, so they cannot touch chip state or rewrite arguments.
//!
//! [`MtdDevice`]: crate::mtd::MtdDevice

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::mtd::SlotId;
use crate::nand::{Nanos, OpKind};

/// Name of the task on whose behalf an operation runs, truncated to 16 bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskName {
    bytes: [u8; TaskName::MAX_LEN],
    len: u8,
}

impl TaskName {
    pub const MAX_LEN: usize = 16;

    /// Keeps the longest prefix of `name` that fits in 16 bytes and ends on
    /// a character boundary.
    pub fn new(name: &str) -> Self {
        let mut end = name.len().min(Self::MAX_LEN);
        while !name.is_char_boundary(end) {
            end -= 1;
        }
        let mut bytes = [0u8; Self::MAX_LEN];
        bytes[..end].copy_from_slice(&name.as_bytes()[..end]);
        TaskName { bytes, len: end as u8 }
    }

    pub fn as_str(&self) -> &str {
        // only ever built from a &str prefix cut on a char boundary
        std::str::from_utf8(&self.bytes[..self.len as usize]).unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub(crate) fn to_words(self) -> ([u64; 2], u8) {
        let (lo, hi) = self.bytes.split_at(8);
        ([u64::from_le_bytes(lo.try_into().unwrap()), u64::from_le_bytes(hi.try_into().unwrap())], self.len)
    }
}

impl fmt::Debug for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self.as_str(), f)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<&str> for TaskName {
    fn from(s: &str) -> Self {
        TaskName::new(s)
    }
}

/// Arguments of a probed call, as seen by the pre-handler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HookInvocation {
    pub slot: SlotId,
    pub kind: OpKind,
    /// Page index for reads and writes, block index for erases. For upper
    /// slots this is the first address of the range.
    pub address: u32,
    /// Clock value at call entry, before any latency is charged.
    pub time: Nanos,
    pub task: TaskName,
}

pub type ProbeHandler = Arc<dyn Fn(&HookInvocation) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProbeId(u64);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProbeHandle {
    id: ProbeId,
    slot: SlotId,
}

impl ProbeHandle {
    pub fn id(&self) -> ProbeId {
        self.id
    }

    pub fn slot(&self) -> SlotId {
        self.slot
    }

    pub fn slot_name(&self) -> &'static str {
        self.slot.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("no function slot named {0:?}")]
    UnknownSlot(String),
    #[error("slot {0} is already probed")]
    Duplicate(&'static str),
    #[error("probe {0:?} is not registered")]
    StaleHandle(ProbeId),
}

struct ProbeEntry {
    id: ProbeId,
    handler: ProbeHandler,
    active: bool,
}

/// At most one probe per slot.
#[derive(Default)]
pub struct ProbeRegistry {
    entries: [Option<ProbeEntry>; SlotId::COUNT],
    next_id: u64,
}

impl fmt::Debug for ProbeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_map();
        for slot in SlotId::ALL {
            if let Some(e) = &self.entries[slot.index()] {
                list.entry(&slot.name(), &(e.id, e.active));
            }
        }
        list.finish()
    }
}

impl ProbeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_probe(&mut self, slot_name: &str, handler: ProbeHandler) -> Result<ProbeHandle, ProbeError> {
        let slot = SlotId::from_name(slot_name).ok_or_else(|| ProbeError::UnknownSlot(slot_name.to_owned()))?;
        self.register(slot, handler)
    }

    pub fn register(&mut self, slot: SlotId, handler: ProbeHandler) -> Result<ProbeHandle, ProbeError> {
        let entry = &mut self.entries[slot.index()];
        if entry.is_some() {
            return Err(ProbeError::Duplicate(slot.name()));
        }
        self.next_id += 1;
        let id = ProbeId(self.next_id);
        *entry = Some(ProbeEntry { id, handler, active: true });
        Ok(ProbeHandle { id, slot })
    }

    pub fn unregister_probe(&mut self, handle: &ProbeHandle) -> Result<(), ProbeError> {
        self.entry_mut(handle)?;
        self.entries[handle.slot.index()] = None;
        Ok(())
    }

    /// Pauses (`false`) or resumes (`true`) a probe without removing it.
    pub fn set_active(&mut self, handle: &ProbeHandle, active: bool) -> Result<(), ProbeError> {
        self.entry_mut(handle)?.active = active;
        Ok(())
    }

    pub fn is_active(&self, handle: &ProbeHandle) -> bool {
        matches!(&self.entries[handle.slot.index()], Some(e) if e.id == handle.id && e.active)
    }

    pub fn is_probed(&self, slot: SlotId) -> bool {
        self.entries[slot.index()].is_some()
    }

    fn entry_mut(&mut self, handle: &ProbeHandle) -> Result<&mut ProbeEntry, ProbeError> {
        match &mut self.entries[handle.slot.index()] {
            Some(e) if e.id == handle.id => Ok(e),
            _ => Err(ProbeError::StaleHandle(handle.id)),
        }
    }

    /// Runs the pre-handler of `inv.slot`, if one is registered and active.
    #[inline]
    pub fn fire(&self, inv: &HookInvocation) {
        if let Some(e) = &self.entries[inv.slot.index()] {
            if e.active {
                (e.handler)(inv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn recorder() -> (ProbeHandler, Arc<Mutex<Vec<HookInvocation>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&seen);
        (Arc::new(move |inv: &HookInvocation| sink.lock().unwrap().push(*inv)), seen)
    }

    fn inv(slot: SlotId) -> HookInvocation {
        HookInvocation { slot, kind: slot.kind(), address: 1, time: Nanos(5), task: TaskName::new("t") }
    }

    #[test]
    fn task_name_truncates_to_16_bytes() {
        assert_eq!(TaskName::new("jffs2_gcd_mtd6").as_str(), "jffs2_gcd_mtd6");
        assert_eq!(TaskName::new("a_very_long_task_name_here").as_str(), "a_very_long_task");
        assert!(TaskName::new("").is_empty());
        // 15 ASCII bytes followed by a two-byte character
        assert_eq!(TaskName::new("abcdefghijklmnoé").as_str(), "abcdefghijklmno");
    }

    #[test]
    fn register_and_fire() {
        let mut reg = ProbeRegistry::new();
        let (h, seen) = recorder();
        let handle = reg.register_probe("lower.write_page", h).unwrap();
        assert_eq!(handle.slot_name(), "lower.write_page");
        reg.fire(&inv(SlotId::LowerWritePage));
        reg.fire(&inv(SlotId::LowerReadPage));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn unknown_and_duplicate_slots() {
        let mut reg = ProbeRegistry::new();
        let (h, _) = recorder();
        assert_eq!(reg.register_probe("nand_read", h.clone()).unwrap_err(), ProbeError::UnknownSlot("nand_read".into()));
        reg.register_probe("upper.read", h.clone()).unwrap();
        assert_eq!(reg.register_probe("upper.read", h).unwrap_err(), ProbeError::Duplicate("upper.read"));
    }

    #[test]
    fn unregister_twice_is_stale() {
        let mut reg = ProbeRegistry::new();
        let (h, seen) = recorder();
        let handle = reg.register(SlotId::LowerEraseBlock, h).unwrap();
        reg.unregister_probe(&handle).unwrap();
        reg.fire(&inv(SlotId::LowerEraseBlock));
        assert!(seen.lock().unwrap().is_empty());
        assert_eq!(reg.unregister_probe(&handle), Err(ProbeError::StaleHandle(handle.id())));
    }

    #[test]
    fn paused_probe_is_silent() {
        let mut reg = ProbeRegistry::new();
        let (h, seen) = recorder();
        let handle = reg.register(SlotId::LowerReadPage, h).unwrap();
        reg.set_active(&handle, false).unwrap();
        assert!(!reg.is_active(&handle));
        reg.fire(&inv(SlotId::LowerReadPage));
        assert!(seen.lock().unwrap().is_empty());
        reg.set_active(&handle, true).unwrap();
        reg.fire(&inv(SlotId::LowerReadPage));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn old_handle_cannot_touch_new_probe() {
        let mut reg = ProbeRegistry::new();
        let (h, _) = recorder();
        let old = reg.register(SlotId::UpperWrite, h.clone()).unwrap();
        reg.unregister_probe(&old).unwrap();
        let new = reg.register(SlotId::UpperWrite, h).unwrap();
        assert!(reg.unregister_probe(&old).is_err());
        assert!(reg.is_active(&new));
    }
}
