use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering::Relaxed};

use super::TraceEvent;
use crate::nand::{Nanos, OpKind};
use crate::probe::TaskName;

/// Largest task id a slot can hold.
pub const MAX_TASK_ID: u32 = (1 << 30) - 1;

/// One event packed into two words.
#[derive(Default)]
struct Slot {
    time: AtomicU64,
    // address | kind << 32 | task id << 34
    meta: AtomicU64,
}

/// Fixed-capacity event log that overwrites its oldest entry when full.
///
/// Task names are stored as ids into a name table kept by the owner. Every
/// slot is allocated and written once up front, so pushing never allocates
/// or faults. Mutation is single-writer: the owner serializes `push` and
/// `clear` and publishes them through its own sequence lock. `read_into`
/// may run concurrently; its result is only meaningful once that lock
/// validates it.
pub struct RingLog {
    slots: Box<[Slot]>,
    // slot the next push writes
    next: AtomicUsize,
    // completed passes over the slots; total = wraps * capacity + next
    wraps: AtomicU64,
    // `total` at the last clear
    cleared_at: AtomicU64,
}

impl RingLog {
    /// # Panics
    ///
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring log capacity must be positive");
        let slots: Box<[Slot]> = (0..capacity).map(|_| Slot::default()).collect();
        // the allocation may come back as untouched zero pages; fault them in now
        for slot in slots.iter() {
            slot.meta.store(0, Relaxed);
        }
        RingLog { slots, next: AtomicUsize::new(0), wraps: AtomicU64::new(0), cleared_at: AtomicU64::new(0) }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Every push since creation, including overwritten and cleared ones.
    pub fn total_inserted(&self) -> u64 {
        self.wraps.load(Relaxed) * self.slots.len() as u64 + self.next.load(Relaxed) as u64
    }

    fn since_clear(&self) -> u64 {
        self.total_inserted().wrapping_sub(self.cleared_at.load(Relaxed))
    }

    pub fn len(&self) -> usize {
        self.since_clear().min(self.slots.len() as u64) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events overwritten since the last clear.
    pub fn dropped(&self) -> u64 {
        self.since_clear().saturating_sub(self.slots.len() as u64)
    }

    #[inline]
    pub fn push(&self, time: Nanos, kind: OpKind, address: u32, task_id: u32) {
        debug_assert!(task_id <= MAX_TASK_ID);
        let at = self.next.load(Relaxed);
        // SAFETY: `next` only ever holds values below `slots.len()`
        let slot = unsafe { self.slots.get_unchecked(at) };
        slot.time.store(time.0, Relaxed);
        slot.meta.store(address as u64 | (kind.index() as u64) << 32 | (task_id as u64) << 34, Relaxed);
        if at + 1 == self.slots.len() {
            self.next.store(0, Relaxed);
            self.wraps.store(self.wraps.load(Relaxed) + 1, Relaxed);
        } else {
            self.next.store(at + 1, Relaxed);
        }
    }

    pub fn clear(&self) {
        self.cleared_at.store(self.total_inserted(), Relaxed);
    }

    /// Appends the logged events to `out`, oldest first, resolving task ids
    /// through `names`. Unknown ids resolve to an empty name.
    pub fn read_into(&self, out: &mut Vec<TraceEvent>, names: &[TaskName]) {
        let cap = self.slots.len();
        let len = self.len();
        let next = self.next.load(Relaxed).min(cap - 1);
        let first = (next + cap - len) % cap;
        out.reserve(len);
        for i in 0..len {
            let slot = &self.slots[(first + i) % cap];
            let meta = slot.meta.load(Relaxed);
            out.push(TraceEvent {
                time: Nanos(slot.time.load(Relaxed)),
                kind: OpKind::ALL[((meta >> 32) & 3).min(2) as usize],
                address: meta as u32,
                task: names.get((meta >> 34) as usize).copied().unwrap_or_default(),
            });
        }
    }
}
