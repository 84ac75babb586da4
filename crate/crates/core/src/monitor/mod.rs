//! The flash operation monitor.
//!
//! [`Monitor::attach`] asks the device which slots to probe, registers one
//! pre-handler per operation kind and from then on turns every invocation
//! into two views:
//!
//! * the spatial view, one `reads writes erases` line per block of the
//!   traced scope, and
//! * the temporal log, one `seconds;kind;address[;task]` line per event,
//!   kept in a fixed-size ring that drops its oldest entry when full.
//!
//! Both are rendered on demand. Recording can be paused, stopped, reset or
//! flushed with [`ControlCommand`]s, and subscribers are notified
//! synchronously after each recorded event.

mod ring;

use std::fmt::{self, Write as _};
use std::mem::size_of;
use std::str::FromStr;
use std::sync::atomic::Ordering::{Acquire, Relaxed, Release};
use std::sync::atomic::{fence, AtomicU32, AtomicU64};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mtd::{Level, MtdDevice, MtdError, PartitionId, ProbeTargetReport};
use crate::nand::{BlockIndex, Nanos, OpKind};
use crate::probe::{HookInvocation, ProbeError, ProbeHandle, TaskName};

pub use ring::RingLog;
use ring::MAX_TASK_ID;

/// Fixed static size term of the footprint model.
pub const STATIC_BASE_BYTES: u64 = 8861;
/// Per-entry log record without the task name.
pub const LOG_RECORD_BYTES: u64 = 20;
pub const TASK_NAME_BYTES: u64 = TaskName::MAX_LEN as u64;
pub const COUNTER_TRIPLE_BYTES: u64 = size_of::<[u32; 3]>() as u64;

pub const DEFAULT_LOG_CAPACITY: usize = 40_000;

/// One logged flash operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub time: Nanos,
    pub kind: OpKind,
    /// Page index for reads and writes, block index for erases; always
    /// chip-absolute.
    pub address: u32,
    pub task: TaskName,
}

impl TraceEvent {
    pub fn new(time: Nanos, kind: OpKind, address: u32, task: &str) -> Self {
        TraceEvent { time, kind, address, task: TaskName::new(task) }
    }

    /// The temporal log line, without the trailing newline.
    pub fn line(&self, with_task: bool) -> impl fmt::Display + '_ {
        struct Line<'a>(&'a TraceEvent, bool);
        impl fmt::Display for Line<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let e = self.0;
                write!(f, "{};{};{}", e.time, e.kind, e.address)?;
                if self.1 {
                    write!(f, ";{}", e.task)?;
                }
                Ok(())
            }
        }
        Line(self, with_task)
    }
}

/// Parses one temporal log line, with or without the task field.
impl FromStr for TraceEvent {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut fields = line.splitn(4, ';');
        let time = fields.next().unwrap_or_default().parse::<Nanos>()?;
        let kind = fields.next().ok_or("missing kind field")?.parse::<OpKind>()?;
        let address = fields
            .next()
            .ok_or("missing address field")?
            .parse::<u32>()
            .map_err(|e| format!("bad address: {e}"))?;
        let task = TaskName::new(fields.next().unwrap_or_default());
        Ok(TraceEvent { time, kind, address, task })
    }
}

/// Per-block `(reads, writes, erases)` for a contiguous range of blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialCounters {
    first_block: BlockIndex,
    counts: Vec<[u32; 3]>,
}

impl SpatialCounters {
    pub fn new(first_block: BlockIndex, block_count: u32) -> Self {
        SpatialCounters { first_block, counts: vec![[0; 3]; block_count as usize] }
    }

    /// Builds counters from explicit triples, e.g. a parsed spatial view.
    pub fn from_triples(first_block: BlockIndex, counts: Vec<[u32; 3]>) -> Self {
        SpatialCounters { first_block, counts }
    }

    pub fn first_block(&self) -> BlockIndex {
        self.first_block
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, block: BlockIndex) -> Option<[u32; 3]> {
        let rel = block.checked_sub(self.first_block)?;
        self.counts.get(rel as usize).copied()
    }

    pub fn triples(&self) -> &[[u32; 3]] {
        &self.counts
    }

    pub fn erase_counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.iter().map(|c| c[OpKind::Erase.index()])
    }

    /// Sum over blocks, per kind.
    pub fn totals(&self) -> [u64; 3] {
        self.counts.iter().fold([0u64; 3], |mut acc, c| {
            for k in 0..3 {
                acc[k] += c[k] as u64;
            }
            acc
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.counts.len() * 8);
        for [r, w, e] in &self.counts {
            let _ = writeln!(out, "{r} {w} {e}");
        }
        out
    }

    /// Parses a rendered spatial view.
    pub fn parse(first_block: BlockIndex, text: &str) -> Result<Self, String> {
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut triple = [0u32; 3];
            let mut fields = line.split(' ');
            for slot in &mut triple {
                *slot = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| format!("line {}: expected three counters", n + 1))?;
            }
            if fields.next().is_some() {
                return Err(format!("line {}: expected three counters", n + 1));
            }
            counts.push(triple);
        }
        Ok(SpatialCounters { first_block, counts })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Partition to trace; the whole chip when absent.
    #[serde(rename = "partition")]
    pub traced_partition: Option<PartitionId>,
    #[serde(rename = "log_size")]
    pub log_capacity: usize,
    #[serde(rename = "task_names")]
    pub record_task_names: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { traced_partition: None, log_capacity: DEFAULT_LOG_CAPACITY, record_task_names: true }
    }
}

impl MonitorConfig {
    pub fn log_entry_bytes(&self) -> u64 {
        LOG_RECORD_BYTES + if self.record_task_names { TASK_NAME_BYTES } else { 0 }
    }
}

/// Modeled RAM use: static part, one counter triple per traced block, and
/// the whole preallocated log.
pub fn footprint_estimate(config: &MonitorConfig, n_blocks: u64) -> u64 {
    STATIC_BASE_BYTES + 3 * 4 * n_blocks + config.log_entry_bytes() * config.log_capacity as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Running,
    Paused,
    Stopped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControlCommand {
    Start,
    Stop,
    Pause,
    /// Zero the counters and empty the log.
    Reset,
    /// Empty the log only.
    Flush,
}

impl FromStr for ControlCommand {
    type Err = MonitorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "start" => Ok(ControlCommand::Start),
            "stop" => Ok(ControlCommand::Stop),
            "pause" => Ok(ControlCommand::Pause),
            "reset" => Ok(ControlCommand::Reset),
            "flush" => Ok(ControlCommand::Flush),
            other => Err(MonitorError::UnknownCommand(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("a monitor is already attached to this device")]
    AlreadyAttached,
    #[error("monitor is not attached")]
    NotAttached,
    #[error("log capacity must be positive")]
    ZeroLogCapacity,
    #[error("unknown control command {0:?}")]
    UnknownCommand(String),
    #[error(transparent)]
    Partition(#[from] MtdError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(u64);

pub type Subscriber = Box<dyn FnMut(&TraceEvent) + Send>;

// `Shared::state` flags; zero means running with nothing to do but record
const PAUSED: u32 = 1;
const STOPPED: u32 = 2;
const DETACHED: u32 = 4;
// `pending` holds work, or a reader wants the writer parked
const DIRTY: u32 = 8;
const SUBSCRIBED: u32 = 16;

// reader retries before it stalls the writer
const OPTIMISTIC_READS: u32 = 4;

#[derive(Default)]
struct Pending {
    reset: bool,
    flush: bool,
}

#[derive(Default)]
struct Subscribers {
    list: Vec<(SubscriptionId, Subscriber)>,
    next: u64,
}

/// State shared by the probe handlers and every monitor handle.
///
/// Ingestion has a single writer: probe handlers only run from inside a
/// device operation, which needs exclusive access to the device. The writer
/// updates plain atomics inside a sequence lock; readers copy everything
/// and retry if `seq` moved. Reset and flush are queued in `pending` and
/// applied by the writer on its next event, so the hot path never takes a
/// lock or does an atomic read-modify-write.
struct Shared {
    seq: AtomicU64,
    state: AtomicU32,
    pages_per_block: u32,
    // log2 of pages_per_block, or u32::MAX if not a power of two
    block_shift: u32,
    first_block: BlockIndex,
    blocks: usize,
    // reads, writes, erases per block, flattened
    counts: Box<[AtomicU32]>,
    log: RingLog,
    record_task_names: bool,
    // writer's cache of the last task it logged: name words, then len | id << 8
    last_task: [AtomicU64; 2],
    last_task_meta: AtomicU64,
    names: Mutex<TaskNames>,
    pending: Mutex<Pending>,
    subscribers: Mutex<Subscribers>,
}

/// Task names seen so far; log slots hold indices into `list`.
struct TaskNames {
    list: Vec<TaskName>,
    ids: HashMap<TaskName, u32>,
}

impl Default for TaskNames {
    fn default() -> Self {
        TaskNames { list: vec![TaskName::default()], ids: HashMap::from([(TaskName::default(), 0)]) }
    }
}

struct Snapshot {
    counts: Vec<[u32; 3]>,
    events: Vec<TraceEvent>,
    total_inserted: u64,
    dropped: u64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

impl Shared {
    #[inline]
    fn ingest(&self, inv: &HookInvocation) {
        let state = self.state.load(Acquire);
        if state == 0 {
            self.record(inv);
        } else {
            self.ingest_slow(inv, state);
        }
    }

    #[cold]
    fn ingest_slow(&self, inv: &HookInvocation, mut state: u32) {
        if state & DIRTY != 0 {
            self.apply_pending();
            state = self.state.load(Acquire);
        }
        if state & (PAUSED | STOPPED | DETACHED) != 0 || !self.record(inv) || state & SUBSCRIBED == 0 {
            return;
        }
        let task = if self.record_task_names { inv.task } else { TaskName::default() };
        let event = TraceEvent { time: inv.time, kind: inv.kind, address: inv.address, task };
        for (_, sub) in &mut lock(&self.subscribers).list {
            sub(&event);
        }
    }

    /// Counts and logs one in-scope event.
    #[inline]
    fn record(&self, inv: &HookInvocation) -> bool {
        let block = match inv.kind {
            OpKind::Erase => inv.address,
            _ if self.block_shift != u32::MAX => inv.address >> self.block_shift,
            _ => inv.address / self.pages_per_block,
        };
        let rel = block.wrapping_sub(self.first_block) as usize;
        if rel >= self.blocks {
            return false;
        }
        let task = if self.record_task_names {
            match self.cached_task_id(inv.task) {
                Some(id) => id,
                None => return self.record_new_task(inv, rel),
            }
        } else {
            0
        };
        self.commit(inv, rel, task);
        true
    }

    // kept out of line so the common path stays a leaf function
    #[cold]
    #[inline(never)]
    fn record_new_task(&self, inv: &HookInvocation, rel: usize) -> bool {
        let task = self.intern(inv.task);
        self.commit(inv, rel, task);
        true
    }

    #[inline]
    fn commit(&self, inv: &HookInvocation, rel: usize, task: u32) {
        let s = self.begin_write();
        // SAFETY: `rel < blocks` was checked by the caller and `counts` holds three per block
        let c = unsafe { self.counts.get_unchecked(rel * 3 + inv.kind.index()) };
        c.store(c.load(Relaxed).wrapping_add(1), Relaxed);
        self.log.push(inv.time, inv.kind, inv.address, task);
        self.end_write(s);
    }

    #[inline]
    fn cached_task_id(&self, task: TaskName) -> Option<u32> {
        let (words, len) = task.to_words();
        let meta = self.last_task_meta.load(Relaxed);
        let hit = words[0] == self.last_task[0].load(Relaxed) && words[1] == self.last_task[1].load(Relaxed) && len as u64 == meta & 0xff;
        hit.then_some((meta >> 8) as u32)
    }

    #[cold]
    fn intern(&self, task: TaskName) -> u32 {
        let mut names = lock(&self.names);
        let next = names.list.len() as u32;
        let id = *names.ids.entry(task).or_insert(next);
        if id == next {
            // past the id range every later name shares the last id
            if id > MAX_TASK_ID {
                names.ids.insert(task, MAX_TASK_ID);
                return MAX_TASK_ID;
            }
            names.list.push(task);
        }
        let (words, len) = task.to_words();
        self.last_task[0].store(words[0], Relaxed);
        self.last_task[1].store(words[1], Relaxed);
        self.last_task_meta.store(len as u64 | (id as u64) << 8, Relaxed);
        id
    }

    #[inline]
    fn begin_write(&self) -> u64 {
        let s = self.seq.load(Relaxed);
        self.seq.store(s.wrapping_add(1), Relaxed);
        fence(Release);
        s
    }

    #[inline]
    fn end_write(&self, s: u64) {
        self.seq.store(s.wrapping_add(2), Release);
    }

    /// Writer slow path. Blocks while a reader holds `pending`.
    #[cold]
    fn apply_pending(&self) {
        let mut p = lock(&self.pending);
        let s = self.begin_write();
        if p.reset {
            for c in self.counts.iter() {
                c.store(0, Relaxed);
            }
        }
        if p.reset || p.flush {
            self.log.clear();
        }
        self.end_write(s);
        *p = Pending::default();
        self.state.fetch_and(!DIRTY, Release);
    }

    fn snapshot(&self, with_events: bool) -> Snapshot {
        let pending = lock(&self.pending);
        let mut snap = Snapshot { counts: Vec::with_capacity(self.blocks), events: Vec::new(), total_inserted: 0, dropped: 0 };
        let mut parked = false;
        let mut attempt = 0;
        loop {
            let s = self.seq.load(Acquire);
            if s & 1 == 0 {
                snap.counts.clear();
                snap.counts.extend(self.counts.chunks_exact(3).map(|c| [c[0].load(Relaxed), c[1].load(Relaxed), c[2].load(Relaxed)]));
                snap.events.clear();
                if with_events {
                    self.log.read_into(&mut snap.events, &lock(&self.names).list);
                }
                snap.total_inserted = self.log.total_inserted();
                snap.dropped = self.log.dropped();
                fence(Acquire);
                if self.seq.load(Relaxed) == s {
                    break;
                }
            }
            attempt += 1;
            if attempt == OPTIMISTIC_READS && !parked {
                // the writer parks on `pending` at its next event
                self.state.fetch_or(DIRTY, Release);
                parked = true;
            }
            std::thread::yield_now();
        }
        if parked && !pending.reset && !pending.flush {
            self.state.fetch_and(!DIRTY, Release);
        }
        // queued but not yet applied
        if pending.reset {
            snap.counts.fill([0; 3]);
        }
        if pending.reset || pending.flush {
            snap.events.clear();
            snap.dropped = 0;
        }
        if self.state.load(Acquire) & DETACHED != 0 {
            snap.counts.clear();
            snap.events.clear();
        }
        snap
    }
}

/// Handle to an attached monitor. Clones share the same state, so one clone
/// can render from another thread while the device runs; every render
/// observes a consistent snapshot.
#[derive(Clone)]
pub struct Monitor {
    shared: Arc<Shared>,
    probes: Arc<Mutex<Vec<ProbeHandle>>>,
    config: MonitorConfig,
    targets: ProbeTargetReport,
}

impl fmt::Debug for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitor").field("config", &self.config).field("targets", &self.targets).finish_non_exhaustive()
    }
}

impl Monitor {
    /// Probes the slots chosen by the device's probe-target resolution.
    /// Performs no flash operation.
    pub fn attach(dev: &mut MtdDevice, config: MonitorConfig) -> Result<Monitor, MonitorError> {
        if dev.monitor_attached() {
            return Err(MonitorError::AlreadyAttached);
        }
        if config.log_capacity == 0 {
            return Err(MonitorError::ZeroLogCapacity);
        }
        let (first_block, block_count) = match config.traced_partition {
            Some(id) => {
                let p = dev.partition(id)?;
                (p.first_block, p.block_count)
            }
            None => (0, dev.geometry().blocks_per_chip()),
        };
        let ppb = dev.geometry().pages_per_block();
        let counts: Box<[AtomicU32]> = (0..block_count as usize * 3).map(|_| AtomicU32::new(0)).collect();
        for c in counts.iter() {
            c.store(0, Relaxed);
        }
        let shared = Arc::new(Shared {
            seq: AtomicU64::new(0),
            state: AtomicU32::new(0),
            pages_per_block: ppb,
            block_shift: if ppb.is_power_of_two() { ppb.trailing_zeros() } else { u32::MAX },
            first_block,
            blocks: block_count as usize,
            counts,
            log: RingLog::new(config.log_capacity),
            record_task_names: config.record_task_names,
            last_task: Default::default(),
            last_task_meta: AtomicU64::new(0),
            names: Mutex::default(),
            pending: Mutex::default(),
            subscribers: Mutex::default(),
        });

        let targets = dev.resolve_probe_targets(Level::Lower);
        let mut handles = Vec::with_capacity(3);
        for slot in targets.slots() {
            let sink = Arc::clone(&shared);
            let handler = Arc::new(move |inv: &HookInvocation| sink.ingest(inv));
            match dev.probes_mut().register(slot, handler) {
                Ok(h) => handles.push(h),
                Err(e) => {
                    for h in &handles {
                        let _ = dev.probes_mut().unregister_probe(h);
                    }
                    return Err(e.into());
                }
            }
        }
        dev.set_monitor_attached(true);
        Ok(Monitor { shared, probes: Arc::new(Mutex::new(handles)), config, targets })
    }

    /// Removes the probes and discards all recorded data.
    pub fn detach(&self, dev: &mut MtdDevice) -> Result<(), MonitorError> {
        let mut probes = lock(&self.probes);
        if !self.is_attached() {
            return Err(MonitorError::NotAttached);
        }
        for h in probes.drain(..) {
            dev.probes_mut().unregister_probe(&h)?;
        }
        dev.set_monitor_attached(false);
        self.shared.state.fetch_or(DETACHED, Release);
        self.control(ControlCommand::Reset);
        let mut subs = lock(&self.shared.subscribers);
        subs.list.clear();
        self.shared.state.fetch_and(!SUBSCRIBED, Relaxed);
        Ok(())
    }

    pub fn is_attached(&self) -> bool {
        self.shared.state.load(Acquire) & DETACHED == 0
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn targets(&self) -> ProbeTargetReport {
        self.targets
    }

    pub fn mode(&self) -> Mode {
        let state = self.shared.state.load(Relaxed);
        if state & STOPPED != 0 {
            Mode::Stopped
        } else if state & PAUSED != 0 {
            Mode::Paused
        } else {
            Mode::Running
        }
    }

    /// Ingests one probe invocation as the installed handlers do.
    ///
    /// Ingestion assumes a single writer; do not call this concurrently with
    /// operations on the monitored device.
    pub fn on_event(&self, inv: &HookInvocation) {
        self.shared.ingest(inv);
    }

    /// Mode changes take effect immediately. Reset and flush take effect
    /// immediately for every view and are applied to the stored data before
    /// the next event is recorded.
    pub fn control(&self, command: ControlCommand) {
        let mode = match command {
            ControlCommand::Start => 0,
            ControlCommand::Stop => STOPPED,
            ControlCommand::Pause => PAUSED,
            ControlCommand::Reset | ControlCommand::Flush => {
                let mut p = lock(&self.shared.pending);
                if command == ControlCommand::Reset {
                    p.reset = true;
                } else {
                    p.flush = true;
                }
                self.shared.state.fetch_or(DIRTY, Release);
                return;
            }
        };
        let _ = self.shared.state.fetch_update(Relaxed, Relaxed, |s| Some(s & !(PAUSED | STOPPED) | mode));
    }

    /// Applies a textual command token (`start`, `stop`, `pause`, `reset`,
    /// `flush`).
    pub fn control_str(&self, token: &str) -> Result<(), MonitorError> {
        self.control(token.parse()?);
        Ok(())
    }

    /// Registers a callback run after every recorded event, on the thread
    /// that performed the operation. It must not subscribe or unsubscribe.
    pub fn subscribe(&self, subscriber: impl FnMut(&TraceEvent) + Send + 'static) -> SubscriptionId {
        let mut subs = lock(&self.shared.subscribers);
        subs.next += 1;
        let id = SubscriptionId(subs.next);
        subs.list.push((id, Box::new(subscriber)));
        self.shared.state.fetch_or(SUBSCRIBED, Relaxed);
        id
    }

    pub fn unsubscribe(&self, id: SubscriptionId) -> bool {
        let mut subs = lock(&self.shared.subscribers);
        let before = subs.list.len();
        subs.list.retain(|(s, _)| *s != id);
        if subs.list.is_empty() {
            self.shared.state.fetch_and(!SUBSCRIBED, Relaxed);
        }
        subs.list.len() != before
    }

    pub fn render_spatial(&self) -> String {
        self.counters().render()
    }

    pub fn render_temporal(&self) -> String {
        let events = self.shared.snapshot(true).events;
        let with_task = self.shared.record_task_names;
        let mut out = String::with_capacity(events.len() * 32);
        for e in &events {
            let _ = writeln!(out, "{}", e.line(with_task));
        }
        out
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.shared.snapshot(true).events
    }

    pub fn counters(&self) -> SpatialCounters {
        SpatialCounters::from_triples(self.shared.first_block, self.shared.snapshot(false).counts)
    }

    /// Both views taken from the same instant.
    pub fn views(&self) -> (SpatialCounters, Vec<TraceEvent>) {
        let snap = self.shared.snapshot(true);
        (SpatialCounters::from_triples(self.shared.first_block, snap.counts), snap.events)
    }

    pub fn total_inserted(&self) -> u64 {
        self.shared.snapshot(false).total_inserted
    }

    /// Whether the log dropped events since it was last emptied.
    pub fn log_overflowed(&self) -> bool {
        self.shared.snapshot(false).dropped > 0
    }

    /// Modeled bytes of what this monitor actually allocated.
    pub fn footprint_bytes(&self) -> u64 {
        let blocks = if self.is_attached() { self.shared.blocks as u64 } else { 0 };
        STATIC_BASE_BYTES + blocks * COUNTER_TRIPLE_BYTES + self.shared.log.capacity() as u64 * self.config.log_entry_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtd::SlotId;
    use crate::nand::{FlashChip, FlashGeometry, LatencyModel};

    fn device(blocks: u32) -> MtdDevice {
        let g = FlashGeometry::new(blocks, 64, 2048).unwrap();
        MtdDevice::new(FlashChip::new(g, LatencyModel::default()))
    }

    fn inv(kind: OpKind, address: u32, secs: u64, nanos: u32, task: &str) -> HookInvocation {
        HookInvocation {
            slot: SlotId::lower(kind),
            kind,
            address,
            time: Nanos::from_secs_nanos(secs, nanos),
            task: TaskName::new(task),
        }
    }

    #[test]
    fn attach_defaults_scope_whole_chip() {
        let mut dev = device(2048);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        assert_eq!(m.counters().len(), 2048);
        assert_eq!(m.config().log_capacity, 40_000);
        assert_eq!(m.mode(), Mode::Running);
        assert_eq!(dev.chip().clock(), Nanos::ZERO);
        assert_eq!(Monitor::attach(&mut dev, MonitorConfig::default()).unwrap_err(), MonitorError::AlreadyAttached);
    }

    #[test]
    fn attach_to_partition_scopes_counters() {
        let mut dev = device(2048);
        let p = dev.add_partition(64, 400, "rootfs").unwrap();
        let cfg = MonitorConfig { traced_partition: Some(p), ..Default::default() };
        let m = Monitor::attach(&mut dev, cfg).unwrap();
        assert_eq!(m.counters().len(), 400);

        dev.mtd_read(0, 1).unwrap(); // outside
        dev.mtd_read(4096, 1).unwrap(); // inside
        assert_eq!(m.events().len(), 1);
        assert_eq!(m.counters().get(64), Some([1, 0, 0]));
    }

    #[test]
    fn attach_rejects_bad_config() {
        let mut dev = device(32);
        let cfg = MonitorConfig { log_capacity: 0, ..Default::default() };
        assert_eq!(Monitor::attach(&mut dev, cfg).unwrap_err(), MonitorError::ZeroLogCapacity);
        let cfg = MonitorConfig { traced_partition: Some(PartitionId(3)), ..Default::default() };
        assert!(matches!(Monitor::attach(&mut dev, cfg), Err(MonitorError::Partition(_))));
        assert!(!dev.monitor_attached());
        assert!(!dev.probes().is_probed(SlotId::LowerReadPage));
    }

    #[test]
    fn write_event_buckets_into_block() {
        let mut dev = device(2048);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        m.on_event(&inv(OpKind::Write, 6935, 13, 552_904_998, "sync_supers"));
        assert_eq!(m.counters().get(108), Some([0, 1, 0]));
        assert_eq!(m.render_temporal(), "13.552904998;W;6935;sync_supers\n");
    }

    #[test]
    fn paused_and_out_of_scope_events_are_dropped() {
        let mut dev = device(8);
        let p = dev.add_partition(2, 2, "p").unwrap();
        let m = Monitor::attach(&mut dev, MonitorConfig { traced_partition: Some(p), ..Default::default() }).unwrap();
        m.control(ControlCommand::Pause);
        m.on_event(&inv(OpKind::Read, 128, 0, 0, "x"));
        assert!(m.events().is_empty());
        m.control(ControlCommand::Start);
        m.on_event(&inv(OpKind::Read, 0, 0, 0, "x"));
        m.on_event(&inv(OpKind::Erase, 4, 0, 0, "x"));
        assert!(m.events().is_empty());
        assert_eq!(m.counters().totals(), [0, 0, 0]);
    }

    #[test]
    fn flush_reset_and_pause_semantics() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        dev.mtd_write(0, 10).unwrap();
        m.control(ControlCommand::Flush);
        assert_eq!(m.render_temporal(), "");
        assert_eq!(m.counters().totals(), [0, 10, 0]);

        m.control(ControlCommand::Reset);
        assert_eq!(m.render_temporal(), "");
        assert_eq!(m.counters().totals(), [0, 0, 0]);
        assert_eq!(m.mode(), Mode::Running);

        m.control(ControlCommand::Pause);
        dev.mtd_read(0, 5).unwrap();
        m.control(ControlCommand::Start);
        dev.mtd_read(0, 3).unwrap();
        assert_eq!(m.events().len(), 3);

        m.control(ControlCommand::Stop);
        dev.mtd_read(0, 3).unwrap();
        assert_eq!(m.mode(), Mode::Stopped);
        assert_eq!(m.events().len(), 3);
        assert_eq!(m.render_spatial().lines().count(), 32);
    }

    #[test]
    fn control_tokens() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        m.control_str("pause").unwrap();
        assert_eq!(m.mode(), Mode::Paused);
        assert_eq!(m.control_str("halt"), Err(MonitorError::UnknownCommand("halt".into())));
    }

    #[test]
    fn spatial_rendering() {
        let mut dev = device(4);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        assert_eq!(m.render_spatial(), "0 0 0\n".repeat(4));
        dev.mtd_write(128, 64).unwrap();
        dev.mtd_erase(0, 1).unwrap();
        let view = m.render_spatial();
        let lines: Vec<_> = view.lines().collect();
        assert_eq!(lines, ["0 0 1", "0 0 0", "0 64 0", "0 0 0"]);
        assert_eq!(view, m.render_spatial());
        assert_eq!(SpatialCounters::parse(0, &view).unwrap(), m.counters());
    }

    #[test]
    fn temporal_rendering_without_task_names() {
        let mut dev = device(32);
        let cfg = MonitorConfig { record_task_names: false, ..Default::default() };
        let m = Monitor::attach(&mut dev, cfg).unwrap();
        dev.set_task("cat");
        dev.mtd_write(0, 1).unwrap();
        assert_eq!(m.render_temporal(), "0.000000000;W;0\n");
    }

    #[test]
    fn subscribers_see_recorded_events_only() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        let a = Arc::new(Mutex::new(0u32));
        let b = Arc::new(Mutex::new(0u32));
        let (ca, cb) = (Arc::clone(&a), Arc::clone(&b));
        m.subscribe(move |_| *ca.lock().unwrap() += 1);
        let sub = m.subscribe(move |_| *cb.lock().unwrap() += 1);
        dev.mtd_read(0, 7).unwrap();
        m.control(ControlCommand::Pause);
        dev.mtd_read(0, 4).unwrap();
        assert_eq!(*a.lock().unwrap(), 7);
        assert_eq!(*b.lock().unwrap(), 7);
        assert!(m.unsubscribe(sub));
        assert!(!m.unsubscribe(sub));
    }

    #[test]
    fn footprint() {
        let cfg = MonitorConfig::default();
        assert_eq!(footprint_estimate(&cfg, 2048), 1_473_437);
        let zero = MonitorConfig { log_capacity: 0, ..Default::default() };
        assert_eq!(footprint_estimate(&zero, 0), 8861);
        let off = MonitorConfig { record_task_names: false, ..Default::default() };
        assert_eq!(footprint_estimate(&off, 2048), 833_437);

        let mut dev = device(2048);
        let m = Monitor::attach(&mut dev, cfg.clone()).unwrap();
        assert_eq!(m.footprint_bytes(), footprint_estimate(&cfg, 2048));
    }

    #[test]
    fn detach_restores_device() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        dev.mtd_read(0, 2).unwrap();
        m.detach(&mut dev).unwrap();
        dev.mtd_read(0, 2).unwrap();
        assert!(m.events().is_empty());
        assert_eq!(m.detach(&mut dev), Err(MonitorError::NotAttached));
        for s in SlotId::ALL {
            assert!(!dev.probes().is_probed(s));
        }
        Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
    }

    #[test]
    fn legacy_device_gets_one_event_per_call() {
        let g = FlashGeometry::new(32, 64, 2048).unwrap();
        let mut dev = MtdDevice::legacy(FlashChip::new(g, LatencyModel::default()));
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        assert!(m.targets().fallback_used);
        dev.mtd_read(10, 5).unwrap();
        let ev = m.events();
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].kind, ev[0].address), (OpKind::Read, 10));
    }

    #[test]
    fn log_line_parses_back() {
        let e = TraceEvent::new(Nanos::from_secs_nanos(13, 563_917_567), OpKind::Erase, 1025, "jffs2_gcd_mtd6");
        let line = e.line(true).to_string();
        assert_eq!(line, "13.563917567;E;1025;jffs2_gcd_mtd6");
        assert_eq!(line.parse::<TraceEvent>().unwrap(), e);
        let bare: TraceEvent = "0.000000000;W;0".parse().unwrap();
        assert!(bare.task.is_empty());
        assert!("1.0;W;0".parse::<TraceEvent>().is_err());
        assert!("0.000000000;X;0".parse::<TraceEvent>().is_err());
    }

    #[test]
    fn interleaved_tasks_keep_their_names() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        for (i, task) in ["a", "b", "a", "", "a_very_long_task_name"].into_iter().enumerate() {
            dev.set_task(task);
            dev.mtd_read(i as u32, 1).unwrap();
        }
        let names: Vec<_> = m.events().iter().map(|e| e.task.to_string()).collect();
        assert_eq!(names, ["a", "b", "a", "", "a_very_long_task"]);
    }

    #[test]
    fn reset_from_another_thread_keeps_views_consistent() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        let ctl = m.clone();
        let t = std::thread::spawn(move || {
            for i in 0..300 {
                if i % 3 == 0 {
                    ctl.control(ControlCommand::Reset);
                }
                let (counters, events) = ctl.views();
                assert_eq!(counters.totals()[0], events.len() as u64);
                std::thread::yield_now();
            }
        });
        for _ in 0..200 {
            dev.mtd_read(0, 64).unwrap();
        }
        t.join().unwrap();
        let (counters, events) = m.views();
        assert_eq!(counters.totals()[0], events.len() as u64);
        assert_eq!(m.total_inserted(), 200 * 64);
    }

    #[test]
    fn render_from_another_thread() {
        let mut dev = device(32);
        let m = Monitor::attach(&mut dev, MonitorConfig::default()).unwrap();
        let reader = m.clone();
        let t = std::thread::spawn(move || {
            for _ in 0..200 {
                let (counters, events) = reader.views();
                assert_eq!(counters.totals()[0], events.len() as u64);
                assert!(events.windows(2).all(|w| w[0].time <= w[1].time));
                let text = reader.render_temporal();
                assert!(text.is_empty() || text.ends_with('\n'));
            }
        });
        for _ in 0..20 {
            dev.mtd_read(0, 64).unwrap();
        }
        t.join().unwrap();
        assert_eq!(m.events().len(), 1280);
    }
}
