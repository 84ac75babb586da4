//! Trace statistics: per-kind totals, phase segmentation, wear spread,
//! plot series and the monitor overhead harness.

use std::fmt::{self, Write as _};
use std::time::Duration;

use serde::Serialize;

use crate::monitor::{SpatialCounters, TraceEvent};
use crate::nand::{Nanos, OpKind};
use crate::workloads::ffs::GC_TASK;

/// Shortest run that counts as a phase of its own.
pub const MIN_PHASE_EVENTS: usize = 8;
/// Share of the dominant kind required for a single-kind phase.
pub const DOMINANCE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    Scan,
    Format,
    Creation,
    Transactions,
    Gc,
}

impl PhaseLabel {
    pub fn name(self) -> &'static str {
        match self {
            PhaseLabel::Scan => "scan",
            PhaseLabel::Format => "format",
            PhaseLabel::Creation => "creation",
            PhaseLabel::Transactions => "transactions",
            PhaseLabel::Gc => "gc",
        }
    }
}

impl fmt::Display for PhaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A contiguous run of log events, `first_index..first_index + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub label: PhaseLabel,
    pub start_time: Nanos,
    pub end_time: Nanos,
    pub dominant: OpKind,
    pub first_index: usize,
    pub len: usize,
}

fn kind_counts(events: &[TraceEvent]) -> [usize; 3] {
    let mut n = [0; 3];
    for e in events {
        n[e.kind.index()] += 1;
    }
    n
}

fn share(events: &[TraceEvent], kind: OpKind) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    kind_counts(events)[kind.index()] as f64 / events.len() as f64
}

fn leading_run(events: &[TraceEvent], kind: OpKind) -> usize {
    events.iter().take_while(|e| e.kind == kind).count()
}

/// Splits a time-ordered log into labelled phases that cover every event
/// exactly once, in order:
///
/// * `scan`: the leading all-read run (at least [`MIN_PHASE_EVENTS`] long,
///   unless the whole log is reads);
/// * `format`: the erase run right after a scan;
/// * `gc`: the tail after the last read or write by a non-GC task, if it
///   is long enough and at least [`DOMINANCE`] erases;
/// * `creation`: a write-dominated prefix of what remains, ending at the
///   first non-write once an 8-event window drops below [`DOMINANCE`];
/// * `transactions`: everything else.
pub fn detect_phases(events: &[TraceEvent]) -> Vec<Phase> {
    let mut cuts: Vec<(PhaseLabel, usize, usize)> = Vec::new();
    let mut lo = 0;
    let mut hi = events.len();

    let scan = leading_run(events, OpKind::Read);
    if scan > 0 && (scan >= MIN_PHASE_EVENTS || scan == events.len()) {
        cuts.push((PhaseLabel::Scan, 0, scan));
        lo = scan;
        let format = leading_run(&events[lo..], OpKind::Erase);
        if format > 0 {
            cuts.push((PhaseLabel::Format, lo, lo + format));
            lo += format;
        }
    }

    let mut tail = None;
    let last_user_io = events[lo..].iter().rposition(|e| e.kind != OpKind::Erase && e.task.as_str() != GC_TASK);
    let gc_start = last_user_io.map_or(lo, |i| lo + i + 1);
    let gc = &events[gc_start..hi];
    if gc.len() >= MIN_PHASE_EVENTS && share(gc, OpKind::Erase) >= DOMINANCE {
        tail = Some((PhaseLabel::Gc, gc_start, hi));
        hi = gc_start;
    }

    let middle = &events[lo..hi];
    let creation = creation_len(middle);
    if creation >= MIN_PHASE_EVENTS {
        cuts.push((PhaseLabel::Creation, lo, lo + creation));
        lo += creation;
    }
    if lo < hi {
        cuts.push((PhaseLabel::Transactions, lo, hi));
    }
    cuts.extend(tail);

    cuts.into_iter()
        .map(|(label, a, b)| {
            let seg = &events[a..b];
            let n = kind_counts(seg);
            let dominant = OpKind::ALL.into_iter().max_by_key(|k| (n[k.index()], std::cmp::Reverse(k.index()))).unwrap_or(OpKind::Read);
            Phase { label, start_time: seg[0].time, end_time: seg[seg.len() - 1].time, dominant, first_index: a, len: b - a }
        })
        .collect()
}

fn creation_len(events: &[TraceEvent]) -> usize {
    if events.len() < MIN_PHASE_EVENTS {
        return 0;
    }
    let broken = events.windows(MIN_PHASE_EVENTS).position(|w| share(w, OpKind::Write) < DOMINANCE);
    match broken {
        None => events.len(),
        Some(i) => i + leading_run(&events[i..], OpKind::Write),
    }
}

/// Spread of per-block erase counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct WearSpread {
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

pub fn wear_report(counters: &SpatialCounters) -> WearSpread {
    let n = counters.len();
    if n == 0 {
        return WearSpread::default();
    }
    let (mut min, mut max, mut sum) = (u32::MAX, 0, 0u64);
    for e in counters.erase_counts() {
        min = min.min(e);
        max = max.max(e);
        sum += e as u64;
    }
    let mean = sum as f64 / n as f64;
    let var = counters.erase_counts().map(|e| (e as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    WearSpread { min, max, mean, stddev: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStats {
    /// Event counts in the temporal log, indexed by [`OpKind::index`].
    pub log_totals: [u64; 3],
    /// Sums of the spatial counters.
    pub spatial_totals: [u64; 3],
    pub events_logged: usize,
    pub log_overflowed: bool,
    pub phases: Vec<Phase>,
    pub wear: WearSpread,
    /// Blocks with the most erases, most first, at most ten.
    pub hottest_blocks: Vec<(u32, [u32; 3])>,
}

impl TraceStats {
    pub fn compute(events: &[TraceEvent], counters: &SpatialCounters, log_overflowed: bool) -> Self {
        let n = kind_counts(events);
        let mut hottest: Vec<(u32, [u32; 3])> =
            counters.triples().iter().enumerate().map(|(i, t)| (counters.first_block() + i as u32, *t)).filter(|(_, t)| t[2] > 0).collect();
        hottest.sort_by(|a, b| b.1[2].cmp(&a.1[2]).then(a.0.cmp(&b.0)));
        hottest.truncate(10);
        TraceStats {
            log_totals: n.map(|c| c as u64),
            spatial_totals: counters.totals(),
            events_logged: events.len(),
            log_overflowed,
            phases: detect_phases(events),
            wear: wear_report(counters),
            hottest_blocks: hottest,
        }
    }

    /// Human-readable report.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let [r, w, e] = self.log_totals;
        let _ = writeln!(s, "events logged: {}", self.events_logged);
        let _ = writeln!(s, "log overflowed: {}", if self.log_overflowed { "yes" } else { "no" });
        let _ = writeln!(s, "temporal totals: R {r} W {w} E {e}");
        let [r, w, e] = self.spatial_totals;
        let _ = writeln!(s, "spatial totals: R {r} W {w} E {e}");
        let wr = &self.wear;
        let _ = writeln!(s, "erase spread: min {} max {} mean {:.4} stddev {:.4}", wr.min, wr.max, wr.mean, wr.stddev);
        let _ = writeln!(s, "phases:");
        for p in &self.phases {
            let _ = writeln!(s, "  {:<12} {} .. {}  {} events, mostly {}", p.label, p.start_time, p.end_time, p.len, p.dominant);
        }
        if !self.hottest_blocks.is_empty() {
            let _ = writeln!(s, "most erased blocks:");
            for (b, [r, w, e]) in &self.hottest_blocks {
                let _ = writeln!(s, "  {b}: {r} {w} {e}");
            }
        }
        s
    }
}

/// One `time address kind` series per operation kind, in R, W, E order.
pub fn emit_plot_data(events: &[TraceEvent]) -> [String; 3] {
    let mut out: [String; 3] = Default::default();
    for e in events {
        let _ = writeln!(out[e.kind.index()], "{} {} {}", e.time, e.address, e.kind);
    }
    out
}

/// CPU time consumed so far by the calling thread.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_THREAD_CPUTIME_ID) failed");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub runs: usize,
    pub with_monitor: Vec<Duration>,
    pub without_monitor: Vec<Duration>,
    pub mean_with: Duration,
    pub mean_without: Duration,
    /// `(mean_with - mean_without) / mean_without * 100`.
    pub overhead_percent: f64,
}

impl OverheadReport {
    pub fn render(&self) -> String {
        format!(
            "runs: {}\nmean cpu time with monitor: {:.3} ms\nmean cpu time without monitor: {:.3} ms\noverhead: {:.2} %\n",
            self.runs,
            self.mean_with.as_secs_f64() * 1e3,
            self.mean_without.as_secs_f64() * 1e3,
            self.overhead_percent
        )
    }
}

fn mean(d: &[Duration]) -> Duration {
    d.iter().sum::<Duration>() / d.len().max(1) as u32
}

/// Times `runs` pairs of `run(true)` (monitored) and `run(false)`,
/// alternating which goes first, after one unmeasured warm-up pair.
/// `run` returns the CPU time of its measured section.
pub fn overhead_harness<E>(runs: usize, mut run: impl FnMut(bool) -> Result<Duration, E>) -> Result<OverheadReport, E> {
    run(true)?;
    run(false)?;
    let mut with = Vec::with_capacity(runs);
    let mut without = Vec::with_capacity(runs);
    for i in 0..runs {
        for monitored in if i % 2 == 0 { [true, false] } else { [false, true] } {
            let t = run(monitored)?;
            if monitored {
                with.push(t);
            } else {
                without.push(t);
            }
        }
    }
    let (mw, mo) = (mean(&with), mean(&without));
    let overhead_percent = if mo.is_zero() { 0.0 } else { (mw.as_secs_f64() - mo.as_secs_f64()) / mo.as_secs_f64() * 100.0 };
    Ok(OverheadReport { runs, with_monitor: with, without_monitor: without, mean_with: mw, mean_without: mo, overhead_percent })
}
