//! Scenario files and end-to-end runs.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! [chip]                      # every key optional; defaults shown
//! blocks = 2048
//! pages_per_block = 64
//! page_size = 2048
//! read_latency_ns = 130000
//! write_latency_ns = 375000
//! erase_latency_ns = 2000000
//! # endurance = 100000        # erase cycles per block, unlimited if absent
//!
//! [driver]
//! legacy = false              # true: lower slots hide addresses
//!
//! [[partition]]               # ids are 0, 1, ... in file order
//! first_block = 0
//! block_count = 1648
//! label = "system"
//!
//! [[partition]]
//! first_block = 1648
//! block_count = 400
//! label = "data"
//!
//! [monitor]
//! partition = 1               # whole chip if absent
//! log_size = 40000
//! task_names = true
//!
//! [scenario]
//! kind = "postmark"           # boot | postmark | raw | script
//! partition = 1
//! flavor = "jffs2"            # jffs2 | ubifs | yaffs2
//!
//! [scenario.postmark]         # every key optional
//! n_files = 800
//! rng_seed = 42
//! ```
//!
//! See the README for the keys of every scenario kind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::analysis::{emit_plot_data, overhead_harness, thread_cpu_time, OverheadReport, TraceStats};
use crate::monitor::{footprint_estimate, Monitor, MonitorConfig, SpatialCounters, TraceEvent};
use crate::mtd::{MtdDevice, PartitionConfig, PartitionId, StackMode};
use crate::nand::{ChipConfig, OpKind};
use crate::workloads::boot::{boot_scenario_run, install_rootfs, BootConfig, ScriptStep};
use crate::workloads::ffs::{Ffs, FfsModelConfig, Flavor};
use crate::workloads::postmark::{postmark_run, PostmarkConfig, POSTMARK_TASK};
use crate::workloads::raw::{raw_erase, raw_read, raw_write};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("scenario failed: {0}")]
    Runtime(String),
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) => 1,
            ScenarioError::Runtime(_) => 2,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Runtime(e.to_string())
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverConfig {
    pub legacy: bool,
}

/// Per-field overrides of a flavor's default model parameters.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfsOverrides {
    pub compression_factor: Option<f64>,
    pub write_buffer_bytes: Option<u64>,
    pub metadata_pages_per_file_op: Option<u32>,
    pub gc_invalid_threshold: Option<f64>,
    pub gc_free_blocks_low_watermark: Option<u32>,
    pub gc_aggressive_batch: Option<u32>,
    pub gc_soft_batch: Option<u32>,
}

impl FfsOverrides {
    pub fn apply(&self, flavor: Flavor) -> FfsModelConfig {
        let mut c = FfsModelConfig::defaults(flavor);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            compression_factor,
            write_buffer_bytes,
            metadata_pages_per_file_op,
            gc_invalid_threshold,
            gc_free_blocks_low_watermark,
            gc_aggressive_batch,
            gc_soft_batch
        );
        c
    }
}

/// One raw operation of a `script` scenario.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStep {
    pub op: OpKind,
    /// Page for reads and writes, block for erases.
    pub start: u32,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default)]
    pub task: String,
}

fn one() -> u32 {
    1
}

fn two() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    Boot {
        partition: PartitionId,
        flavor: Flavor,
        #[serde(default)]
        ffs: FfsOverrides,
        #[serde(default = "two")]
        boots: u32,
        rootfs_bytes: u64,
        /// Absent: a default init script. Empty list: mount only.
        #[serde(default)]
        script: Option<Vec<ScriptStep>>,
    },
    Postmark {
        partition: PartitionId,
        flavor: Flavor,
        #[serde(default)]
        ffs: FfsOverrides,
        #[serde(default)]
        postmark: PostmarkConfig,
    },
    Raw {
        partition: PartitionId,
        #[serde(default)]
        erase: bool,
        #[serde(default)]
        write_bytes: u64,
        #[serde(default)]
        read_bytes: u64,
    },
    Script {
        steps: Vec<RawStep>,
        /// Record failed steps and continue instead of aborting.
        #[serde(default)]
        keep_going: bool,
    },
}

impl ScenarioConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioConfig::Boot { .. } => "boot",
            ScenarioConfig::Postmark { .. } => "postmark",
            ScenarioConfig::Raw { .. } => "raw",
            ScenarioConfig::Script { .. } => "script",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub chip: ChipConfig,
    #[serde(default)]
    pub driver: DriverConfig,
    #[serde(default, rename = "partition")]
    pub partitions: Vec<PartitionConfig>,
    #[serde(default)]
    pub monitor: MonitorConfig,
    pub scenario: ScenarioConfig,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(config_err)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Overrides the Postmark seed; other kinds have no randomness.
    pub fn set_seed(&mut self, seed: u64) {
        if let ScenarioConfig::Postmark { postmark, .. } = &mut self.scenario {
            postmark.rng_seed = seed;
        }
    }

    /// Checks every reference and parameter without running anything.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let dev = self.build_device()?;
        if self.monitor.log_capacity == 0 {
            return Err(config_err("monitor log_size must be positive"));
        }
        if let Some(p) = self.monitor.traced_partition {
            dev.partition(p).map_err(config_err)?;
        }
        let g = *dev.geometry();
        match &self.scenario {
            ScenarioConfig::Boot { partition, flavor, ffs, rootfs_bytes, .. } => {
                ffs.apply(*flavor).validate().map_err(config_err)?;
                let p = dev.partition(*partition).map_err(config_err)?;
                if *rootfs_bytes > p.bytes(&g) {
                    return Err(config_err(format!("rootfs of {rootfs_bytes} bytes does not fit partition {partition}")));
                }
                Ffs::new(&dev, *partition, ffs.apply(*flavor)).map_err(config_err)?;
            }
            ScenarioConfig::Postmark { partition, flavor, ffs, postmark } => {
                postmark.validate().map_err(config_err)?;
                Ffs::new(&dev, *partition, ffs.apply(*flavor)).map_err(config_err)?;
            }
            ScenarioConfig::Raw { partition, write_bytes, read_bytes, .. } => {
                let bytes = dev.partition(*partition).map_err(config_err)?.bytes(&g);
                if *write_bytes > bytes || *read_bytes > bytes {
                    return Err(config_err(format!("raw transfer does not fit partition {partition} ({bytes} bytes)")));
                }
            }
            ScenarioConfig::Script { steps, .. } => {
                if steps.is_empty() {
                    return Err(config_err("script scenario has no steps"));
                }
            }
        }
        Ok(())
    }

    fn build_device(&self) -> Result<MtdDevice, ScenarioError> {
        let chip = self.chip.build().map_err(config_err)?;
        let mode = if self.driver.legacy { StackMode::Legacy } else { StackMode::Standard };
        let mut dev = MtdDevice::with_mode(chip, mode);
        for p in &self.partitions {
            dev.add_partition(p.first_block, p.block_count, &p.label).map_err(config_err)?;
        }
        Ok(dev)
    }

    /// Device and file system in the state the measured workload starts
    /// from: image installed for boots, file system mounted and idle for
    /// Postmark.
    fn prepare(&self) -> Result<Prepared, ScenarioError> {
        let mut dev = self.build_device()?;
        let fs = match &self.scenario {
            ScenarioConfig::Boot { partition, flavor, ffs, rootfs_bytes, .. } => {
                install_rootfs(&mut dev, *partition, *rootfs_bytes).map_err(runtime_err)?;
                Some(Ffs::new(&dev, *partition, ffs.apply(*flavor)).map_err(config_err)?)
            }
            ScenarioConfig::Postmark { partition, flavor, ffs, .. } => {
                let mut fs = Ffs::new(&dev, *partition, ffs.apply(*flavor)).map_err(config_err)?;
                fs.mount(&mut dev).map_err(runtime_err)?;
                fs.drain_background(&mut dev).map_err(runtime_err)?;
                Some(fs)
            }
            _ => None,
        };
        Ok(Prepared { dev, fs })
    }
}

struct Prepared {
    dev: MtdDevice,
    fs: Option<Ffs>,
}

impl Prepared {
    /// Runs the workload; returns a human-readable summary.
    fn execute(&mut self, scenario: &ScenarioConfig) -> Result<String, ScenarioError> {
        let dev = &mut self.dev;
        let mut out = String::new();
        match scenario {
            ScenarioConfig::Boot { boots, rootfs_bytes, script, .. } => {
                let fs = self.fs.as_mut().expect("prepared with a file system");
                let cfg = match script {
                    Some(steps) => BootConfig { rootfs_bytes: *rootfs_bytes, script: steps.clone() },
                    None => BootConfig::with_default_script(*rootfs_bytes),
                };
                let timelines = boot_scenario_run(dev, fs, &cfg, *boots).map_err(runtime_err)?;
                for (i, t) in timelines.iter().enumerate() {
                    let _ = writeln!(out, "boot {}: start {} mounted {} script done {} idle {}", i + 1, t.start, t.mounted, t.script_done, t.end);
                }
            }
            ScenarioConfig::Postmark { postmark, .. } => {
                let fs = self.fs.as_mut().expect("prepared with a file system");
                let r = postmark_run(dev, fs, postmark).map_err(runtime_err)?;
                dev.with_task(POSTMARK_TASK, |dev| fs.sync(dev)).map_err(runtime_err)?;
                fs.drain_background(dev).map_err(runtime_err)?;
                let _ = writeln!(
                    out,
                    "postmark: {} transactions, {} files created, {} deleted, {} bytes read, {} bytes written",
                    r.transactions, r.files_created, r.files_deleted, r.bytes_read, r.bytes_written
                );
                let gc = fs.gc_stats();
                let _ = writeln!(
                    out,
                    "gc: {} aggressive batches, {} soft batches, {} synchronous, {} blocks erased, {} pages relocated",
                    gc.aggressive_batches, gc.soft_batches, gc.sync_collections, gc.blocks_erased, gc.pages_relocated
                );
            }
            ScenarioConfig::Raw { partition, erase, write_bytes, read_bytes } => {
                if *erase {
                    let n = raw_erase(dev, *partition).map_err(runtime_err)?.len();
                    let _ = writeln!(out, "raw erase: {n} blocks");
                }
                if *write_bytes > 0 {
                    let n = raw_write(dev, *partition, *write_bytes).map_err(runtime_err)?.len();
                    let _ = writeln!(out, "raw write: {n} pages");
                }
                if *read_bytes > 0 {
                    let n = raw_read(dev, *partition, *read_bytes).map_err(runtime_err)?.len();
                    let _ = writeln!(out, "raw read: {n} pages");
                }
            }
            ScenarioConfig::Script { steps, keep_going } => {
                for (i, s) in steps.iter().enumerate() {
                    let result = dev.with_task(&s.task, |dev| match s.op {
                        OpKind::Read => dev.mtd_read(s.start, s.count),
                        OpKind::Write => dev.mtd_write(s.start, s.count),
                        OpKind::Erase => dev.mtd_erase(s.start, s.count),
                    });
                    match result {
                        Ok(r) => {
                            let _ = writeln!(out, "step {}: {} {}+{} ok ({} ops)", i + 1, s.op, s.start, s.count, r.len());
                        }
                        Err(e) if *keep_going => {
                            let _ = writeln!(out, "step {}: {} {}+{} failed: {e}", i + 1, s.op, s.start, s.count);
                        }
                        Err(e) => return Err(runtime_err(format!("step {}: {e}", i + 1))),
                    }
                }
            }
        }
        let _ = writeln!(out, "virtual time: {} s", dev.chip().clock());
        Ok(out)
    }
}

/// Everything a scenario run produced.
#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub summary: String,
    pub events: Vec<TraceEvent>,
    pub counters: SpatialCounters,
    pub spatial: String,
    pub temporal: String,
    pub stats: TraceStats,
    pub footprint_bytes: u64,
}

impl ScenarioOutcome {
    pub fn stats_text(&self, scenario: &str) -> String {
        format!("scenario: {scenario}\n{}monitor footprint: {} bytes\n{}", self.summary, self.footprint_bytes, self.stats.render())
    }
}

pub const SPATIAL_FILE: &str = "spatial.txt";
pub const TEMPORAL_FILE: &str = "temporal.log";
pub const STATS_FILE: &str = "stats.txt";
pub const PLOT_FILES: [&str; 3] = ["plot_R.dat", "plot_W.dat", "plot_E.dat"];

/// Builds the device, attaches the monitor, runs the workload and, when
/// `out_dir` is given, writes both views, the statistics and the plot
/// series there.
pub fn run_scenario(spec: &ScenarioSpec, out_dir: Option<&Path>) -> Result<ScenarioOutcome, ScenarioError> {
    spec.validate()?;
    let mut world = spec.prepare()?;
    let monitor = Monitor::attach(&mut world.dev, spec.monitor.clone()).map_err(runtime_err)?;
    let summary = world.execute(&spec.scenario)?;

    let (counters, events) = monitor.views();
    let stats = TraceStats::compute(&events, &counters, monitor.log_overflowed());
    let outcome = ScenarioOutcome {
        summary,
        spatial: monitor.render_spatial(),
        temporal: monitor.render_temporal(),
        footprint_bytes: footprint_estimate(&spec.monitor, counters.len() as u64),
        events,
        counters,
        stats,
    };
    monitor.detach(&mut world.dev).map_err(runtime_err)?;

    if let Some(dir) = out_dir {
        write_outputs(dir, &outcome, spec.scenario.kind())?;
    }
    Ok(outcome)
}

fn write_outputs(dir: &Path, o: &ScenarioOutcome, kind: &str) -> Result<(), ScenarioError> {
    let io = |p: PathBuf, e: std::io::Error| runtime_err(format!("{}: {e}", p.display()));
    fs::create_dir_all(dir).map_err(|e| io(dir.to_path_buf(), e))?;
    let mut files = vec![(SPATIAL_FILE, o.spatial.clone()), (TEMPORAL_FILE, o.temporal.clone()), (STATS_FILE, o.stats_text(kind))];
    files.extend(PLOT_FILES.into_iter().zip(emit_plot_data(&o.events)));
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io(path, e))?;
    }
    Ok(())
}

/// Runs the workload `runs` times with and without the monitor and
/// compares the CPU time of the workload section. Setup (device build,
/// image install, initial mount) is outside the measured section.
pub fn scenario_overhead(spec: &ScenarioSpec, runs: usize) -> Result<OverheadReport, ScenarioError> {
    spec.validate()?;
    overhead_harness(runs, |monitored| measure_once(spec, monitored))
}

/// The same workload measured twice without a monitor; should report
/// close to zero.
pub fn scenario_overhead_baseline(spec: &ScenarioSpec, runs: usize) -> Result<OverheadReport, ScenarioError> {
    spec.validate()?;
    overhead_harness(runs, |_| measure_once(spec, false))
}

fn measure_once(spec: &ScenarioSpec, monitored: bool) -> Result<Duration, ScenarioError> {
    let mut world = spec.prepare()?;
    let monitor = if monitored { Some(Monitor::attach(&mut world.dev, spec.monitor.clone()).map_err(runtime_err)?) } else { None };
    let start = thread_cpu_time();
    world.execute(&spec.scenario)?;
    let elapsed = thread_cpu_time().saturating_sub(start);
    if let Some(m) = monitor {
        std::hint::black_box(m.total_inserted());
    }
    Ok(elapsed)
}

/// Reads back a spatial view and temporal log written by [`run_scenario`].
pub fn load_outputs(dir: &Path, first_block: u32) -> Result<(Vec<TraceEvent>, SpatialCounters), ScenarioError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| config_err(format!("{}: {e}", p.display())))
    };
    let events = read(TEMPORAL_FILE)?
        .lines()
        .enumerate()
        .map(|(i, l)| l.parse::<TraceEvent>().map_err(|e| config_err(format!("{TEMPORAL_FILE} line {}: {e}", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let counters = SpatialCounters::parse(first_block, &read(SPATIAL_FILE)?).map_err(|e| config_err(format!("{SPATIAL_FILE}: {e}")))?;
    Ok((events, counters))
}
