//! Mount-at-boot scenario over a flashed root file system image.

use serde::{Deserialize, Serialize};

use super::ffs::{Ffs, FfsError, FileId};
use crate::mtd::{MtdDevice, MtdError, PartitionId};
use crate::nand::Nanos;

pub const SCRIPT_TASK: &str = "rcS";

/// One step of the post-mount init script, run as task `rcS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptStep {
    Read { file: FileId, offset: u64, size: u64 },
    /// Creates the file, or appends when it exists.
    Write { file: FileId, size: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootConfig {
    pub rootfs_bytes: u64,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

impl BootConfig {
    /// A few reads spread over the image plus two small writes, roughly
    /// what an init script loading binaries and touching logs does.
    pub fn with_default_script(rootfs_bytes: u64) -> Self {
        let mut script: Vec<ScriptStep> = (0..16)
            .map(|i| ScriptStep::Read { file: Ffs::IMAGE_FILE, offset: rootfs_bytes / 16 * i, size: 16 * 1024 })
            .collect();
        script.push(ScriptStep::Write { file: FileId(1), size: 1024 });
        script.push(ScriptStep::Write { file: FileId(2), size: 4096 });
        BootConfig { rootfs_bytes, script }
    }
}

/// Clock readings at the edges of one boot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootTimeline {
    pub start: Nanos,
    pub mounted: Nanos,
    pub script_done: Nanos,
    pub end: Nanos,
}

/// Writes the image into the (erased) partition, as a flashing tool
/// would before first boot. Returns the number of pages written.
pub fn install_rootfs(dev: &mut MtdDevice, partition: PartitionId, rootfs_bytes: u64) -> Result<u32, MtdError> {
    let p = dev.partition(partition)?.clone();
    let g = *dev.geometry();
    let pages = rootfs_bytes.div_ceil(g.page_size() as u64);
    let limit = p.page_count(&g);
    if pages > limit as u64 {
        return Err(MtdError::Range { start: p.pages(&g).start as u64, count: pages.min(u32::MAX as u64) as u32, limit });
    }
    dev.install_image(p.pages(&g).start, pages as u32)?;
    Ok(pages as u32)
}

/// Each boot: mount, init script, background work until idle, unmount.
pub fn boot_scenario_run(dev: &mut MtdDevice, fs: &mut Ffs, cfg: &BootConfig, boots: u32) -> Result<Vec<BootTimeline>, FfsError> {
    let mut out = Vec::with_capacity(boots as usize);
    for _ in 0..boots {
        let start = dev.chip().clock();
        fs.mount(dev)?;
        let mounted = dev.chip().clock();
        dev.with_task(SCRIPT_TASK, |dev| run_script(dev, fs, &cfg.script))?;
        let script_done = dev.chip().clock();
        fs.drain_background(dev)?;
        fs.unmount(dev)?;
        out.push(BootTimeline { start, mounted, script_done, end: dev.chip().clock() });
    }
    Ok(out)
}

fn run_script(dev: &mut MtdDevice, fs: &mut Ffs, script: &[ScriptStep]) -> Result<(), FfsError> {
    for step in script {
        match *step {
            ScriptStep::Read { file, offset, size } => {
                fs.read_file(dev, file, offset, size)?;
            }
            ScriptStep::Write { file, size } => {
                if fs.file_size(file).is_some() {
                    fs.append_file(dev, file, size)?;
                } else {
                    fs.create_file(dev, file, size)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{Monitor, MonitorConfig};
    use crate::nand::{FlashChip, FlashGeometry, LatencyModel, OpKind};
    use crate::workloads::ffs::{FfsModelConfig, Flavor, GC_TASK, MOUNT_TASK};

    const ROOTFS: u64 = 3840 * 2048;

    fn board(flavor: Flavor) -> (MtdDevice, Ffs, Monitor) {
        let g = FlashGeometry::new(2048, 64, 2048).unwrap();
        let mut dev = MtdDevice::new(FlashChip::new(g, LatencyModel::default()));
        dev.add_partition(0, 1648, "system").unwrap();
        let p = dev.add_partition(1648, 400, "rootfs").unwrap();
        install_rootfs(&mut dev, p, ROOTFS).unwrap();
        let m = Monitor::attach(&mut dev, MonitorConfig { traced_partition: Some(p), ..MonitorConfig::default() }).unwrap();
        let fs = Ffs::new(&dev, p, FfsModelConfig::defaults(flavor)).unwrap();
        (dev, fs, m)
    }

    fn empty_script() -> BootConfig {
        BootConfig { rootfs_bytes: ROOTFS, script: Vec::new() }
    }

    #[test]
    fn jffs2_first_boot_scans_then_formats_in_background() {
        let (mut dev, mut fs, m) = board(Flavor::Jffs2Like);
        boot_scenario_run(&mut dev, &mut fs, &empty_script(), 1).unwrap();
        let ev = m.events();
        let scan = ev.iter().filter(|e| e.kind == OpKind::Read && e.task.as_str() == MOUNT_TASK).count();
        assert_eq!(scan, 25_600);
        let crc = ev.iter().filter(|e| e.kind == OpKind::Read && e.task.as_str() == GC_TASK).count();
        assert_eq!(crc, 3840);
        let erased: Vec<u32> = ev.iter().filter(|e| e.kind == OpKind::Erase).map(|e| e.address).collect();
        assert_eq!(erased, (1648 + 60..2048).collect::<Vec<_>>());
        assert!(erased.iter().all(|b| *b >= 1648 + 60));
        // scan, then CRC, then formatting
        let first_erase = ev.iter().position(|e| e.kind == OpKind::Erase).unwrap();
        assert!(ev[..first_erase].iter().all(|e| e.kind == OpKind::Read));
    }

    #[test]
    fn ubifs_first_boot_reads_block_heads_and_formats_at_mount() {
        let (mut dev, mut fs, m) = board(Flavor::UbifsLike);
        boot_scenario_run(&mut dev, &mut fs, &empty_script(), 1).unwrap();
        let ev = m.events();
        assert_eq!(ev.iter().filter(|e| e.kind == OpKind::Read).count(), 400);
        assert_eq!(ev.iter().filter(|e| e.kind == OpKind::Erase).count(), 340);
        assert!(ev.iter().all(|e| e.task.as_str() == MOUNT_TASK));
    }

    #[test]
    fn second_boot_does_not_format() {
        let (mut dev, mut fs, m) = board(Flavor::Yaffs2Like);
        let cfg = BootConfig::with_default_script(ROOTFS);
        let t = boot_scenario_run(&mut dev, &mut fs, &cfg, 2).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].start < t[0].mounted && t[0].mounted < t[0].script_done && t[0].end <= t[1].start);
        let after_first = m.events().iter().position(|e| e.time >= t[1].start).unwrap();
        assert!(m.events()[after_first..].iter().all(|e| e.kind != OpKind::Erase));
        assert!(m.events().iter().any(|e| e.task.as_str() == SCRIPT_TASK && e.kind == OpKind::Write));
        fs.check_invariants(&dev).unwrap();
    }

    #[test]
    fn oversized_image_rejected() {
        let g = FlashGeometry::new(8, 64, 2048).unwrap();
        let mut dev = MtdDevice::new(FlashChip::new(g, LatencyModel::default()));
        let p = dev.add_partition(4, 4, "rootfs").unwrap();
        assert!(matches!(install_rootfs(&mut dev, p, 5 * 64 * 2048), Err(MtdError::Range { .. })));
        assert_eq!(install_rootfs(&mut dev, p, 4 * 64 * 2048).unwrap(), 256);
    }
}
