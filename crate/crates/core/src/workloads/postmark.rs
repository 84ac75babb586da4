//! Postmark-style benchmark: many small files, random transactions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ffs::{Ffs, FfsError, FileId};
use crate::mtd::MtdDevice;

pub const POSTMARK_TASK: &str = "postmark";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostmarkConfig {
    pub n_files: u32,
    pub n_subdirs: u32,
    pub n_transactions: u32,
    pub file_size_min: u64,
    pub file_size_max: u64,
    pub io_size: u64,
    /// Percent of transactions whose second half is a read (vs. an append).
    pub read_append_ratio: u8,
    /// Percent of transactions whose first half is a create (vs. a delete).
    pub create_delete_ratio: u8,
    pub rng_seed: u64,
}

impl Default for PostmarkConfig {
    fn default() -> Self {
        PostmarkConfig {
            n_files: 800,
            n_subdirs: 10,
            n_transactions: 3000,
            file_size_min: 512,
            file_size_max: 10 * 1024,
            io_size: 4096,
            read_append_ratio: 50,
            create_delete_ratio: 50,
            rng_seed: 42,
        }
    }
}

impl PostmarkConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.file_size_min > self.file_size_max {
            return Err(format!("file_size_min {} exceeds file_size_max {}", self.file_size_min, self.file_size_max));
        }
        if self.io_size == 0 {
            return Err("io_size must be positive".into());
        }
        for (name, r) in [("read_append_ratio", self.read_append_ratio), ("create_delete_ratio", self.create_delete_ratio)] {
            if r > 100 {
                return Err(format!("{name} {r} is not a percentage"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PostmarkReport {
    pub dirs_created: u64,
    pub files_created: u64,
    pub files_deleted: u64,
    pub transactions: u64,
    pub reads: u64,
    pub appends: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

/// The run stopped early; `report` covers what completed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("postmark aborted after {} transactions: {error}", report.transactions)]
pub struct PostmarkAbort {
    pub report: PostmarkReport,
    pub error: FfsError,
}

/// Runs the benchmark against a mounted file system:
/// directories, initial files, transactions, then deletion of everything
/// it created. Operations run as task `postmark`.
pub fn postmark_run(dev: &mut MtdDevice, fs: &mut Ffs, cfg: &PostmarkConfig) -> Result<PostmarkReport, PostmarkAbort> {
    let mut run = Run { rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed), report: PostmarkReport::default(), live: Vec::new(), next_id: 1 };
    let result = dev.with_task(POSTMARK_TASK, |dev| run.execute(dev, fs, cfg));
    match result {
        Ok(()) => Ok(run.report),
        Err(error) => Err(PostmarkAbort { report: run.report, error }),
    }
}

struct Run {
    rng: ChaCha8Rng,
    report: PostmarkReport,
    live: Vec<FileId>,
    next_id: u64,
}

impl Run {
    fn fresh_id(&mut self, fs: &Ffs) -> FileId {
        loop {
            let id = FileId(self.next_id);
            self.next_id += 1;
            if id != Ffs::IMAGE_FILE && fs.file_size(id).is_none() {
                return id;
            }
        }
    }

    fn create(&mut self, dev: &mut MtdDevice, fs: &mut Ffs, cfg: &PostmarkConfig) -> Result<(), FfsError> {
        let id = self.fresh_id(fs);
        let size = self.rng.gen_range(cfg.file_size_min..=cfg.file_size_max);
        fs.create_file(dev, id, size)?;
        self.live.push(id);
        self.report.files_created += 1;
        self.report.bytes_written += size;
        Ok(())
    }

    fn delete_random(&mut self, dev: &mut MtdDevice, fs: &mut Ffs) -> Result<(), FfsError> {
        if self.live.is_empty() {
            return Ok(());
        }
        let i = self.rng.gen_range(0..self.live.len());
        let id = self.live.swap_remove(i);
        fs.delete_file(dev, id)?;
        self.report.files_deleted += 1;
        Ok(())
    }

    fn execute(&mut self, dev: &mut MtdDevice, fs: &mut Ffs, cfg: &PostmarkConfig) -> Result<(), FfsError> {
        let mut dirs = Vec::new();
        for _ in 0..cfg.n_subdirs {
            let id = self.fresh_id(fs);
            fs.create_file(dev, id, 0)?;
            dirs.push(id);
            self.report.dirs_created += 1;
        }
        for _ in 0..cfg.n_files {
            self.create(dev, fs, cfg)?;
        }

        for _ in 0..cfg.n_transactions {
            if self.rng.gen_ratio(cfg.create_delete_ratio as u32, 100) {
                self.create(dev, fs, cfg)?;
            } else {
                self.delete_random(dev, fs)?;
            }
            if let Some(&id) = self.live.choose(&mut self.rng) {
                if self.rng.gen_ratio(cfg.read_append_ratio as u32, 100) {
                    let size = fs.file_size(id).unwrap_or(0);
                    let mut off = 0;
                    while off < size {
                        self.report.bytes_read += fs.read_file(dev, id, off, cfg.io_size)?;
                        off += cfg.io_size;
                    }
                    self.report.reads += 1;
                } else {
                    fs.append_file(dev, id, cfg.io_size)?;
                    self.report.appends += 1;
                    self.report.bytes_written += cfg.io_size;
                }
            }
            self.report.transactions += 1;
        }

        while let Some(id) = self.live.pop() {
            fs.delete_file(dev, id)?;
            self.report.files_deleted += 1;
        }
        for id in dirs {
            fs.delete_file(dev, id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtd::PartitionId;
    use crate::nand::{FlashChip, FlashGeometry, LatencyModel};
    use crate::workloads::ffs::{Flavor, FfsModelConfig};

    fn fs(flavor: Flavor) -> (MtdDevice, Ffs) {
        let g = FlashGeometry::new(128, 64, 2048).unwrap();
        let mut dev = MtdDevice::new(FlashChip::new(g, LatencyModel::default()));
        let p: PartitionId = dev.add_partition(0, 128, "data").unwrap();
        let mut fs = Ffs::new(&dev, p, FfsModelConfig::defaults(flavor)).unwrap();
        fs.mount(&mut dev).unwrap();
        fs.drain_background(&mut dev).unwrap();
        (dev, fs)
    }

    fn small() -> PostmarkConfig {
        PostmarkConfig { n_files: 50, n_transactions: 200, ..PostmarkConfig::default() }
    }

    #[test]
    fn deletes_everything_it_creates() {
        for flavor in Flavor::ALL {
            let (mut dev, mut fs) = fs(flavor);
            let r = postmark_run(&mut dev, &mut fs, &small()).unwrap();
            assert_eq!(r.transactions, 200);
            assert_eq!(r.dirs_created, 10);
            assert_eq!(r.files_created, r.files_deleted);
            assert_eq!(r.reads + r.appends, 200);
            assert_eq!(fs.file_ids().count(), 0, "{flavor}");
            fs.sync(&mut dev).unwrap();
            fs.check_invariants(&dev).unwrap();
            assert_eq!(fs.valid_pages(), flavor.eq(&Flavor::UbifsLike) as u64);
        }
    }

    #[test]
    fn same_seed_same_run() {
        let run = |seed| {
            let (mut dev, mut fs) = fs(Flavor::Jffs2Like);
            let r = postmark_run(&mut dev, &mut fs, &PostmarkConfig { rng_seed: seed, ..small() }).unwrap();
            (r, dev.chip().clone())
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7).0, run(8).0);
    }

    #[test]
    fn tiny_partition_aborts_with_partial_report() {
        let g = FlashGeometry::new(8, 64, 2048).unwrap();
        let mut dev = MtdDevice::new(FlashChip::new(g, LatencyModel::default()));
        let p = dev.add_partition(0, 8, "data").unwrap();
        let mut fs = Ffs::new(&dev, p, FfsModelConfig::defaults(Flavor::Yaffs2Like)).unwrap();
        fs.mount(&mut dev).unwrap();
        let cfg = PostmarkConfig { n_files: 1000, ..PostmarkConfig::default() };
        let abort = postmark_run(&mut dev, &mut fs, &cfg).unwrap_err();
        assert_eq!(abort.error, FfsError::OutOfSpace);
        assert!(abort.report.files_created > 0);
        assert_eq!(abort.report.transactions, 0);
    }

    #[test]
    fn size_bounds_checked() {
        let cfg = PostmarkConfig { file_size_min: 10, file_size_max: 5, ..PostmarkConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(PostmarkConfig::default().validate().is_ok());
        let cfg = PostmarkConfig { read_append_ratio: 101, ..PostmarkConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn no_transactions_only_creates_and_deletes() {
        let (mut dev, mut fs) = fs(Flavor::Yaffs2Like);
        let r = postmark_run(&mut dev, &mut fs, &PostmarkConfig { n_transactions: 0, ..small() }).unwrap();
        assert_eq!((r.transactions, r.reads, r.appends, r.bytes_read), (0, 0, 0, 0));
        assert_eq!((r.files_created, r.files_deleted), (50, 50));
    }

    #[test]
    fn all_reads_never_append() {
        let (mut dev, mut fs) = fs(Flavor::Jffs2Like);
        let r = postmark_run(&mut dev, &mut fs, &PostmarkConfig { read_append_ratio: 100, ..small() }).unwrap();
        assert_eq!(r.appends, 0);
        assert!(r.reads > 0);
    }
}
