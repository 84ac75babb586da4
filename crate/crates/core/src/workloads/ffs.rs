//! Simplified flash file system models.
//!
//! One [`Ffs`] manages one partition as a log: every write lands at the
//! log head, sequentially inside the head block, and superseded pages are
//! only marked invalid. Blocks are reclaimed by garbage collection, either
//! synchronously when the log runs out of free blocks or from
//! [`Ffs::background_step`] for flavors that have a GC thread.
//!
//! Three flavors differ in how they mount, whether they compress and
//! whether they buffer writes:
//!
//! | flavor        | mount scan          | first-mount format      | buffering |
//! |---------------|---------------------|-------------------------|-----------|
//! | `jffs2_like`  | every page + CRC    | deferred to background  | none      |
//! | `ubifs_like`  | first page of block | right after the scan    | yes       |
//! | `yaffs2_like` | every page          | right after the scan    | none      |
//!
//! No data is stored; only page occupancy and ownership are tracked.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mtd::{MtdDevice, MtdError, PartitionId};
use crate::nand::{BlockIndex, PageIndex, PageState};

/// Blocks kept back from user writes so GC always has room to relocate.
const RESERVED_BLOCKS: usize = 1;

pub const MOUNT_TASK: &str = "mount";
pub const GC_TASK: &str = "gc_thread";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    #[serde(alias = "jffs2")]
    Jffs2Like,
    #[serde(alias = "ubifs")]
    UbifsLike,
    #[serde(alias = "yaffs2")]
    Yaffs2Like,
}

impl Flavor {
    pub const ALL: [Flavor; 3] = [Flavor::Jffs2Like, Flavor::UbifsLike, Flavor::Yaffs2Like];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::Jffs2Like => "jffs2_like",
            Flavor::UbifsLike => "ubifs_like",
            Flavor::Yaffs2Like => "yaffs2_like",
        }
    }

    pub fn scans_every_page(self) -> bool {
        self != Flavor::UbifsLike
    }

    /// Whether first-mount formatting runs in the background.
    pub fn defers_format(self) -> bool {
        self == Flavor::Jffs2Like
    }

    /// Whether mount schedules a background re-read of all data pages.
    pub fn crc_scan(self) -> bool {
        self == Flavor::Jffs2Like
    }

    /// ubifs_like only collects garbage on demand in the write path.
    pub fn has_gc_thread(self) -> bool {
        self != Flavor::UbifsLike
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jffs2" | "jffs2_like" => Ok(Flavor::Jffs2Like),
            "ubifs" | "ubifs_like" => Ok(Flavor::UbifsLike),
            "yaffs2" | "yaffs2_like" => Ok(Flavor::Yaffs2Like),
            other => Err(format!("unknown flavor {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfsModelConfig {
    pub flavor: Flavor,
    /// Physical bytes per logical byte written, in (0, 1].
    pub compression_factor: f64,
    /// 0 means every operation reaches the flash immediately.
    pub write_buffer_bytes: u64,
    /// Synchronous flavors write this many metadata pages per file
    /// operation; buffered flavors write them once per buffer flush, as a
    /// commit that supersedes the previous one.
    pub metadata_pages_per_file_op: u32,
    /// Background GC turns aggressive above this invalid/total page ratio.
    pub gc_invalid_threshold: f64,
    /// ... or when fewer free blocks than this remain.
    pub gc_free_blocks_low_watermark: u32,
    pub gc_aggressive_batch: u32,
    pub gc_soft_batch: u32,
}

pub const UBIFS_DEFAULT_BUFFER_BYTES: u64 = 1024 * 1024;

impl FfsModelConfig {
    pub fn defaults(flavor: Flavor) -> Self {
        let (compression_factor, write_buffer_bytes, metadata_pages_per_file_op) = match flavor {
            Flavor::Jffs2Like => (0.5, 0, 1),
            Flavor::UbifsLike => (0.5, UBIFS_DEFAULT_BUFFER_BYTES, 1),
            Flavor::Yaffs2Like => (1.0, 0, 2),
        };
        FfsModelConfig {
            flavor,
            compression_factor,
            write_buffer_bytes,
            metadata_pages_per_file_op,
            gc_invalid_threshold: 0.25,
            gc_free_blocks_low_watermark: 8,
            gc_aggressive_batch: 4,
            gc_soft_batch: 1,
        }
    }

    pub fn validate(&self) -> Result<(), FfsError> {
        let bad = |m: &str| Err(FfsError::InvalidConfig(format!("{}: {m}", self.flavor)));
        if !(self.compression_factor > 0.0 && self.compression_factor <= 1.0) {
            return bad("compression factor must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gc_invalid_threshold) {
            return bad("gc invalid threshold must be in [0, 1]");
        }
        if self.gc_aggressive_batch == 0 || self.gc_soft_batch == 0 {
            return bad("gc batches must be positive");
        }
        match (self.flavor, self.write_buffer_bytes) {
            (Flavor::UbifsLike, 0) => bad("this flavor is buffered; write buffer must be positive"),
            (Flavor::Jffs2Like | Flavor::Yaffs2Like, n) if n > 0 => bad("this flavor is synchronous; write buffer must be 0"),
            _ => Ok(()),
        }
    }

    fn buffered(&self) -> bool {
        self.write_buffer_bytes > 0
    }

    pub fn compressed_bytes(&self, logical: u64) -> u64 {
        (logical as f64 * self.compression_factor).ceil() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FileId(pub u64);

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FfsError {
    #[error("file system is not mounted")]
    NotMounted,
    #[error("file system is already mounted")]
    AlreadyMounted,
    #[error("no file {0}")]
    UnknownFile(FileId),
    #[error("file {0} already exists")]
    FileExists(FileId),
    #[error("partition is full")]
    OutOfSpace,
    #[error("invalid file system config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mtd(#[from] MtdError),
}

/// Page accounting of one block; `free = pages_per_block - written`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockUsage {
    pub valid: u32,
    pub invalid: u32,
    pub written: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GcStats {
    pub aggressive_batches: u64,
    pub soft_batches: u64,
    pub sync_collections: u64,
    pub blocks_erased: u64,
    pub pages_relocated: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Owner {
    File(FileId),
    /// Current metadata commit of a buffered flavor.
    Index,
}

#[derive(Clone, Debug, Default)]
struct FileEntry {
    size: u64,
    data: Vec<PageIndex>,
    meta: Vec<PageIndex>,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    block: BlockIndex,
    next: u32,
}

#[derive(Clone, Copy, Debug)]
enum Work {
    CrcRead(PageIndex),
    FormatErase(BlockIndex),
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    file: FileId,
    bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GcMode {
    Aggressive,
    Soft,
}

/// File system state for one partition. Survives unmount, the way
/// on-media metadata survives a reboot.
#[derive(Clone, Debug)]
pub struct Ffs {
    cfg: FfsModelConfig,
    partition: PartitionId,
    first_block: BlockIndex,
    block_count: u32,
    ppb: u32,
    page_size: u64,
    usage: Vec<BlockUsage>,
    owners: Vec<Vec<Owner>>,
    files: BTreeMap<FileId, FileEntry>,
    free: VecDeque<BlockIndex>,
    pending_format: BTreeSet<BlockIndex>,
    head: Option<Head>,
    work: VecDeque<Work>,
    buffer: Vec<Pending>,
    buffered_bytes: u64,
    meta_dirty: bool,
    index_pages: Vec<PageIndex>,
    mounted: bool,
    first_mount_done: bool,
    gc: GcStats,
}

impl Ffs {
    /// Owner of whatever data the first mount finds already on the
    /// partition (a flashed root file system image).
    pub const IMAGE_FILE: FileId = FileId(0);

    pub fn new(dev: &MtdDevice, partition: PartitionId, cfg: FfsModelConfig) -> Result<Self, FfsError> {
        cfg.validate()?;
        let p = dev.partition(partition)?;
        let g = dev.geometry();
        if (p.block_count as usize) <= RESERVED_BLOCKS {
            return Err(FfsError::InvalidConfig(format!("partition {partition} is too small")));
        }
        Ok(Ffs {
            cfg,
            partition,
            first_block: p.first_block,
            block_count: p.block_count,
            ppb: g.pages_per_block(),
            page_size: g.page_size() as u64,
            usage: vec![BlockUsage::default(); p.block_count as usize],
            owners: vec![Vec::new(); p.page_count(g) as usize],
            files: BTreeMap::new(),
            free: VecDeque::new(),
            pending_format: BTreeSet::new(),
            head: None,
            work: VecDeque::new(),
            buffer: Vec::new(),
            buffered_bytes: 0,
            meta_dirty: false,
            index_pages: Vec::new(),
            mounted: false,
            first_mount_done: false,
            gc: GcStats::default(),
        })
    }

    pub fn config(&self) -> &FfsModelConfig {
        &self.cfg
    }

    pub fn partition(&self) -> PartitionId {
        self.partition
    }

    pub fn is_mounted(&self) -> bool {
        self.mounted
    }

    pub fn first_mount_done(&self) -> bool {
        self.first_mount_done
    }

    pub fn block_usage(&self) -> &[BlockUsage] {
        &self.usage
    }

    pub fn valid_pages(&self) -> u64 {
        self.usage.iter().map(|u| u.valid as u64).sum()
    }

    pub fn invalid_pages(&self) -> u64 {
        self.usage.iter().map(|u| u.invalid as u64).sum()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn pending_format_blocks(&self) -> usize {
        self.pending_format.len()
    }

    pub fn buffered_bytes(&self) -> u64 {
        self.buffered_bytes
    }

    pub fn gc_stats(&self) -> GcStats {
        self.gc
    }

    pub fn file_ids(&self) -> impl Iterator<Item = FileId> + '_ {
        self.files.keys().copied()
    }

    pub fn file_size(&self, id: FileId) -> Option<u64> {
        self.files.get(&id).map(|f| f.size)
    }

    /// Flash pages currently holding the file's data, in write order.
    pub fn file_pages(&self, id: FileId) -> Option<&[PageIndex]> {
        self.files.get(&id).map(|f| f.data.as_slice())
    }

    pub fn has_background_work(&self) -> bool {
        !self.work.is_empty() || (self.cfg.flavor.has_gc_thread() && self.gc_victims(self.gc_mode()).next().is_some())
    }

    fn first_page(&self) -> PageIndex {
        self.first_block * self.ppb
    }

    fn rel_block(&self, block: BlockIndex) -> usize {
        (block - self.first_block) as usize
    }

    fn rel_page(&self, page: PageIndex) -> usize {
        (page - self.first_page()) as usize
    }

    fn block_of(&self, page: PageIndex) -> BlockIndex {
        page / self.ppb
    }

    fn require_mounted(&self) -> Result<(), FfsError> {
        if self.mounted {
            Ok(())
        } else {
            Err(FfsError::NotMounted)
        }
    }

    pub fn mount(&mut self, dev: &mut MtdDevice) -> Result<(), FfsError> {
        if self.mounted {
            return Err(FfsError::AlreadyMounted);
        }
        dev.with_task(MOUNT_TASK, |dev| self.scan(dev))?;

        if !self.first_mount_done {
            self.adopt_existing(dev)?;
            let empty: Vec<BlockIndex> =
                (self.first_block..self.first_block + self.block_count).filter(|&b| self.usage[self.rel_block(b)].written == 0).collect();
            self.pending_format.extend(empty.iter().copied());
            if self.cfg.flavor.defers_format() {
                self.work.extend(empty.into_iter().map(Work::FormatErase));
            } else {
                dev.with_task(MOUNT_TASK, |dev| -> Result<(), FfsError> {
                    for b in empty {
                        self.format_block(dev, b)?;
                    }
                    Ok(())
                })?;
            }
            self.first_mount_done = true;
        } else {
            let left: Vec<_> = self.pending_format.iter().copied().map(Work::FormatErase).collect();
            self.work.extend(left);
        }

        if self.cfg.flavor.crc_scan() {
            let first = self.first_page();
            let crc: Vec<Work> = self
                .owners
                .iter()
                .enumerate()
                .filter(|(_, o)| !o.is_empty())
                .map(|(rel, _)| Work::CrcRead(first + rel as u32))
                .collect();
            // CRC scan first, then any deferred formatting
            for w in crc.into_iter().rev() {
                self.work.push_front(w);
            }
        }
        self.mounted = true;
        Ok(())
    }

    fn scan(&mut self, dev: &mut MtdDevice) -> Result<(), FfsError> {
        let first = self.first_page();
        if self.cfg.flavor.scans_every_page() {
            dev.mtd_read(first, self.block_count * self.ppb)?;
        } else {
            for b in 0..self.block_count {
                dev.mtd_read(first + b * self.ppb, 1)?;
            }
        }
        Ok(())
    }

    /// First mount: whatever the scan found written becomes the image file.
    fn adopt_existing(&mut self, dev: &MtdDevice) -> Result<(), FfsError> {
        if !self.files.is_empty() {
            return Ok(());
        }
        let chip = dev.chip();
        let mut image = FileEntry::default();
        for b in self.first_block..self.first_block + self.block_count {
            let written = chip.block(b).map_err(MtdError::from)?.written_pages();
            if written == 0 {
                continue;
            }
            let rel = self.rel_block(b);
            self.usage[rel] = BlockUsage { valid: written, invalid: 0, written };
            for page in b * self.ppb..b * self.ppb + written {
                debug_assert_eq!(chip.page_state(page), Ok(PageState::Written));
                let rp = self.rel_page(page);
                self.owners[rp].push(Owner::File(Self::IMAGE_FILE));
                image.data.push(page);
            }
            if written < self.ppb {
                self.head = Some(Head { block: b, next: written });
            }
        }
        if !image.data.is_empty() {
            image.size = image.data.len() as u64 * self.page_size;
            self.files.insert(Self::IMAGE_FILE, image);
        }
        Ok(())
    }

    fn format_block(&mut self, dev: &mut MtdDevice, block: BlockIndex) -> Result<bool, FfsError> {
        if !self.pending_format.remove(&block) {
            return Ok(false);
        }
        dev.mtd_erase(block, 1)?;
        self.free.push_back(block);
        Ok(true)
    }

    pub fn unmount(&mut self, dev: &mut MtdDevice) -> Result<(), FfsError> {
        self.require_mounted()?;
        self.sync(dev)?;
        // unfinished formatting is picked up again by the next mount
        self.work.clear();
        self.mounted = false;
        Ok(())
    }

    /// Does one unit of deferred work: one CRC-scan read, one formatting
    /// erase, or one GC batch. Returns `false` when nothing is left.
    pub fn background_step(&mut self, dev: &mut MtdDevice) -> Result<bool, FfsError> {
        self.require_mounted()?;
        dev.with_task(GC_TASK, |dev| {
            while let Some(w) = self.work.pop_front() {
                match w {
                    Work::CrcRead(page) => {
                        if !self.owners[self.rel_page(page)].is_empty() {
                            dev.mtd_read(page, 1)?;
                            return Ok(true);
                        }
                    }
                    Work::FormatErase(block) => {
                        if self.format_block(dev, block)? {
                            return Ok(true);
                        }
                    }
                }
            }
            if self.cfg.flavor.has_gc_thread() {
                return self.gc_batch(dev);
            }
            Ok(false)
        })
    }

    /// Runs background work until none is left; returns the step count.
    pub fn drain_background(&mut self, dev: &mut MtdDevice) -> Result<u64, FfsError> {
        let mut steps = 0;
        while self.background_step(dev)? {
            steps += 1;
        }
        Ok(steps)
    }

    pub fn create_file(&mut self, dev: &mut MtdDevice, id: FileId, size: u64) -> Result<(), FfsError> {
        self.require_mounted()?;
        if self.files.contains_key(&id) {
            return Err(FfsError::FileExists(id));
        }
        self.files.insert(id, FileEntry::default());
        self.write_file(dev, id, size)
    }

    pub fn append_file(&mut self, dev: &mut MtdDevice, id: FileId, size: u64) -> Result<(), FfsError> {
        self.require_mounted()?;
        if !self.files.contains_key(&id) {
            return Err(FfsError::UnknownFile(id));
        }
        self.write_file(dev, id, size)
    }

    fn write_file(&mut self, dev: &mut MtdDevice, id: FileId, size: u64) -> Result<(), FfsError> {
        let bytes = self.cfg.compressed_bytes(size);
        if let Some(f) = self.files.get_mut(&id) {
            f.size += size;
        }
        if self.cfg.buffered() {
            if bytes > 0 {
                match self.buffer.last_mut() {
                    Some(p) if p.file == id => p.bytes += bytes,
                    _ => self.buffer.push(Pending { file: id, bytes }),
                }
                self.buffered_bytes += bytes;
            }
            self.meta_dirty = true;
            if self.buffered_bytes > self.cfg.write_buffer_bytes {
                self.flush(dev)?;
            }
            return Ok(());
        }

        let owner = vec![Owner::File(id)];
        let data_pages = bytes.div_ceil(self.page_size) as usize;
        let data = self.write_pages(dev, &vec![owner.clone(); data_pages], false)?;
        let meta = self.write_pages(dev, &vec![owner; self.cfg.metadata_pages_per_file_op as usize], false)?;
        let file = self.files.get_mut(&id).expect("file checked by caller");
        file.data.extend(data);
        let old_meta = std::mem::replace(&mut file.meta, meta);
        for page in old_meta {
            self.drop_owner(page, Owner::File(id));
        }
        Ok(())
    }

    /// Reads the file's flash pages overlapping `[offset, offset + size)`.
    /// Data still sitting in the write buffer is served from RAM.
    /// Returns the number of logical bytes read.
    pub fn read_file(&mut self, dev: &mut MtdDevice, id: FileId, offset: u64, size: u64) -> Result<u64, FfsError> {
        self.require_mounted()?;
        let file = self.files.get(&id).ok_or(FfsError::UnknownFile(id))?;
        let end = (offset + size).min(file.size);
        if offset >= end {
            return Ok(0);
        }
        let n = file.data.len() as u128;
        if n > 0 {
            let lo = (offset as u128 * n / file.size as u128) as usize;
            let hi = (end as u128 * n).div_ceil(file.size as u128) as usize;
            let pages = file.data[lo..hi].to_vec();
            read_runs(dev, &pages)?;
        }
        Ok(end - offset)
    }

    pub fn delete_file(&mut self, dev: &mut MtdDevice, id: FileId) -> Result<(), FfsError> {
        self.require_mounted()?;
        let file = self.files.remove(&id).ok_or(FfsError::UnknownFile(id))?;
        let on_flash = !file.data.is_empty() || !file.meta.is_empty();
        for page in file.data.iter().chain(&file.meta) {
            self.drop_owner(*page, Owner::File(id));
        }
        if self.cfg.buffered() {
            let before = self.buffer.len();
            self.buffer.retain(|p| p.file != id);
            if self.buffer.len() != before {
                self.buffered_bytes = self.buffer.iter().map(|p| p.bytes).sum();
            }
            self.meta_dirty |= on_flash;
            return Ok(());
        }
        // deletion marker: nothing live once written
        self.write_pages(dev, &vec![Vec::new(); self.cfg.metadata_pages_per_file_op as usize], false)?;
        Ok(())
    }

    /// Pushes buffered data (and a metadata commit) to flash.
    pub fn sync(&mut self, dev: &mut MtdDevice) -> Result<(), FfsError> {
        self.require_mounted()?;
        if self.cfg.buffered() {
            self.flush(dev)?;
        }
        Ok(())
    }

    fn flush(&mut self, dev: &mut MtdDevice) -> Result<(), FfsError> {
        if self.buffered_bytes == 0 && !self.meta_dirty {
            return Ok(());
        }
        let pending = std::mem::take(&mut self.buffer);
        let n_pages = self.buffered_bytes.div_ceil(self.page_size);
        let mut owners: Vec<Vec<Owner>> = vec![Vec::new(); n_pages as usize];
        let mut pos = 0u64;
        for p in &pending {
            let first = pos / self.page_size;
            let last = (pos + p.bytes - 1) / self.page_size;
            for page_owners in &mut owners[first as usize..=last as usize] {
                page_owners.push(Owner::File(p.file));
            }
            pos += p.bytes;
        }
        for o in &mut owners {
            o.dedup();
        }
        self.buffered_bytes = 0;
        self.meta_dirty = false;

        let pages = self.write_pages(dev, &owners, false)?;
        for (page, page_owners) in pages.iter().zip(&owners) {
            for owner in page_owners {
                if let Owner::File(id) = owner {
                    if let Some(f) = self.files.get_mut(id) {
                        f.data.push(*page);
                    }
                }
            }
        }
        let commit = self.write_pages(dev, &vec![vec![Owner::Index]; self.cfg.metadata_pages_per_file_op as usize], false)?;
        for page in std::mem::replace(&mut self.index_pages, commit) {
            self.drop_owner(page, Owner::Index);
        }
        Ok(())
    }

    fn drop_owner(&mut self, page: PageIndex, owner: Owner) {
        let rel = self.rel_page(page);
        let owners = &mut self.owners[rel];
        let Some(pos) = owners.iter().position(|o| *o == owner) else {
            return;
        };
        owners.swap_remove(pos);
        if owners.is_empty() {
            let b = self.rel_block(self.block_of(page));
            self.usage[b].valid -= 1;
            self.usage[b].invalid += 1;
        }
    }

    /// Appends one page per entry of `owners` at the log head. Pages with
    /// no owner are invalid from the start.
    fn write_pages(&mut self, dev: &mut MtdDevice, owners: &[Vec<Owner>], for_gc: bool) -> Result<Vec<PageIndex>, FfsError> {
        let mut out = Vec::with_capacity(owners.len());
        while out.len() < owners.len() {
            let head = self.ensure_head(dev, for_gc)?;
            let run = (self.ppb - head.next).min((owners.len() - out.len()) as u32);
            let start = head.block * self.ppb + head.next;
            dev.mtd_write(start, run)?;
            let b = self.rel_block(head.block);
            for page in start..start + run {
                let who = &owners[out.len()];
                let rel = self.rel_page(page);
                self.owners[rel] = who.clone();
                let u = &mut self.usage[b];
                u.written += 1;
                if who.is_empty() {
                    u.invalid += 1;
                } else {
                    u.valid += 1;
                }
                out.push(page);
            }
            self.head = Some(Head { block: head.block, next: head.next + run });
        }
        Ok(out)
    }

    fn ensure_head(&mut self, dev: &mut MtdDevice, for_gc: bool) -> Result<Head, FfsError> {
        loop {
            if let Some(h) = self.head {
                if h.next < self.ppb {
                    return Ok(h);
                }
            }
            if self.free.len() > RESERVED_BLOCKS || (for_gc && !self.free.is_empty()) {
                let block = self.free.pop_front().expect("checked non-empty");
                self.head = Some(Head { block, next: 0 });
                continue;
            }
            if let Some(&block) = self.pending_format.first() {
                self.format_block(dev, block)?;
                self.free.retain(|b| *b != block);
                self.head = Some(Head { block, next: 0 });
                continue;
            }
            if for_gc || !self.collect_one(dev)? {
                return Err(FfsError::OutOfSpace);
            }
            self.gc.sync_collections += 1;
        }
    }

    fn head_block(&self) -> Option<BlockIndex> {
        self.head.filter(|h| h.next < self.ppb).map(|h| h.block)
    }

    fn gc_mode(&self) -> GcMode {
        let ratio = self.invalid_pages() as f64 / (self.block_count * self.ppb) as f64;
        if ratio > self.cfg.gc_invalid_threshold || self.free.len() < self.cfg.gc_free_blocks_low_watermark as usize {
            GcMode::Aggressive
        } else {
            GcMode::Soft
        }
    }

    /// Candidate victims, most invalid first. Soft mode only takes blocks
    /// that are mostly invalid.
    fn gc_victims(&self, mode: GcMode) -> impl Iterator<Item = BlockIndex> + '_ {
        let head = self.head_block();
        let mut v: Vec<(u32, BlockIndex)> = self
            .usage
            .iter()
            .enumerate()
            .map(|(rel, u)| (u, self.first_block + rel as u32))
            .filter(|(u, b)| u.invalid > 0 && Some(*b) != head)
            .filter(|(u, _)| mode == GcMode::Aggressive || (u.invalid > u.valid && u.written == self.ppb))
            .map(|(u, b)| (u.invalid, b))
            .collect();
        v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        v.into_iter().map(|(_, b)| b)
    }

    fn gc_batch(&mut self, dev: &mut MtdDevice) -> Result<bool, FfsError> {
        let mode = self.gc_mode();
        let batch = match mode {
            GcMode::Aggressive => self.cfg.gc_aggressive_batch,
            GcMode::Soft => self.cfg.gc_soft_batch,
        } as usize;
        let victims: Vec<BlockIndex> = self.gc_victims(mode).take(batch).collect();
        let mut collected = 0;
        for v in victims {
            if self.collect(dev, v)? {
                collected += 1;
            }
        }
        if collected > 0 {
            match mode {
                GcMode::Aggressive => self.gc.aggressive_batches += 1,
                GcMode::Soft => self.gc.soft_batches += 1,
            }
        }
        Ok(collected > 0)
    }

    fn collect_one(&mut self, dev: &mut MtdDevice) -> Result<bool, FfsError> {
        let victims: Vec<BlockIndex> = self.gc_victims(GcMode::Aggressive).collect();
        for v in victims {
            if self.collect(dev, v)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Relocates the valid pages of `victim` to the head, then erases it.
    /// Returns `false` without touching anything when there is no room to
    /// relocate.
    fn collect(&mut self, dev: &mut MtdDevice, victim: BlockIndex) -> Result<bool, FfsError> {
        let first = victim * self.ppb;
        let live: Vec<PageIndex> = (first..first + self.ppb).filter(|&p| !self.owners[self.rel_page(p)].is_empty()).collect();
        let room = self.head_block().map_or(0, |_| self.ppb - self.head.map_or(0, |h| h.next)) as usize
            + (self.free.len() + self.pending_format.len()) * self.ppb as usize;
        if live.len() > room {
            return Ok(false);
        }
        if !live.is_empty() {
            read_runs(dev, &live)?;
            let owners: Vec<Vec<Owner>> = live.iter().map(|&p| self.owners[self.rel_page(p)].clone()).collect();
            let moved = self.write_pages(dev, &owners, true)?;
            for ((&old, &new), who) in live.iter().zip(&moved).zip(&owners) {
                for owner in who {
                    let list = match owner {
                        Owner::File(id) => self.files.get_mut(id).map(|f| if f.meta.contains(&old) { &mut f.meta } else { &mut f.data }),
                        Owner::Index => Some(&mut self.index_pages),
                    };
                    if let Some(slot) = list.and_then(|l| l.iter_mut().find(|p| **p == old)) {
                        *slot = new;
                    }
                }
            }
            self.gc.pages_relocated += live.len() as u64;
        }
        dev.mtd_erase(victim, 1)?;
        let rel = self.rel_block(victim);
        self.usage[rel] = BlockUsage::default();
        let rp = self.rel_page(first);
        for o in &mut self.owners[rp..rp + self.ppb as usize] {
            o.clear();
        }
        self.free.push_back(victim);
        self.gc.blocks_erased += 1;
        Ok(true)
    }

    /// Cross-checks the bookkeeping against itself and the chip.
    pub fn check_invariants(&self, dev: &MtdDevice) -> Result<(), String> {
        let chip = dev.chip();
        for rel in 0..self.block_count as usize {
            let b = self.first_block + rel as u32;
            let u = self.usage[rel];
            if u.valid + u.invalid != u.written {
                return Err(format!("block {b}: valid {} + invalid {} != written {}", u.valid, u.invalid, u.written));
            }
            let on_chip = chip.block(b).map_err(|e| e.to_string())?.written_pages();
            if on_chip != u.written {
                return Err(format!("block {b}: chip has {on_chip} written pages, model {}", u.written));
            }
            let first = rel * self.ppb as usize;
            let live = self.owners[first..first + self.ppb as usize].iter().filter(|o| !o.is_empty()).count() as u32;
            if live != u.valid {
                return Err(format!("block {b}: {live} owned pages but {} valid", u.valid));
            }
        }
        for (id, f) in &self.files {
            for p in f.data.iter().chain(&f.meta) {
                if !self.owners[self.rel_page(*p)].contains(&Owner::File(*id)) {
                    return Err(format!("file {id} lists page {p} it does not own"));
                }
            }
        }
        for b in &self.free {
            if self.usage[self.rel_block(*b)].written != 0 {
                return Err(format!("free block {b} holds data"));
            }
        }
        Ok(())
    }
}

fn read_runs(dev: &mut MtdDevice, pages: &[PageIndex]) -> Result<(), MtdError> {
    let mut i = 0;
    while i < pages.len() {
        let mut j = i + 1;
        while j < pages.len() && pages[j] == pages[j - 1] + 1 {
            j += 1;
        }
        dev.mtd_read(pages[i], (j - i) as u32)?;
        i = j;
    }
    Ok(())
}
