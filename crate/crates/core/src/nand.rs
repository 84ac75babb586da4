//! Raw NAND chip model.
//!
//! A chip is a flat array of blocks, each holding `pages_per_block` pages.
//! Reads and writes address single pages, erases address whole blocks.
//! Page payloads are not stored: a page is either `Free` or `Written`.
//! Every successful operation advances a virtual nanosecond clock by the
//! latency of that operation, so traces are deterministic.

use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type PageIndex = u32;
pub type BlockIndex = u32;

/// Virtual time in nanoseconds since simulation start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub const fn from_micros(us: u64) -> Nanos {
        Nanos(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Nanos {
        Nanos(ms * 1_000_000)
    }

    pub const fn from_secs_nanos(secs: u64, nanos: u32) -> Nanos {
        Nanos(secs * 1_000_000_000 + nanos as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl Add for Nanos {
    type Output = Nanos;

    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

/// Seconds with exactly nine fractional digits, e.g. `13.551048336`.
impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

impl FromStr for Nanos {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (secs, frac) = s
            .split_once('.')
            .ok_or_else(|| format!("timestamp {s:?} has no fractional part"))?;
        if frac.len() != 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("timestamp {s:?} must have exactly 9 fractional digits"));
        }
        let secs: u64 = secs.parse().map_err(|_| format!("bad seconds in {s:?}"))?;
        let nanos: u32 = frac.parse().map_err(|_| format!("bad fraction in {s:?}"))?;
        Ok(Nanos::from_secs_nanos(secs, nanos))
    }
}

/// The three flash operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "R", alias = "read")]
    Read,
    #[serde(rename = "W", alias = "write")]
    Write,
    #[serde(rename = "E", alias = "erase")]
    Erase,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Read, OpKind::Write, OpKind::Erase];

    /// Single-letter code used in the temporal log.
    pub fn code(self) -> char {
        match self {
            OpKind::Read => 'R',
            OpKind::Write => 'W',
            OpKind::Erase => 'E',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "R" => Ok(OpKind::Read),
            "W" => Ok(OpKind::Write),
            "E" => Ok(OpKind::Erase),
            other => Err(format!("unknown operation kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlashError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("invalid latency model: {0}")]
    InvalidLatency(&'static str),
    #[error("page {page} out of range (chip has {total} pages)")]
    PageOutOfRange { page: u64, total: u32 },
    #[error("block {block} out of range (chip has {total} blocks)")]
    BlockOutOfRange { block: u64, total: u32 },
    #[error("block {0} is bad")]
    BadBlock(BlockIndex),
    #[error("page {0} is already written and must be erased first")]
    Overwrite(PageIndex),
    #[error("non-sequential write to page {page}: next free page of its block is {expected}")]
    NonSequential { page: PageIndex, expected: PageIndex },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FlashGeometry {
    blocks_per_chip: u32,
    pages_per_block: u32,
    page_size: u32,
}

impl FlashGeometry {
    pub fn new(blocks_per_chip: u32, pages_per_block: u32, page_size: u32) -> Result<Self, FlashError> {
        if blocks_per_chip == 0 || pages_per_block == 0 || page_size == 0 {
            return Err(FlashError::InvalidGeometry("all dimensions must be positive"));
        }
        if !pages_per_block.is_multiple_of(32) {
            return Err(FlashError::InvalidGeometry("pages per block must be a multiple of 32"));
        }
        if blocks_per_chip.checked_mul(pages_per_block).is_none() {
            return Err(FlashError::InvalidGeometry("page count does not fit 32 bits"));
        }
        Ok(FlashGeometry { blocks_per_chip, pages_per_block, page_size })
    }

    pub fn blocks_per_chip(&self) -> u32 {
        self.blocks_per_chip
    }

    pub fn pages_per_block(&self) -> u32 {
        self.pages_per_block
    }

    pub fn page_size(&self) -> u32 {
        self.page_size
    }

    pub fn block_bytes(&self) -> u64 {
        self.pages_per_block as u64 * self.page_size as u64
    }

    pub fn total_pages(&self) -> u32 {
        self.blocks_per_chip * self.pages_per_block
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_pages() as u64 * self.page_size as u64
    }

    pub fn page_to_block(&self, page: PageIndex) -> Result<BlockIndex, FlashError> {
        self.check_page(page as u64)?;
        Ok(page / self.pages_per_block)
    }

    pub fn first_page_of(&self, block: BlockIndex) -> PageIndex {
        block * self.pages_per_block
    }

    pub(crate) fn check_page(&self, page: u64) -> Result<(), FlashError> {
        if page >= self.total_pages() as u64 {
            return Err(FlashError::PageOutOfRange { page, total: self.total_pages() });
        }
        Ok(())
    }

    pub(crate) fn check_block(&self, block: u64) -> Result<(), FlashError> {
        if block >= self.blocks_per_chip as u64 {
            return Err(FlashError::BlockOutOfRange { block, total: self.blocks_per_chip });
        }
        Ok(())
    }
}

impl Default for FlashGeometry {
    /// 256 MB chip: 2048 blocks of 64 pages of 2 KB.
    fn default() -> Self {
        FlashGeometry { blocks_per_chip: 2048, pages_per_block: 64, page_size: 2048 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatencyModel {
    read: Nanos,
    write: Nanos,
    erase: Nanos,
}

impl LatencyModel {
    pub fn new(read: Nanos, write: Nanos, erase: Nanos) -> Result<Self, FlashError> {
        if read.0 == 0 || write.0 == 0 || erase.0 == 0 {
            return Err(FlashError::InvalidLatency("all latencies must be positive"));
        }
        Ok(LatencyModel { read, write, erase })
    }

    pub fn read(&self) -> Nanos {
        self.read
    }

    pub fn write(&self) -> Nanos {
        self.write
    }

    pub fn erase(&self) -> Nanos {
        self.erase
    }

    pub fn of(&self, kind: OpKind) -> Nanos {
        match kind {
            OpKind::Read => self.read,
            OpKind::Write => self.write,
            OpKind::Erase => self.erase,
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            read: Nanos::from_micros(130),
            write: Nanos::from_micros(375),
            erase: Nanos::from_millis(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PageState {
    Free,
    Written,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockState {
    pages: Vec<PageState>,
    // offset of the lowest free page; pages below it are written
    next_free: u32,
    erase_count: u32,
    is_bad: bool,
}

impl BlockState {
    fn new(pages_per_block: u32) -> Self {
        BlockState {
            pages: vec![PageState::Free; pages_per_block as usize],
            next_free: 0,
            erase_count: 0,
            is_bad: false,
        }
    }

    pub fn pages(&self) -> &[PageState] {
        &self.pages
    }

    pub fn erase_count(&self) -> u32 {
        self.erase_count
    }

    pub fn is_bad(&self) -> bool {
        self.is_bad
    }

    pub fn written_pages(&self) -> u32 {
        self.next_free
    }

    pub fn is_erased(&self) -> bool {
        self.next_free == 0
    }
}

/// What a single physical operation did, and when it started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpReceipt {
    pub kind: OpKind,
    /// Page index for reads and writes, block index for erases.
    pub address: u32,
    pub start: Nanos,
}

/// The ground-truth device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlashChip {
    geometry: FlashGeometry,
    blocks: Vec<BlockState>,
    latency: LatencyModel,
    endurance: Option<u32>,
    clock: Nanos,
}

impl FlashChip {
    pub fn new(geometry: FlashGeometry, latency: LatencyModel) -> Self {
        let blocks = (0..geometry.blocks_per_chip)
            .map(|_| BlockState::new(geometry.pages_per_block))
            .collect();
        FlashChip { geometry, blocks, latency, endurance: None, clock: Nanos::ZERO }
    }

    /// Blocks whose erase count exceeds `limit` turn bad.
    pub fn with_endurance(mut self, limit: u32) -> Self {
        self.endurance = Some(limit);
        self
    }

    pub fn geometry(&self) -> &FlashGeometry {
        &self.geometry
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn endurance(&self) -> Option<u32> {
        self.endurance
    }

    pub fn clock(&self) -> Nanos {
        self.clock
    }

    pub fn blocks(&self) -> &[BlockState] {
        &self.blocks
    }

    pub fn block(&self, block: BlockIndex) -> Result<&BlockState, FlashError> {
        self.geometry.check_block(block as u64)?;
        Ok(&self.blocks[block as usize])
    }

    pub fn page_state(&self, page: PageIndex) -> Result<PageState, FlashError> {
        let block = self.geometry.page_to_block(page)?;
        let offset = page % self.geometry.pages_per_block;
        Ok(self.blocks[block as usize].pages[offset as usize])
    }

    pub fn total_erases(&self) -> u64 {
        self.blocks.iter().map(|b| b.erase_count as u64).sum()
    }

    fn usable_block_of(&self, page: PageIndex) -> Result<BlockIndex, FlashError> {
        let block = self.geometry.page_to_block(page)?;
        if self.blocks[block as usize].is_bad {
            return Err(FlashError::BadBlock(block));
        }
        Ok(block)
    }

    fn tick(&mut self, kind: OpKind, address: u32) -> OpReceipt {
        let start = self.clock;
        self.clock = self.clock + self.latency.of(kind);
        OpReceipt { kind, address, start }
    }

    pub fn read_page(&mut self, page: PageIndex) -> Result<OpReceipt, FlashError> {
        self.usable_block_of(page)?;
        Ok(self.tick(OpKind::Read, page))
    }

    pub fn write_page(&mut self, page: PageIndex) -> Result<OpReceipt, FlashError> {
        let block = self.usable_block_of(page)?;
        let ppb = self.geometry.pages_per_block;
        let offset = page % ppb;
        let state = &mut self.blocks[block as usize];
        if state.pages[offset as usize] == PageState::Written {
            return Err(FlashError::Overwrite(page));
        }
        if offset != state.next_free {
            return Err(FlashError::NonSequential { page, expected: block * ppb + state.next_free });
        }
        state.pages[offset as usize] = PageState::Written;
        state.next_free += 1;
        Ok(self.tick(OpKind::Write, page))
    }

    pub fn erase_block(&mut self, block: BlockIndex) -> Result<OpReceipt, FlashError> {
        self.geometry.check_block(block as u64)?;
        let endurance = self.endurance;
        let state = &mut self.blocks[block as usize];
        if state.is_bad {
            return Err(FlashError::BadBlock(block));
        }
        state.pages.fill(PageState::Free);
        state.next_free = 0;
        state.erase_count += 1;
        if endurance.is_some_and(|limit| state.erase_count > limit) {
            state.is_bad = true;
        }
        Ok(self.tick(OpKind::Erase, block))
    }

    /// Marks `[start_page, start_page + page_count)` as written without
    /// touching the clock, the way a bootloader flashes an image before
    /// anything is traced. All-or-nothing.
    pub fn install_image(&mut self, start_page: PageIndex, page_count: u32) -> Result<(), FlashError> {
        if page_count == 0 {
            return Ok(());
        }
        let end = start_page as u64 + page_count as u64;
        self.geometry.check_page(end - 1)?;
        let ppb = self.geometry.pages_per_block;

        let mut cursor: Option<(BlockIndex, u32)> = None;
        for page in start_page..end as u32 {
            let block = self.usable_block_of(page)?;
            let offset = page % ppb;
            let next = match cursor {
                Some((b, next)) if b == block => next,
                _ => self.blocks[block as usize].next_free,
            };
            if self.blocks[block as usize].pages[offset as usize] == PageState::Written {
                return Err(FlashError::Overwrite(page));
            }
            if offset != next {
                return Err(FlashError::NonSequential { page, expected: block * ppb + next });
            }
            cursor = Some((block, next + 1));
        }

        for page in start_page..end as u32 {
            let state = &mut self.blocks[(page / ppb) as usize];
            state.pages[(page % ppb) as usize] = PageState::Written;
            state.next_free += 1;
        }
        Ok(())
    }
}

/// Chip section of the config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    pub blocks: u32,
    pub pages_per_block: u32,
    pub page_size: u32,
    pub read_latency_ns: u64,
    pub write_latency_ns: u64,
    pub erase_latency_ns: u64,
    /// Erase cycles a block survives; absent means unlimited.
    pub endurance: Option<u32>,
}

impl Default for ChipConfig {
    fn default() -> Self {
        let g = FlashGeometry::default();
        let l = LatencyModel::default();
        ChipConfig {
            blocks: g.blocks_per_chip,
            pages_per_block: g.pages_per_block,
            page_size: g.page_size,
            read_latency_ns: l.read.0,
            write_latency_ns: l.write.0,
            erase_latency_ns: l.erase.0,
            endurance: None,
        }
    }
}

impl ChipConfig {
    pub fn build(&self) -> Result<FlashChip, FlashError> {
        let geometry = FlashGeometry::new(self.blocks, self.pages_per_block, self.page_size)?;
        let latency = LatencyModel::new(
            Nanos(self.read_latency_ns),
            Nanos(self.write_latency_ns),
            Nanos(self.erase_latency_ns),
        )?;
        let chip = FlashChip::new(geometry, latency);
        Ok(match self.endurance {
            Some(limit) => chip.with_endurance(limit),
            None => chip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chip() -> FlashChip {
        FlashChip::new(FlashGeometry::default(), LatencyModel::default())
    }

    #[test]
    fn geometry_rejects_bad_dimensions() {
        assert!(FlashGeometry::new(0, 64, 2048).is_err());
        assert!(FlashGeometry::new(16, 48, 2048).is_err());
        assert!(FlashGeometry::new(16, 64, 0).is_err());
        let g = FlashGeometry::new(16, 32, 512).unwrap();
        assert_eq!(g.total_pages(), 512);
        assert_eq!(g.total_bytes(), 512 * 512);
    }

    #[test]
    fn default_geometry_is_256_mb() {
        let g = FlashGeometry::default();
        assert_eq!(g.total_pages(), 131_072);
        assert_eq!(g.total_bytes(), 256 * 1024 * 1024);
    }

    #[test]
    fn default_latencies_sit_in_datasheet_ranges() {
        let l = LatencyModel::default();
        assert!((25_000..=200_000).contains(&l.read().0));
        assert!((250_000..=500_000).contains(&l.write().0));
        assert!(l.erase().0 <= 2_000_000);
        assert!(LatencyModel::new(Nanos(0), Nanos(1), Nanos(1)).is_err());
    }

    #[test]
    fn page_to_block_boundaries() {
        let g = FlashGeometry::default();
        assert_eq!(g.page_to_block(22_655).unwrap(), 353);
        assert_eq!(g.page_to_block(0).unwrap(), 0);
        assert_eq!(g.page_to_block(63).unwrap(), 0);
        assert_eq!(g.page_to_block(64).unwrap(), 1);
        assert!(matches!(g.page_to_block(131_072), Err(FlashError::PageOutOfRange { .. })));
    }

    #[test]
    fn read_advances_clock_only() {
        let mut c = chip();
        let before = c.clone();
        let r = c.read_page(0).unwrap();
        assert_eq!(r.start, Nanos::ZERO);
        assert_eq!(c.clock(), LatencyModel::default().read());
        assert_eq!(c.blocks(), before.blocks());
        assert_eq!(c.read_page(131_072), Err(FlashError::PageOutOfRange { page: 131_072, total: 131_072 }));
        let r = c.read_page(22_655).unwrap();
        assert_eq!(c.geometry().page_to_block(r.address).unwrap(), 353);
    }

    #[test]
    fn overwrite_is_rejected() {
        let mut c = chip();
        c.write_page(0).unwrap();
        assert_eq!(c.write_page(0), Err(FlashError::Overwrite(0)));
    }

    #[test]
    fn writes_must_be_sequential_within_block() {
        let mut c = chip();
        let b = 7 * 64;
        assert_eq!(c.write_page(b + 1), Err(FlashError::NonSequential { page: b + 1, expected: b }));
        for p in b..b + 64 {
            c.write_page(p).unwrap();
        }
        assert_eq!(c.block(7).unwrap().written_pages(), 64);
    }

    #[test]
    fn erase_frees_pages_and_counts_wear() {
        let mut c = chip();
        let first = c.geometry().first_page_of(1025);
        for p in first..first + 10 {
            c.write_page(p).unwrap();
        }
        let r = c.erase_block(1025).unwrap();
        assert_eq!(r.kind, OpKind::Erase);
        assert_eq!(r.address, 1025);
        let blk = c.block(1025).unwrap();
        assert!(blk.pages().iter().all(|p| *p == PageState::Free));
        assert_eq!(blk.erase_count(), 1);
        c.write_page(first).unwrap();
    }

    #[test]
    fn endurance_limit_marks_block_bad() {
        let mut c = chip().with_endurance(2);
        c.erase_block(3).unwrap();
        c.erase_block(3).unwrap();
        assert!(!c.block(3).unwrap().is_bad());
        c.erase_block(3).unwrap();
        assert!(c.block(3).unwrap().is_bad());
        assert_eq!(c.erase_block(3), Err(FlashError::BadBlock(3)));
        assert_eq!(c.read_page(3 * 64), Err(FlashError::BadBlock(3)));
        assert_eq!(c.write_page(3 * 64), Err(FlashError::BadBlock(3)));
        assert_eq!(c.block(3).unwrap().erase_count(), 3);
    }

    #[test]
    fn erase_whole_100mb_region() {
        let mut c = chip();
        let blocks = (100 * 1024 * 1024) / c.geometry().block_bytes();
        assert_eq!(blocks, 800);
        let receipts: Vec<_> = (0..blocks as u32).map(|b| c.erase_block(b).unwrap()).collect();
        assert_eq!(receipts.len(), 800);
        assert_eq!(c.total_erases(), 800);
    }

    #[test]
    fn failed_ops_leave_clock_alone() {
        let mut c = chip();
        c.write_page(0).unwrap();
        let t = c.clock();
        let _ = c.write_page(0);
        let _ = c.erase_block(5000);
        assert_eq!(c.clock(), t);
    }

    #[test]
    fn install_image_marks_pages_without_time() {
        let mut c = chip();
        c.install_image(4096, 3840).unwrap();
        assert_eq!(c.clock(), Nanos::ZERO);
        assert_eq!(c.page_state(4095).unwrap(), PageState::Free);
        assert_eq!(c.page_state(4096).unwrap(), PageState::Written);
        assert_eq!(c.page_state(7935).unwrap(), PageState::Written);
        assert_eq!(c.page_state(7936).unwrap(), PageState::Free);

        let snapshot = c.clone();
        c.install_image(0, 0).unwrap();
        assert_eq!(c, snapshot);

        assert_eq!(c.install_image(7900, 100), Err(FlashError::Overwrite(7900)));
        assert_eq!(c, snapshot, "failed install must not change anything");
    }

    #[test]
    fn install_image_must_be_sequential() {
        let mut c = chip();
        assert!(matches!(c.install_image(10, 5), Err(FlashError::NonSequential { page: 10, expected: 0 })));
        c.install_image(0, 10).unwrap();
        c.install_image(10, 100).unwrap();
        assert_eq!(c.block(1).unwrap().written_pages(), 46);
    }

    #[test]
    fn timestamp_format_round_trips() {
        let t = Nanos::from_secs_nanos(13, 551_048_336);
        assert_eq!(t.to_string(), "13.551048336");
        assert_eq!(Nanos::ZERO.to_string(), "0.000000000");
        assert_eq!("13.551048336".parse::<Nanos>().unwrap(), t);
        assert!("13.55".parse::<Nanos>().is_err());
    }

    #[test]
    fn chip_config_builds_defaults() {
        let c = ChipConfig::default().build().unwrap();
        assert_eq!(c.geometry(), &FlashGeometry::default());
        assert_eq!(c.latency(), &LatencyModel::default());
        assert_eq!(c.endurance(), None);
    }
}
