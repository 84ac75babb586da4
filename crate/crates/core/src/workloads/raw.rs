//! Raw MTD utilities, named after their mtd-utils counterparts.

use crate::mtd::{MtdDevice, MtdError, PartitionId};
use crate::nand::OpReceipt;

pub const ERASE_TASK: &str = "flash_erase";
pub const WRITE_TASK: &str = "nandwrite";
pub const READ_TASK: &str = "nanddump";

/// Erases every block of the partition.
pub fn raw_erase(dev: &mut MtdDevice, partition: PartitionId) -> Result<Vec<OpReceipt>, MtdError> {
    let p = dev.partition(partition)?.clone();
    dev.with_task(ERASE_TASK, |dev| dev.mtd_erase(p.first_block, p.block_count))
}

/// Writes `bytes` from the start of the partition, rounded up to pages.
pub fn raw_write(dev: &mut MtdDevice, partition: PartitionId, bytes: u64) -> Result<Vec<OpReceipt>, MtdError> {
    let (start, pages) = span(dev, partition, bytes)?;
    dev.with_task(WRITE_TASK, |dev| dev.mtd_write(start, pages))
}

/// Reads `bytes` from the start of the partition, rounded up to pages.
pub fn raw_read(dev: &mut MtdDevice, partition: PartitionId, bytes: u64) -> Result<Vec<OpReceipt>, MtdError> {
    let (start, pages) = span(dev, partition, bytes)?;
    dev.with_task(READ_TASK, |dev| dev.mtd_read(start, pages))
}

fn span(dev: &MtdDevice, partition: PartitionId, bytes: u64) -> Result<(u32, u32), MtdError> {
    let g = *dev.geometry();
    let p = dev.partition(partition)?;
    let range = p.pages(&g);
    let pages = bytes.div_ceil(g.page_size() as u64);
    let limit = range.end - range.start;
    if pages > limit as u64 {
        return Err(MtdError::Range { start: range.start as u64, count: pages.min(u32::MAX as u64) as u32, limit });
    }
    Ok((range.start, pages as u32))
}
