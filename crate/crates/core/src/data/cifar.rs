use std::fs;
use std::path::Path;

use super::{DataError, LabeledDataset, Normalization};

/// `coarse label | fine label | 1024 R | 1024 G | 1024 B`
pub const CIFAR_RECORD_LEN: usize = 3074;
pub const CIFAR100_CLASSES: usize = 100;
const SIDE: usize = 32;

pub fn parse_cifar100(bin_path: &Path) -> Result<LabeledDataset, DataError> {
    parse_cifar100_bytes(&fs::read(bin_path)?)
}

/// Parses CIFAR-100 binary records, keeping the fine label. Planes are
/// re-interleaved into `H x W x C`.
pub fn parse_cifar100_bytes(bytes: &[u8]) -> Result<LabeledDataset, DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::Format {
            field: "cifar100.size",
            detail: format!("{} bytes is not a positive multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let plane = SIDE * SIDE;
    let mut pixels = Vec::with_capacity(n * plane * 3);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let fine = rec[1] as usize;
        if fine >= CIFAR100_CLASSES {
            return Err(DataError::Format { field: "cifar100.fine_label", detail: format!("{fine} >= 100") });
        }
        labels.push(fine);
        let body = &rec[2..];
        for p in 0..plane {
            pixels.extend_from_slice(&[body[p], body[plane + p], body[2 * plane + p]]);
        }
    }
    LabeledDataset::new((SIDE, SIDE, 3), pixels, labels, CIFAR100_CLASSES, Normalization::cifar100())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(coarse: u8, fine: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..3072).map(|i| (i % 251) as u8));
        r
    }

    #[test]
    fn single_record_round_trip() {
        let rec = record(4, 42);
        let ds = parse_cifar100_bytes(&rec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[42]);
        assert_eq!(ds.class_count(), 100);
        let img = ds.image(0);
        // pixel (y, x) channel c sits at body[c*1024 + y*32 + x]
        for (y, x) in [(0, 0), (5, 17), (31, 31)] {
            for c in 0..3 {
                assert_eq!(img[(y * 32 + x) * 3 + c], rec[2 + c * 1024 + y * 32 + x]);
            }
        }
    }

    #[test]
    fn truncated_file() {
        let mut two = record(0, 1);
        two.extend(record(1, 2));
        assert_eq!(parse_cifar100_bytes(&two).unwrap().len(), 2);
        assert!(matches!(parse_cifar100_bytes(&two[..two.len() - 5]), Err(DataError::Format { .. })));
        assert!(matches!(parse_cifar100_bytes(&[]), Err(DataError::Format { .. })));
    }

    #[test]
    fn bad_fine_label() {
        assert!(parse_cifar100_bytes(&record(0, 100)).is_err());
    }
}
