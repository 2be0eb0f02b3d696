use std::fs;
use std::path::Path;

use super::{DataError, LabeledDataset, Normalization};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { what, expected: offset + 4, found: bytes.len() })
}

/// Parses an IDX image/label pair (MNIST layout). Normalization defaults to
/// the MNIST constants.
pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx_bytes(&images, &labels)
}

pub fn parse_idx_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledDataset, DataError> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            field: "images.magic",
            detail: format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let magic = be_u32(labels, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            field: "labels.magic",
            detail: format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;
    let label_count = be_u32(labels, 4, "label header")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format { field: "images.dims", detail: format!("{rows}x{cols}") });
    }
    if count != label_count {
        return Err(DataError::Consistency(format!("{count} images but {label_count} labels")));
    }
    let pixel_bytes = count
        .checked_mul(rows * cols)
        .ok_or_else(|| DataError::Format { field: "images.count", detail: "size overflow".into() })?;
    let payload = &images[16..];
    if payload.len() < pixel_bytes {
        return Err(DataError::Truncated { what: "image payload", expected: pixel_bytes, found: payload.len() });
    }
    if payload.len() > pixel_bytes {
        return Err(DataError::Format {
            field: "images.payload",
            detail: format!("{} trailing bytes", payload.len() - pixel_bytes),
        });
    }
    let lpayload = &labels[8..];
    if lpayload.len() < count {
        return Err(DataError::Truncated { what: "label payload", expected: count, found: lpayload.len() });
    }
    if lpayload.len() > count {
        return Err(DataError::Format {
            field: "labels.payload",
            detail: format!("{} trailing bytes", lpayload.len() - count),
        });
    }
    let ys: Vec<usize> = lpayload.iter().map(|&b| b as usize).collect();
    let class_count = ys.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new((rows, cols, 1), payload.to_vec(), ys, class_count, Normalization::mnist())
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    if ds.channels() != 1 {
        return Err(DataError::Config(format!("IDX export needs 1 channel, dataset has {}", ds.channels())));
    }
    if ds.labels().iter().any(|&y| y > 255) {
        return Err(DataError::Config("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels().len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, ds.height() as u32, ds.width() as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(ds.pixels());
    let mut lbl = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(ds.labels().iter().map(|&y| y as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}
