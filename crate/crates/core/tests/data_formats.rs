use std::collections::BTreeSet;
use std::path::PathBuf;

use ccloss::data::{
    batches, parse_cifar100_bytes, parse_idx, parse_idx_bytes, synth_blobs, write_idx, BatchOptions, DataError,
    CIFAR_RECORD_LEN,
};
use proptest::prelude::*;

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = 0x0803u32.to_be_bytes().to_vec();
    for x in [count, rows, cols] {
        v.extend(x.to_be_bytes());
    }
    v.extend(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0801u32.to_be_bytes().to_vec();
    v.extend((labels.len() as u32).to_be_bytes());
    v.extend(labels);
    v
}

#[test]
fn hand_built_idx_parses() {
    let img = idx_images(2, 2, 3, &[0, 1, 2, 3, 4, 5, 255, 254, 253, 252, 251, 250]);
    let ds = parse_idx_bytes(&img, &idx_labels(&[7, 2])).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!((ds.height(), ds.width(), ds.channels()), (2, 3, 1));
    assert_eq!(ds.image(1), &[255, 254, 253, 252, 251, 250]);
    assert_eq!(ds.labels(), &[7, 2]);
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let mut img = idx_images(1, 1, 1, &[9]);
    img[3] = 0x04;
    assert!(matches!(parse_idx_bytes(&img, &idx_labels(&[0])), Err(DataError::Format { .. })));
    let mut lbl = idx_labels(&[0]);
    lbl[2] = 0xff;
    assert!(matches!(parse_idx_bytes(&idx_images(1, 1, 1, &[9]), &lbl), Err(DataError::Format { .. })));
}

#[test]
fn truncated_payloads_are_typed_errors() {
    let img = idx_images(3, 2, 2, &[0; 11]);
    assert!(matches!(parse_idx_bytes(&img, &idx_labels(&[0, 1, 2])), Err(DataError::Truncated { .. })));
    let img = idx_images(3, 2, 2, &[0; 12]);
    assert!(matches!(parse_idx_bytes(&img, &idx_labels(&[0, 1])), Err(DataError::Consistency(_) | DataError::Truncated { .. })));
    assert!(matches!(parse_idx_bytes(&img[..7], &idx_labels(&[0])), Err(DataError::Truncated { .. })));
}

#[test]
fn synth_blobs_survive_an_idx_round_trip() {
    let ds = synth_blobs(3, 5, 4, 6.0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    write_idx(&ds, &ip, &lp).unwrap();
    let back = parse_idx(&ip, &lp).unwrap();
    assert_eq!(back.pixels(), ds.pixels());
    assert_eq!(back.labels(), ds.labels());
    assert_eq!((back.height(), back.width()), (ds.height(), ds.width()));
}

#[test]
fn cifar_records_use_fine_labels_and_hwc_layout() {
    let mut bytes = Vec::new();
    for (coarse, fine) in [(3u8, 41u8), (19, 99)] {
        bytes.push(coarse);
        bytes.push(fine);
        for ch in 0..3u8 {
            bytes.extend(std::iter::repeat_n(ch * 10 + fine % 7, 1024));
        }
    }
    let ds = parse_cifar100_bytes(&bytes).unwrap();
    assert_eq!(ds.labels(), &[41, 99]);
    assert_eq!(&ds.image(0)[..3], &[6, 16, 26]);
    assert!(matches!(parse_cifar100_bytes(&bytes[..CIFAR_RECORD_LEN + 5]), Err(DataError::Format { .. })));
}

#[test]
fn every_item_once_per_epoch() {
    let ds = synth_blobs(4, 13, 4, 3.0, 0).unwrap();
    for epoch in 0..3 {
        let opts = BatchOptions { epoch, seed: 5, shuffle: true, ..BatchOptions::sequential(8) };
        let mut seen = Vec::new();
        for b in batches::<f32>(&ds, opts).unwrap() {
            assert!(b.len() <= 8);
            seen.extend(b.indices);
        }
        assert_eq!(seen.len(), ds.len());
        assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), ds.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn idx_parsing_is_total(img in prop::collection::vec(any::<u8>(), 0..64), lbl in prop::collection::vec(any::<u8>(), 0..16)) {
        if let Ok(ds) = parse_idx_bytes(&img, &lbl) {
            prop_assert_eq!(ds.pixels().len(), ds.len() * ds.image_len());
        }
    }

    #[test]
    fn idx_header_mutations_never_panic(pos in 0usize..16, byte in any::<u8>()) {
        let mut img = idx_images(2, 2, 2, &[1; 8]);
        img[pos] = byte;
        let _ = parse_idx_bytes(&img, &idx_labels(&[0, 1]));
    }

    #[test]
    fn cifar_parsing_is_total(bytes in prop::collection::vec(any::<u8>(), 0..(2 * CIFAR_RECORD_LEN + 3))) {
        match parse_cifar100_bytes(&bytes) {
            Ok(ds) => prop_assert_eq!(ds.len() * CIFAR_RECORD_LEN, bytes.len()),
            Err(_) => {
                let bad_label = bytes.chunks(CIFAR_RECORD_LEN).any(|r| r.len() > 1 && r[1] >= 100);
                prop_assert!(bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 || bad_label);
            }
        }
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CCLOSS_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

#[test]
fn normalized_mnist_training_split_is_centred() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST files not found; set CCLOSS_MNIST_DIR");
        return;
    };
    let ds = parse_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    let mut sum = 0.0;
    for b in batches::<f32>(&ds, BatchOptions::sequential(4096)).unwrap() {
        sum += b.inputs.data().iter().map(|&v| v as f64).sum::<f64>();
    }
    let mean = sum / ds.pixels().len() as f64;
    assert!(mean.abs() < 0.05, "{mean}");
}
