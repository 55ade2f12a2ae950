//! CIFAR-10 / CIFAR-100 binary format.
//!
//! A record is the label byte(s) followed by 3072 pixel bytes: the 1024
//! red values, then green, then blue, each plane row-major 32×32.
//! CIFAR-100 records carry a coarse and a fine label; the fine one is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FbError, Result};

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "cifar10" => Some(Variant::Cifar10),
            "cifar100" => Some(Variant::Cifar100),
            _ => None,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    /// Directory names the official archives extract to.
    fn subdir(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar-10-batches-bin",
            Variant::Cifar100 => "cifar-100-binary",
        }
    }

    /// Files of a split with their record counts.
    pub fn files(self, train: bool) -> Vec<(String, usize)> {
        match (self, train) {
            (Variant::Cifar10, true) => (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect(),
            (Variant::Cifar10, false) => vec![("test_batch.bin".into(), 10_000)],
            (Variant::Cifar100, true) => vec![("train.bin".into(), 50_000)],
            (Variant::Cifar100, false) => vec![("test.bin".into(), 10_000)],
        }
    }
}

pub fn encode_record(variant: Variant, label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), PIXELS);
    let mut out = Vec::with_capacity(variant.record_len());
    if variant == Variant::Cifar100 {
        out.push(0);
    }
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

/// Splits a buffer of whole records into pixels and labels.
pub fn decode_records(variant: Variant, bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>)> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(FbError::Data(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / rec * PIXELS);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for r in bytes.chunks(rec) {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(FbError::Data(format!("label {label} out of range for {variant:?}")));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Ok((pixels, labels))
}

/// Looks for the split files in `dir` or in the archive's own subdirectory.
pub fn locate(dir: &Path, variant: Variant) -> PathBuf {
    let nested = dir.join(variant.subdir());
    if nested.join(&variant.files(false)[0].0).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Reads one split, checking every file has its exact expected size.
pub fn load_split(dir: &Path, variant: Variant, train: bool) -> Result<(Vec<u8>, Vec<usize>)> {
    let root = locate(dir, variant);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (name, records) in variant.files(train) {
        let path = root.join(&name);
        let expected = records * variant.record_len();
        let bytes = std::fs::read(&path)
            .map_err(|e| FbError::io(&path, format!("{e} (expected a {expected}-byte {variant:?} file)")))?;
        if bytes.len() != expected {
            return Err(FbError::io(
                &path,
                format!("size {} bytes, expected {expected}", bytes.len()),
            ));
        }
        let (p, l) = decode_records(variant, &bytes)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Ok((pixels, labels))
}

/// Per-channel mean and standard deviation of `pixels / 255`.
pub fn channel_stats(pixels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let plane = 32 * 32;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for img in pixels.chunks(PIXELS) {
        for c in 0..3 {
            for &b in &img[c * plane..(c + 1) * plane] {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let count = (pixels.len() / 3).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count - m * m).max(1e-12).sqrt())
        .collect();
    (mean, std)
}

/// Train and test splits, normalized with statistics of the train split.
pub fn load(dir: &Path, variant: Variant) -> Result<(Dataset, Dataset)> {
    let (train_px, train_labels) = load_split(dir, variant, true)?;
    let (test_px, test_labels) = load_split(dir, variant, false)?;
    let (mean, std) = channel_stats(&train_px);
    let c = variant.classes();
    Ok((
        Dataset::bytes(&IMAGE_SHAPE, train_px, train_labels, c, mean.clone(), std.clone())?,
        Dataset::bytes(&IMAGE_SHAPE, test_px, test_labels, c, mean, std)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u8) -> Vec<u8> {
        (0..PIXELS).map(|i| (i as u8).wrapping_mul(seed)).collect()
    }

    #[test]
    fn record_round_trip() {
        for variant in [Variant::Cifar10, Variant::Cifar100] {
            let mut bytes = encode_record(variant, 7, &image(3));
            bytes.extend(encode_record(variant, 2, &image(5)));
            let (px, labels) = decode_records(variant, &bytes).unwrap();
            assert_eq!(labels, [7, 2]);
            assert_eq!(&px[..PIXELS], &image(3)[..]);
            assert_eq!(&px[PIXELS..], &image(5)[..]);
        }
    }

    #[test]
    fn fine_label_is_used() {
        let mut rec = encode_record(Variant::Cifar100, 42, &image(1));
        rec[0] = 9;
        assert_eq!(decode_records(Variant::Cifar100, &rec).unwrap().1, [42]);
    }

    #[test]
    fn truncated_and_bad_labels() {
        let rec = encode_record(Variant::Cifar10, 1, &image(1));
        assert!(decode_records(Variant::Cifar10, &rec[..100]).is_err());
        let bad = encode_record(Variant::Cifar10, 10, &image(1));
        assert!(matches!(decode_records(Variant::Cifar10, &bad), Err(FbError::Data(_))));
    }

    #[test]
    fn missing_or_short_file_names_path_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(dir.path(), Variant::Cifar10, false).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("test_batch.bin") && msg.contains("30730000"), "{msg}");

        std::fs::write(
            dir.path().join("test_batch.bin"),
            encode_record(Variant::Cifar10, 0, &image(1)),
        )
        .unwrap();
        let msg = load_split(dir.path(), Variant::Cifar10, false).unwrap_err().to_string();
        assert!(msg.contains("3073 bytes") && msg.contains("30730000"), "{msg}");
    }

    #[test]
    fn stats_of_constant_channels() {
        let mut img = vec![0u8; PIXELS];
        img[1024..2048].fill(255);
        let (mean, std) = channel_stats(&img);
        assert_eq!(mean, vec![0.0, 1.0, 0.0]);
        assert!(std.iter().all(|s| *s < 1e-5));
    }
}
