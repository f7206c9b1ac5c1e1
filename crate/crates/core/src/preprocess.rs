//! Normalization, overlapping segmentation, labelling and splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::ingest::{ChannelMatrix, RawClassData};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sampling rate segment durations are converted at.
pub const SAMPLING_RATE_HZ: f64 = 256.0;
pub const DEFAULT_OVERLAP: f64 = 0.25;
pub const SEGMENT_MAGIC: &[u8; 8] = b"LCTSEG01";

const MIN_STD: f64 = 1e-12;

/// Samples per segment for a duration in seconds.
pub fn segment_len_samples(duration_s: f64) -> Result<usize> {
    let len = (SAMPLING_RATE_HZ * duration_s).round();
    if !(len >= 1.0) {
        return Err(Error::config(
            "segment_len_s",
            format!("{duration_s} s gives no samples"),
        ));
    }
    Ok(len as usize)
}

/// `(X - mean) / std` with statistics over every entry jointly (population
/// standard deviation).
pub fn zscore_normalize(x: &ChannelMatrix) -> Result<ChannelMatrix> {
    let v = x.data();
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= MIN_STD) {
        return Err(Error::ConstantInput(std));
    }
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|a| *a = (*a - mean) / std);
    Ok(out)
}

/// Hop between consecutive segment starts.
pub fn segment_step(len: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(
            "overlap",
            format!("{overlap} is outside [0, 1)"),
        ));
    }
    let step = (len as f64 * (1.0 - overlap)).round() as usize;
    if step == 0 {
        return Err(Error::ZeroStep { len, overlap });
    }
    Ok(step)
}

/// Number of segments of `len` samples that fit in `total` samples.
pub fn segment_count(total: usize, len: usize, step: usize) -> usize {
    if len > total || step == 0 {
        0
    } else {
        (total - len) / step + 1
    }
}

/// Cut `x [N x T]` into `[K x N x L]`; segment `k` covers columns
/// `[k*step, k*step + L)`.
pub fn segment(x: &ChannelMatrix, len: usize, overlap: f64) -> Result<Tensor<f64>> {
    if len == 0 {
        return Err(Error::config("segment_len", "must be at least one sample"));
    }
    let step = segment_step(len, overlap)?;
    let t = x.samples();
    if len > t {
        return Err(Error::SegmentTooLong { len, available: t });
    }
    let k = segment_count(t, len, step);
    let n = x.channels();
    let mut data = Vec::with_capacity(k * n * len);
    for s in 0..k {
        for c in 0..n {
            data.extend_from_slice(&x.row(c)[s * step..s * step + len]);
        }
    }
    Tensor::new(&[k, n, len], data)
}

/// Labelled segments `[K x N x L]`, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    channels: usize,
    len: usize,
    samples: Vec<f32>,
    labels: Vec<u8>,
}

impl SegmentSet {
    pub fn new(channels: usize, len: usize, samples: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::shape(
                "segment set needs positive channel count and length",
            ));
        }
        if samples.len() != labels.len() * channels * len {
            return Err(Error::shape(format!(
                "{} labels of {channels}x{len} need {} samples, got {}",
                labels.len(),
                labels.len() * channels * len,
                samples.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Format {
                what: "segment set",
                reason: format!("label {bad} is not binary"),
            });
        }
        Ok(Self {
            channels,
            len,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn segment_len(&self) -> usize {
        self.len
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn segment(&self, k: usize) -> &[f32] {
        let s = self.channels * self.len;
        &self.samples[k * s..(k + 1) * s]
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(indices.len() * self.channels * self.len);
        for &k in indices {
            samples.extend_from_slice(self.segment(k));
        }
        Self {
            channels: self.channels,
            len: self.len,
            samples,
            labels: indices.iter().map(|&k| self.labels[k]).collect(),
        }
    }

    /// Batch tensor `[B x N x L]` and labels for the given indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.len);
        for &k in indices {
            data.extend(
                self.segment(k)
                    .iter()
                    .map(|&v| T::from_f64_lossy(f64::from(v))),
            );
        }
        let x = Tensor::new(&[indices.len(), self.channels, self.len], data)?;
        Ok((
            x,
            indices
                .iter()
                .map(|&k| usize::from(self.labels[k]))
                .collect(),
        ))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.labels.len() + 4 * self.samples.len());
        out.extend_from_slice(SEGMENT_MAGIC);
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        out.extend_from_slice(&self.labels);
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(SEGMENT_MAGIC, "segment set")?;
        let k = r.u64()? as usize;
        let n = r.u32()? as usize;
        let l = r.u32()? as usize;
        let labels = r.take(k)?.to_vec();
        let count = k
            .checked_mul(n)
            .and_then(|v| v.checked_mul(l))
            .ok_or_else(|| Error::Format {
                what: "segment set",
                reason: "size overflows".into(),
            })?;
        let samples = r.f32_vec(count)?;
        if r.remaining() != 0 {
            return Err(Error::Format {
                what: "segment set",
                reason: format!(
                    "{} trailing bytes at offset {}",
                    r.remaining(),
                    r.position()
                ),
            });
        }
        Self::new(n, l, samples, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Normalize each class stack, segment it, and balance the classes by
/// keeping the first `min(K_ictal, K_interictal)` segments of each.
/// Interictal segments (label 0) come first.
pub fn build_segment_set(data: &RawClassData, len: usize, overlap: f64) -> Result<SegmentSet> {
    let inter = segment(&zscore_normalize(&data.interictal)?, len, overlap)?;
    let ictal = segment(&zscore_normalize(&data.ictal)?, len, overlap)?;
    let k = inter.shape()[0].min(ictal.shape()[0]);
    let per = data.interictal.channels() * len;
    let mut samples = Vec::with_capacity(2 * k * per);
    for t in [&inter, &ictal] {
        samples.extend(t.data()[..k * per].iter().map(|&v| v as f32));
    }
    let labels = std::iter::repeat_n(0u8, k)
        .chain(std::iter::repeat_n(1u8, k))
        .collect();
    SegmentSet::new(data.interictal.channels(), len, samples, labels)
}

/// Train/validation/test partition plus the source index of every member.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: SegmentSet,
    pub val: SegmentSet,
    pub test: SegmentSet,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// `(test, val)` sizes for `total` segments, rounding halves up.
pub fn split_sizes(total: usize) -> (usize, usize) {
    let test = (25 * total + 50) / 100;
    let val = (75 * total + 500) / 1000;
    (test, val)
}

/// Seeded, stratified 75/25 split with 10% of the training share held out
/// for validation.
pub fn split(set: &SegmentSet, seed: u64) -> Result<SplitSet> {
    let total = set.len();
    let (n_test, n_val) = split_sizes(total);
    if total < 8 || n_val == 0 || n_test + n_val >= total {
        return Err(Error::TooFewSegments { have: total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = (0..2u8)
        .map(|c| (0..total).filter(|&k| set.labels[k] == c).collect())
        .collect();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    // proportional allocation, remainder to the other class
    let share =
        |n: usize, of: usize, class_n: usize| ((2 * n * class_n + of) / (2 * of)).min(class_n);
    let test_pos = share(n_test, total, by_class[1].len());
    let test_counts = [n_test - test_pos, test_pos];
    let rest = total - n_test;
    let val_pos = share(n_val, rest, by_class[1].len() - test_pos);
    let val_counts = [n_val - val_pos, val_pos];
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..2 {
        let idx = &by_class[c];
        if test_counts[c] + val_counts[c] > idx.len() {
            return Err(Error::TooFewSegments { have: total });
        }
        te.extend_from_slice(&idx[..test_counts[c]]);
        va.extend_from_slice(&idx[test_counts[c]..test_counts[c] + val_counts[c]]);
        tr.extend_from_slice(&idx[test_counts[c] + val_counts[c]..]);
    }
    for part in [&mut tr, &mut va, &mut te] {
        part.shuffle(&mut rng);
    }
    Ok(SplitSet {
        train: set.select(&tr),
        val: set.select(&va),
        test: set.select(&te),
        train_indices: tr,
        val_indices: va,
        test_indices: te,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> ChannelMatrix {
        ChannelMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zscore_three_values() {
        let z = zscore_normalize(&matrix(&[vec![1.0, 2.0, 3.0]])).unwrap();
        let e = (1.5f64).sqrt();
        for (a, b) in z.data().iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            zscore_normalize(&matrix(&[vec![4.0; 5]])),
            Err(Error::ConstantInput(_))
        ));
        assert!(matches!(
            zscore_normalize(&ChannelMatrix::empty(3)),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn segment_counts() {
        let x = ChannelMatrix::new(2, 1024, (0..2048).map(f64::from).collect()).unwrap();
        let s = segment(&x, 256, 0.25).unwrap();
        assert_eq!(s.shape(), &[5, 2, 256]);
        assert_eq!(s.get(&[1, 0, 0]), 192.0);
        assert_eq!(s.get(&[4, 1, 255]), 1024.0 + 4.0 * 192.0 + 255.0);
        let one = segment(&x.columns(0, 256), 256, 0.25).unwrap();
        assert_eq!(one.data(), x.columns(0, 256).data());
        assert!(matches!(
            segment(&x, 2000, 0.25),
            Err(Error::SegmentTooLong { .. })
        ));
        assert!(matches!(segment(&x, 1, 0.9), Err(Error::ZeroStep { .. })));
        assert!(segment(&x, 16, 1.0).is_err());
    }

    #[test]
    fn paper_durations_are_whole_samples() {
        for d in [0.0625, 0.125, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0] {
            let l = SAMPLING_RATE_HZ * d;
            assert_eq!(l.fract(), 0.0);
            assert_eq!(segment_len_samples(d).unwrap() as f64, l);
        }
    }

    #[test]
    fn split_sizes_for_thousand() {
        assert_eq!(split_sizes(1000), (250, 75));
        assert_eq!(split_sizes(8), (2, 1));
    }

    #[test]
    fn segment_set_format_round_trip() {
        let set =
            SegmentSet::new(2, 3, (0..12).map(|v| v as f32 * 0.5).collect(), vec![0, 1]).unwrap();
        let bytes = set.encode();
        assert_eq!(SegmentSet::decode(&bytes).unwrap(), set);
        assert!(matches!(
            SegmentSet::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(SegmentSet::new(2, 3, vec![0.0; 6], vec![2]).is_err());
    }
}
