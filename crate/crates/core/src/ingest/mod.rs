//! EDF recordings to class-separated channel matrices.
//!
//! A recording is reduced to the canonical bipolar montage, split into ictal
//! and interictal columns using seizure intervals, and the per-recording
//! pieces are pooled into one balanced [`RawClassData`].

pub mod edf;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};

pub use edf::parse_edf;

/// The 18 bipolar derivations every recording is reduced to, in output row
/// order.
pub const CANONICAL_CHANNELS: [&str; 18] = [
    "C3-P3", "F7-T7", "P7-O1", "FP1-F7", "FP1-F3", "P3-O1", "FP2-F8", "T7-P7", "F3-C3", "T8-P8",
    "F4-C4", "F8-T8", "FP2-F4", "CZ-PZ", "P8-O2", "C4-P4", "FZ-CZ", "P4-O2",
];

pub const RAW_MAGIC: &[u8; 8] = b"LCTRAW01";

pub const INTERICTAL: u8 = 0;
pub const ICTAL: u8 = 1;

/// A parsed recording in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channel_labels: Vec<String>,
    pub sampling_rate_hz: f64,
    pub data: Vec<Vec<f64>>,
    pub duration_s: f64,
}

impl Recording {
    pub fn new(
        channel_labels: Vec<String>,
        sampling_rate_hz: f64,
        data: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if channel_labels.len() != data.len() {
            return Err(Error::Format {
                what: "recording",
                reason: format!(
                    "{} labels for {} channels",
                    channel_labels.len(),
                    data.len()
                ),
            });
        }
        if !(sampling_rate_hz > 0.0) {
            return Err(Error::Format {
                what: "recording",
                reason: format!("sampling rate {sampling_rate_hz}"),
            });
        }
        let t = data.first().map_or(0, Vec::len);
        if data.iter().any(|c| c.len() != t) {
            return Err(Error::Format {
                what: "recording",
                reason: "channels differ in length".into(),
            });
        }
        Ok(Self {
            channel_labels,
            sampling_rate_hz,
            duration_s: t as f64 / sampling_rate_hz,
            data,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }
}

/// Row-major `channels x samples` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    channels: usize,
    samples: usize,
    data: Vec<f64>,
}

impl ChannelMatrix {
    pub fn new(channels: usize, samples: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * samples {
            return Err(Error::shape(format!(
                "{channels}x{samples} matrix needs {} values, got {}",
                channels * samples,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            samples,
            data,
        })
    }

    pub fn empty(channels: usize) -> Self {
        Self {
            channels,
            samples: 0,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::shape("rows differ in length"));
        }
        Ok(Self {
            channels: rows.len(),
            samples,
            data: rows.concat(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.samples + t]
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let mut data = Vec::with_capacity(self.channels * (end - start));
        for c in 0..self.channels {
            data.extend_from_slice(&self.row(c)[start..end]);
        }
        Self {
            channels: self.channels,
            samples: end - start,
            data,
        }
    }

    /// Concatenate along the time axis.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let channels = match parts.first() {
            Some(p) => p.channels,
            None => return Err(Error::EmptyInput),
        };
        if parts.iter().any(|p| p.channels != channels) {
            return Err(Error::shape("channel counts differ"));
        }
        let samples = parts.iter().map(|p| p.samples).sum();
        let mut data = Vec::with_capacity(channels * samples);
        for c in 0..channels {
            for p in parts {
                data.extend_from_slice(p.row(c));
            }
        }
        Ok(Self {
            channels,
            samples,
            data,
        })
    }
}

fn normalize_label(label: &str) -> String {
    label
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_uppercase()
}

/// Rows of `recording` matching `wanted`, in `wanted` order. Matching
/// ignores case and whitespace; the first of duplicate labels wins.
pub fn select_channels(recording: &Recording, wanted: &[&str]) -> Result<ChannelMatrix> {
    let have: Vec<String> = recording
        .channel_labels
        .iter()
        .map(|l| normalize_label(l))
        .collect();
    let rows = wanted
        .iter()
        .map(|w| {
            let key = normalize_label(w);
            have.iter()
                .position(|h| *h == key)
                .map(|i| recording.data[i].clone())
                .ok_or_else(|| Error::MissingChannel((*w).to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    ChannelMatrix::from_rows(&rows)
}

/// Seizure interval in seconds, half-open `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeizureInterval {
    pub start_s: f64,
    pub end_s: f64,
}

/// Parse the intervals sidecar: one `start_s end_s` pair per line, blank
/// lines and `#` comments ignored.
pub fn parse_intervals(text: &str) -> Result<Vec<SeizureInterval>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format {
            what: "intervals file",
            reason: format!("line {}: expected `start_s end_s`, got {line:?}", n + 1),
        };
        if fields.len() != 2 {
            return Err(bad());
        }
        let start_s: f64 = fields[0].parse().map_err(|_| bad())?;
        let end_s: f64 = fields[1].parse().map_err(|_| bad())?;
        out.push(SeizureInterval { start_s, end_s });
    }
    Ok(out)
}

fn validate_intervals(intervals: &[SeizureInterval], duration_s: f64) -> Result<()> {
    for iv in intervals {
        if !(iv.start_s >= 0.0 && iv.start_s < iv.end_s && iv.end_s <= duration_s) {
            return Err(Error::IntervalOutOfRange {
                start: iv.start_s,
                end: iv.end_s,
                duration_s,
            });
        }
    }
    for w in intervals.windows(2) {
        if w[1].start_s < w[0].end_s {
            return Err(Error::IntervalOverlap {
                prev_start: w[0].start_s,
                prev_end: w[0].end_s,
                start: w[1].start_s,
                end: w[1].end_s,
            });
        }
    }
    Ok(())
}

/// Split one recording into `(ictal, interictal)` columns. Interval bounds
/// map to sample indices by rounding `t * fs`; the ictal and interictal
/// matrices are the concatenation of the covered and uncovered runs.
pub fn extract_intervals(
    matrix: &ChannelMatrix,
    intervals: &[SeizureInterval],
    fs: f64,
) -> Result<(ChannelMatrix, ChannelMatrix)> {
    let duration_s = matrix.samples() as f64 / fs;
    validate_intervals(intervals, duration_s)?;
    let t = matrix.samples();
    let mut ictal = Vec::new();
    let mut inter = Vec::new();
    let mut cursor = 0;
    for iv in intervals {
        let a = ((iv.start_s * fs).round() as usize).min(t);
        let b = ((iv.end_s * fs).round() as usize).min(t);
        if a > cursor {
            inter.push(matrix.columns(cursor, a));
        }
        if b > a {
            ictal.push(matrix.columns(a, b));
        }
        cursor = cursor.max(b);
    }
    if cursor < t {
        inter.push(matrix.columns(cursor, t));
    }
    let join = |parts: Vec<ChannelMatrix>| {
        if parts.is_empty() {
            Ok(ChannelMatrix::empty(matrix.channels()))
        } else {
            ChannelMatrix::hconcat(&parts)
        }
    };
    Ok((join(ictal)?, join(inter)?))
}

/// Pooled, class-separated EEG with rows in `channel_order`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClassData {
    pub interictal: ChannelMatrix,
    pub ictal: ChannelMatrix,
    pub channel_order: Vec<String>,
}

impl RawClassData {
    pub fn new(
        interictal: ChannelMatrix,
        ictal: ChannelMatrix,
        channel_order: Vec<String>,
    ) -> Result<Self> {
        let n = channel_order.len();
        if interictal.channels() != n || ictal.channels() != n {
            return Err(Error::shape(format!(
                "class matrices have {} and {} rows, channel order lists {n}",
                interictal.channels(),
                ictal.channels()
            )));
        }
        Ok(Self {
            interictal,
            ictal,
            channel_order,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (class, m) in [(INTERICTAL, &self.interictal), (ICTAL, &self.ictal)] {
            out.extend_from_slice(RAW_MAGIC);
            out.extend_from_slice(&(m.channels() as u32).to_le_bytes());
            out.extend_from_slice(&(m.samples() as u64).to_le_bytes());
            out.push(class);
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decode; rows are labelled with the canonical montage when there are
    /// 18 of them, otherwise `CH1`, `CH2`, ...
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let mut blocks = Vec::new();
        for expected in [INTERICTAL, ICTAL] {
            r.expect_magic(RAW_MAGIC, "raw class data")?;
            let n = r.u32()? as usize;
            let t = r.u64()? as usize;
            let class = r.u8()?;
            if class != expected {
                return Err(Error::Format {
                    what: "raw class data",
                    reason: format!("block class {class}, expected {expected}"),
                });
            }
            let len = n.checked_mul(t).ok_or_else(|| Error::Format {
                what: "raw class data",
                reason: "matrix size overflows".into(),
            })?;
            blocks.push(ChannelMatrix::new(n, t, r.f64_vec(len)?)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                what: "raw class data",
                reason: format!("{} trailing bytes", r.remaining()),
            });
        }
        let ictal = blocks.pop().expect("two blocks");
        let interictal = blocks.pop().expect("two blocks");
        let order = default_channel_order(interictal.channels());
        Self::new(interictal, ictal, order)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn default_channel_order(n: usize) -> Vec<String> {
    if n == CANONICAL_CHANNELS.len() {
        CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=n).map(|i| format!("CH{i}")).collect()
    }
}

/// Free column runs `[start, end)` of a matrix.
type Runs = Vec<(usize, usize)>;

fn take_block(runs: &mut Runs, want: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    // Random offset inside a random run that is long enough.
    let fits: Vec<usize> = (0..runs.len())
        .filter(|&i| runs[i].1 - runs[i].0 >= want)
        .collect();
    if fits.is_empty() || want == 0 {
        return None;
    }
    let i = fits[rng.random_range(0..fits.len())];
    let (s, e) = runs[i];
    let start = s + rng.random_range(0..=(e - s - want));
    runs.splice(
        i..=i,
        [(s, start), (start + want, e)]
            .into_iter()
            .filter(|(a, b)| b > a),
    );
    Some((start, start + want))
}

/// Pool per-recording `(ictal, interictal)` pairs into balanced classes.
///
/// Every ictal sample is kept. From each recording, an interictal block of
/// that recording's ictal length is drawn at a seeded offset; any shortfall
/// is then made up by further draws across all recordings' unused
/// interictal material, largest request first, splitting into smaller blocks
/// only when no single run is long enough.
pub fn assemble_balanced(
    parts: &[(ChannelMatrix, ChannelMatrix)],
    channel_order: Vec<String>,
    seed: u64,
) -> Result<RawClassData> {
    let n = channel_order.len();
    if parts
        .iter()
        .any(|(a, b)| a.channels() != n || b.channels() != n)
    {
        return Err(Error::shape(
            "recording matrices disagree with channel order",
        ));
    }
    let needed: usize = parts.iter().map(|(ictal, _)| ictal.samples()).sum();
    if needed == 0 {
        return Err(Error::NoIctal);
    }
    let available: usize = parts.iter().map(|(_, inter)| inter.samples()).sum();
    if available < needed {
        return Err(Error::InsufficientInterictal { needed, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut free: Vec<Runs> = parts
        .iter()
        .map(|(_, inter)| {
            if inter.samples() > 0 {
                vec![(0, inter.samples())]
            } else {
                vec![]
            }
        })
        .collect();
    let mut picks: Vec<(usize, usize, usize)> = Vec::new();
    let mut deficit = 0;
    for (k, (ictal, _)) in parts.iter().enumerate() {
        match take_block(&mut free[k], ictal.samples(), &mut rng) {
            Some((a, b)) => picks.push((k, a, b)),
            None => deficit += ictal.samples(),
        }
    }
    while deficit > 0 {
        // largest free run anywhere, lowest recording index on ties
        let (k, i) = free
            .iter()
            .enumerate()
            .flat_map(|(k, runs)| runs.iter().enumerate().map(move |(i, r)| (k, i, r.1 - r.0)))
            .max_by(|a, b| a.2.cmp(&b.2).then(b.0.cmp(&a.0)).then(b.1.cmp(&a.1)))
            .map(|(k, i, _)| (k, i))
            .expect("available interictal exceeds what is needed");
        let (s, e) = free[k][i];
        let want = deficit.min(e - s);
        let mut single = vec![(s, e)];
        let (a, b) = take_block(&mut single, want, &mut rng).expect("run is long enough");
        free[k].splice(i..=i, single);
        picks.push((k, a, b));
        deficit -= want;
    }
    picks.sort_unstable();
    let inter: Vec<ChannelMatrix> = picks
        .iter()
        .map(|&(k, a, b)| parts[k].1.columns(a, b))
        .collect();
    let ictal: Vec<ChannelMatrix> = parts
        .iter()
        .map(|(ictal, _)| ictal.clone())
        .filter(|m| m.samples() > 0)
        .collect();
    RawClassData::new(
        ChannelMatrix::hconcat(&inter)?,
        ChannelMatrix::hconcat(&ictal)?,
        channel_order,
    )
}

/// One recording on disk: EDF bytes plus its seizure intervals.
pub struct RecordingSource<'a> {
    pub edf: &'a [u8],
    pub intervals: &'a [SeizureInterval],
}

/// Parse, reduce to the canonical montage, split and balance a set of
/// recordings.
pub fn ingest_recordings(sources: &[RecordingSource<'_>], seed: u64) -> Result<RawClassData> {
    let mut parts = Vec::with_capacity(sources.len());
    for src in sources {
        let rec = parse_edf(src.edf)?;
        let m = select_channels(&rec, &CANONICAL_CHANNELS)?;
        parts.push(extract_intervals(&m, src.intervals, rec.sampling_rate_hz)?);
    }
    let order = CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect();
    assemble_balanced(&parts, order, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize, samples: usize, offset: f64) -> ChannelMatrix {
        let data = (0..channels * samples).map(|i| offset + i as f64).collect();
        ChannelMatrix::new(channels, samples, data).unwrap()
    }

    fn rec(labels: &[&str], t: usize) -> Recording {
        let data = (0..labels.len())
            .map(|c| (0..t).map(|i| (c * 1000 + i) as f64).collect())
            .collect();
        Recording::new(labels.iter().map(|s| s.to_string()).collect(), 256.0, data).unwrap()
    }

    #[test]
    fn selection_is_reordered_and_case_insensitive() {
        let r = rec(&["fp1 - f7", "C3-P3", "T8-P8", "T8-P8"], 4);
        let m = select_channels(&r, &["C3-P3", "FP1-F7", "t8-p8"]).unwrap();
        assert_eq!(m.row(0), r.data[1].as_slice());
        assert_eq!(m.row(1), r.data[0].as_slice());
        assert_eq!(m.row(2), r.data[2].as_slice());
        assert!(
            matches!(select_channels(&r, &["CZ-PZ"]), Err(Error::MissingChannel(c)) if c == "CZ-PZ")
        );
    }

    #[test]
    fn interval_split_counts_columns() {
        let m = ramp(2, 2560, 0.0);
        let iv = [
            SeizureInterval {
                start_s: 1.0,
                end_s: 3.0,
            },
            SeizureInterval {
                start_s: 5.0,
                end_s: 5.5,
            },
        ];
        let (ictal, inter) = extract_intervals(&m, &iv, 256.0).unwrap();
        assert_eq!(ictal.samples(), 512 + 128);
        assert_eq!(inter.samples(), 2560 - 640);
        assert_eq!(ictal.get(0, 0), 256.0);
        assert_eq!(ictal.get(1, 512), 2560.0 + 1280.0);
    }

    #[test]
    fn bad_intervals() {
        let m = ramp(1, 256, 0.0);
        let over = [
            SeizureInterval {
                start_s: 0.1,
                end_s: 0.5,
            },
            SeizureInterval {
                start_s: 0.4,
                end_s: 0.6,
            },
        ];
        assert!(matches!(
            extract_intervals(&m, &over, 256.0),
            Err(Error::IntervalOverlap { .. })
        ));
        let out = [SeizureInterval {
            start_s: 0.5,
            end_s: 2.0,
        }];
        assert!(matches!(
            extract_intervals(&m, &out, 256.0),
            Err(Error::IntervalOutOfRange { .. })
        ));
    }

    #[test]
    fn sidecar_parsing() {
        let iv = parse_intervals("# seizures\n2996 3036\n\n4000.5 4010 # late\n").unwrap();
        assert_eq!(
            iv,
            vec![
                SeizureInterval {
                    start_s: 2996.0,
                    end_s: 3036.0
                },
                SeizureInterval {
                    start_s: 4000.5,
                    end_s: 4010.0
                }
            ]
        );
        assert!(parse_intervals("12\n").is_err());
    }

    #[test]
    fn balancing_carries_deficit() {
        let order = default_channel_order(2);
        let parts = vec![
            (ramp(2, 30, 0.0), ramp(2, 10, 1e6)),
            (ramp(2, 5, 0.0), ramp(2, 40, 2e6)),
            (ChannelMatrix::empty(2), ramp(2, 8, 3e6)),
        ];
        let raw = assemble_balanced(&parts, order.clone(), 3).unwrap();
        assert_eq!(raw.ictal.samples(), 35);
        assert_eq!(raw.interictal.samples(), 35);
        // every interictal value came from some interictal source, used once
        let mut seen: Vec<f64> = raw.interictal.row(0).to_vec();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 35);
        assert_eq!(raw, assemble_balanced(&parts, order.clone(), 3).unwrap());

        let short = vec![(ramp(2, 30, 0.0), ramp(2, 10, 1e6))];
        assert!(matches!(
            assemble_balanced(&short, order.clone(), 0),
            Err(Error::InsufficientInterictal {
                needed: 30,
                available: 10
            })
        ));
        let none = vec![(ChannelMatrix::empty(2), ramp(2, 10, 0.0))];
        assert!(matches!(
            assemble_balanced(&none, order, 0),
            Err(Error::NoIctal)
        ));
    }

    #[test]
    fn raw_format_round_trip() {
        let raw = RawClassData::new(
            ramp(18, 7, 0.5),
            ramp(18, 3, -9.25),
            default_channel_order(18),
        )
        .unwrap();
        let bytes = raw.encode();
        assert_eq!(RawClassData::decode(&bytes).unwrap(), raw);
        assert!(matches!(
            RawClassData::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            RawClassData::decode(&bad),
            Err(Error::BadMagic { .. })
        ));
    }
}
