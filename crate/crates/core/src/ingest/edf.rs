//! European Data Format (EDF) reader, plus a writer for building fixtures.
//!
//! Fixed header of 256 ASCII bytes, then 256 bytes of per-signal header
//! fields (laid out field-by-field across all signals), then data records.
//! Each record holds, for every signal in turn, `samples_per_record`
//! little-endian two's-complement 16-bit integers.

use crate::bytes::ByteReader;
use crate::error::{Error, Result};

use super::Recording;

/// Label of the EDF+ annotation pseudo-signal, which carries no samples.
pub const ANNOTATIONS_LABEL: &str = "EDF Annotations";

#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    /// Linear digital -> physical map.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let gain = (self.physical_max - self.physical_min)
            / f64::from(self.digital_max - self.digital_min);
        self.physical_min + (f64::from(digital) - f64::from(self.digital_min)) * gain
    }

    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATIONS_LABEL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub reserved: String,
    /// `-1` in the file means "unknown"; parsing replaces it with the count
    /// implied by the file length.
    pub num_records: i64,
    pub record_duration_s: f64,
    pub signals: Vec<SignalHeader>,
}

/// Parsed header plus the raw digital samples of every signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub digital: Vec<Vec<i16>>,
}

fn text(r: &mut ByteReader<'_>, len: usize) -> Result<String> {
    Ok(r.take(len)?
        .iter()
        .map(|&b| b as char)
        .collect::<String>()
        .trim_end()
        .to_string())
}

fn number<N: std::str::FromStr>(raw: &str, field: &'static str) -> Result<N> {
    raw.trim().parse::<N>().map_err(|_| Error::HeaderField {
        field,
        value: raw.to_string(),
    })
}

/// Decode header and digital samples.
pub fn decode(bytes: &[u8]) -> Result<EdfFile> {
    let mut r = ByteReader::new(bytes);
    let version = text(&mut r, 8)?;
    let patient_id = text(&mut r, 80)?;
    let recording_id = text(&mut r, 80)?;
    let start_date = text(&mut r, 8)?;
    let start_time = text(&mut r, 8)?;
    let header_bytes: usize = number(&text(&mut r, 8)?, "header_bytes")?;
    let reserved = text(&mut r, 44)?;
    let num_records: i64 = number(&text(&mut r, 8)?, "num_records")?;
    let record_duration_s: f64 = number(&text(&mut r, 8)?, "record_duration")?;
    let ns: usize = number(&text(&mut r, 4)?, "num_signals")?;
    if !(record_duration_s > 0.0) {
        return Err(Error::ZeroRecordDuration(record_duration_s));
    }
    if header_bytes != 256 * (ns + 1) {
        return Err(Error::HeaderField {
            field: "header_bytes",
            value: header_bytes.to_string(),
        });
    }

    let mut column =
        |len: usize| -> Result<Vec<String>> { (0..ns).map(|_| text(&mut r, len)).collect() };
    let labels = column(16)?;
    let transducers = column(80)?;
    let dims = column(8)?;
    let phys_min = column(8)?;
    let phys_max = column(8)?;
    let dig_min = column(8)?;
    let dig_max = column(8)?;
    let prefilter = column(80)?;
    let spr = column(8)?;
    let sig_reserved = column(32)?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: number(&phys_min[i], "physical_min")?,
            physical_max: number(&phys_max[i], "physical_max")?,
            digital_min: number(&dig_min[i], "digital_min")?,
            digital_max: number(&dig_max[i], "digital_max")?,
            prefiltering: prefilter[i].clone(),
            samples_per_record: number(&spr[i], "samples_per_record")?,
            reserved: sig_reserved[i].clone(),
        };
        if s.digital_min == s.digital_max && !s.is_annotation() {
            return Err(Error::DegenerateScaling {
                label: s.label,
                value: s.digital_min,
            });
        }
        signals.push(s);
    }

    let record_bytes: usize = signals.iter().map(|s| 2 * s.samples_per_record).sum();
    let num_records = if num_records < 0 {
        r.remaining().checked_div(record_bytes).unwrap_or(0) as i64
    } else {
        num_records
    };
    let mut digital: Vec<Vec<i16>> = signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * num_records as usize))
        .collect();
    for _ in 0..num_records {
        for (s, out) in signals.iter().zip(digital.iter_mut()) {
            let raw = r.take(2 * s.samples_per_record)?;
            out.extend(
                raw.chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]])),
            );
        }
    }

    Ok(EdfFile {
        header: EdfHeader {
            version,
            patient_id,
            recording_id,
            start_date,
            start_time,
            header_bytes,
            reserved,
            num_records,
            record_duration_s,
            signals,
        },
        digital,
    })
}

/// Parse an EDF byte stream into physical-unit channels. Annotation signals
/// are skipped; all remaining signals must share one sampling rate.
pub fn parse_edf(bytes: &[u8]) -> Result<Recording> {
    let file = decode(bytes)?;
    let h = &file.header;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut rate: Option<f64> = None;
    for (s, d) in h.signals.iter().zip(&file.digital) {
        if s.is_annotation() {
            continue;
        }
        let fs = s.samples_per_record as f64 / h.record_duration_s;
        match rate {
            None => rate = Some(fs),
            Some(r) if r != fs => {
                return Err(Error::Format {
                    what: "EDF",
                    reason: format!("signal `{}` sampled at {fs} Hz, expected {r} Hz", s.label),
                })
            }
            _ => {}
        }
        labels.push(s.label.clone());
        data.push(d.iter().map(|&v| s.to_physical(v)).collect());
    }
    let sampling_rate_hz = rate.ok_or_else(|| Error::Format {
        what: "EDF",
        reason: "no data signals".into(),
    })?;
    Recording::new(labels, sampling_rate_hz, data)
}

fn put(out: &mut Vec<u8>, value: &str, width: usize, field: &'static str) -> Result<()> {
    if !value.is_ascii() || value.len() > width {
        return Err(Error::HeaderField {
            field,
            value: value.to_string(),
        });
    }
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - value.len()));
    Ok(())
}

/// Shortest decimal text that parses back to `v`, if it fits in 8 characters.
fn format_number(v: f64, field: &'static str) -> Result<String> {
    let s = format!("{v}");
    if s.len() <= 8 {
        return Ok(s);
    }
    Err(Error::HeaderField { field, value: s })
}

/// Serialize a header and its digital samples. `num_records` and
/// `header_bytes` are written as given.
pub fn encode(file: &EdfFile) -> Result<Vec<u8>> {
    let h = &file.header;
    if file.digital.len() != h.signals.len() {
        return Err(Error::Format {
            what: "EDF",
            reason: "sample arrays do not match signal count".into(),
        });
    }
    let mut out = Vec::with_capacity(h.header_bytes);
    put(&mut out, &h.version, 8, "version")?;
    put(&mut out, &h.patient_id, 80, "patient_id")?;
    put(&mut out, &h.recording_id, 80, "recording_id")?;
    put(&mut out, &h.start_date, 8, "start_date")?;
    put(&mut out, &h.start_time, 8, "start_time")?;
    put(&mut out, &h.header_bytes.to_string(), 8, "header_bytes")?;
    put(&mut out, &h.reserved, 44, "reserved")?;
    put(&mut out, &h.num_records.to_string(), 8, "num_records")?;
    put(
        &mut out,
        &format_number(h.record_duration_s, "record_duration")?,
        8,
        "record_duration",
    )?;
    put(&mut out, &h.signals.len().to_string(), 4, "num_signals")?;
    let sig = &h.signals;
    for s in sig {
        put(&mut out, &s.label, 16, "label")?;
    }
    for s in sig {
        put(&mut out, &s.transducer, 80, "transducer")?;
    }
    for s in sig {
        put(&mut out, &s.physical_dimension, 8, "physical_dimension")?;
    }
    for s in sig {
        put(
            &mut out,
            &format_number(s.physical_min, "physical_min")?,
            8,
            "physical_min",
        )?;
    }
    for s in sig {
        put(
            &mut out,
            &format_number(s.physical_max, "physical_max")?,
            8,
            "physical_max",
        )?;
    }
    for s in sig {
        put(&mut out, &s.digital_min.to_string(), 8, "digital_min")?;
    }
    for s in sig {
        put(&mut out, &s.digital_max.to_string(), 8, "digital_max")?;
    }
    for s in sig {
        put(&mut out, &s.prefiltering, 80, "prefiltering")?;
    }
    for s in sig {
        put(
            &mut out,
            &s.samples_per_record.to_string(),
            8,
            "samples_per_record",
        )?;
    }
    for s in sig {
        put(&mut out, &s.reserved, 32, "reserved")?;
    }
    let records = h.num_records.max(0) as usize;
    for (s, d) in sig.iter().zip(&file.digital) {
        if d.len() != records * s.samples_per_record {
            return Err(Error::Format {
                what: "EDF",
                reason: format!(
                    "signal `{}` has {} samples, header implies {}",
                    s.label,
                    d.len(),
                    records * s.samples_per_record
                ),
            });
        }
    }
    for rec in 0..records {
        for (s, d) in sig.iter().zip(&file.digital) {
            let n = s.samples_per_record;
            for v in &d[rec * n..(rec + 1) * n] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Header for a fixture with identically configured signals.
pub fn fixture_header(
    labels: &[&str],
    samples_per_record: usize,
    num_records: i64,
    record_duration_s: f64,
) -> EdfHeader {
    EdfHeader {
        version: "0".into(),
        patient_id: "X X X X".into(),
        recording_id: "Startdate X X X X".into(),
        start_date: "01.01.01".into(),
        start_time: "00.00.00".into(),
        header_bytes: 256 * (labels.len() + 1),
        reserved: String::new(),
        num_records,
        record_duration_s,
        signals: labels
            .iter()
            .map(|l| SignalHeader {
                label: (*l).into(),
                transducer: String::new(),
                physical_dimension: "uV".into(),
                physical_min: -3200.0,
                physical_max: 3200.0,
                digital_min: -32768,
                digital_max: 32767,
                prefiltering: String::new(),
                samples_per_record,
                reserved: String::new(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_signal_fixture() -> EdfFile {
        let mut header = fixture_header(&["FP1-F7", "C3-P3"], 256, 1, 1.0);
        header.signals[1].physical_min = -100.0;
        header.signals[1].physical_max = 100.0;
        header.signals[1].digital_min = -2048;
        header.signals[1].digital_max = 2047;
        let a: Vec<i16> = (0..256).map(|i| (i * 97 % 2001) as i16 - 1000).collect();
        let b: Vec<i16> = (0..256).map(|i| (i * 13 % 4095) as i16 - 2048).collect();
        EdfFile {
            header,
            digital: vec![a, b],
        }
    }

    #[test]
    fn parses_rate_and_channels() {
        let bytes = encode(&two_signal_fixture()).unwrap();
        assert_eq!(bytes.len(), 256 * 3 + 2 * 256 * 2);
        let rec = parse_edf(&bytes).unwrap();
        assert_eq!(rec.sampling_rate_hz, 256.0);
        assert_eq!(rec.channel_labels, vec!["FP1-F7", "C3-P3"]);
        assert_eq!(rec.data[0].len(), 256);
        assert_eq!(rec.duration_s, 1.0);
    }

    #[test]
    fn short_file_is_truncated() {
        assert!(matches!(
            parse_edf(&[b' '; 100]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn missing_samples_are_truncated() {
        let bytes = encode(&two_signal_fixture()).unwrap();
        assert!(matches!(
            parse_edf(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn bad_numeric_field() {
        let mut bytes = encode(&two_signal_fixture()).unwrap();
        bytes[244..252].copy_from_slice(b"one     ");
        assert!(matches!(
            parse_edf(&bytes),
            Err(Error::HeaderField {
                field: "record_duration",
                ..
            })
        ));
    }

    #[test]
    fn zero_duration_and_degenerate_scaling() {
        let mut f = two_signal_fixture();
        f.header.record_duration_s = 0.0;
        assert!(matches!(
            parse_edf(&encode(&f).unwrap()),
            Err(Error::ZeroRecordDuration(_))
        ));
        let mut f = two_signal_fixture();
        f.header.signals[0].digital_max = f.header.signals[0].digital_min;
        assert!(matches!(
            parse_edf(&encode(&f).unwrap()),
            Err(Error::DegenerateScaling { .. })
        ));
    }

    #[test]
    fn annotations_are_skipped_and_unknown_record_count_inferred() {
        let mut f = two_signal_fixture();
        f.header = fixture_header(&["FP1-F7", ANNOTATIONS_LABEL], 256, -1, 1.0);
        f.header.signals[1].samples_per_record = 4;
        f.header.signals[1].digital_min = -32768;
        f.digital[1] = vec![0; 4];
        let mut enc = f.clone();
        enc.header.num_records = 1;
        let mut bytes = encode(&enc).unwrap();
        bytes[236..244].copy_from_slice(b"-1      ");
        let parsed = decode(&bytes).unwrap();
        assert_eq!(parsed.header.num_records, 1);
        let rec = parse_edf(&bytes).unwrap();
        assert_eq!(rec.channel_labels, vec!["FP1-F7"]);
    }
}
