//! Config-driven runs: data source -> segments -> train -> evaluate ->
//! report files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ingest_recordings, parse_intervals, RawClassData, RecordingSource};
use crate::models::{build_model, Model, ModelConfig, Variant};
use crate::preprocess::{
    build_segment_set, segment_len_samples, split, SegmentSet, DEFAULT_OVERLAP,
};
use crate::scalar::Scalar;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::tensor::checkpoint;
use crate::train::{evaluate, train_with, EpochRecord, History, Metrics, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingPaths {
    pub edf: PathBuf,
    pub intervals: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Generated from the `[synth]` table.
    #[default]
    Synth,
    Edf {
        recordings: Vec<RecordingPaths>,
    },
    /// A raw class-data file.
    Raw {
        path: PathBuf,
    },
    /// A segment-set file; its segment length must match `segment_len_s`.
    Segments {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub variants: Vec<Variant>,
    /// `[layers, heads]` pairs.
    #[serde(default)]
    pub depths: Vec<(usize, usize)>,
    #[serde(default)]
    pub segment_lens_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub segment_len_s: f64,
    pub overlap: f64,
    /// Drives model initialization, the split, shuffling and dropout.
    pub seed: u64,
    pub precision: Precision,
    pub data: DataSource,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Lct,
            layers: 1,
            heads: 2,
            segment_len_s: 0.5,
            overlap: DEFAULT_OVERLAP,
            seed: 0,
            precision: Precision::default(),
            data: DataSource::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML. Relative data paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        if let Some(v) = table.get("variant") {
            v.as_str()
                .ok_or_else(|| Error::config("variant", "must be a string"))?
                .parse::<Variant>()?;
        }
        let mut cfg: Self =
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    // "unknown field `x`" / "missing field `x`" name the field
                    let msg = e.message().to_string();
                    let field = match msg.split('`').nth(1) {
                        Some(f) if msg.contains(" field ") => f.to_string(),
                        _ => "config".to_string(),
                    };
                    Error::config(field, msg)
                })?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        match &mut cfg.data {
            DataSource::Synth => {}
            DataSource::Edf { recordings } => recordings.iter_mut().for_each(|r| {
                fix(&mut r.edf);
                fix(&mut r.intervals);
            }),
            DataSource::Raw { path } | DataSource::Segments { path } => fix(path),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        segment_len_samples(self.segment_len_s)?;
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config(
                "overlap",
                format!("{} is outside [0, 1)", self.overlap),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if matches!(self.data, DataSource::Synth) {
            self.synth.validate()?;
        }
        if let DataSource::Edf { recordings } = &self.data {
            if recordings.is_empty() {
                return Err(Error::config(
                    "data.recordings",
                    "list at least one recording",
                ));
            }
        }
        self.train.validate()?;
        if let Some(s) = &self.sweep {
            for &w in &s.segment_lens_s {
                segment_len_samples(w)?;
            }
            if s.depths.iter().any(|&(l, h)| l == 0 || h == 0) {
                return Err(Error::config(
                    "sweep.depths",
                    "layers and heads must be at least 1",
                ));
            }
        }
        Ok(())
    }

    /// Model configuration for `channels x len` segments.
    pub fn model_config(&self, channels: usize, len: usize) -> ModelConfig {
        let mut m = ModelConfig::preset(self.variant, self.layers, self.heads, channels, len);
        m.seed = self.seed;
        m
    }

    /// Every (variant, depth, segment length) the sweep covers; a single
    /// entry when there is no sweep.
    pub fn runs(&self) -> Vec<ExperimentConfig> {
        let Some(s) = &self.sweep else {
            return vec![self.clone()];
        };
        let variants = if s.variants.is_empty() {
            vec![self.variant]
        } else {
            s.variants.clone()
        };
        let depths = if s.depths.is_empty() {
            vec![(self.layers, self.heads)]
        } else {
            s.depths.clone()
        };
        let lens = if s.segment_lens_s.is_empty() {
            vec![self.segment_len_s]
        } else {
            s.segment_lens_s.clone()
        };
        let mut out = Vec::new();
        for &w in &lens {
            for &v in &variants {
                for &(l, h) in &depths {
                    out.push(ExperimentConfig {
                        variant: v,
                        layers: l,
                        heads: h,
                        segment_len_s: w,
                        sweep: None,
                        ..self.clone()
                    });
                }
            }
        }
        out
    }

    /// File-name stem, e.g. `lct-1-2-w0.5`.
    pub fn tag(&self) -> String {
        format!(
            "{}-{}-{}-w{}",
            self.variant, self.layers, self.heads, self.segment_len_s
        )
    }
}

/// Raw class data from a synthetic, EDF or raw-file source.
pub fn load_raw(cfg: &ExperimentConfig) -> Result<RawClassData> {
    match &cfg.data {
        DataSource::Synth => generate_synthetic(&cfg.synth),
        DataSource::Raw { path } => RawClassData::load(path),
        DataSource::Edf { recordings } => {
            let mut bytes = Vec::with_capacity(recordings.len());
            let mut intervals = Vec::with_capacity(recordings.len());
            for r in recordings {
                bytes.push(std::fs::read(&r.edf).map_err(|e| Error::io(&r.edf, e))?);
                let text = std::fs::read_to_string(&r.intervals)
                    .map_err(|e| Error::io(&r.intervals, e))?;
                intervals.push(parse_intervals(&text)?);
            }
            let sources: Vec<RecordingSource<'_>> = bytes
                .iter()
                .zip(&intervals)
                .map(|(edf, iv)| RecordingSource { edf, intervals: iv })
                .collect();
            ingest_recordings(&sources, cfg.seed)
        }
        DataSource::Segments { .. } => Err(Error::config(
            "data.source",
            "segment files hold no raw data",
        )),
    }
}

/// The labelled segment set a run trains on.
pub fn prepare_segments(cfg: &ExperimentConfig, raw: Option<&RawClassData>) -> Result<SegmentSet> {
    let len = segment_len_samples(cfg.segment_len_s)?;
    if let DataSource::Segments { path } = &cfg.data {
        let set = SegmentSet::load(path).map_err(|e| e.in_stage("preprocess"))?;
        if set.segment_len() != len {
            return Err(Error::config(
                "segment_len_s",
                format!(
                    "{} s is {len} samples but {} holds {}-sample segments",
                    cfg.segment_len_s,
                    path.display(),
                    set.segment_len()
                ),
            ));
        }
        return Ok(set);
    }
    let owned;
    let raw = match raw {
        Some(r) => r,
        None => {
            owned = load_raw(cfg).map_err(|e| e.in_stage("ingest"))?;
            &owned
        }
    };
    build_segment_set(raw, len, cfg.overlap).map_err(|e| e.in_stage("preprocess"))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub segment_len_s: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub epochs_run: usize,
    pub seconds: f64,
    pub best_epoch: usize,
    pub num_weights: usize,
    pub metrics: Metrics,
}

impl fmt::Display for RunReport {
    /// `key=value` pairs on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variant={} layers={} heads={} segment_len_s={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4} epochs_run={} seconds={:.1}",
            self.variant,
            self.layers,
            self.heads,
            self.segment_len_s,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.epochs_run,
            self.seconds
        )
    }
}

/// Trained model plus its history and test-set report.
pub struct RunOutcome<T: Scalar> {
    pub model: Model<T>,
    pub history: History,
    pub report: RunReport,
}

/// Split, train and evaluate one configuration on a prepared segment set.
pub fn run_on_segments<T: Scalar>(
    cfg: &ExperimentConfig,
    set: &SegmentSet,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome<T>> {
    let start = Instant::now();
    let splits = split(set, cfg.seed).map_err(|e| e.in_stage("preprocess"))?;
    let model_cfg = cfg.model_config(set.channels(), set.segment_len());
    let mut model = build_model::<T>(&model_cfg, model_cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let history =
        train_with(&mut model, &splits, &train_cfg, on_epoch).map_err(|e| e.in_stage("train"))?;
    let metrics = evaluate(&model, &splits.test, train_cfg.micro_batch)
        .map_err(|e| e.in_stage("evaluate"))?;
    let report = RunReport {
        variant: cfg.variant,
        layers: cfg.layers,
        heads: cfg.heads,
        segment_len_s: cfg.segment_len_s,
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        epochs_run: history.len(),
        seconds: start.elapsed().as_secs_f64(),
        best_epoch: history.best_epoch,
        num_weights: model.num_weights(),
        metrics,
    };
    Ok(RunOutcome {
        model,
        history,
        report,
    })
}

/// Paths written for one run inside the output directory.
pub struct RunFiles {
    pub model_config: PathBuf,
    pub params: PathBuf,
    pub history: PathBuf,
}

impl RunFiles {
    pub fn new(out: &Path, tag: &str) -> Self {
        Self {
            model_config: out.join(format!("{tag}.model.toml")),
            params: out.join(format!("{tag}.params")),
            history: out.join(format!("{tag}.history.csv")),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write checkpoint, model config and history for a finished run.
pub fn save_run<T: Scalar>(out: &Path, tag: &str, outcome: &RunOutcome<T>) -> Result<RunFiles> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = RunFiles::new(out, tag);
    write(&files.model_config, outcome.model.config.to_toml())?;
    checkpoint::save(&outcome.model.store, &files.params)?;
    write(&files.history, outcome.history.to_csv())?;
    Ok(files)
}

/// Rebuild a model from the files written by [`save_run`].
pub fn load_model<T: Scalar>(model_config: &Path, params: &Path) -> Result<Model<T>> {
    let text = std::fs::read_to_string(model_config).map_err(|e| Error::io(model_config, e))?;
    let cfg = ModelConfig::from_toml(&text)?;
    let mut model = build_model::<T>(&cfg, cfg.seed)?;
    checkpoint::load(&mut model.store, params)?;
    Ok(model)
}

/// `report.txt` (one line per run) and `metrics.json` (all runs).
pub fn write_reports(out: &Path, reports: &[RunReport]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let lines: String = reports.iter().map(|r| format!("{r}\n")).collect();
    write(&out.join("report.txt"), lines)?;
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    write(&out.join("metrics.json"), json + "\n")
}

fn run_one<T: Scalar>(
    cfg: &ExperimentConfig,
    set: &SegmentSet,
    out: &Path,
    on_epoch: &mut dyn FnMut(&ExperimentConfig, &EpochRecord),
) -> Result<RunReport> {
    let outcome = run_on_segments::<T>(cfg, set, |rec| on_epoch(cfg, rec))?;
    save_run(out, &cfg.tag(), &outcome)?;
    Ok(outcome.report)
}

/// Run every configuration of `cfg` (one, or the whole sweep), writing
/// per-run files and the combined reports into `out`. Segment sets are
/// built once per segment length.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    mut on_epoch: impl FnMut(&ExperimentConfig, &EpochRecord),
    mut on_run: impl FnMut(&RunReport),
) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let raw = match cfg.data {
        DataSource::Segments { .. } => None,
        _ => Some(load_raw(cfg).map_err(|e| e.in_stage("ingest"))?),
    };
    let mut reports = Vec::new();
    let mut cached: Option<(f64, SegmentSet)> = None;
    for run in cfg.runs() {
        if cached.as_ref().is_none_or(|(w, _)| *w != run.segment_len_s) {
            cached = Some((run.segment_len_s, prepare_segments(&run, raw.as_ref())?));
        }
        let set = &cached.as_ref().expect("just filled").1;
        let report = match run.precision {
            Precision::F32 => run_one::<f32>(&run, set, out, &mut on_epoch)?,
            Precision::F64 => run_one::<f64>(&run, set, out, &mut on_epoch)?,
        };
        on_run(&report);
        reports.push(report);
        write_reports(out, &reports)?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sweep_and_resolves_paths() {
        let text = r#"
            variant = "vit"
            segment_len_s = 1.0
            [data]
            source = "segments"
            path = "segs.bin"
            [train]
            max_epochs = 5
            early_stop_patience = 2
            [sweep]
            variants = ["vit", "lct"]
            depths = [[1, 2], [2, 2]]
            segment_lens_s = [0.5, 1.0, 2.0]
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("/data")).unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Segments {
                path: "/data/segs.bin".into()
            }
        );
        let runs = cfg.runs();
        assert_eq!(runs.len(), 12);
        assert_eq!(runs[0].tag(), "vit-1-2-w0.5");
        assert_eq!(runs[11].tag(), "lct-2-2-w2");
    }

    #[test]
    fn unknown_variant_names_field() {
        let err = ExperimentConfig::from_toml("variant = \"cnn\"\n", Path::new(".")).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "variant"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_line_has_fixed_keys() {
        let m = Metrics::from_counts(1, 0, 1, 0);
        let r = RunReport {
            variant: Variant::Lct,
            layers: 1,
            heads: 2,
            segment_len_s: 0.5,
            accuracy: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            epochs_run: 3,
            seconds: 1.25,
            best_epoch: 2,
            num_weights: 10,
            metrics: m,
        };
        let line = r.to_string();
        let keys: Vec<&str> = line
            .split(' ')
            .map(|kv| kv.split('=').next().unwrap())
            .collect();
        assert_eq!(
            keys,
            [
                "variant",
                "layers",
                "heads",
                "segment_len_s",
                "accuracy",
                "precision",
                "recall",
                "f1",
                "epochs_run",
                "seconds"
            ]
        );
    }
}
