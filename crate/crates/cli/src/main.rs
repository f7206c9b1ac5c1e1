use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lct_core::experiment::{
    load_model, prepare_segments, run_experiment, DataSource, ExperimentConfig, Precision,
    RecordingPaths,
};
use lct_core::ingest::RawClassData;
use lct_core::models::{Model, Variant};
use lct_core::preprocess::{split, SegmentSet, SAMPLING_RATE_HZ};
use lct_core::train::evaluate;
use lct_core::{Error, ErrorKind, Result, Scalar};

#[derive(Parser)]
#[command(
    name = "lct",
    version,
    about = "Transformer EEG seizure classifiers: data preparation, training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic two-class EEG and write it as raw class data.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Read EDF recordings and seizure intervals into raw class data.
    Ingest {
        /// EDF file; repeat together with --intervals for several recordings.
        #[arg(long = "edf", required = true)]
        edf: Vec<PathBuf>,
        /// Seizure-interval file (`start_s end_s` per line), one per --edf.
        #[arg(long = "intervals", required = true)]
        intervals: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Normalize, segment and split raw class data into segment-set files.
    Prep {
        /// Raw class-data file.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and evaluate it on the held-out test split.
    Train {
        /// Segment-set file; without it the config's data source is used.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a saved model on a segment-set file.
    Eval {
        /// Model config written by `train` (`<tag>.model.toml`).
        #[arg(long)]
        model: PathBuf,
        /// Parameter file; defaults to the model config's `<tag>.params` sibling.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Segment-set file to score.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        /// Directory for `metrics.json`; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every combination listed in the config's `[sweep]` table.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "segment-len-s")]
    segment_len_s: Option<f64>,
    /// Fraction of overlap between consecutive segments [default: 0.25].
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.variant {
            cfg.variant = v.parse::<Variant>()?;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(w) = self.segment_len_s {
            cfg.segment_len_s = w;
        }
        if let Some(o) = self.overlap {
            cfg.overlap = o;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p.into();
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
            cfg.train.early_stop_patience = cfg.train.early_stop_patience.min(e);
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_raw(raw: &RawClassData, out: &Path) -> Result<()> {
    create_dir(out)?;
    let path = out.join("raw.bin");
    raw.save(&path)?;
    println!(
        "wrote {} ({} channels, {} interictal + {} ictal samples)",
        path.display(),
        raw.interictal.channels(),
        raw.interictal.samples(),
        raw.ictal.samples()
    );
    Ok(())
}

fn progress(cfg: &ExperimentConfig, rec: &lct_core::train::EpochRecord) {
    eprintln!(
        "[{}] epoch {:>3}  lr {:.0e}  train {:.4}  val {:.4}  val_acc {:.4}",
        cfg.tag(),
        rec.epoch,
        rec.lr,
        rec.train_loss,
        rec.val_loss,
        rec.val_accuracy
    );
}

fn eval_with<T: Scalar>(
    model_cfg: &Path,
    params: &Path,
    set: &SegmentSet,
) -> Result<(Model<T>, lct_core::train::Metrics)> {
    let model = load_model::<T>(model_cfg, params)?;
    let c = &model.config;
    if set.channels() != c.input_channels || set.segment_len() != c.input_len {
        return Err(Error::config(
            "input",
            format!(
                "model expects {}x{} segments, file holds {}x{}",
                c.input_channels,
                c.input_len,
                set.channels(),
                set.segment_len()
            ),
        ));
    }
    let metrics = evaluate(&model, set, 64)?;
    Ok((model, metrics))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.experiment()?;
            let raw = lct_core::synth::generate_synthetic(&cfg.synth)?;
            save_raw(&raw, &common.out)
        }
        Command::Ingest {
            edf,
            intervals,
            common,
        } => {
            if edf.len() != intervals.len() {
                return Err(Error::config(
                    "intervals",
                    "give one --intervals file per --edf file",
                ));
            }
            let mut cfg = common.experiment()?;
            cfg.data = DataSource::Edf {
                recordings: edf
                    .into_iter()
                    .zip(intervals)
                    .map(|(edf, intervals)| RecordingPaths { edf, intervals })
                    .collect(),
            };
            let raw = lct_core::experiment::load_raw(&cfg)?;
            save_raw(&raw, &common.out)
        }
        Command::Prep { input, common } => {
            let mut cfg = common.experiment()?;
            cfg.data = DataSource::Raw { path: input };
            let set = prepare_segments(&cfg, None)?;
            let splits = split(&set, cfg.seed)?;
            create_dir(&common.out)?;
            for (name, s) in [
                ("segments", &set),
                ("train", &splits.train),
                ("val", &splits.val),
                ("test", &splits.test),
            ] {
                let path = common.out.join(format!("{name}.bin"));
                s.save(&path)?;
                println!(
                    "wrote {} ({} segments of {}x{})",
                    path.display(),
                    s.len(),
                    s.channels(),
                    s.segment_len()
                );
            }
            Ok(())
        }
        Command::Train { input, common } => {
            let mut cfg = common.experiment()?;
            cfg.sweep = None;
            if let Some(path) = input {
                cfg.data = DataSource::Segments { path };
            }
            run_experiment(&cfg, &common.out, progress, |r| println!("{r}"))?;
            Ok(())
        }
        Command::Sweep { common } => {
            let cfg = common.experiment()?;
            if cfg.sweep.is_none() {
                return Err(Error::config("sweep", "config has no [sweep] table"));
            }
            run_experiment(&cfg, &common.out, progress, |r| println!("{r}"))?;
            Ok(())
        }
        Command::Eval {
            model,
            params,
            input,
            precision,
            out,
        } => {
            let params = params.unwrap_or_else(|| {
                let name = model
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default();
                model.with_file_name(format!("{}.params", name.trim_end_matches(".model.toml")))
            });
            let set = SegmentSet::load(&input)?;
            let (config, metrics) = match precision.map(Precision::from).unwrap_or_default() {
                Precision::F32 => {
                    eval_with::<f32>(&model, &params, &set).map(|(m, x)| (m.config, x))?
                }
                Precision::F64 => {
                    eval_with::<f64>(&model, &params, &set).map(|(m, x)| (m.config, x))?
                }
            };
            println!(
                "variant={} layers={} heads={} segment_len_s={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4} tp={} fp={} tn={} fn={}",
                config.variant,
                config.encoder_layers,
                config.heads,
                config.input_len as f64 / SAMPLING_RATE_HZ,
                metrics.accuracy,
                metrics.precision,
                metrics.recall,
                metrics.f1,
                metrics.tp,
                metrics.fp,
                metrics.tn,
                metrics.fn_
            );
            if let Some(dir) = out {
                create_dir(&dir)?;
                let path = dir.join("metrics.json");
                let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
                std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
