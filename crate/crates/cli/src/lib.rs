//! `bsp-mpnet` subcommands. Exit codes: 0 success, 2 usage or configuration
//! problems, 3 runtime failures.

mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bspmpnet::checkpoint::Checkpoint;
use bspmpnet::config::RunConfig;
use bspmpnet::data::{self, load_manifest, load_pair, load_pairs, synth_dataset, NoiseKind, SynthSpec};
use bspmpnet::metrics::{score_pair, EvalReport, ExternalMetric, MetricSet, UtteranceScores};
use bspmpnet::model::BspMpnet;
use bspmpnet::train::{TrainData, Trainer};
use bspmpnet::wav::{read_wav_at, write_wav, SampleFormat};
use bspmpnet::Error;
use clap::{Parser, Subcommand, ValueEnum};

pub const DEVICE_ENV: &str = "BSP_MPNET_DEVICE";
pub const RUN_CONFIG_ECHO: &str = "run_config.toml";

#[derive(Parser, Debug)]
#[command(name = "bsp-mpnet", version, about = "Dual-path magnitude/phase speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run configuration.
    Train {
        /// TOML run configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override such as `loss.lambda2=0.5`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory for checkpoints, the loss log and the config echo.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file or every entry of a JSONL manifest.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.wav` file or a `.jsonl` manifest.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score (clean, enhanced) pairs listed in a JSONL manifest.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values = ["si_snr", "cosine", "llr", "stoi"])]
        metrics: Vec<Metric>,
        /// External scorer `NAME=COMMAND`; `{clean}` and `{enhanced}` are substituted.
        #[arg(long = "external", value_name = "NAME=COMMAND")]
        external: Vec<String>,
    },
    /// Export the normalised SSL layer weights as CSV and a bar chart.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic noisy/clean corpus with a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Noise::White)]
        noise: Noise,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 5.0, 10.0, 15.0])]
        snrs: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    #[value(name = "si_snr")]
    SiSnr,
    Cosine,
    Llr,
    Stoi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    White,
    Babble,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Checkpoint(_) | Error::Json(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Training { .. } | Error::Io { .. } => 3,
    }
}

fn check_device() -> Result<(), Error> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => {
            Err(Error::config(format!("{DEVICE_ENV}={d} is not supported; this build runs on `cpu` only")))
        }
        _ => Ok(()),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match check_device().and_then(|_| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train { config, overrides, out, resume } => cmd_train(config.as_deref(), &overrides, &out, resume.as_deref()),
        Command::Enhance { checkpoint, input, out } => cmd_enhance(&checkpoint, &input, &out),
        Command::Evaluate { pairs, out, metrics, external } => cmd_evaluate(&pairs, &out, &metrics, &external),
        Command::Analyze { checkpoint, out } => cmd_analyze(&checkpoint, &out),
        Command::SynthData { out, count, seconds, seed, noise, snrs } => {
            let noise = match noise {
                Noise::White => NoiseKind::White,
                Noise::Babble => NoiseKind::Babble,
            };
            let spec = SynthSpec { count, seconds, snrs_db: snrs, noise, seed, ..SynthSpec::default() };
            let entries = synth_dataset(&spec, &out)?;
            println!("wrote {} utterances and {}", entries.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_train(config: Option<&Path>, overrides: &[String], out: &Path, resume: Option<&Path>) -> Result<(), Error> {
    let cfg = RunConfig::load(config, overrides)?;
    let train_path = cfg.data.train_manifest.clone().ok_or_else(|| Error::config("data.train_manifest is not set"))?;
    let valid_path = cfg.data.valid_manifest.clone().unwrap_or_else(|| {
        eprintln!("note: data.valid_manifest is not set, validating on the training manifest");
        train_path.clone()
    });
    let sr = cfg.model.stft.sample_rate;
    let train_entries = load_manifest(&train_path)?;
    let valid_entries = load_manifest(&valid_path)?;
    for (name, entries) in [("training", &train_entries), ("validation", &valid_entries)] {
        if entries.is_empty() {
            return Err(Error::input(format!("{name} manifest is empty")));
        }
        let missing = data::missing_files(entries);
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
            return Err(Error::input(format!("{name} manifest references missing files: {}", list.join(", "))));
        }
    }
    let train = TrainData::load(&train_entries, sr)?;
    let valid = TrainData::load(&valid_entries, sr)?;

    create_dir(out)?;
    let echo = out.join(RUN_CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml()?).map_err(|e| Error::io(&echo, e))?;

    let model = BspMpnet::new(cfg.model.clone())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, model, cfg.train.clone(), cfg.loss.clone())?,
        None => Trainer::new(model, cfg.train.clone(), cfg.loss.clone())?,
    };
    eprintln!(
        "training {} trainable parameters on {} utterances ({} validation)",
        bspmpnet::nn::Module::trainable_count(&trainer.model),
        train.len(),
        valid.len()
    );
    let report = trainer.fit(&train, &valid, out)?;
    for e in &report.epochs {
        println!("epoch {:>4}  loss {:.5}  valid SI-SNR {:.3} dB", e.epoch, e.mean_loss, e.valid_si_snr.unwrap_or(f64::NAN));
    }
    println!("{} steps; checkpoints in {}", report.steps.len(), out.display());
    Ok(())
}

fn enhance_targets(input: &Path) -> Result<Vec<(String, PathBuf)>, Error> {
    let is_manifest = input.extension().is_some_and(|e| e == "jsonl");
    if !is_manifest {
        let name = input.file_name().ok_or_else(|| Error::input(format!("{} is not a file", input.display())))?;
        return Ok(vec![(name.to_string_lossy().into_owned(), input.to_path_buf())]);
    }
    let entries = load_manifest(input)?;
    if entries.is_empty() {
        return Err(Error::input(format!("{} lists no utterances", input.display())));
    }
    Ok(entries
        .into_iter()
        .map(|e| {
            let name = match &e.noisy {
                Some(p) => p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| format!("{}.wav", e.id)),
                None => format!("{}.wav", e.id),
            };
            (name, e.noisy.clone().unwrap_or_default())
        })
        .collect())
}

pub fn cmd_enhance(checkpoint: &Path, input: &Path, out: &Path) -> Result<(), Error> {
    let model = Checkpoint::load(checkpoint)?.build_model()?;
    let sr = model.config.stft.sample_rate;
    let manifest = input.extension().is_some_and(|e| e == "jsonl");
    let entries = if manifest { load_manifest(input)? } else { Vec::new() };
    let targets = enhance_targets(input)?;
    create_dir(out)?;
    for (i, (name, path)) in targets.iter().enumerate() {
        let noisy = if manifest && entries[i].noisy.is_none() {
            load_pair(&entries[i], sr)?.1
        } else {
            read_wav_at(path, sr)?
        };
        let start = Instant::now();
        let enhanced = model.enhance(&noisy)?;
        let secs = start.elapsed().as_secs_f64();
        let dest = out.join(name);
        write_wav(&dest, &enhanced.wave, SampleFormat::Pcm16)?;
        println!("{name}\tRTF {:.4}", secs / noisy.duration_secs().max(f64::MIN_POSITIVE));
    }
    Ok(())
}

pub fn cmd_evaluate(pairs: &Path, out: &Path, metrics: &[Metric], external: &[String]) -> Result<(), Error> {
    let entries = load_pairs(pairs)?;
    if entries.is_empty() {
        return Err(Error::input(format!("{} lists no pairs", pairs.display())));
    }
    let missing: Vec<String> = entries
        .iter()
        .flat_map(|e| [&e.clean, &e.enhanced])
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        for m in &missing {
            eprintln!("missing: {m}");
        }
        return Err(Error::input(format!("{} files listed in {} do not exist", missing.len(), pairs.display())));
    }
    let set = MetricSet {
        si_snr: metrics.contains(&Metric::SiSnr),
        cosine: metrics.contains(&Metric::Cosine),
        llr: metrics.contains(&Metric::Llr),
        stoi: metrics.contains(&Metric::Stoi),
        external: external.iter().map(|s| ExternalMetric::parse(s)).collect::<Result<_, _>>()?,
    };
    let stft = bspmpnet::dsp::StftConfig::default();
    let mut report = EvalReport::default();
    for e in &entries {
        let scores = score_pair(&e.clean, &e.enhanced, &set, &stft)?;
        report.utterances.push(UtteranceScores { id: e.id.clone(), scores });
    }
    create_dir(out)?;
    report.write(&out.join("report.csv"), &out.join("report.json"))?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn cmd_analyze(checkpoint: &Path, out: &Path) -> Result<(), Error> {
    let model = Checkpoint::load(checkpoint)?.build_model()?;
    let (mag, pha) = model.layer_weights();
    if mag.is_none() && pha.is_none() {
        return Err(Error::config(format!("{} has no FS-SSL layer-weight section", checkpoint.display())));
    }
    create_dir(out)?;
    let csv_path = out.join("layer_weights.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    w.write_record(["path", "layer", "weight"]).map_err(csv_err)?;
    for (path, weights) in [("magnitude", &mag), ("phase", &pha)] {
        for (i, v) in weights.iter().flatten().enumerate() {
            w.write_record([path, &i.to_string(), &format!("{v}")]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let png = out.join("layer_weights.png");
    plot::layer_weight_chart(mag.as_deref().unwrap_or(&[]), pha.as_deref().unwrap_or(&[]))
        .save(&png)
        .map_err(|e| Error::io(&png, std::io::Error::other(e)))?;
    println!("wrote {} and {}", csv_path.display(), png.display());
    Ok(())
}
