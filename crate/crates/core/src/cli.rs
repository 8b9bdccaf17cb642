//! Command-line front end. `main.rs` only forwards to [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapt::{self_supervised_adapt, AdaptationSet, MultiSensorDataset, SensorData, record_sensor};
use crate::config::{render_key_listing, RunConfig, SimulateProtocol, OUTPUT_ENV};
use crate::datagen::{record_snake_session, shear_drag_protocol, Dataset, SnakeGridParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_report, EvalReport, FoldResult, ReportFormat};
use crate::experiments::{run_preset, Preset};
use crate::field_sim::{make_sensor, VariationParams};
use crate::neural::{fit_decoder, MlpModel};
use crate::protocol::{decode_stream, encode_stream, replay_schedule, write_csv, FluxFrame};

#[derive(Debug, Parser)]
#[command(name = "magskin", version, about = "Simulate, train, adapt and evaluate magnetic skin decoders")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set crossval.train.epochs=20`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for parallel folds and sensors.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record labeled datasets and adaptation lines for the configured fleet.
    Simulate(SimulateArgs),
    /// Train a decoder on one dataset (random split) or several (pooled).
    Train(TrainArgs),
    /// Adapt a model to a new skin from unlabeled lines.
    Adapt(AdaptArgs),
    /// Evaluate a model on datasets and write reports.
    Eval(EvalArgs),
    /// Wire-format streams.
    #[command(subcommand)]
    Stream(StreamCommand),
    /// Named experiments.
    #[command(subcommand)]
    Presets(PresetCommand),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only the first fleet sensor.
    #[arg(long)]
    pub single: bool,
    /// Snake-grid passes per sensor.
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<SimulateProtocol>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset files.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adaptation set JSON written by `simulate`.
    #[arg(long)]
    pub adaptation: PathBuf,
    /// Labeled source datasets.
    #[arg(long, required = true, num_args = 1..)]
    pub source: Vec<PathBuf>,
    /// Indentations to use; 0 copies the model unchanged.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = "Model")]
    pub label: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StreamCommand {
    /// Simulate a snake-grid session and write it in wire format.
    Record {
        #[arg(long)]
        out: PathBuf,
        /// Also write the frames as a CSV log.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Decode a wire-format file to CSV; diagnostics go to stderr.
    Decode {
        #[arg(long)]
        input: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit decoded frames as CSV lines at their recorded pace.
    Replay {
        #[arg(long)]
        input: PathBuf,
        /// Rate cap in Hz; 0 disables the cap.
        #[arg(long)]
        rate_hz: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PresetCommand {
    List,
    /// Print the preset's resolved config.
    Show { name: String },
    Run {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> std::result::Result<SimulateProtocol, String> {
    match s {
        "snake_grid" => Ok(SimulateProtocol::SnakeGrid),
        "shear_drag" => Ok(SimulateProtocol::ShearDrag),
        _ => Err("expected snake_grid or shear_drag".into()),
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::InvalidGeometry(_)
        | Error::InvalidContact(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyInput(_)
        | Error::MissingBaseline => 2,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::Singularity => 4,
    }
}

/// Parse arguments, run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let after = format!("Default output root: ${OUTPUT_ENV} or ./runs\n\n{}", render_key_listing());
    let cmd = <Cli as clap::CommandFactory>::command().after_help(after);
    let cli = match cmd.try_get_matches_from(args).and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        c.apply_override(o)?;
    }
    Ok(c)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        // fails only if a pool already exists, which keeps the earlier setting
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Simulate(a) => {
            if let Some(p) = a.passes {
                config.fleet.passes = p;
            }
            if let Some(p) = a.protocol {
                config.simulate.protocol = p;
            }
            config.simulate.single |= a.single;
            cmd_simulate(&config, a.out)
        }
        Command::Train(a) => cmd_train(&config, &a),
        Command::Adapt(a) => cmd_adapt(&config, &a),
        Command::Eval(a) => cmd_eval(&config, &a),
        Command::Stream(s) => cmd_stream(&mut config, s),
        Command::Presets(p) => cmd_presets(&config, p),
    }
}

fn out_dir(config: &RunConfig, label: &str, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| config.run_dir(label));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct SimulatedSensor {
    sensor_id: String,
    samples: usize,
    dataset: String,
    dataset_hash: String,
    adaptation: Option<String>,
    adaptation_points: usize,
}

#[derive(Serialize)]
struct SimulateManifest {
    config_hash: String,
    protocol: String,
    sensors: Vec<SimulatedSensor>,
}

fn cmd_simulate(config: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let config = config.resolved();
    let dir = out_dir(&config, "simulate", out)?;
    let spec = &config.fleet;
    let mut sensors = spec.fleet.build(&spec.geometry, &spec.physics)?;
    if config.simulate.single {
        sensors.truncate(1);
    }
    use rayon::prelude::*;
    let recorded: Vec<(Dataset, Option<AdaptationSet>)> = sensors
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| match config.simulate.protocol {
            SimulateProtocol::SnakeGrid => record_sensor(spec, s, i as u64).map(|r| (r.dataset, Some(r.adaptation))),
            SimulateProtocol::ShearDrag => {
                let mut s = s;
                let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                shear_drag_protocol(&mut s, &config.simulate.shear, spec.baseline, seed).map(|d| (d, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut manifest = SimulateManifest {
        config_hash: config.hash(),
        protocol: serde_json::to_value(config.simulate.protocol)?.as_str().unwrap_or_default().to_string(),
        sensors: Vec::new(),
    };
    for (dataset, adaptation) in recorded {
        let id = dataset.metadata.sensor_ids[0].clone();
        let file = format!("{id}.msd");
        dataset.save(&dir.join(&file))?;
        let mut entry = SimulatedSensor {
            sensor_id: id.clone(),
            samples: dataset.len(),
            dataset: file,
            dataset_hash: dataset.metadata.config_hash.clone(),
            adaptation: None,
            adaptation_points: 0,
        };
        if let Some(a) = adaptation {
            let file = format!("{id}.adapt.json");
            std::fs::write(dir.join(&file), serde_json::to_vec(&a)?)?;
            entry.adaptation = Some(file);
            entry.adaptation_points = a.budget;
        }
        manifest.sensors.push(entry);
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    println!("wrote {} datasets to {}", manifest.sensors.len(), dir.display());
    Ok(())
}

/// Prefix I/O errors with the offending path.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| at_path(p, Dataset::load(p))).collect()
}

fn load_model(path: &Path) -> Result<MlpModel> {
    at_path(path, MlpModel::load(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    at_path(path, std::fs::read(path).map_err(Error::from))
}

/// `b{board}s{skin}` ids map to their board; anything else gets its own board.
fn sensor_data(datasets: Vec<Dataset>) -> Result<MultiSensorDataset> {
    let sensors = datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let id = d.metadata.sensor_ids.join("+");
            let parsed = id
                .strip_prefix('b')
                .and_then(|r| r.split_once('s'))
                .and_then(|(b, s)| Some((b.parse().ok()?, s.parse().ok()?)));
            let (board, skin) = parsed.unwrap_or((1_000 + i, 0));
            SensorData {
                sensor_id: id,
                board,
                skin,
                dataset: d,
            }
        })
        .collect();
    MultiSensorDataset::new(sensors, Vec::new())
}

fn same_protocol(datasets: &[Dataset]) -> Result<crate::neural::OutputKind> {
    let kind = datasets[0].metadata.protocol.output_kind();
    if datasets.iter().any(|d| d.metadata.protocol.output_kind() != kind) {
        return Err(Error::Config("datasets mix protocols with different label layouts".into()));
    }
    Ok(kind)
}

fn cmd_train(config: &RunConfig, a: &TrainArgs) -> Result<()> {
    let config = config.resolved();
    let datasets = load_datasets(&a.data)?;
    let kind = same_protocol(&datasets)?;
    let dir = out_dir(&config, "train", a.out.clone())?;
    let (model, log) = if datasets.len() == 1 {
        let d = &datasets[0];
        let (train, test) = d.split_random(1.0 - config.split.test_fraction, config.split.seed);
        let test = Dataset {
            samples: test,
            metadata: d.metadata.clone(),
        };
        test.save(&dir.join("test.msd"))?;
        fit_decoder(&train, &[], kind, &config.train, false)?
    } else {
        let data = sensor_data(datasets)?;
        fit_decoder(&data.pooled(), &[], kind, &config.train, config.split.use_triplet)?
    };
    model.save(&dir.join("model.bin"))?;
    log.write_csv(std::fs::File::create(dir.join("train_log.csv"))?)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    println!("wrote {}", dir.join("model.bin").display());
    Ok(())
}

fn cmd_adapt(config: &RunConfig, a: &AdaptArgs) -> Result<()> {
    let config = config.resolved();
    let set: AdaptationSet = serde_json::from_slice(&read_file(&a.adaptation)?)?;
    let set = match a.budget {
        Some(b) => set.truncated(b),
        None => set,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    if set.is_empty() {
        at_path(&a.model, std::fs::copy(&a.model, &a.out).map_err(Error::from))?;
        println!("empty adaptation budget; copied {}", a.model.display());
        return Ok(());
    }
    let model = load_model(&a.model)?;
    let source = sensor_data(load_datasets(&a.source)?)?;
    let (adapted, log) = self_supervised_adapt(&model, &set, &source, &config.crossval.adapt)?;
    adapted.save(&a.out)?;
    let log_path = a.out.with_extension("log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    println!("wrote {} after {} epochs", a.out.display(), log.epochs.len());
    Ok(())
}

fn cmd_eval(config: &RunConfig, a: &EvalArgs) -> Result<()> {
    let config = config.resolved();
    let model = load_model(&a.model)?;
    let datasets = load_datasets(&a.data)?;
    let kind = same_protocol(&datasets)?;
    let out_dim = model.arch.dims.last().copied().unwrap_or(0);
    if out_dim != kind.dim() {
        return Err(Error::DimensionMismatch {
            expected: kind.dim(),
            got: out_dim,
        });
    }
    let folds = datasets
        .iter()
        .map(|d| Ok(FoldResult::new(d.metadata.sensor_ids.join("+"), evaluate(&model, &d.samples)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::aggregate(a.label.clone(), folds, config.hash())?;
    let dir = out_dir(&config, "eval", a.out.clone())?;
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        std::fs::write(dir.join(format!("report.{}", f.extension())), render_report(std::slice::from_ref(&report), f)?)?;
    }
    print!("{}", render_report(&[report], ReportFormat::Markdown)?);
    Ok(())
}

fn write_frames_csv(frames: &[FluxFrame], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_csv(frames, std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => write_csv(frames, std::io::stdout().lock()),
    }
}

fn cmd_stream(config: &mut RunConfig, cmd: StreamCommand) -> Result<()> {
    match cmd {
        StreamCommand::Record { out, csv, passes } => {
            if let Some(p) = passes {
                config.stream.passes = p;
            }
            let config = config.resolved();
            let mut sensor = make_sensor(
                "stream0",
                &config.fleet.geometry,
                &VariationParams::default(),
                &config.fleet.physics,
                config.stream.sensor_seed,
            )?;
            let params = SnakeGridParams::with_passes(config.stream.passes);
            let (frames, _) = record_snake_session(&mut sensor, &params, config.stream.sensor_seed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, encode_stream(&frames))?;
            if let Some(c) = csv {
                write_frames_csv(&frames, Some(&c))?;
            }
            eprintln!("recorded {} frames to {}", frames.len(), out.display());
        }
        StreamCommand::Decode { input, out } => {
            let (frames, diag) = decode_stream(&read_file(&input)?);
            write_frames_csv(&frames, out.as_deref())?;
            eprintln!(
                "frames={} crc_failures={} skipped_bytes={} timestamp_regressions={}",
                diag.frames, diag.crc_failures, diag.skipped_bytes, diag.timestamp_regressions
            );
        }
        StreamCommand::Replay { input, rate_hz } => {
            let (frames, diag) = decode_stream(&read_file(&input)?);
            let rate = rate_hz.unwrap_or(config.stream.rate_hz);
            let schedule = replay_schedule(&frames, Some(rate).filter(|r| *r > 0.0));
            let stdout = std::io::stdout();
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(crate::protocol::csv_header())?;
            let t0 = Instant::now();
            for (frame, at) in frames.iter().zip(&schedule) {
                if let Some(wait) = at.checked_sub(t0.elapsed()) {
                    std::thread::sleep(wait);
                }
                let mut row = vec![frame.timestamp_us.to_string()];
                for chip in &frame.chips {
                    row.extend(chip.fields().iter().map(|v| v.to_string()));
                }
                w.write_record(&row)?;
                w.flush()?;
            }
            eprintln!(
                "replayed {} frames in {:.3} s (crc_failures={})",
                frames.len(),
                t0.elapsed().as_secs_f64(),
                diag.crc_failures
            );
        }
    }
    Ok(())
}

fn cmd_presets(config: &RunConfig, cmd: PresetCommand) -> Result<()> {
    match cmd {
        PresetCommand::List => {
            let mut out = std::io::stdout().lock();
            for p in Preset::ALL {
                writeln!(out, "{:<20} {}", p.name(), p.description())?;
            }
        }
        PresetCommand::Show { name } => {
            let p: Preset = name.parse()?;
            print!("{}", p.config(config).resolved().to_toml()?);
        }
        PresetCommand::Run { name, out } => {
            let p: Preset = name.parse()?;
            let resolved = p.config(config);
            let t = Instant::now();
            let output = run_preset(p, &resolved)?;
            let dir = out.unwrap_or_else(|| resolved.run_dir(p.name()));
            output.write_to(&dir)?;
            if let Some(md) = output.files.get("report.md").or_else(|| output.files.get("drift.md")) {
                print!("{}", String::from_utf8_lossy(md));
            }
            eprintln!("{} finished in {:.1} s; outputs in {}", p.name(), t.elapsed().as_secs_f64(), dir.display());
        }
    }
    Ok(())
}
