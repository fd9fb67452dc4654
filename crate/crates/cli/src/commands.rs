use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use chrono::Timelike;
use serde::Serialize;
use stagecast::dataset::{build_dataset as build, split, TimeRange, DatasetError};
use stagecast::ingestion::{format_utc, parse_utc};
use stagecast::models::ModelError;
use stagecast::sensor_network::GraphSpec;
use stagecast::synthetic::{gen_world, GRAPH_FILE, PRECIP_FILE, STAGE_FILE};
use stagecast::training::{self, TrainError};
use stagecast::{
    Checkpoint, Dataset, DatasetVariant, ModelConfig, Network, PrecipFieldSeries, SensorGraph, SensorId,
    StageSeries,
};

use crate::config::{self, DataConfig, ModelKind, RunConfig};
use crate::error::CliError;
use crate::manifest::{sidecar, RunManifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "checkpoint-last-good.bin";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
}

fn open(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn with_path<E: Into<CliError>>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| match e.into() {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::from_bytes(&read_bytes(path)?).map_err(with_path::<DatasetError>(path))
}

fn read_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, CliError> {
    let bytes = read_bytes(path)?;
    match expected {
        Some(c) => Checkpoint::from_bytes_expecting(&bytes, c),
        None => Checkpoint::from_bytes(&bytes),
    }
    .map_err(with_path::<ModelError>(path))
}

/// Applies `hourly_only`, then the configured split.
fn select(data: Dataset, cfg: &DataConfig, subset: Subset) -> Result<Dataset, CliError> {
    let data = if cfg.hourly_only {
        data.filter(|e| e.t.minute() == 0)
    } else {
        data
    };
    if subset == Subset::All || cfg.train_fraction == 1.0 {
        return match subset {
            Subset::Test if cfg.train_fraction == 1.0 => Err(CliError::Usage(
                "data.train_fraction = 1 leaves no test subset".into(),
            )),
            _ => Ok(data),
        };
    }
    let (train, test) = split(&data, cfg.train_fraction, cfg.split_seed, cfg.split)?;
    Ok(if subset == Subset::Train { train } else { test })
}

pub fn synth(config: &Path, overrides: &[String], out: &Path) -> Result<(), CliError> {
    let t0 = Instant::now();
    let cfg = config::load(Some(config), overrides)?;
    let world = gen_world(&cfg.world)?;
    world.write_dir(out)?;
    let mut m = RunManifest::new("synth");
    m.config(&cfg.world);
    m.input(config)?;
    for f in [GRAPH_FILE, STAGE_FILE, PRECIP_FILE] {
        m.output(&out.join(f))?;
    }
    m.timings.insert("total_secs".into(), t0.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    eprintln!("synth: {}", world.describe());
    Ok(())
}

#[derive(Serialize)]
struct BuildSettings {
    variant: String,
    range: String,
}

pub fn build_dataset(
    graph_path: &Path,
    stage_path: &Path,
    precip_path: &Path,
    variant: DatasetVariant,
    range: Option<TimeRange>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let spec = GraphSpec::read(open(graph_path)?).map_err(with_path::<_>(graph_path))?;
    let graph = SensorGraph::build(spec).map_err(with_path::<_>(graph_path))?;
    let parsed = StageSeries::parse(open(stage_path)?).map_err(with_path::<_>(stage_path))?;
    if parsed.duplicates > 0 {
        eprintln!("build-dataset: {} duplicate stage records, last kept", parsed.duplicates);
    }
    let precip = PrecipFieldSeries::parse(open(precip_path)?).map_err(with_path::<_>(precip_path))?;
    let range = match range {
        Some(r) => r,
        None => TimeRange::covering(&parsed.series)?,
    };
    let (data, skips) = build(range, &graph, &parsed.series, &precip, variant, workers)?;
    let built = t0.elapsed().as_secs_f64();

    write_bytes(out, &data.to_bytes())?;
    let skip_path = sidecar(out, ".skips.csv");
    let mut csv = Vec::new();
    skips.write_csv(&mut csv).expect("write to Vec");
    write_bytes(&skip_path, &csv)?;

    let mut m = RunManifest::new("build-dataset");
    m.config(&BuildSettings {
        variant: variant.to_string(),
        range: format!("{}..{}", format_utc(range.start), format_utc(range.end)),
    });
    for p in [graph_path, stage_path, precip_path] {
        m.input(p)?;
    }
    m.output(out)?;
    m.output(&skip_path)?;
    m.timings.insert("build_secs".into(), built);
    m.timings.insert("total_secs".into(), t0.elapsed().as_secs_f64());
    m.write(&sidecar(out, ".manifest.json"))?;
    let counts: Vec<String> = skips.counts().iter().map(|(r, n)| format!("{r}={n}")).collect();
    eprintln!(
        "build-dataset: {} {variant} entries, {} skipped [{}]",
        data.len(),
        skips.len(),
        counts.join(" ")
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a ModelConfig,
    data: &'a DataConfig,
    train: &'a stagecast::TrainConfig,
}

pub fn train(
    dataset: &Path,
    kind: ModelKind,
    config_path: Option<&Path>,
    overrides: &[String],
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let cfg: RunConfig = config::load(config_path, overrides)?;
    cfg.train.validate()?;
    let data = read_dataset(dataset)?;
    let mc = cfg.model.resolve(kind, data.variant())?;
    let mut net = Network::new(mc.clone(), cfg.train.seed)?;
    training::check_variant(&net, data.variant())?;
    let train_set = select(data.clone(), &cfg.data, Subset::Train)?;
    let test_set = if cfg.data.train_fraction < 1.0 {
        Some(select(data, &cfg.data, Subset::Test)?)
    } else {
        None
    };
    create_dir(out)?;

    let mut m = RunManifest::new("train");
    m.config(&TrainSettings {
        model: &mc,
        data: &cfg.data,
        train: &cfg.train,
    });
    m.input(dataset)?;
    if let Some(p) = config_path {
        m.input(p)?;
    }

    let mut periodic = Vec::new();
    let result = training::train_with(&mut net, &train_set, &cfg.train, |epoch, ckpt| {
        let p = out.join(format!("checkpoint-e{epoch:04}.bin"));
        // The callback cannot fail; a write error surfaces via the manifest.
        let _ = fs::write(&p, ckpt.to_bytes());
        periodic.push(p);
    });
    let (ckpt, mut report) = match result {
        Ok(r) => r,
        Err(TrainError::NonFiniteLoss {
            epoch,
            batch,
            last_good,
        }) => {
            let p = out.join(LAST_GOOD_FILE);
            write_bytes(&p, &last_good.to_bytes())?;
            return Err(CliError::Numeric(format!(
                "non-finite loss at epoch {epoch}, batch {batch}; last good state saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let train_secs = report.wall_time_secs;
    if let Some(test) = &test_set {
        report.test_mse = Some(training::evaluate(&net, test, workers)?);
    }

    let ckpt_path = out.join(CHECKPOINT_FILE);
    write_bytes(&ckpt_path, &ckpt.to_bytes())?;
    let report_path = out.join(REPORT_FILE);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("write to Vec");
    write_bytes(&report_path, &csv)?;
    for p in periodic.iter().chain([&ckpt_path, &report_path]) {
        m.output(p)?;
    }
    m.timings.insert("train_secs".into(), train_secs);
    m.timings.insert("total_secs".into(), t0.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    match report.test_mse {
        Some(t) => eprintln!(
            "train: {} epochs, final loss {:.6}, test mse {t:.6} ({} train / {} test)",
            report.epoch_losses.len(),
            report.epoch_losses.last().unwrap(),
            train_set.len(),
            test_set.as_ref().map_or(0, Dataset::len)
        ),
        None => eprintln!(
            "train: {} epochs, final loss {:.6} ({} entries)",
            report.epoch_losses.len(),
            report.epoch_losses.last().unwrap(),
            train_set.len()
        ),
    }
    Ok(())
}

pub fn eval(
    dataset: &Path,
    checkpoint: &Path,
    kind: Option<ModelKind>,
    config_path: Option<&Path>,
    overrides: &[String],
    subset: Subset,
    workers: usize,
) -> Result<(), CliError> {
    let cfg = config::load(config_path, overrides)?;
    let data = read_dataset(dataset)?;
    let expected = kind.map(|k| cfg.model.resolve(k, data.variant())).transpose()?;
    let ckpt = read_checkpoint(checkpoint, expected.as_ref())?;
    let net = Network::from_checkpoint(&ckpt)?;
    training::check_variant(&net, data.variant())?;
    let data = select(data, &cfg.data, subset)?;
    let mse = training::evaluate(&net, &data, workers)?;
    let baseline = training::persistence_mse(&data)?;
    println!("mse={mse:?} persistence_mse={baseline:?} entries={}", data.len());
    Ok(())
}

fn parse_entry(spec: &str, data: &Dataset) -> Result<usize, CliError> {
    if let Ok(i) = spec.parse::<usize>() {
        return if i < data.len() {
            Ok(i)
        } else {
            Err(CliError::Data(format!("entry index {i} out of range ({} entries)", data.len())))
        };
    }
    let (s, t) = spec
        .split_once('@')
        .ok_or_else(|| CliError::Usage(format!("entry `{spec}` must be SENSOR@TIME or an index")))?;
    let t = parse_utc(t).ok_or_else(|| CliError::Usage(format!("bad entry time `{t}`")))?;
    data.entries()
        .iter()
        .position(|e| e.sensor.as_str() == s && e.t == t)
        .ok_or_else(|| CliError::Data(format!("no entry for {s} at {}", format_utc(t))))
}

pub fn predict(checkpoint: &Path, dataset: &Path, entry: &str) -> Result<(), CliError> {
    let data = read_dataset(dataset)?;
    let net = Network::from_checkpoint(&read_checkpoint(checkpoint, None)?)?;
    let e = &data.entries()[parse_entry(entry, &data)?];
    let y = training::predict(&net, e)?;
    println!("# sensor={} t={}", e.sensor, format_utc(e.t));
    println!("horizon,measured,predicted");
    for (h, (m, p)) in e.output.iter().zip(&y).enumerate() {
        println!("{h},{m:?},{p:?}");
    }
    Ok(())
}

pub fn export_plot(
    checkpoint: &Path,
    dataset: &Path,
    sensor: &str,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let t0 = Instant::now();
    let sensor = SensorId::new(sensor).map_err(CliError::Usage)?;
    let data = read_dataset(dataset)?.filter_sensor(&sensor);
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let net = Network::from_checkpoint(&read_checkpoint(checkpoint, None)?)?;
    let mut csv = Vec::new();
    training::write_trace(&mut csv, &net, &data, workers)?;
    write_bytes(out, &csv)?;
    let mut m = RunManifest::new("export-plot");
    m.config(&sensor.as_str());
    m.input(checkpoint)?;
    m.input(dataset)?;
    m.output(out)?;
    m.timings.insert("total_secs".into(), t0.elapsed().as_secs_f64());
    m.write(&sidecar(out, ".manifest.json"))?;
    eprintln!("export-plot: {} entries x 24 horizons for {sensor}", data.len());
    Ok(())
}
