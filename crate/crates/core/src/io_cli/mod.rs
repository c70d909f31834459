//! Command implementations behind the `hybrid-synapse` binary. Each command
//! takes a resolved [`RunConfig`] and writes its artifacts under the
//! configured output directory.

pub mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use config::{
    DatasetSection, DeviceSection, NetworkPreset, OutputSection, RunConfig, TrainerSection,
};

use crate::crossbar::{max_transfer_interval, StateSnapshot, TimingModel};
use crate::device::{DeviceParams, ParamMode, WeightBits};
use crate::error::{Error, Result};
use crate::synapse::{default_references, SynapseState, TransferMode};
use crate::trainer::{
    self, mnist::resolve_data_dir, Backend, Dataset, MappingKind, NetworkSpec, Split, SweepRow,
    TrainMetrics,
};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<ParamMode>,
    pub bits: Option<WeightBits>,
    pub interval: Option<u32>,
    pub policy: Option<TransferMode>,
    pub threads: Option<usize>,
    pub mapping: Option<MappingKind>,
    pub baseline: bool,
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.output.dir = out.clone();
        }
        if let Some(mode) = self.mode {
            c.device.mode = mode;
        }
        if let Some(bits) = self.bits {
            c.device.bits = bits;
        }
        if let Some(n) = self.interval {
            c.synapse.interval_batches = n;
        }
        if let Some(p) = self.policy {
            c.synapse.mode = p;
        }
        if let Some(t) = self.threads {
            c.trainer.threads = t;
        }
        if let Some(m) = self.mapping {
            c.trainer.mapping = m;
        }
        if self.baseline {
            c.trainer.backend = Backend::Float;
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampRow {
    pub pulse: u32,
    pub state: u16,
    pub current_ua: f64,
}

/// Staircase from the zero state up to the top state and back, one pulse
/// per row. Row 0 is the initial state.
pub fn ramp(params: &DeviceParams) -> Result<Vec<RampRow>> {
    params.validate()?;
    let refs = default_references(params);
    let top = i32::from(params.max_composite());
    let mut s = SynapseState::zero(params);
    let mut rows = vec![RampRow {
        pulse: 0,
        state: s.composite(params),
        current_ua: s.read_current(params),
    }];
    for (k, dir) in (0..2 * top).map(|k| (k, if k < top { 1 } else { -1 })) {
        s.apply_pulses(dir, params, &refs);
        rows.push(RampRow {
            pulse: k as u32 + 1,
            state: s.composite(params),
            current_ua: s.read_current(params),
        });
    }
    Ok(rows)
}

pub fn write_ramp<W: Write>(rows: &[RampRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pulse", "state", "current_ua"])?;
    for r in rows {
        w.write_record([
            r.pulse.to_string(),
            r.state.to_string(),
            r.current_ua.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `ramp.csv`; returns its path.
pub fn cmd_ramp(config: &RunConfig) -> Result<PathBuf> {
    let rows = ramp(&config.device.params()?)?;
    let path = out_dir(config)?.join("ramp.csv");
    write_ramp(&rows, create(&path)?).map_err(|e| csv_err(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingReport {
    pub t_batch_ns: u64,
    pub batch_size: usize,
    pub decay_time_per_lsb_ns: u64,
    pub max_transfer_interval: u64,
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "t_batch_ns = {}", self.t_batch_ns)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "decay_time_per_lsb_ns = {}", self.decay_time_per_lsb_ns)?;
        writeln!(f, "max_transfer_interval = {}", self.max_transfer_interval)
    }
}

pub fn cmd_timing(config: &RunConfig) -> Result<TimingReport> {
    let params = config.device.params()?;
    let timing = TimingModel {
        t_batch_ns: config.trainer.t_batch_ns,
        batch_size: config.trainer.batch_size,
    };
    timing.validate()?;
    Ok(TimingReport {
        t_batch_ns: timing.t_batch_ns,
        batch_size: timing.batch_size,
        decay_time_per_lsb_ns: params.decay_time_per_lsb_ns,
        max_transfer_interval: max_transfer_interval(&timing, &params),
    })
}

/// Loads and resamples the train and test splits for `spec`.
pub fn load_datasets(config: &RunConfig, spec: &NetworkSpec) -> Result<(Dataset, Dataset)> {
    let dir = resolve_data_dir(&config.dataset.dir);
    let [h, w] = config.input_shape(spec)?;
    let load = |split, limit| -> Result<Dataset> {
        let ds = trainer::load_mnist(&dir, split, limit)?;
        Ok(if (ds.height, ds.width) == (h, w) {
            ds
        } else {
            ds.resampled(h, w)
        })
    };
    Ok((
        load(Split::Train, config.dataset.train_limit)?,
        load(Split::Test, config.dataset.test_limit)?,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: TrainMetrics,
    pub run_log: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Trains with `config` on the given data and writes the run log,
/// endurance histogram, final checkpoints and optional event logs.
pub fn train_and_write(
    config: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutput> {
    let spec = config.network()?;
    let run = config.train_run()?;
    let metrics = trainer::train(&spec, &run, train_set, test_set)?;
    let dir = out_dir(config)?;
    let mut files = Vec::new();

    let run_log = dir.join("run_log.csv");
    trainer::write_run_log(&metrics, create(&run_log)?).map_err(|e| csv_err(&run_log, e))?;

    let endurance = dir.join("endurance.csv");
    {
        let mut w = csv::Writer::from_writer(create(&endurance)?);
        let rows = std::iter::once(["msb_writes".to_string(), "synapses".to_string()]).chain(
            metrics
                .msb_write_histogram
                .iter()
                .map(|(k, v)| [k.to_string(), v.to_string()]),
        );
        for r in rows {
            w.write_record(r).map_err(|e| csv_err(&endurance, e))?;
        }
        w.flush().map_err(|e| Error::io(&endurance, e))?;
    }
    files.push(endurance);

    let per_layer = if spec.mapping == MappingKind::DifferentialPair {
        2
    } else {
        1
    };
    for (i, snap) in metrics.final_states.iter().enumerate() {
        let name = match per_layer {
            2 => format!(
                "checkpoint_layer{}_{}.csv",
                i / 2,
                if i % 2 == 0 { "pos" } else { "neg" }
            ),
            _ => format!("checkpoint_layer{i}.csv"),
        };
        let path = dir.join(name);
        snap.save(&path)?;
        files.push(path);
    }

    if run.record_events {
        for layer in 0..metrics.mappings.len() {
            let path = dir.join(format!("events_layer{layer}.csv"));
            trainer::write_events(&metrics.events, layer, create(&path)?)
                .map_err(|e| csv_err(&path, e))?;
            files.push(path);
        }
    }
    Ok(TrainOutput {
        metrics,
        run_log,
        files,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutput> {
    config.validate()?;
    let spec = config.network()?;
    let (train_set, test_set) = load_datasets(config, &spec)?;
    train_and_write(config, &train_set, &test_set)
}

/// Runs the sweep and writes `sweep.csv`.
pub fn sweep_and_write(
    config: &RunConfig,
    intervals: &[u32],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(Vec<SweepRow>, PathBuf)> {
    let spec = config.network()?;
    let run = config.train_run()?;
    let rows = trainer::sweep_transfer_interval(&spec, &run, train_set, test_set, intervals)?;
    let path = out_dir(config)?.join("sweep.csv");
    trainer::write_sweep(&rows, create(&path)?).map_err(|e| csv_err(&path, e))?;
    Ok((rows, path))
}

/// Sweeps `intervals`, or the configured list when `None`.
pub fn cmd_sweep(
    config: &RunConfig,
    intervals: Option<&[u32]>,
) -> Result<(Vec<SweepRow>, PathBuf)> {
    config.validate()?;
    let spec = config.network()?;
    let intervals = intervals.unwrap_or(&config.trainer.sweep_intervals);
    if intervals.is_empty() {
        return Err(Error::config("sweep needs at least one interval"));
    }
    let (train_set, test_set) = load_datasets(config, &spec)?;
    sweep_and_write(config, intervals, &train_set, &test_set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotReport {
    pub rows: usize,
    pub cols: usize,
    pub mean_state: f64,
    pub states_lost: u64,
    pub output: PathBuf,
}

impl fmt::Display for SnapshotReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "shape = {}x{}", self.rows, self.cols)?;
        writeln!(f, "mean_state = {:.4}", self.mean_state)?;
        writeln!(f, "states_lost = {}", self.states_lost)?;
        writeln!(f, "output = {}", self.output.display())
    }
}

/// Loads a checkpoint, lets it sit idle for `idle_ns` and writes the
/// result to `snapshot.csv`.
pub fn cmd_snapshot(config: &RunConfig, input: &Path, idle_ns: u64) -> Result<SnapshotReport> {
    let params = config.device.params()?;
    let snap = StateSnapshot::load(input)?;
    let mut states = Vec::with_capacity(snap.states.len());
    let mut lost = 0u64;
    for &s in &snap.states {
        let mut cell = SynapseState::from_composite(&params, s)
            .map_err(|e| Error::format(input, e.to_string()))?;
        lost += u64::from(cell.apply_decay(idle_ns, &params));
        states.push(cell.composite(&params));
    }
    let out = StateSnapshot {
        rows: snap.rows,
        cols: snap.cols,
        states,
    };
    let path = out_dir(config)?.join("snapshot.csv");
    out.save(&path)?;
    let mean =
        out.states.iter().map(|&s| f64::from(s)).sum::<f64>() / out.states.len().max(1) as f64;
    Ok(SnapshotReport {
        rows: out.rows,
        cols: out.cols,
        mean_state: mean,
        states_lost: lost,
        output: path,
    })
}
