//! Pulse-quantized SGD training with transfer scheduling, decay accrual and
//! endurance accounting.

pub mod mapping;
pub mod mnist;
pub mod network;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossbar::{CrossbarConfig, StateSnapshot, TimingModel};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::synapse::{SimTime, TransferMode, TransferPolicy};

pub use mapping::{grad_to_pulses, weight_to_state, CellStates, MappingKind, WeightMapping};
pub use mnist::{load_mnist, Dataset, Split};
pub use network::{
    Activation, EventRecord, LayerSpec, Network, NetworkSpec, UpdateStats, WeightBackend, Weights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Weights live in synapse crossbars.
    Synapse,
    /// Unconstrained float weights; the software baseline.
    Float,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub backend: Backend,
    pub device: DeviceParams,
    pub crossbar: CrossbarConfig,
    pub policy: TransferPolicy,
    pub timing: TimingModel,
    pub learning_rate: f64,
    pub pulse_budget: u32,
    pub epochs: u32,
    /// Representable weight range as a multiple of the initialization limit.
    pub weight_range: f64,
    pub decay_enabled: bool,
    pub seed: u64,
    /// Worker threads for per-sample evaluation; 0 uses all cores.
    pub threads: usize,
    pub record_events: bool,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            backend: Backend::Synapse,
            device: DeviceParams::default(),
            crossbar: CrossbarConfig::default(),
            policy: TransferPolicy::default(),
            timing: TimingModel::default(),
            learning_rate: 1.0,
            pulse_budget: 15,
            epochs: 3,
            weight_range: 2.5,
            decay_enabled: true,
            seed: 1,
            threads: 0,
            record_events: false,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.crossbar.validate()?;
        self.policy.validate(&self.device)?;
        self.timing.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.pulse_budget == 0 {
            return Err(Error::config("pulse_budget must be at least 1"));
        }
        if !(self.weight_range > 0.0 && self.weight_range.is_finite()) {
            return Err(Error::config("weight_range must be positive"));
        }
        Ok(())
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Batches completed so far.
    pub batch: u64,
    pub test_accuracy: f64,
    /// Sum of |LSB states discarded| over all periodic transfers so far.
    pub cum_lsb_loss: u64,
    pub msb_writes_total: u64,
    pub sim_time_ns: SimTime,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochRecord>,
    pub stats: UpdateStats,
    /// Largest MSB plus EMSB write count of any synapse.
    pub msb_write_max: u64,
    /// Synapse count per MSB plus EMSB write count.
    pub msb_write_histogram: BTreeMap<u64, u64>,
    pub warnings: Vec<String>,
    pub events: Vec<EventRecord>,
    pub mappings: Vec<WeightMapping>,
    pub initial_states: Vec<StateSnapshot>,
    pub final_states: Vec<StateSnapshot>,
    pub final_biases: Vec<Vec<f64>>,
    pub batches: u64,
    pub sim_time_ns: SimTime,
}

impl TrainMetrics {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }
}

/// Sample order of one epoch. Epochs draw from independent streams of the
/// same seed so any epoch can be reproduced alone.
pub fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + u64::from(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_dataset(spec: &NetworkSpec, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::domain(format!("{what} set is empty")));
    }
    if data.features() != spec.input_len() {
        return Err(Error::domain(format!(
            "{what} samples have {} features but the network expects {}",
            data.features(),
            spec.input_len()
        )));
    }
    if data.classes != spec.output_len() {
        return Err(Error::domain(format!(
            "{what} set has {} classes but the network outputs {}",
            data.classes,
            spec.output_len()
        )));
    }
    Ok(())
}

/// Trains `spec` on `train_set`, evaluating on `test_set` before training
/// (epoch 0) and after every epoch.
pub fn train(
    spec: &NetworkSpec,
    run: &TrainRun,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainMetrics> {
    run.validate()?;
    spec.validate()?;
    check_dataset(spec, train_set, "training")?;
    check_dataset(spec, test_set, "test")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| train_inner(spec, run, train_set, test_set))
}

fn endurance_scan(net: &Network) -> (u64, BTreeMap<u64, u64>) {
    let mut max = 0;
    let mut hist = BTreeMap::new();
    net.for_each_synapse(|s| {
        let w = s.msb_writes() + s.emsb_writes();
        max = max.max(w);
        *hist.entry(w).or_insert(0) += 1;
    });
    (max, hist)
}

fn train_inner(
    spec: &NetworkSpec,
    run: &TrainRun,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainMetrics> {
    let backend = match run.backend {
        Backend::Float => WeightBackend::Float,
        Backend::Synapse => WeightBackend::Synaptic {
            params: run.device.clone(),
            crossbar: run.crossbar.clone(),
        },
    };
    let synaptic = run.backend == Backend::Synapse;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut net = Network::new(spec, &backend, run.weight_range, &mut rng)?;

    let mut metrics = TrainMetrics {
        initial_states: net.snapshots(),
        mappings: net
            .weights()
            .filter_map(|w| match w {
                Weights::Synaptic(s) => Some(*s.mapping()),
                Weights::Float(_) => None,
            })
            .collect(),
        ..TrainMetrics::default()
    };
    let mut stats = UpdateStats::default();
    let mut now: SimTime = 0;
    let mut batches: u64 = 0;
    let interval = u64::from(run.policy.interval_batches);
    let mut endurance_warned = false;

    metrics.epochs.push(EpochRecord {
        epoch: 0,
        batch: 0,
        test_accuracy: net.accuracy(test_set)?,
        cum_lsb_loss: 0,
        msb_writes_total: 0,
        sim_time_ns: 0,
        train_loss: f64::NAN,
    });

    for epoch in 0..run.epochs {
        let order = epoch_order(run.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut loss_batches = 0u64;
        for chunk in order.chunks(run.timing.batch_size) {
            let (loss, grads) = net.batch_gradients(train_set, chunk)?;
            loss_sum += loss;
            loss_batches += 1;
            let events = run.record_events.then_some((&mut metrics.events, batches));
            net.apply_gradients(
                &grads,
                run.learning_rate,
                run.pulse_budget,
                now,
                &mut stats,
                events,
            )?;
            batches += 1;
            now += run.timing.t_batch_ns;
            if synaptic {
                if run.decay_enabled {
                    stats.decay_states_lost += net.accrue_decay(now);
                }
                if batches.is_multiple_of(interval) {
                    let events = run.record_events.then_some((&mut metrics.events, batches));
                    net.periodic_transfer(&run.policy, now, &mut stats, events);
                }
            }
        }
        let (max, _) = endurance_scan(&net);
        if max > run.device.msb_endurance_budget && !endurance_warned {
            endurance_warned = true;
            metrics.warnings.push(format!(
                "epoch {}: a synapse reached {max} MSB writes, above the endurance budget of {}",
                epoch + 1,
                run.device.msb_endurance_budget
            ));
        }
        metrics.epochs.push(EpochRecord {
            epoch: epoch + 1,
            batch: batches,
            test_accuracy: net.accuracy(test_set)?,
            cum_lsb_loss: stats.abs_lsb_loss,
            msb_writes_total: stats.msb_writes,
            sim_time_ns: now,
            train_loss: loss_sum / loss_batches.max(1) as f64,
        });
    }

    let (max, hist) = endurance_scan(&net);
    metrics.msb_write_max = max;
    metrics.msb_write_histogram = hist;
    metrics.stats = stats;
    metrics.final_states = net.snapshots();
    metrics.final_biases = net.biases().map(<[f64]>::to_vec).collect();
    metrics.batches = batches;
    metrics.sim_time_ns = now;
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub interval: u32,
    pub mode: TransferMode,
    pub test_accuracy: f64,
    pub cum_lsb_loss: u64,
    pub msb_writes_total: u64,
}

/// Trains once per interval with otherwise identical settings.
pub fn sweep_transfer_interval(
    spec: &NetworkSpec,
    run: &TrainRun,
    train_set: &Dataset,
    test_set: &Dataset,
    intervals: &[u32],
) -> Result<Vec<SweepRow>> {
    if intervals.is_empty() {
        return Err(Error::config("sweep needs at least one interval"));
    }
    intervals
        .iter()
        .map(|&interval| {
            let mut r = run.clone();
            r.policy.interval_batches = interval;
            let m = train(spec, &r, train_set, test_set)?;
            let last = m.epochs.last().expect("epoch 0 always recorded");
            Ok(SweepRow {
                interval,
                mode: r.policy.mode,
                test_accuracy: last.test_accuracy,
                cum_lsb_loss: last.cum_lsb_loss,
                msb_writes_total: last.msb_writes_total,
            })
        })
        .collect()
}

fn mode_name(mode: TransferMode) -> &'static str {
    match mode {
        TransferMode::IdealResidual => "ideal",
        TransferMode::MidRangeReset => "midrange",
    }
}

pub fn write_run_log<W: Write>(metrics: &TrainMetrics, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epoch",
        "batch",
        "test_accuracy",
        "cum_lsb_loss",
        "msb_writes_total",
        "sim_time_ns",
    ])?;
    for e in &metrics.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.batch.to_string(),
            format!("{:.6}", e.test_accuracy),
            e.cum_lsb_loss.to_string(),
            e.msb_writes_total.to_string(),
            e.sim_time_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Events of one weighted layer.
pub fn write_events<W: Write>(events: &[EventRecord], layer: usize, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["batch", "row", "col", "kind", "direction", "lsb_loss"])?;
    for e in events.iter().filter(|e| e.layer == layer) {
        w.write_record([
            e.batch.to_string(),
            e.row.to_string(),
            e.col.to_string(),
            e.kind.to_string(),
            e.direction.to_string(),
            e.lsb_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "interval",
        "policy",
        "test_accuracy",
        "cum_lsb_loss",
        "msb_writes_total",
    ])?;
    for r in rows {
        w.write_record([
            r.interval.to_string(),
            mode_name(r.mode).to_string(),
            format!("{:.6}", r.test_accuracy),
            r.cum_lsb_loss.to_string(),
            r.msb_writes_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
