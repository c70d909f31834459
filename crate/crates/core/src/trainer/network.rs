//! Feed-forward networks whose weight matrices are either plain floats or
//! synapse crossbars.
//!
//! Forward passes through synaptic layers go through the crossbar readout;
//! backpropagation runs in real arithmetic on the effective weights read back
//! from the synapse currents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mapping::{grad_to_pulses, weight_to_state, CellStates, MappingKind, WeightMapping};
use super::mnist::Dataset;
use crate::crossbar::{CrossbarConfig, StateSnapshot, TiledCrossbar};
use crate::device::{DeviceParams, WeightBits};
use crate::error::{Error, Result};
use crate::synapse::{default_references, Direction, SimTime, TransferEvent, TransferPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `min(max(z, 0), 1)`; keeps every layer input inside the read-voltage window.
    ClippedRelu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ClippedRelu => z.clamp(0.0, 1.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ClippedRelu => {
                if z > 0.0 && z < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Valid convolution, stride 1, over a `channels x height x width` input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
        activation: Activation,
    },
    /// 2x2 average pooling, stride 2.
    AvgPool {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerSpec::AvgPool {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                height,
                width,
                ..
            } => out_channels * (height + 1 - kernel) * (width + 1 - kernel),
            LayerSpec::AvgPool {
                channels,
                height,
                width,
            } => channels * (height / 2) * (width / 2),
        }
    }

    /// `(rows, cols)` of the weight matrix, if the layer has one.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels)),
            LayerSpec::AvgPool { .. } => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => (inputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (
                in_channels * kernel * kernel,
                out_channels * kernel * kernel,
            ),
            LayerSpec::AvgPool { .. } => (0, 0),
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                activation
            }
            LayerSpec::AvgPool { .. } => Activation::Identity,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } if inputs == 0 || outputs == 0 => {
                Err(Error::config("dense layer sizes must be positive"))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return Err(Error::config("conv2d channels and kernel must be positive"));
                }
                if kernel > height || kernel > width {
                    return Err(Error::config(format!(
                        "conv2d kernel {kernel} larger than input {height}x{width}"
                    )));
                }
                Ok(())
            }
            LayerSpec::AvgPool {
                channels,
                height,
                width,
            } => {
                if channels == 0 || height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::config(format!(
                        "avg_pool needs even spatial dimensions, got {height}x{width}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub weight_bits: WeightBits,
    pub mapping: MappingKind,
}

impl NetworkSpec {
    /// Fully connected network; hidden layers use clipped ReLU.
    pub fn mlp(sizes: &[usize], weight_bits: WeightBits, mapping: MappingKind) -> Self {
        let last = sizes.len().saturating_sub(2);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::ClippedRelu
                },
            })
            .collect();
        NetworkSpec {
            layers,
            weight_bits,
            mapping,
        }
    }

    /// Two convolutions and two fully connected layers on 28x28 inputs.
    pub fn lenet(weight_bits: WeightBits, mapping: MappingKind) -> Self {
        let relu = Activation::ClippedRelu;
        NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 6,
                    kernel: 5,
                    height: 28,
                    width: 28,
                    activation: relu,
                },
                LayerSpec::AvgPool {
                    channels: 6,
                    height: 24,
                    width: 24,
                },
                LayerSpec::Conv2d {
                    in_channels: 6,
                    out_channels: 12,
                    kernel: 5,
                    height: 12,
                    width: 12,
                    activation: relu,
                },
                LayerSpec::AvgPool {
                    channels: 12,
                    height: 8,
                    width: 8,
                },
                LayerSpec::Dense {
                    inputs: 192,
                    outputs: 100,
                    activation: relu,
                },
                LayerSpec::Dense {
                    inputs: 100,
                    outputs: 10,
                    activation: Activation::Identity,
                },
            ],
            weight_bits,
            mapping,
        }
    }

    /// One small convolution and a classifier on 20x20 inputs.
    pub fn tiny_cnn(weight_bits: WeightBits, mapping: MappingKind) -> Self {
        NetworkSpec {
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 5,
                    height: 20,
                    width: 20,
                    activation: Activation::ClippedRelu,
                },
                LayerSpec::AvgPool {
                    channels: 4,
                    height: 16,
                    width: 16,
                },
                LayerSpec::Dense {
                    inputs: 256,
                    outputs: 10,
                    activation: Activation::Identity,
                },
            ],
            weight_bits,
            mapping,
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::input_len)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::config(format!(
                    "layer {i} produces {} values but layer {} expects {}",
                    pair[0].output_len(),
                    i + 1,
                    pair[1].input_len()
                )));
            }
            if pair[0].activation() == Activation::Identity && pair[0].weight_shape().is_some() {
                return Err(Error::config(format!(
                    "hidden layer {i} must use clipped_relu so its outputs stay within the read window"
                )));
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                activation: Activation::Identity,
                ..
            }) => Ok(()),
            _ => Err(Error::config(
                "the last layer must be dense with identity activation",
            )),
        }
    }
}

/// Counters accumulated while updating synaptic weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub pulses: u64,
    pub saturations: u64,
    pub clipped_pulses: u64,
    pub msb_writes: u64,
    pub emsb_writes: u64,
    pub transfers: u64,
    pub abs_lsb_loss: u64,
    pub decay_states_lost: u64,
}

/// One logged transfer-related event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub batch: u64,
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub kind: &'static str,
    pub direction: &'static str,
    pub lsb_loss: i32,
}

#[derive(Debug, Clone)]
pub struct SynapticWeights {
    mapping: WeightMapping,
    pos: TiledCrossbar,
    /// Negative cells of a differential pair.
    neg: Option<TiledCrossbar>,
    ref_current: f64,
    current_per_state: f64,
    v_read: f64,
}

impl SynapticWeights {
    fn new(
        rows: usize,
        cols: usize,
        mapping: WeightMapping,
        params: &DeviceParams,
        config: &CrossbarConfig,
    ) -> Result<Self> {
        let refs = default_references(params);
        let pos = TiledCrossbar::new(rows, cols, params, &refs, config)?;
        let neg = match mapping.kind {
            MappingKind::DifferentialPair => {
                Some(TiledCrossbar::new(rows, cols, params, &refs, config)?)
            }
            MappingKind::ZeroCentered => None,
        };
        Ok(SynapticWeights {
            mapping,
            pos,
            neg,
            ref_current: params.composite_current(mapping.zero_state)?,
            current_per_state: params.current_per_state(),
            v_read: config.v_read,
        })
    }

    pub fn mapping(&self) -> &WeightMapping {
        &self.mapping
    }

    pub fn positive(&self) -> &TiledCrossbar {
        &self.pos
    }

    pub fn negative(&self) -> Option<&TiledCrossbar> {
        self.neg.as_ref()
    }

    fn set(&mut self, row: usize, col: usize, cells: CellStates) -> Result<()> {
        match (cells, self.neg.as_mut()) {
            (CellStates::Single(s), None) => self.pos.set_composite(row, col, s),
            (CellStates::Pair { pos, neg }, Some(n)) => {
                self.pos.set_composite(row, col, pos)?;
                n.set_composite(row, col, neg)
            }
            _ => Err(Error::domain("cell states do not match the weight mapping")),
        }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let volts: Vec<f64> = x.iter().map(|v| v * self.v_read).collect();
        self.pos.forward_into(&volts, out)?;
        let k = self.mapping.scale / self.current_per_state;
        match &self.neg {
            None => {
                // reference column held at the zero state
                let reference = self.ref_current * x.iter().sum::<f64>();
                for o in out.iter_mut() {
                    *o = (*o - reference) * k;
                }
            }
            Some(neg) => {
                let mut minus = vec![0.0; out.len()];
                neg.forward_into(&volts, &mut minus)?;
                for (o, m) in out.iter_mut().zip(&minus) {
                    *o = (*o - m) * k;
                }
            }
        }
        Ok(())
    }

    fn effective(&self) -> Vec<f64> {
        let k = self.mapping.scale / self.current_per_state;
        let (rows, cols) = (self.pos.rows(), self.pos.cols());
        let mut w = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let minus = match &self.neg {
                    Some(n) => n.read_current(r, c),
                    None => self.ref_current,
                };
                w.push((self.pos.read_current(r, c) - minus) * k);
            }
        }
        w
    }

    fn pulse(
        array: &mut TiledCrossbar,
        row: usize,
        col: usize,
        n: i32,
        now: SimTime,
        stats: &mut UpdateStats,
        log: &mut Option<(&mut Vec<EventRecord>, u64, usize)>,
    ) {
        if n == 0 {
            return;
        }
        stats.pulses += u64::from(n.unsigned_abs());
        for ev in array.apply_pulses(row, col, n, now) {
            let (kind, direction, loss) = match ev {
                TransferEvent::Saturation { direction, emsb } => {
                    stats.saturations += 1;
                    stats.msb_writes += 1;
                    stats.emsb_writes += u64::from(emsb);
                    ("saturation", direction, 0)
                }
                TransferEvent::Clipped {
                    direction,
                    discarded,
                } => {
                    stats.clipped_pulses += u64::from(discarded);
                    let signed = match direction {
                        Direction::Up => discarded as i32,
                        Direction::Down => -(discarded as i32),
                    };
                    ("clip", direction, signed)
                }
            };
            if let Some((events, batch, layer)) = log.as_mut() {
                events.push(EventRecord {
                    batch: *batch,
                    layer: *layer,
                    row,
                    col,
                    kind,
                    direction: direction.as_str(),
                    lsb_loss: loss,
                });
            }
        }
    }

    fn update(
        &mut self,
        grad: &[f64],
        lr: f64,
        budget: u32,
        now: SimTime,
        stats: &mut UpdateStats,
        mut log: Option<(&mut Vec<EventRecord>, u64, usize)>,
    ) {
        let cols = self.pos.cols();
        let params = self.pos.params().clone();
        for (idx, g) in grad.iter().enumerate() {
            let n = grad_to_pulses(*g, lr, self.mapping.scale, budget);
            if n == 0 {
                continue;
            }
            let (row, col) = (idx / cols, idx % cols);
            match self.neg.as_mut() {
                None => Self::pulse(&mut self.pos, row, col, n, now, stats, &mut log),
                Some(neg) => {
                    // drain the opposite cell first so one side stays near zero
                    let (drain, fill) = if n > 0 {
                        (&mut *neg, &mut self.pos)
                    } else {
                        (&mut self.pos, &mut *neg)
                    };
                    let held = i32::from(drain.cell(row, col).composite(&params));
                    let d = n.abs().min(held);
                    Self::pulse(drain, row, col, -d, now, stats, &mut log);
                    Self::pulse(fill, row, col, n.abs() - d, now, stats, &mut log);
                }
            }
        }
    }

    fn transfer(
        &mut self,
        policy: &TransferPolicy,
        now: SimTime,
        stats: &mut UpdateStats,
        mut log: Option<(&mut Vec<EventRecord>, u64, usize)>,
    ) {
        let arrays = std::iter::once(&mut self.pos).chain(self.neg.as_mut());
        for array in arrays {
            for row in 0..array.rows() {
                for col in 0..array.cols() {
                    let out = array.periodic_transfer(row, col, policy, now);
                    stats.transfers += 1;
                    stats.abs_lsb_loss += u64::from(out.lsb_loss.unsigned_abs());
                    stats.msb_writes += u64::from(out.msb_written);
                    stats.emsb_writes += u64::from(out.emsb_written);
                    if let Some((events, batch, layer)) = log.as_mut() {
                        if out.lsb_loss != 0 || out.msb_written {
                            events.push(EventRecord {
                                batch: *batch,
                                layer: *layer,
                                row,
                                col,
                                kind: "periodic",
                                direction: match out.lsb_loss.signum() {
                                    1 => "down",
                                    -1 => "up",
                                    _ => "none",
                                },
                                lsb_loss: out.lsb_loss,
                            });
                        }
                    }
                }
            }
        }
    }

    fn accrue_decay(&mut self, now: SimTime) -> u64 {
        self.pos.accrue_decay(now) + self.neg.as_mut().map_or(0, |n| n.accrue_decay(now))
    }

    fn apply_decay(&mut self, elapsed_ns: u64) -> u64 {
        self.pos.apply_decay(elapsed_ns)
            + self.neg.as_mut().map_or(0, |n| n.apply_decay(elapsed_ns))
    }

    fn snapshots(&self) -> Vec<StateSnapshot> {
        std::iter::once(&self.pos)
            .chain(self.neg.as_ref())
            .map(TiledCrossbar::snapshot)
            .collect()
    }

    fn for_each_cell(&self, mut f: impl FnMut(&crate::synapse::SynapseState)) {
        for array in std::iter::once(&self.pos).chain(self.neg.as_ref()) {
            array.for_each_cell(|_, _, s| f(s));
        }
    }
}

#[derive(Debug, Clone)]
pub enum Weights {
    Float(Vec<f64>),
    Synaptic(SynapticWeights),
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    weights: Option<Weights>,
    bias: Vec<f64>,
    /// Row-major `(rows, cols)` weights used for backpropagation.
    effective: Vec<f64>,
}

impl Layer {
    fn refresh_effective(&mut self) {
        self.effective = match &self.weights {
            Some(Weights::Float(w)) => w.clone(),
            Some(Weights::Synaptic(s)) => s.effective(),
            None => Vec::new(),
        };
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.weights {
            Some(Weights::Float(w)) => {
                out.fill(0.0);
                let cols = out.len();
                for (v, row) in x.iter().zip(w.chunks_exact(cols)) {
                    if *v == 0.0 {
                        continue;
                    }
                    for (o, wij) in out.iter_mut().zip(row) {
                        *o += v * wij;
                    }
                }
                Ok(())
            }
            Some(Weights::Synaptic(s)) => s.matvec(x, out),
            None => Err(Error::domain("layer has no weights")),
        }
    }
}

/// Gradient of one weighted layer for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-sample quantities a weighted layer needs for its gradient: the input
/// vectors it saw and the deltas at its pre-activations (one pair per
/// convolution position).
struct SampleTerms {
    inputs: Vec<f64>,
    deltas: Vec<f64>,
}

/// Layer inputs (plus the network output) and pre-activations of one pass.
type Trace = (Vec<Vec<f64>>, Vec<Vec<f64>>);

struct SampleResult {
    loss: f64,
    terms: Vec<Option<SampleTerms>>,
}

fn im2col(x: &[f64], channels: usize, height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let (oh, ow) = (height + 1 - kernel, width + 1 - kernel);
    let patch = channels * kernel * kernel;
    let mut out = Vec::with_capacity(oh * ow * patch);
    for y in 0..oh {
        for xx in 0..ow {
            for c in 0..channels {
                for dy in 0..kernel {
                    let base = c * height * width + (y + dy) * width + xx;
                    out.extend_from_slice(&x[base..base + kernel]);
                }
            }
        }
    }
    out
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut delta: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(delta[label].max(1e-300)).ln();
    delta[label] -= 1.0;
    (loss, delta)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// How weights are realized.
#[derive(Debug, Clone)]
pub enum WeightBackend {
    Float,
    Synaptic {
        params: DeviceParams,
        crossbar: CrossbarConfig,
    },
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with Glorot-uniform initialization. Synaptic weights
    /// are snapped to the composite grid; the representable range spans
    /// `weight_range` times the initialization limit.
    pub fn new(
        spec: &NetworkSpec,
        backend: &WeightBackend,
        weight_range: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if let WeightBackend::Synaptic { params, .. } = backend {
            params.validate()?;
            if params.bits != spec.weight_bits {
                return Err(Error::domain(format!(
                    "network expects {}-bit weights but the device is {}-bit",
                    spec.weight_bits.bits(),
                    params.bits.bits()
                )));
            }
        }
        if !(weight_range > 0.0 && weight_range.is_finite()) {
            return Err(Error::config("weight_range must be positive"));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer_spec in &spec.layers {
            let (weights, bias) = match layer_spec.weight_shape() {
                None => (None, Vec::new()),
                Some((rows, cols)) => {
                    let (fan_in, fan_out) = layer_spec.fans();
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let draws: Vec<f64> = (0..rows * cols)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect();
                    let weights = match backend {
                        WeightBackend::Float => Weights::Float(draws),
                        WeightBackend::Synaptic { params, crossbar } => {
                            let mapping = WeightMapping::for_range(
                                spec.mapping,
                                params,
                                weight_range * limit,
                            )?;
                            let mut sw =
                                SynapticWeights::new(rows, cols, mapping, params, crossbar)?;
                            for (idx, w) in draws.iter().enumerate() {
                                sw.set(idx / cols, idx % cols, weight_to_state(*w, &mapping))?;
                            }
                            Weights::Synaptic(sw)
                        }
                    };
                    (Some(weights), vec![0.0; cols])
                }
            };
            let mut layer = Layer {
                spec: layer_spec.clone(),
                weights,
                bias,
                effective: Vec::new(),
            };
            layer.refresh_effective();
            layers.push(layer);
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Weights of every weighted layer in order.
    pub fn weights(&self) -> impl Iterator<Item = &Weights> {
        self.layers.iter().filter_map(|l| l.weights.as_ref())
    }

    pub fn biases(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .filter(|l| l.weights.is_some())
            .map(|l| l.bias.as_slice())
    }

    fn synaptic_mut(&mut self) -> impl Iterator<Item = (usize, &mut SynapticWeights)> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.weights.as_mut())
            .enumerate()
            .filter_map(|(i, w)| match w {
                Weights::Synaptic(s) => Some((i, s)),
                Weights::Float(_) => None,
            })
    }

    /// Forward pass; returns the input of every layer followed by the
    /// network output, and the pre-activations of every layer.
    fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        let mut acts = vec![input.to_vec()];
        let mut pres = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = acts.last().expect("input present");
            let (pre, post) = match layer.spec {
                LayerSpec::Dense {
                    outputs,
                    activation,
                    ..
                } => {
                    let mut z = vec![0.0; outputs];
                    layer.matvec(x, &mut z)?;
                    for (zj, b) in z.iter_mut().zip(&layer.bias) {
                        *zj += b;
                    }
                    let a = z.iter().map(|&v| activation.apply(v)).collect();
                    (z, a)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                    activation,
                } => {
                    let patches = im2col(x, in_channels, height, width, kernel);
                    let rows = in_channels * kernel * kernel;
                    let positions = patches.len() / rows;
                    let mut z = vec![0.0; out_channels * positions];
                    let mut out = vec![0.0; out_channels];
                    for (p, patch) in patches.chunks_exact(rows).enumerate() {
                        layer.matvec(patch, &mut out)?;
                        for (co, v) in out.iter().enumerate() {
                            z[co * positions + p] = v + layer.bias[co];
                        }
                    }
                    let a = z.iter().map(|&v| activation.apply(v)).collect();
                    (z, a)
                }
                LayerSpec::AvgPool {
                    channels,
                    height,
                    width,
                } => {
                    let (oh, ow) = (height / 2, width / 2);
                    let mut a = Vec::with_capacity(channels * oh * ow);
                    for c in 0..channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let at = |dy: usize, dx: usize| {
                                    x[c * height * width + (2 * y + dy) * width + 2 * xx + dx]
                                };
                                a.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
                            }
                        }
                    }
                    (Vec::new(), a)
                }
            };
            pres.push(pre);
            acts.push(post);
        }
        Ok((acts, pres))
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.0.pop().expect("output present"))
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }

    fn sample_terms(&self, input: &[f64], label: usize) -> Result<SampleResult> {
        let (acts, pres) = self.forward_trace(input)?;
        let (loss, mut delta) = softmax_xent(acts.last().expect("output present"), label);
        let mut terms: Vec<Option<SampleTerms>> = (0..self.layers.len()).map(|_| None).collect();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[l];
            let need_input_delta = l > 0;
            match layer.spec {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                } => {
                    let d: Vec<f64> = delta
                        .iter()
                        .zip(&pres[l])
                        .map(|(g, z)| g * activation.derivative(*z))
                        .collect();
                    if need_input_delta {
                        let mut next = vec![0.0; inputs];
                        for (i, n) in next.iter_mut().enumerate() {
                            let row = &layer.effective[i * outputs..(i + 1) * outputs];
                            *n = row.iter().zip(&d).map(|(w, g)| w * g).sum();
                        }
                        delta = next;
                    }
                    terms[l] = Some(SampleTerms {
                        inputs: x.clone(),
                        deltas: d,
                    });
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                    activation,
                } => {
                    let rows = in_channels * kernel * kernel;
                    let ow = width + 1 - kernel;
                    let positions = (height + 1 - kernel) * ow;
                    let mut d = vec![0.0; positions * out_channels];
                    for co in 0..out_channels {
                        for p in 0..positions {
                            let k = co * positions + p;
                            d[p * out_channels + co] = delta[k] * activation.derivative(pres[l][k]);
                        }
                    }
                    if need_input_delta {
                        let mut next = vec![0.0; in_channels * height * width];
                        for p in 0..positions {
                            let (y, xx) = (p / ow, p % ow);
                            let dp = &d[p * out_channels..(p + 1) * out_channels];
                            for r in 0..rows {
                                let g: f64 = layer.effective
                                    [r * out_channels..(r + 1) * out_channels]
                                    .iter()
                                    .zip(dp)
                                    .map(|(w, g)| w * g)
                                    .sum();
                                let c = r / (kernel * kernel);
                                let dy = (r / kernel) % kernel;
                                let dx = r % kernel;
                                next[c * height * width + (y + dy) * width + xx + dx] += g;
                            }
                        }
                        delta = next;
                    }
                    terms[l] = Some(SampleTerms {
                        inputs: im2col(x, in_channels, height, width, kernel),
                        deltas: d,
                    });
                }
                LayerSpec::AvgPool {
                    channels,
                    height,
                    width,
                } => {
                    let (oh, ow) = (height / 2, width / 2);
                    let mut next = vec![0.0; channels * height * width];
                    for c in 0..channels {
                        for y in 0..height {
                            for xx in 0..width {
                                next[c * height * width + y * width + xx] =
                                    0.25 * delta[c * oh * ow + (y / 2) * ow + xx / 2];
                            }
                        }
                    }
                    delta = next;
                }
            }
        }
        Ok(SampleResult { loss, terms })
    }

    /// Mean cross-entropy gradient over the samples `indices` of `data`.
    /// Per-sample work may run in parallel; reductions follow sample order.
    pub fn batch_gradients(
        &self,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, Vec<LayerGradient>)> {
        let results: Vec<SampleResult> = indices
            .par_iter()
            .map(|&i| {
                let x: Vec<f64> = data.image(i).iter().map(|&p| f64::from(p)).collect();
                self.sample_terms(&x, usize::from(data.label(i)))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / indices.len() as f64;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() * scale;
        let mut grads = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let Some((rows, cols)) = layer.spec.weight_shape() else {
                continue;
            };
            let mut gw = vec![0.0; rows * cols];
            gw.par_chunks_mut(cols).enumerate().for_each(|(i, g_row)| {
                for r in &results {
                    let t = r.terms[l].as_ref().expect("weighted layer has terms");
                    for (x_row, d_row) in
                        t.inputs.chunks_exact(rows).zip(t.deltas.chunks_exact(cols))
                    {
                        let x = x_row[i];
                        if x == 0.0 {
                            continue;
                        }
                        for (g, d) in g_row.iter_mut().zip(d_row) {
                            *g += x * d;
                        }
                    }
                }
                for g in g_row.iter_mut() {
                    *g *= scale;
                }
            });
            let mut gb = vec![0.0; cols];
            for r in &results {
                let t = r.terms[l].as_ref().expect("weighted layer has terms");
                for d_row in t.deltas.chunks_exact(cols) {
                    for (g, d) in gb.iter_mut().zip(d_row) {
                        *g += d;
                    }
                }
            }
            for g in gb.iter_mut() {
                *g *= scale;
            }
            grads.push(LayerGradient {
                weights: gw,
                bias: gb,
            });
        }
        Ok((loss, grads))
    }

    /// Applies one SGD step: float weights move by `-lr * g`, synaptic
    /// weights receive quantized pulses, biases stay digital.
    pub fn apply_gradients(
        &mut self,
        grads: &[LayerGradient],
        lr: f64,
        pulse_budget: u32,
        now: SimTime,
        stats: &mut UpdateStats,
        mut events: Option<(&mut Vec<EventRecord>, u64)>,
    ) -> Result<()> {
        let weighted = self.layers.iter_mut().filter(|l| l.weights.is_some());
        let mut count = 0;
        for (k, (layer, grad)) in weighted.zip(grads).enumerate() {
            count += 1;
            for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
            match layer.weights.as_mut().expect("filtered") {
                Weights::Float(w) => {
                    for (wi, g) in w.iter_mut().zip(&grad.weights) {
                        *wi -= lr * g;
                    }
                }
                Weights::Synaptic(s) => {
                    let log = events.as_mut().map(|(v, batch)| (&mut **v, *batch, k));
                    s.update(&grad.weights, lr, pulse_budget, now, stats, log);
                }
            }
            layer.refresh_effective();
        }
        if count != grads.len() {
            return Err(Error::domain(
                "gradient count does not match weighted layers",
            ));
        }
        Ok(())
    }

    pub fn periodic_transfer(
        &mut self,
        policy: &TransferPolicy,
        now: SimTime,
        stats: &mut UpdateStats,
        mut events: Option<(&mut Vec<EventRecord>, u64)>,
    ) {
        for (k, s) in self.synaptic_mut() {
            let log = events.as_mut().map(|(v, batch)| (&mut **v, *batch, k));
            s.transfer(policy, now, stats, log);
        }
        self.refresh_all();
    }

    pub fn accrue_decay(&mut self, now: SimTime) -> u64 {
        let lost = self.synaptic_mut().map(|(_, s)| s.accrue_decay(now)).sum();
        if lost > 0 {
            self.refresh_all();
        }
        lost
    }

    /// Idle period applied to every synapse.
    pub fn apply_decay(&mut self, elapsed_ns: u64) -> u64 {
        let lost = self
            .synaptic_mut()
            .map(|(_, s)| s.apply_decay(elapsed_ns))
            .sum();
        self.refresh_all();
        lost
    }

    fn refresh_all(&mut self) {
        for layer in &mut self.layers {
            layer.refresh_effective();
        }
    }

    /// Composite states of every synaptic matrix (positive then negative
    /// cells for differential pairs), in layer order.
    pub fn snapshots(&self) -> Vec<StateSnapshot> {
        self.weights()
            .filter_map(|w| match w {
                Weights::Synaptic(s) => Some(s.snapshots()),
                Weights::Float(_) => None,
            })
            .flatten()
            .collect()
    }

    /// Restores composite states from snapshots produced by [`snapshots`](Self::snapshots).
    pub fn restore(&mut self, snapshots: &[StateSnapshot]) -> Result<()> {
        let mut it = snapshots.iter();
        for (_, s) in self.synaptic_mut() {
            let arrays = std::iter::once(&mut s.pos).chain(s.neg.as_mut());
            for array in arrays {
                let snap = it
                    .next()
                    .ok_or_else(|| Error::domain("too few snapshots"))?;
                array.restore(snap)?;
            }
        }
        if it.next().is_some() {
            return Err(Error::domain("more snapshots than synaptic matrices"));
        }
        self.refresh_all();
        Ok(())
    }

    /// Visits every synapse of every synaptic layer.
    pub fn for_each_synapse(&self, mut f: impl FnMut(&crate::synapse::SynapseState)) {
        for w in self.weights() {
            if let Weights::Synaptic(s) = w {
                s.for_each_cell(&mut f);
            }
        }
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::domain("empty evaluation set"));
        }
        let correct: usize = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = data.image(i).iter().map(|&p| f64::from(p)).collect();
                self.predict(&x)
                    .map(|p| usize::from(p == usize::from(data.label(i))))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(correct as f64 / data.len() as f64)
    }
}
