//! TOML run configuration. Every section is optional and defaults to the
//! 6-bit ideal device with the desk-scale MLP.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossbar::{CrossbarConfig, TimingModel};
use crate::device::{DeviceParams, ParamMode, PulseSpec, WeightBits};
use crate::error::{Error, Result};
use crate::synapse::TransferPolicy;
use crate::trainer::{Backend, LayerSpec, MappingKind, NetworkSpec, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub mode: ParamMode,
    pub bits: WeightBits,
    pub msb_states: u16,
    pub lsb_states: u16,
    pub emsb_states: u16,
    pub delta_i_msb: f64,
    /// Defaults by mode when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lsb_span: Option<f64>,
    pub i_base: f64,
    pub vg_min: f64,
    pub vg_max_trigger: f64,
    pub vg_step: f64,
    pub lsb_pulse: PulseSpec,
    pub msb_pulse: PulseSpec,
    pub msb_endurance_budget: u64,
    pub decay_time_per_lsb_ns: u64,
    pub emsb_scale: f64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        let p = DeviceParams::default();
        DeviceSection {
            mode: p.mode,
            bits: p.bits,
            msb_states: p.msb_states,
            lsb_states: p.lsb_states,
            emsb_states: p.emsb_states,
            delta_i_msb: p.delta_i_msb,
            lsb_span: None,
            i_base: p.i_base,
            vg_min: p.vg_min,
            vg_max_trigger: p.vg_max_trigger,
            vg_step: p.vg_step,
            lsb_pulse: p.lsb_pulse,
            msb_pulse: p.msb_pulse,
            msb_endurance_budget: p.msb_endurance_budget,
            decay_time_per_lsb_ns: p.decay_time_per_lsb_ns,
            emsb_scale: p.emsb_scale,
        }
    }
}

impl DeviceSection {
    pub fn params(&self) -> Result<DeviceParams> {
        let p = DeviceParams {
            mode: self.mode,
            bits: self.bits,
            msb_states: self.msb_states,
            lsb_states: self.lsb_states,
            emsb_states: self.emsb_states,
            delta_i_msb: self.delta_i_msb,
            lsb_span: self.lsb_span.unwrap_or_else(|| {
                DeviceParams::default_lsb_span(self.mode, self.delta_i_msb, self.lsb_states)
            }),
            i_base: self.i_base,
            vg_min: self.vg_min,
            vg_max_trigger: self.vg_max_trigger,
            vg_step: self.vg_step,
            lsb_pulse: self.lsb_pulse,
            msb_pulse: self.msb_pulse,
            msb_endurance_budget: self.msb_endurance_budget,
            decay_time_per_lsb_ns: self.decay_time_per_lsb_ns,
            emsb_scale: self.emsb_scale,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkPreset {
    /// Fully connected, sizes from `mlp_sizes`.
    Mlp,
    Lenet,
    TinyCnn,
    /// Layers listed explicitly under `[[trainer.layers]]`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub backend: Backend,
    pub network: NetworkPreset,
    pub mlp_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
    pub mapping: MappingKind,
    pub learning_rate: f64,
    pub pulse_budget: u32,
    pub epochs: u32,
    pub weight_range: f64,
    pub decay_enabled: bool,
    pub threads: usize,
    pub record_events: bool,
    pub t_batch_ns: u64,
    pub batch_size: usize,
    pub sweep_intervals: Vec<u32>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let run = TrainRun::default();
        TrainerSection {
            backend: run.backend,
            network: NetworkPreset::Mlp,
            mlp_sizes: vec![400, 200, 10],
            layers: Vec::new(),
            mapping: MappingKind::ZeroCentered,
            learning_rate: run.learning_rate,
            pulse_budget: run.pulse_budget,
            epochs: run.epochs,
            weight_range: run.weight_range,
            decay_enabled: run.decay_enabled,
            threads: run.threads,
            record_events: run.record_events,
            t_batch_ns: run.timing.t_batch_ns,
            batch_size: run.timing.batch_size,
            sweep_intervals: vec![100, 200, 300],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory holding the four MNIST IDX files; `MNIST_DIR` overrides it.
    pub dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    /// Target `[height, width]`; inferred from the network input when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resize: Option<[usize; 2]>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: DeviceSection,
    pub synapse: TransferPolicy,
    pub crossbar: CrossbarConfig,
    pub trainer: TrainerSection,
    pub dataset: DatasetSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: TrainRun::default().seed,
            device: DeviceSection::default(),
            synapse: TransferPolicy::default(),
            crossbar: CrossbarConfig::default(),
            trainer: TrainerSection::default(),
            dataset: DatasetSection::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let t = &self.trainer;
        let bits = self.device.bits;
        let spec = match t.network {
            NetworkPreset::Mlp => {
                if t.mlp_sizes.len() < 2 {
                    return Err(Error::config(
                        "mlp_sizes needs at least an input and an output size",
                    ));
                }
                NetworkSpec::mlp(&t.mlp_sizes, bits, t.mapping)
            }
            NetworkPreset::Lenet => NetworkSpec::lenet(bits, t.mapping),
            NetworkPreset::TinyCnn => NetworkSpec::tiny_cnn(bits, t.mapping),
            NetworkPreset::Custom => NetworkSpec {
                layers: t.layers.clone(),
                weight_bits: bits,
                mapping: t.mapping,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Image size the dataset is resampled to.
    pub fn input_shape(&self, spec: &NetworkSpec) -> Result<[usize; 2]> {
        if let Some(shape) = self.dataset.resize {
            return Ok(shape);
        }
        match spec.layers.first() {
            Some(LayerSpec::Conv2d { height, width, .. }) => Ok([*height, *width]),
            _ => {
                let n = spec.input_len();
                let side = (n as f64).sqrt().round() as usize;
                if side * side == n {
                    Ok([side, side])
                } else {
                    Err(Error::config(format!(
                        "network input {n} is not a square image; set dataset.resize"
                    )))
                }
            }
        }
    }

    pub fn train_run(&self) -> Result<TrainRun> {
        let t = &self.trainer;
        let run = TrainRun {
            backend: t.backend,
            device: self.device.params()?,
            crossbar: self.crossbar.clone(),
            policy: self.synapse,
            timing: TimingModel {
                t_batch_ns: t.t_batch_ns,
                batch_size: t.batch_size,
            },
            learning_rate: t.learning_rate,
            pulse_budget: t.pulse_budget,
            epochs: t.epochs,
            weight_range: t.weight_range,
            decay_enabled: t.decay_enabled,
            seed: self.seed,
            threads: t.threads,
            record_events: t.record_events,
        };
        run.validate()?;
        Ok(run)
    }

    /// Checks every section against its invariants.
    pub fn validate(&self) -> Result<()> {
        let run = self.train_run()?;
        let spec = self.network()?;
        if spec.weight_bits != run.device.bits {
            return Err(Error::config("network weight bits differ from the device"));
        }
        self.input_shape(&spec)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synapse::TransferMode;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.device.params().unwrap(), DeviceParams::default());
        c.validate().unwrap();
        assert_eq!(c.input_shape(&c.network().unwrap()).unwrap(), [20, 20]);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "bogus = 1",
            "[device]\nbogus = 1",
            "[trainer]\nlr = 0.1",
            "[synapse]\nmode = \"midrange\"\ninterval = 3",
        ] {
            let err = RunConfig::from_toml(text, Path::new("bad.toml")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{text}");
        }
    }

    #[test]
    fn partial_synapse_section_keeps_defaults() {
        let c =
            RunConfig::from_toml("[synapse]\ninterval_batches = 42", Path::new("a.toml")).unwrap();
        assert_eq!(c.synapse.interval_batches, 42);
        assert_eq!(c.synapse.mid_lsb, TransferPolicy::default().mid_lsb);
        assert_eq!(c.synapse.mode, TransferPolicy::default().mode);
    }

    #[test]
    fn sections_parse() {
        let text = r#"
seed = 9
[device]
mode = "calibrated"
bits = 8
[synapse]
mode = "ideal"
interval_batches = 100
mid_lsb = 8
[trainer]
network = "custom"
[[trainer.layers]]
kind = "dense"
inputs = 784
outputs = 10
activation = "identity"
"#;
        let c = RunConfig::from_toml(text, Path::new("a.toml")).unwrap();
        let p = c.device.params().unwrap();
        assert_eq!(p, DeviceParams::calibrated(WeightBits::Eight));
        assert_eq!(c.synapse.mode, TransferMode::IdealResidual);
        let spec = c.network().unwrap();
        assert_eq!(spec.input_len(), 784);
        assert_eq!(c.input_shape(&spec).unwrap(), [28, 28]);
        assert_eq!(c.train_run().unwrap().seed, 9);
    }

    #[test]
    fn invalid_sections_rejected() {
        let bad_bits = RunConfig::from_toml("[device]\nbits = 7", Path::new("b.toml"));
        assert!(bad_bits.is_err());
        let c = RunConfig::from_toml(
            "[synapse]\nmode = \"midrange\"\ninterval_batches = 0\nmid_lsb = 8",
            Path::new("c.toml"),
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c =
            RunConfig::from_toml("[trainer]\nmlp_sizes = [401, 10]", Path::new("d.toml")).unwrap();
        assert!(c.validate().is_err());
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            any::<u64>(),
            prop_oneof![Just(ParamMode::Ideal), Just(ParamMode::Calibrated)],
            prop_oneof![Just(WeightBits::Six), Just(WeightBits::Eight)],
            proptest::option::of(1.0f64..7.5),
            1u32..1000,
            prop_oneof![
                Just(TransferMode::IdealResidual),
                Just(TransferMode::MidRangeReset)
            ],
            (1e-4f64..10.0, 1u32..64, 0u32..20, any::<bool>()),
            proptest::collection::vec(1u32..2000, 0..5),
            (
                proptest::option::of(1usize..60000),
                proptest::option::of([1usize..64, 1usize..64]),
            ),
            prop_oneof![
                Just(MappingKind::ZeroCentered),
                Just(MappingKind::DifferentialPair)
            ],
        )
            .prop_map(
                |(
                    seed,
                    mode,
                    bits,
                    span,
                    interval,
                    pmode,
                    (lr, budget, epochs, decay),
                    sweep,
                    (limit, resize),
                    mapping,
                )| {
                    let mut c = RunConfig {
                        seed,
                        ..RunConfig::default()
                    };
                    c.device.mode = mode;
                    c.device.bits = bits;
                    c.device.lsb_span = span;
                    c.synapse.interval_batches = interval;
                    c.synapse.mode = pmode;
                    c.trainer.learning_rate = lr;
                    c.trainer.pulse_budget = budget;
                    c.trainer.epochs = epochs;
                    c.trainer.decay_enabled = decay;
                    c.trainer.sweep_intervals = sweep;
                    c.trainer.mapping = mapping;
                    c.dataset.train_limit = limit;
                    c.dataset.resize = resize;
                    c.output.dir = PathBuf::from(format!("out/{seed}"));
                    c
                },
            )
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(c in arb_config()) {
            let text = c.to_toml().unwrap();
            let back = RunConfig::from_toml(&text, Path::new("rt.toml")).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn custom_layers_round_trip() {
        let mut c = RunConfig::default();
        c.trainer.network = NetworkPreset::Custom;
        c.trainer.layers = NetworkSpec::lenet(WeightBits::Six, MappingKind::ZeroCentered).layers;
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), Path::new("rt.toml")).unwrap();
        assert_eq!(back, c);
    }
}
