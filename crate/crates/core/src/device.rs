//! Physical parameters of the hybrid synapse and the pure current model.
//!
//! A synapse current is the sum of three ladders: the optional extended MSB
//! FeMFET (8-bit variant only), the MSB FeMFET with four polarization states,
//! and the volatile 3T1C LSB whose gate node sweeps 16 voltage levels. All
//! currents are in µA, voltages in V, durations in ns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current-ladder parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    /// LSB span is exactly `delta_i_msb * (lsb_states - 1) / lsb_states`, so
    /// saturation transfers are current-exact.
    Ideal,
    /// LSB span taken from the measured circuit (7.2 µA); transfers leave a
    /// small current discontinuity.
    Calibrated,
}

/// Synapse precision: 6-bit (MSB + LSB) or 8-bit (EMSB + MSB + LSB).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum WeightBits {
    Six,
    Eight,
}

impl WeightBits {
    pub fn bits(self) -> u8 {
        match self {
            WeightBits::Six => 6,
            WeightBits::Eight => 8,
        }
    }

    pub fn has_emsb(self) -> bool {
        matches!(self, WeightBits::Eight)
    }
}

impl TryFrom<u8> for WeightBits {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, String> {
        match value {
            6 => Ok(WeightBits::Six),
            8 => Ok(WeightBits::Eight),
            other => Err(format!(
                "unsupported weight precision {other} (expected 6 or 8)"
            )),
        }
    }
}

impl From<WeightBits> for u8 {
    fn from(value: WeightBits) -> u8 {
        value.bits()
    }
}

impl std::str::FromStr for WeightBits {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bits: u8 = s.parse().map_err(|_| format!("invalid bit count {s:?}"))?;
        WeightBits::try_from(bits)
    }
}

/// A programming pulse: amplitude window and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    pub amplitude_min_v: f64,
    pub amplitude_max_v: f64,
    pub width_ns: f64,
}

impl PulseSpec {
    pub fn fixed(amplitude_v: f64, width_ns: f64) -> Self {
        PulseSpec {
            amplitude_min_v: amplitude_v,
            amplitude_max_v: amplitude_v,
            width_ns,
        }
    }
}

/// All physical constants of one synapse variant.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceParams {
    pub mode: ParamMode,
    pub bits: WeightBits,
    pub msb_states: u16,
    pub lsb_states: u16,
    /// Only consulted when `bits` is [`WeightBits::Eight`].
    pub emsb_states: u16,
    /// Current increment between adjacent MSB polarization states.
    pub delta_i_msb: f64,
    /// Current difference between the highest and the lowest LSB state.
    pub lsb_span: f64,
    /// Current of the all-zero state.
    pub i_base: f64,
    pub vg_min: f64,
    pub vg_max_trigger: f64,
    pub vg_step: f64,
    pub lsb_pulse: PulseSpec,
    pub msb_pulse: PulseSpec,
    pub msb_endurance_budget: u64,
    /// Worst-case time for the LSB gate node to leak one state (10 mV).
    pub decay_time_per_lsb_ns: u64,
    /// Width multiplier of the EMSB FeMFET relative to the MSB FeMFET.
    pub emsb_scale: f64,
}

pub const DEFAULT_DELTA_I_MSB: f64 = 7.5;
pub const CALIBRATED_LSB_SPAN: f64 = 7.2;
pub const DEFAULT_I_BASE: f64 = 5.0;
pub const DEFAULT_DECAY_NS: u64 = 215_000;

impl DeviceParams {
    pub fn new(mode: ParamMode, bits: WeightBits) -> Self {
        let msb_states = 4;
        let lsb_states = 16;
        let delta_i_msb = DEFAULT_DELTA_I_MSB;
        DeviceParams {
            mode,
            bits,
            msb_states,
            lsb_states,
            emsb_states: 4,
            delta_i_msb,
            lsb_span: Self::default_lsb_span(mode, delta_i_msb, lsb_states),
            i_base: DEFAULT_I_BASE,
            vg_min: 0.57,
            vg_max_trigger: 0.73,
            vg_step: 0.010,
            lsb_pulse: PulseSpec::fixed(1.1, 0.25),
            msb_pulse: PulseSpec {
                amplitude_min_v: 1.4,
                amplitude_max_v: 1.8,
                width_ns: 100.0,
            },
            msb_endurance_budget: 10_000_000_000,
            decay_time_per_lsb_ns: DEFAULT_DECAY_NS,
            emsb_scale: 4.0,
        }
    }

    pub fn ideal(bits: WeightBits) -> Self {
        Self::new(ParamMode::Ideal, bits)
    }

    pub fn calibrated(bits: WeightBits) -> Self {
        Self::new(ParamMode::Calibrated, bits)
    }

    /// LSB span implied by `mode` when none is configured explicitly.
    pub fn default_lsb_span(mode: ParamMode, delta_i_msb: f64, lsb_states: u16) -> f64 {
        match mode {
            ParamMode::Ideal => {
                let n = f64::from(lsb_states);
                delta_i_msb * (n - 1.0) / n
            }
            ParamMode::Calibrated => CALIBRATED_LSB_SPAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("msb_states", self.msb_states),
            ("lsb_states", self.lsb_states),
            ("emsb_states", self.emsb_states),
        ];
        for (name, count) in counts {
            if count < 2 {
                return Err(Error::config(format!(
                    "{name} must be at least 2, got {count}"
                )));
            }
        }
        if self.lsb_states > 256 || self.msb_states > 256 || self.emsb_states > 256 {
            return Err(Error::config("state counts above 256 are not supported"));
        }
        if self.composite_states() > u32::from(u16::MAX) {
            return Err(Error::config("composite state space exceeds 65535 levels"));
        }
        for (name, value) in [
            ("delta_i_msb", self.delta_i_msb),
            ("lsb_span", self.lsb_span),
            ("i_base", self.i_base),
            ("emsb_scale", self.emsb_scale),
            ("vg_step", self.vg_step),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.lsb_span >= self.delta_i_msb {
            return Err(Error::config(format!(
                "lsb_span {} must be below delta_i_msb {} so MSB segments do not overlap",
                self.lsb_span, self.delta_i_msb
            )));
        }
        if self.mode == ParamMode::Ideal {
            let exact = Self::default_lsb_span(self.mode, self.delta_i_msb, self.lsb_states);
            if (self.lsb_span - exact).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "ideal mode requires lsb_span == delta_i_msb*(n-1)/n = {exact}, got {}",
                    self.lsb_span
                )));
            }
        }
        let trigger = self.vg_min + f64::from(self.lsb_states) * self.vg_step;
        if (trigger - self.vg_max_trigger).abs() > 1e-9 {
            return Err(Error::config(format!(
                "vg_min + lsb_states*vg_step = {trigger} V must equal vg_max_trigger {} V",
                self.vg_max_trigger
            )));
        }
        if self.decay_time_per_lsb_ns == 0 {
            return Err(Error::config("decay_time_per_lsb_ns must be positive"));
        }
        if self.msb_endurance_budget == 0 {
            return Err(Error::config("msb_endurance_budget must be positive"));
        }
        Ok(())
    }

    /// Current added by one LSB pulse.
    pub fn lsb_step_current(&self) -> f64 {
        self.lsb_span / f64::from(self.lsb_states - 1)
    }

    /// Current step between adjacent EMSB states.
    pub fn emsb_increment(&self) -> f64 {
        match self.mode {
            ParamMode::Ideal => f64::from(self.msb_states) * self.delta_i_msb,
            ParamMode::Calibrated => self.emsb_scale * self.delta_i_msb,
        }
    }

    /// Mean current per composite level; one weight quantum in current units.
    pub fn current_per_state(&self) -> f64 {
        self.delta_i_msb / f64::from(self.lsb_states)
    }

    pub fn emsb_levels(&self) -> u16 {
        if self.bits.has_emsb() {
            self.emsb_states
        } else {
            1
        }
    }

    /// Number of composite levels: 64 for 6-bit, 256 for 8-bit defaults.
    pub fn composite_states(&self) -> u32 {
        u32::from(self.emsb_levels()) * u32::from(self.msb_states) * u32::from(self.lsb_states)
    }

    pub fn max_composite(&self) -> u16 {
        (self.composite_states() - 1) as u16
    }

    pub fn lsb_max(&self) -> u16 {
        self.lsb_states - 1
    }

    pub fn msb_max(&self) -> u16 {
        self.msb_states - 1
    }

    /// Flattened index `e * (M * L) + m * L + l`.
    pub fn compose(&self, emsb: Option<u16>, msb: u16, lsb: u16) -> u16 {
        let segment = u32::from(self.msb_states) * u32::from(self.lsb_states);
        let e = u32::from(emsb.unwrap_or(0));
        (e * segment + u32::from(msb) * u32::from(self.lsb_states) + u32::from(lsb)) as u16
    }

    /// Inverse of [`compose`](Self::compose).
    pub fn decompose(&self, index: u16) -> Result<(Option<u16>, u16, u16)> {
        if u32::from(index) >= self.composite_states() {
            return Err(Error::domain(format!(
                "composite index {index} outside 0..{}",
                self.composite_states()
            )));
        }
        let lsb = index % self.lsb_states;
        let rest = index / self.lsb_states;
        let msb = rest % self.msb_states;
        let emsb = rest / self.msb_states;
        let emsb = self.bits.has_emsb().then_some(emsb);
        Ok((emsb, msb, lsb))
    }

    fn check_indices(&self, emsb: Option<u16>, msb: u16, lsb: u16) -> Result<()> {
        match (self.bits.has_emsb(), emsb) {
            (false, Some(_)) => return Err(Error::domain("6-bit synapse has no EMSB state")),
            (true, None) => return Err(Error::domain("8-bit synapse requires an EMSB state")),
            (true, Some(e)) if e >= self.emsb_states => {
                return Err(Error::domain(format!(
                    "emsb index {e} outside 0..{}",
                    self.emsb_states
                )))
            }
            _ => {}
        }
        if msb >= self.msb_states {
            return Err(Error::domain(format!(
                "msb index {msb} outside 0..{}",
                self.msb_states
            )));
        }
        if lsb >= self.lsb_states {
            return Err(Error::domain(format!(
                "lsb index {lsb} outside 0..{}",
                self.lsb_states
            )));
        }
        Ok(())
    }

    /// Total read current `I_SL` of a synapse in the given sub-circuit states.
    pub fn synapse_current(&self, emsb: Option<u16>, msb: u16, lsb: u16) -> Result<f64> {
        self.check_indices(emsb, msb, lsb)?;
        Ok(self.current_at(emsb.unwrap_or(0), msb, f64::from(lsb)))
    }

    /// Current with a continuous LSB position. `lsb` may lie one step outside
    /// the stored range, which is where the gate node sits when a pulse pushes
    /// it past the trigger level.
    pub(crate) fn current_at(&self, emsb: u16, msb: u16, lsb: f64) -> f64 {
        self.i_base
            + f64::from(emsb) * self.emsb_increment()
            + f64::from(msb) * self.delta_i_msb
            + lsb * self.lsb_step_current()
    }

    pub fn composite_current(&self, index: u16) -> Result<f64> {
        let (e, m, l) = self.decompose(index)?;
        self.synapse_current(e, m, l)
    }

    /// Gate-node voltage of the LSB transistor for a stored LSB state.
    pub fn vg_of_lsb(&self, lsb: u16) -> Result<f64> {
        if lsb >= self.lsb_states {
            return Err(Error::domain(format!(
                "lsb index {lsb} outside 0..{}",
                self.lsb_states
            )));
        }
        Ok(self.vg_min + f64::from(lsb) * self.vg_step)
    }

    /// Current of the highest-current state.
    pub fn max_current(&self) -> f64 {
        self.composite_current(self.max_composite())
            .expect("max composite index is in range")
    }
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams::ideal(WeightBits::Six)
    }
}
