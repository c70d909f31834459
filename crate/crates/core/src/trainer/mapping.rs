//! Signed weights on unsigned conductance levels, and gradient-to-pulse
//! conversion.

use serde::{Deserialize, Serialize};

use crate::device::DeviceParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// One cell per weight; a reference column at `zero_state` is subtracted.
    ZeroCentered,
    /// Two cells per weight, `w = scale * (s_pos - s_neg)`.
    DifferentialPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMapping {
    pub kind: MappingKind,
    /// Weight represented by one composite level.
    pub scale: f64,
    pub zero_state: u16,
    pub max_state: u16,
}

/// Cell states holding one weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStates {
    Single(u16),
    Pair { pos: u16, neg: u16 },
}

impl WeightMapping {
    /// Mapping whose negative range reaches `-max_weight` (zero-centered) or
    /// whose span reaches `±max_weight` (differential pair).
    pub fn for_range(kind: MappingKind, params: &DeviceParams, max_weight: f64) -> Result<Self> {
        let max_state = params.max_composite();
        let zero_state = match kind {
            MappingKind::ZeroCentered => (params.composite_states() / 2) as u16,
            MappingKind::DifferentialPair => 0,
        };
        let half_span = match kind {
            MappingKind::ZeroCentered => f64::from(zero_state),
            MappingKind::DifferentialPair => f64::from(max_state),
        };
        let m = WeightMapping {
            kind,
            scale: max_weight / half_span,
            zero_state,
            max_state,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!(
                "weight scale must be positive, got {}",
                self.scale
            )));
        }
        if self.zero_state > self.max_state {
            return Err(Error::config("zero_state beyond the top state"));
        }
        Ok(())
    }

    /// Largest and smallest representable weights.
    pub fn range(&self) -> (f64, f64) {
        match self.kind {
            MappingKind::ZeroCentered => (
                -f64::from(self.zero_state) * self.scale,
                f64::from(self.max_state - self.zero_state) * self.scale,
            ),
            MappingKind::DifferentialPair => {
                let m = f64::from(self.max_state) * self.scale;
                (-m, m)
            }
        }
    }

    /// Weight held by the given cell states.
    pub fn weight_of(&self, cells: CellStates) -> f64 {
        match cells {
            CellStates::Single(s) => (f64::from(s) - f64::from(self.zero_state)) * self.scale,
            CellStates::Pair { pos, neg } => (f64::from(pos) - f64::from(neg)) * self.scale,
        }
    }
}

/// Nearest representable cell states for `w`, clamped to the state range.
/// Differential pairs use the minimal-magnitude split (one cell at zero).
pub fn weight_to_state(w: f64, mapping: &WeightMapping) -> CellStates {
    let steps = (w / mapping.scale).round_ties_even();
    let max = f64::from(mapping.max_state);
    match mapping.kind {
        MappingKind::ZeroCentered => {
            let s = (steps + f64::from(mapping.zero_state)).clamp(0.0, max);
            CellStates::Single(s as u16)
        }
        MappingKind::DifferentialPair => {
            let k = steps.clamp(-max, max);
            if k >= 0.0 {
                CellStates::Pair {
                    pos: k as u16,
                    neg: 0,
                }
            } else {
                CellStates::Pair {
                    pos: 0,
                    neg: (-k) as u16,
                }
            }
        }
    }
}

/// Signed pulse count realizing the SGD step `-lr * grad`, where one pulse
/// moves the weight by `scale_per_pulse`. Ties round to even.
pub fn grad_to_pulses(grad: f64, lr: f64, scale_per_pulse: f64, pulse_budget: u32) -> i32 {
    let budget = f64::from(pulse_budget);
    let n = (-lr * grad / scale_per_pulse).round_ties_even();
    if n.is_nan() {
        return 0;
    }
    n.clamp(-budget, budget) as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::WeightBits;

    fn zc() -> WeightMapping {
        WeightMapping::for_range(MappingKind::ZeroCentered, &DeviceParams::default(), 0.32).unwrap()
    }

    #[test]
    fn zero_centered_examples() {
        let m = zc();
        assert_eq!(m.zero_state, 32);
        assert_eq!(weight_to_state(0.0, &m), CellStates::Single(32));
        assert_eq!(weight_to_state(3.0 * m.scale, &m), CellStates::Single(35));
        assert_eq!(weight_to_state(1e3, &m), CellStates::Single(63));
        assert_eq!(weight_to_state(-1e3, &m), CellStates::Single(0));
        let (lo, hi) = m.range();
        assert!((lo + 0.32).abs() < 1e-12 && (hi - 0.31).abs() < 1e-12);
    }

    #[test]
    fn eight_bit_zero_state() {
        let p = DeviceParams::ideal(WeightBits::Eight);
        let m = WeightMapping::for_range(MappingKind::ZeroCentered, &p, 1.0).unwrap();
        assert_eq!((m.zero_state, m.max_state), (128, 255));
    }

    #[test]
    fn differential_pair_is_minimal() {
        let m = WeightMapping::for_range(
            MappingKind::DifferentialPair,
            &DeviceParams::default(),
            0.63,
        )
        .unwrap();
        assert_eq!(
            weight_to_state(0.0, &m),
            CellStates::Pair { pos: 0, neg: 0 }
        );
        assert_eq!(
            weight_to_state(5.0 * m.scale, &m),
            CellStates::Pair { pos: 5, neg: 0 }
        );
        assert_eq!(
            weight_to_state(-7.2 * m.scale, &m),
            CellStates::Pair { pos: 0, neg: 7 }
        );
        assert_eq!(
            weight_to_state(-1e9, &m),
            CellStates::Pair { pos: 0, neg: 63 }
        );
        let w = m.weight_of(CellStates::Pair { pos: 0, neg: 7 });
        assert!((w + 7.0 * m.scale).abs() < 1e-12);
    }

    #[test]
    fn pulse_examples() {
        assert_eq!(grad_to_pulses(0.0, 0.1, 0.01, 15), 0);
        // -lr * g = 2.4 quanta
        assert_eq!(grad_to_pulses(-0.24, 0.1, 0.01, 15), 2);
        assert_eq!(grad_to_pulses(0.24, 0.1, 0.01, 15), -2);
        assert_eq!(grad_to_pulses(-0.375, 1.0, 0.25, 15), 2);
        assert_eq!(grad_to_pulses(-0.625, 1.0, 0.25, 15), 2);
        assert_eq!(grad_to_pulses(-0.875, 1.0, 0.25, 15), 4);
        assert_eq!(grad_to_pulses(-1e9, 0.1, 0.01, 15), 15);
        assert_eq!(grad_to_pulses(1e9, 0.1, 0.01, 15), -15);
        assert_eq!(grad_to_pulses(f64::NAN, 0.1, 0.01, 15), 0);
    }

    #[test]
    fn bad_scale_rejected() {
        let mut m = zc();
        m.scale = 0.0;
        assert!(m.validate().is_err());
    }
}
