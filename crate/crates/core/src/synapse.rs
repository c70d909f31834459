//! Stateful composite synapse.
//!
//! Update pulses move the LSB gate node one state at a time. When a pulse
//! drives the node past its window, the read current crosses a reference
//! current and the accumulated value is transferred into the next MSB (or
//! EMSB) polarization state, with the gate node reset to the opposite end of
//! its range. Periodic transfers, leakage decay and endurance counters live
//! here as well.

use serde::{Deserialize, Serialize};

use crate::device::DeviceParams;
use crate::error::{Error, Result};

/// Simulated time in nanoseconds.
pub type SimTime = u64;

/// Comparator thresholds separating adjacent MSB and EMSB segments.
///
/// MSB thresholds are expressed for the lowest EMSB state; the EMSB
/// contribution is removed before comparing against them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLadder {
    msb: Vec<f64>,
    emsb: Vec<f64>,
}

impl ReferenceLadder {
    pub fn new(params: &DeviceParams, msb: Vec<f64>, emsb: Vec<f64>) -> Result<Self> {
        let expected_msb = usize::from(params.msb_states) - 1;
        if msb.len() != expected_msb {
            return Err(Error::config(format!(
                "expected {expected_msb} MSB reference currents, got {}",
                msb.len()
            )));
        }
        let expected_emsb = if params.bits.has_emsb() {
            usize::from(params.emsb_states) - 1
        } else {
            0
        };
        if emsb.len() != expected_emsb {
            return Err(Error::config(format!(
                "expected {expected_emsb} EMSB reference currents, got {}",
                emsb.len()
            )));
        }
        let lsb_top = f64::from(params.lsb_max());
        for (j, &t) in msb.iter().enumerate() {
            let m = j as u16;
            let below = params.current_at(0, m, lsb_top);
            let above = params.current_at(0, m + 1, 0.0);
            if !(below < t && t < above) {
                return Err(Error::config(format!(
                    "MSB reference {} = {t} µA must lie in ({below}, {above})",
                    j + 1
                )));
            }
        }
        for (j, &t) in emsb.iter().enumerate() {
            let e = j as u16;
            let below = params.current_at(e, params.msb_max(), lsb_top);
            let above = params.current_at(e + 1, 0, 0.0);
            if !(below < t && t < above) {
                return Err(Error::config(format!(
                    "EMSB reference {} = {t} µA must lie in ({below}, {above})",
                    j + 1
                )));
            }
        }
        Ok(ReferenceLadder { msb, emsb })
    }

    pub fn msb_thresholds(&self) -> &[f64] {
        &self.msb
    }

    pub fn emsb_thresholds(&self) -> &[f64] {
        &self.emsb
    }

    /// All thresholds, MSB ladder first.
    pub fn thresholds(&self) -> Vec<f64> {
        self.msb.iter().chain(&self.emsb).copied().collect()
    }

    /// Segment `(emsb, msb)` whose current interval contains `current`.
    pub fn locate(&self, params: &DeviceParams, current: f64) -> (Option<u16>, u16) {
        let emsb = self.emsb.iter().filter(|&&t| t < current).count() as u16;
        let residual = current - f64::from(emsb) * params.emsb_increment();
        let msb = self.msb.iter().filter(|&&t| t < residual).count() as u16;
        (params.bits.has_emsb().then_some(emsb), msb)
    }
}

/// Midpoint thresholds between the top of one segment and the bottom of the next.
pub fn default_references(params: &DeviceParams) -> ReferenceLadder {
    let lsb_top = f64::from(params.lsb_max());
    let msb = (1..params.msb_states)
        .map(|j| 0.5 * (params.current_at(0, j - 1, lsb_top) + params.current_at(0, j, 0.0)))
        .collect();
    let emsb = if params.bits.has_emsb() {
        (1..params.emsb_states)
            .map(|j| {
                0.5 * (params.current_at(j - 1, params.msb_max(), lsb_top)
                    + params.current_at(j, 0, 0.0))
            })
            .collect()
    } else {
        Vec::new()
    };
    ReferenceLadder { msb, emsb }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Residual LSB information is preserved exactly on every transfer.
    #[serde(rename = "ideal")]
    IdealResidual,
    /// The LSB is reset to its mid-range state after every periodic transfer.
    #[serde(rename = "midrange")]
    MidRangeReset,
}

impl std::str::FromStr for TransferMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ideal" => Ok(TransferMode::IdealResidual),
            "midrange" => Ok(TransferMode::MidRangeReset),
            other => Err(format!(
                "unknown transfer policy {other:?} (expected ideal or midrange)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferPolicy {
    pub mode: TransferMode,
    /// Batches between periodic transfers.
    pub interval_batches: u32,
    pub mid_lsb: u16,
}

impl TransferPolicy {
    pub fn mid_range(interval_batches: u32) -> Self {
        TransferPolicy {
            mode: TransferMode::MidRangeReset,
            interval_batches,
            mid_lsb: 8,
        }
    }

    pub fn ideal(interval_batches: u32) -> Self {
        TransferPolicy {
            mode: TransferMode::IdealResidual,
            interval_batches,
            mid_lsb: 8,
        }
    }

    pub fn validate(&self, params: &DeviceParams) -> Result<()> {
        if self.interval_batches == 0 {
            return Err(Error::config("interval_batches must be at least 1"));
        }
        if self.mid_lsb >= params.lsb_states {
            return Err(Error::config(format!(
                "mid_lsb {} outside 0..{}",
                self.mid_lsb, params.lsb_states
            )));
        }
        Ok(())
    }
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy::mid_range(300)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

/// Something other than a plain LSB move happened while applying pulses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferEvent {
    /// LSB overflow/underflow moved one level into the MSB. `emsb` is set when
    /// the carry propagated into the extended MSB as well.
    Saturation { direction: Direction, emsb: bool },
    /// Pulses discarded at the top or bottom of the composite range.
    Clipped {
        direction: Direction,
        discarded: u32,
    },
}

/// Result of a periodic transfer on one synapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferOutcome {
    /// Old composite index minus new composite index.
    pub lsb_loss: i32,
    pub msb_written: bool,
    pub emsb_written: bool,
}

/// Digital state of one crosspoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SynapseState {
    emsb: Option<u16>,
    msb: u16,
    lsb: u16,
    msb_writes: u64,
    emsb_writes: u64,
    last_touched: SimTime,
}

enum Step {
    Moved,
    Carried { emsb: bool },
    Clipped,
}

impl SynapseState {
    pub fn new(params: &DeviceParams, emsb: Option<u16>, msb: u16, lsb: u16) -> Result<Self> {
        params.synapse_current(emsb, msb, lsb)?;
        Ok(SynapseState {
            emsb,
            msb,
            lsb,
            msb_writes: 0,
            emsb_writes: 0,
            last_touched: 0,
        })
    }

    pub fn zero(params: &DeviceParams) -> Self {
        SynapseState {
            emsb: params.bits.has_emsb().then_some(0),
            msb: 0,
            lsb: 0,
            msb_writes: 0,
            emsb_writes: 0,
            last_touched: 0,
        }
    }

    pub fn from_composite(params: &DeviceParams, index: u16) -> Result<Self> {
        let (emsb, msb, lsb) = params.decompose(index)?;
        Self::new(params, emsb, msb, lsb)
    }

    pub fn emsb(&self) -> Option<u16> {
        self.emsb
    }

    pub fn msb(&self) -> u16 {
        self.msb
    }

    pub fn lsb(&self) -> u16 {
        self.lsb
    }

    pub fn msb_writes(&self) -> u64 {
        self.msb_writes
    }

    pub fn emsb_writes(&self) -> u64 {
        self.emsb_writes
    }

    /// Time the LSB gate node was last programmed, advanced by whole decay quanta.
    pub fn last_touched(&self) -> SimTime {
        self.last_touched
    }

    pub fn composite(&self, params: &DeviceParams) -> u16 {
        params.compose(self.emsb, self.msb, self.lsb)
    }

    /// Single-phase read of the total synapse current. Does not disturb the state.
    pub fn read_current(&self, params: &DeviceParams) -> f64 {
        params.current_at(self.emsb.unwrap_or(0), self.msb, f64::from(self.lsb))
    }

    /// Marks the gate node as freshly programmed at `now`.
    pub fn touch(&mut self, now: SimTime) {
        self.last_touched = now;
    }

    fn program_segment(&mut self, emsb: Option<u16>, msb: u16) -> (bool, bool) {
        let msb_written = msb != self.msb;
        let emsb_written = emsb != self.emsb;
        if msb_written {
            self.msb = msb;
            self.msb_writes += 1;
        }
        if emsb_written {
            self.emsb = emsb;
            self.emsb_writes += 1;
        }
        (msb_written, emsb_written)
    }

    fn step(
        &mut self,
        direction: Direction,
        params: &DeviceParams,
        refs: &ReferenceLadder,
    ) -> Step {
        let e = self.emsb.unwrap_or(0);
        let (probe_lsb, reset_lsb) = match direction {
            Direction::Up if self.lsb < params.lsb_max() => {
                self.lsb += 1;
                return Step::Moved;
            }
            Direction::Down if self.lsb > 0 => {
                self.lsb -= 1;
                return Step::Moved;
            }
            Direction::Up => (f64::from(params.lsb_states), 0),
            Direction::Down => (-1.0, params.lsb_max()),
        };
        // The gate node has left its window; the comparator sees the current
        // it would produce one step beyond the stored range.
        let probe = params.current_at(e, self.msb, probe_lsb);
        let (target_emsb, target_msb) = refs.locate(params, probe);
        if target_emsb == self.emsb && target_msb == self.msb {
            return Step::Clipped;
        }
        let (_, emsb_written) = self.program_segment(target_emsb, target_msb);
        self.lsb = reset_lsb;
        Step::Carried { emsb: emsb_written }
    }

    /// Applies `n` LSB pulses (positive potentiates, negative depresses).
    pub fn apply_pulses(
        &mut self,
        n: i32,
        params: &DeviceParams,
        refs: &ReferenceLadder,
    ) -> Vec<TransferEvent> {
        let direction = if n >= 0 {
            Direction::Up
        } else {
            Direction::Down
        };
        let total = n.unsigned_abs();
        let mut events = Vec::new();
        for applied in 0..total {
            match self.step(direction, params, refs) {
                Step::Moved => {}
                Step::Carried { emsb } => {
                    events.push(TransferEvent::Saturation { direction, emsb })
                }
                Step::Clipped => {
                    events.push(TransferEvent::Clipped {
                        direction,
                        discarded: total - applied,
                    });
                    break;
                }
            }
        }
        events
    }

    /// Scheduled LSB-to-MSB transfer.
    pub fn periodic_transfer(
        &mut self,
        policy: &TransferPolicy,
        params: &DeviceParams,
        refs: &ReferenceLadder,
    ) -> TransferOutcome {
        match policy.mode {
            TransferMode::IdealResidual => TransferOutcome {
                lsb_loss: 0,
                msb_written: false,
                emsb_written: false,
            },
            TransferMode::MidRangeReset => {
                let before = i32::from(self.composite(params));
                let (emsb, msb) = refs.locate(params, self.read_current(params));
                let (msb_written, emsb_written) = self.program_segment(emsb, msb);
                self.lsb = policy.mid_lsb;
                TransferOutcome {
                    lsb_loss: before - i32::from(self.composite(params)),
                    msb_written,
                    emsb_written,
                }
            }
        }
    }

    /// Worst-case leakage: one LSB state lost per full decay quantum in
    /// `elapsed_ns`, floored at the lowest state. Returns the states lost.
    pub fn apply_decay(&mut self, elapsed_ns: u64, params: &DeviceParams) -> u16 {
        let quanta = elapsed_ns / params.decay_time_per_lsb_ns;
        let lost = quanta.min(u64::from(self.lsb)) as u16;
        self.lsb -= lost;
        lost
    }

    /// Applies the decay accrued between `last_touched` and `now`. The
    /// unconsumed remainder carries over to the next call.
    pub fn accrue_decay(&mut self, now: SimTime, params: &DeviceParams) -> u16 {
        let q = params.decay_time_per_lsb_ns;
        let quanta = now.saturating_sub(self.last_touched) / q;
        if quanta == 0 {
            return 0;
        }
        self.last_touched += quanta * q;
        self.apply_decay(quanta * q, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{ParamMode, WeightBits};
    use proptest::prelude::*;

    fn ideal6() -> (DeviceParams, ReferenceLadder) {
        let p = DeviceParams::ideal(WeightBits::Six);
        let r = default_references(&p);
        (p, r)
    }

    fn state(p: &DeviceParams, msb: u16, lsb: u16) -> SynapseState {
        SynapseState::new(p, None, msb, lsb).unwrap()
    }

    #[test]
    fn read_current_examples() {
        let (p, _) = ideal6();
        assert_eq!(state(&p, 0, 0).read_current(&p), 5.0);
        assert_eq!(state(&p, 2, 0).read_current(&p), 20.0);
        assert!((state(&p, 1, 4).read_current(&p) - 14.375).abs() < 1e-12);
    }

    #[test]
    fn pulse_examples() {
        let (p, r) = ideal6();

        let mut s = state(&p, 1, 8);
        assert!(s.apply_pulses(3, &p, &r).is_empty());
        assert_eq!((s.msb(), s.lsb()), (1, 11));

        let mut s = state(&p, 1, 15);
        let ev = s.apply_pulses(1, &p, &r);
        assert_eq!((s.msb(), s.lsb()), (2, 0));
        assert_eq!(
            ev,
            vec![TransferEvent::Saturation {
                direction: Direction::Up,
                emsb: false
            }]
        );
        assert_eq!(s.msb_writes(), 1);

        let mut s = state(&p, 0, 0);
        let ev = s.apply_pulses(-5, &p, &r);
        assert_eq!((s.msb(), s.lsb()), (0, 0));
        assert_eq!(
            ev,
            vec![TransferEvent::Clipped {
                direction: Direction::Down,
                discarded: 5
            }]
        );
        assert_eq!(s.msb_writes(), 0);

        let mut s = state(&p, 0, 14);
        let ev = s.apply_pulses(20, &p, &r);
        assert_eq!((s.msb(), s.lsb()), (2, 2));
        assert_eq!(ev.len(), 2);
        assert_eq!(s.msb_writes(), 2);
    }

    #[test]
    fn borrow_sets_lsb_to_top() {
        let (p, r) = ideal6();
        let mut s = state(&p, 2, 0);
        let ev = s.apply_pulses(-1, &p, &r);
        assert_eq!((s.msb(), s.lsb()), (1, 15));
        assert_eq!(
            ev,
            vec![TransferEvent::Saturation {
                direction: Direction::Down,
                emsb: false
            }]
        );
    }

    #[test]
    fn top_clipping_is_partial() {
        let (p, r) = ideal6();
        let mut s = state(&p, 3, 13);
        let ev = s.apply_pulses(5, &p, &r);
        assert_eq!((s.msb(), s.lsb()), (3, 15));
        assert_eq!(
            ev,
            vec![TransferEvent::Clipped {
                direction: Direction::Up,
                discarded: 3
            }]
        );
    }

    #[test]
    fn eight_bit_carry_reaches_emsb() {
        let p = DeviceParams::ideal(WeightBits::Eight);
        let r = default_references(&p);
        let mut s = SynapseState::new(&p, Some(1), 3, 15).unwrap();
        let ev = s.apply_pulses(1, &p, &r);
        assert_eq!((s.emsb(), s.msb(), s.lsb()), (Some(2), 0, 0));
        assert_eq!(
            ev,
            vec![TransferEvent::Saturation {
                direction: Direction::Up,
                emsb: true
            }]
        );
        assert_eq!((s.msb_writes(), s.emsb_writes()), (1, 1));

        let ev = s.apply_pulses(-1, &p, &r);
        assert_eq!((s.emsb(), s.msb(), s.lsb()), (Some(1), 3, 15));
        assert_eq!(ev.len(), 1);
        assert_eq!((s.msb_writes(), s.emsb_writes()), (2, 2));
    }

    #[test]
    fn periodic_transfer_examples() {
        let (p, r) = ideal6();
        let mid = TransferPolicy::mid_range(300);

        let mut s = state(&p, 1, 8);
        assert_eq!(s.periodic_transfer(&mid, &p, &r).lsb_loss, 0);
        assert_eq!((s.msb(), s.lsb()), (1, 8));

        let mut s = state(&p, 1, 14);
        let out = s.periodic_transfer(&mid, &p, &r);
        assert_eq!((s.msb(), s.lsb(), out.lsb_loss), (1, 8, 6));
        assert!(!out.msb_written);

        let mut s = state(&p, 1, 2);
        assert_eq!(s.periodic_transfer(&mid, &p, &r).lsb_loss, -6);
        assert_eq!((s.msb(), s.lsb()), (1, 8));

        let ideal = TransferPolicy::ideal(300);
        for c in 0..64 {
            let mut s = SynapseState::from_composite(&p, c).unwrap();
            let before = s;
            assert_eq!(s.periodic_transfer(&ideal, &p, &r).lsb_loss, 0);
            assert_eq!(s, before);
        }
    }

    #[test]
    fn decay_examples() {
        let (p, _) = ideal6();
        let mut s = state(&p, 2, 8);
        assert_eq!(s.apply_decay(0, &p), 0);
        assert_eq!(s.lsb(), 8);
        assert_eq!(s.apply_decay(2 * 215_000, &p), 2);
        assert_eq!((s.msb(), s.lsb()), (2, 6));
        assert_eq!(s.apply_decay(214_999, &p), 0);

        let mut s = state(&p, 1, 1);
        s.apply_decay(10 * 215_000, &p);
        assert_eq!((s.msb(), s.lsb()), (1, 0));
    }

    #[test]
    fn accrued_decay_keeps_remainder() {
        let (p, _) = ideal6();
        let mut s = state(&p, 0, 15);
        let mut lost = 0;
        let mut now = 0;
        for _ in 0..1000 {
            now += 700;
            lost += s.accrue_decay(now, &p);
        }
        // 700 µs of leakage at 215 µs per state
        assert_eq!(lost, 3);
        assert_eq!(s.last_touched(), 3 * 215_000);
    }

    #[test]
    fn reference_examples() {
        let (p, r) = ideal6();
        assert_eq!(r.msb_thresholds().len(), 3);
        assert!((r.msb_thresholds()[0] - 12.265625).abs() < 1e-12);

        let c = DeviceParams::calibrated(WeightBits::Six);
        let rc = default_references(&c);
        assert!((rc.msb_thresholds()[0] - 12.35).abs() < 1e-12);

        let mut two = p.clone();
        two.msb_states = 2;
        assert_eq!(default_references(&two).thresholds().len(), 1);

        let p8 = DeviceParams::ideal(WeightBits::Eight);
        let r8 = default_references(&p8);
        assert_eq!(
            (r8.msb_thresholds().len(), r8.emsb_thresholds().len()),
            (3, 3)
        );
        assert!(ReferenceLadder::new(&p8, r8.msb.clone(), r8.emsb.clone()).is_ok());
        assert!(ReferenceLadder::new(&p, vec![12.0, 20.0, 27.0], vec![]).is_err());
        assert!(ReferenceLadder::new(&p, vec![12.265625], vec![]).is_err());
    }

    #[test]
    fn locate_every_state() {
        for mode in [ParamMode::Ideal, ParamMode::Calibrated] {
            for bits in [WeightBits::Six, WeightBits::Eight] {
                let p = DeviceParams::new(mode, bits);
                let r = default_references(&p);
                for c in 0..=p.max_composite() {
                    let s = SynapseState::from_composite(&p, c).unwrap();
                    assert_eq!(r.locate(&p, s.read_current(&p)), (s.emsb(), s.msb()));
                }
            }
        }
    }

    #[test]
    fn policy_validation() {
        let (p, _) = ideal6();
        assert!(TransferPolicy::mid_range(0).validate(&p).is_err());
        let mut pol = TransferPolicy::mid_range(100);
        pol.mid_lsb = 16;
        assert!(pol.validate(&p).is_err());
        assert!(TransferPolicy::ideal(1).validate(&p).is_ok());
    }

    proptest! {
        #[test]
        fn mid_range_loss_bound(c in 0u16..64, mid in 0u16..16) {
            let (p, r) = ideal6();
            let mut pol = TransferPolicy::mid_range(100);
            pol.mid_lsb = mid;
            let mut s = SynapseState::from_composite(&p, c).unwrap();
            let lsb = s.lsb();
            let out = s.periodic_transfer(&pol, &p, &r);
            prop_assert_eq!(s.lsb(), mid);
            prop_assert_eq!(out.lsb_loss, i32::from(lsb) - i32::from(mid));
            prop_assert_eq!(out.lsb_loss == 0, lsb == mid);
            prop_assert!(!out.msb_written);
        }

        #[test]
        fn decay_leaves_msb_alone(c in 0u16..256, elapsed in 0u64..10_000_000) {
            let p = DeviceParams::calibrated(WeightBits::Eight);
            let mut s = SynapseState::from_composite(&p, c).unwrap();
            let before = s;
            s.apply_decay(elapsed, &p);
            prop_assert_eq!((s.emsb(), s.msb()), (before.emsb(), before.msb()));
            let expect = u64::from(before.lsb()).saturating_sub(elapsed / 215_000);
            prop_assert_eq!(u64::from(s.lsb()), expect);
        }

        #[test]
        fn write_counters_track_segment_changes(
            start in 0u16..64,
            pulses in proptest::collection::vec(-20i32..=20, 0..40),
            calibrated in any::<bool>(),
        ) {
            let mode = if calibrated { ParamMode::Calibrated } else { ParamMode::Ideal };
            let p = DeviceParams::new(mode, WeightBits::Six);
            let r = default_references(&p);
            let mut s = SynapseState::from_composite(&p, start).unwrap();
            let mut saturations = 0u64;
            for n in pulses {
                let before = s;
                let ev = s.apply_pulses(n, &p, &r);
                saturations += ev.iter().filter(|e| matches!(e, TransferEvent::Saturation { .. })).count() as u64;
                prop_assert!(s.msb_writes() >= before.msb_writes());
            }
            prop_assert_eq!(s.msb_writes(), saturations);
        }
    }
}
