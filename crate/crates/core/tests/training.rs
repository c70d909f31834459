mod common;

use hybrid_synapse::crossbar::{CrossbarConfig, TimingModel};
use hybrid_synapse::device::{DeviceParams, WeightBits};
use hybrid_synapse::synapse::{SynapseState, TransferPolicy};
use hybrid_synapse::trainer::{
    self, load_mnist, Backend, Dataset, MappingKind, NetworkSpec, Split, TrainRun,
};

fn fixture(side: usize) -> (Dataset, Dataset) {
    let tmp = tempfile::tempdir().unwrap();
    common::write_fixture(tmp.path(), 300, 100);
    let load = |split| {
        let d = load_mnist(tmp.path(), split, None).unwrap();
        if side == 28 {
            d
        } else {
            d.resampled(side, side)
        }
    };
    (load(Split::Train), load(Split::Test))
}

fn run() -> TrainRun {
    TrainRun {
        epochs: 2,
        threads: 2,
        timing: TimingModel {
            t_batch_ns: 700,
            batch_size: 20,
        },
        policy: TransferPolicy::mid_range(5),
        ..TrainRun::default()
    }
}

#[test]
fn eight_bit_tiny_cnn_smoke() {
    let (train, test) = fixture(20);
    let spec = NetworkSpec::tiny_cnn(WeightBits::Eight, MappingKind::ZeroCentered);
    let r = TrainRun {
        device: DeviceParams::ideal(WeightBits::Eight),
        ..run()
    };
    let m = trainer::train(&spec, &r, &train, &test).unwrap();
    assert_eq!(m.final_states.len(), 2);
    assert_eq!(m.mappings[0].zero_state, 128);
    assert!(m
        .final_states
        .iter()
        .all(|s| s.states.iter().all(|&v| v <= 255)));
    assert!(m.stats.pulses > 0);
    assert!(m.final_accuracy().is_finite());
}

#[test]
fn lenet_preset_trains_one_epoch() {
    let (train, test) = fixture(28);
    let spec = NetworkSpec::lenet(WeightBits::Six, MappingKind::ZeroCentered);
    let r = TrainRun { epochs: 1, ..run() };
    let m = trainer::train(&spec, &r, &train.truncated(100), &test.truncated(40)).unwrap();
    assert_eq!(m.final_states.len(), 4);
    assert_eq!(m.batches, 5);
}

#[test]
fn mlp_learns_fixture_in_every_configuration() {
    let (train, test) = fixture(20);
    let cases = [
        (
            Backend::Float,
            DeviceParams::default(),
            MappingKind::ZeroCentered,
            false,
        ),
        (
            Backend::Synapse,
            DeviceParams::default(),
            MappingKind::ZeroCentered,
            false,
        ),
        (
            Backend::Synapse,
            DeviceParams::calibrated(WeightBits::Six),
            MappingKind::ZeroCentered,
            false,
        ),
        (
            Backend::Synapse,
            DeviceParams::default(),
            MappingKind::DifferentialPair,
            false,
        ),
        (
            Backend::Synapse,
            DeviceParams::default(),
            MappingKind::ZeroCentered,
            true,
        ),
    ];
    for (backend, device, mapping, adc) in cases {
        let spec = NetworkSpec::mlp(&[400, 50, 10], WeightBits::Six, mapping);
        let r = TrainRun {
            backend,
            device,
            crossbar: CrossbarConfig {
                adc_enabled: adc,
                ..CrossbarConfig::default()
            },
            policy: TransferPolicy::ideal(5),
            epochs: 4,
            ..run()
        };
        let m = trainer::train(&spec, &r, &train, &test).unwrap();
        assert!(
            m.final_accuracy() > 0.8,
            "{backend:?} {mapping:?} adc={adc}: {:?}",
            m.epochs
        );
    }
}

#[test]
fn simulated_time_and_floor_based_decay() {
    let (train, test) = fixture(20);
    let spec = NetworkSpec::mlp(&[400, 10], WeightBits::Six, MappingKind::ZeroCentered);
    // no pulses and no transfers, so every synapse sits idle for the whole run
    let r = TrainRun {
        learning_rate: 0.0,
        policy: TransferPolicy::ideal(10_000),
        epochs: 3,
        ..run()
    };
    let m = trainer::train(&spec, &r, &train, &test).unwrap();
    assert_eq!(m.batches, 45);
    assert_eq!(m.sim_time_ns, 45 * 700);
    let params = DeviceParams::default();
    let quanta = (45 * 700 / params.decay_time_per_lsb_ns) as u16;
    assert_eq!(quanta, 0);

    let r = TrainRun {
        timing: TimingModel {
            t_batch_ns: 50_000,
            batch_size: 20,
        },
        ..r
    };
    let m = trainer::train(&spec, &r, &train, &test).unwrap();
    let quanta = (45 * 50_000 / params.decay_time_per_lsb_ns) as u16;
    assert_eq!(quanta, 10);
    let mut expected_loss = 0u64;
    for (&before, &after) in m.initial_states[0]
        .states
        .iter()
        .zip(&m.final_states[0].states)
    {
        let (e0, m0, l0) = params.decompose(before).unwrap();
        let (e1, m1, l1) = params.decompose(after).unwrap();
        assert_eq!((e0, m0), (e1, m1));
        assert_eq!(l1, l0.saturating_sub(quanta));
        expected_loss += u64::from(l0 - l1);
    }
    assert_eq!(m.stats.decay_states_lost, expected_loss);
}

#[test]
fn midrange_states_after_final_transfer() {
    let (train, test) = fixture(20);
    let spec = NetworkSpec::mlp(&[400, 20, 10], WeightBits::Six, MappingKind::ZeroCentered);
    // 15 batches per epoch; the interval divides the run length
    let m = trainer::train(&spec, &run(), &train, &test).unwrap();
    assert_eq!(m.batches % 5, 0);
    let params = DeviceParams::default();
    for snap in &m.final_states {
        for &s in &snap.states {
            let cell = SynapseState::from_composite(&params, s).unwrap();
            assert_eq!(cell.lsb(), 8);
        }
    }
    assert!(m.stats.abs_lsb_loss > 0);
    assert_eq!(m.epochs.last().unwrap().cum_lsb_loss, m.stats.abs_lsb_loss);
}

#[test]
fn mapping_mismatch_rejected() {
    let (train, test) = fixture(20);
    let spec = NetworkSpec::mlp(&[400, 10], WeightBits::Eight, MappingKind::ZeroCentered);
    assert!(trainer::train(&spec, &run(), &train, &test).is_err());
}
