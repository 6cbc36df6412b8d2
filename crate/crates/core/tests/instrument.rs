use std::collections::HashMap;
use std::sync::Arc;
use std::thread;

use proptest::prelude::*;

use stemlink::instrument::{
    scan_duration, synthesize, FrameInputs, Instrument, InstrumentConfig, ProbeCoordinates,
    ScanParameters, SpecimenModel,
};
use stemlink::time::{Clock, ManualClock, SimTime};

fn params() -> impl Strategy<Value = ScanParameters> {
    (1u32..48, 1u32..48, 1u32..64)
        .prop_map(|(w, h, q)| ScanParameters::new(w, h, q as f64 * 0.25).unwrap())
}

fn probe() -> impl Strategy<Value = Option<ProbeCoordinates>> {
    prop::option::of((0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(x, y)| ProbeCoordinates { x, y }))
}

fn instrument(scan: ScanParameters, seed: u64) -> (Instrument, ManualClock) {
    let clock = ManualClock::new();
    let cfg = InstrumentConfig {
        scan,
        rng_seed: seed,
        channel_count: 4,
        ..InstrumentConfig::default()
    };
    (
        Instrument::new(&cfg, Arc::new(clock.clone())).unwrap(),
        clock,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthesis_is_a_pure_function(p in params(), seed: u64, ch in 0u32..4, idx in 0u64..1000, pr in probe()) {
        let specimen = SpecimenModel::reference();
        let make = || synthesize(FrameInputs {
            specimen: &specimen,
            params: &p,
            probe: pr,
            rng_seed: seed,
            channel: ch,
            frame_index: idx,
            acquired_at: SimTime::from_nanos(7),
        });
        let (a, b) = (make(), make());
        prop_assert!(a.is_well_formed());
        prop_assert_eq!(a.pixels.len(), (p.width * p.height) as usize);
        let bits = |f: &stemlink::instrument::Frame| f.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn scans_return_n_frames_of_the_channel(p in params(), seed: u64, ch in 0i64..4, n in 1i64..=8) {
        let (inst, clock) = instrument(p, seed);
        let start = clock.now();
        let frames = inst.scan_channel(ch, n).unwrap();
        prop_assert_eq!(frames.len(), n as usize);
        prop_assert!(frames.iter().all(|f| f.channel == ch as u32 && f.is_well_formed()));
        prop_assert!(frames.windows(2).all(|w| w[0].frame_index + 1 == w[1].frame_index));
        prop_assert_eq!(clock.now().since(start), scan_duration(&p, n as u32, inst.settle_time()));
        prop_assert!(!inst.scan_status());
    }

    #[test]
    fn probe_moves_are_idempotent(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let (inst, _) = instrument(ScanParameters::default(), 1);
        let first = inst.probe_position(x, y).unwrap();
        let after_first = inst.snapshot().probe;
        let second = inst.probe_position(x, y).unwrap();
        prop_assert_eq!(inst.snapshot().probe, after_first);
        prop_assert_eq!(second.previous, first.new);
        prop_assert_eq!(second.new, first.new);
    }
}

#[test]
fn concurrent_commands_serialize() {
    let (inst, _) = instrument(ScanParameters::new(8, 8, 1.0).unwrap(), 3);
    let inst = Arc::new(inst);
    let targets: Vec<(f64, f64)> = (1..=32)
        .map(|i| (i as f64 / 128.0, 1.0 - i as f64 / 128.0))
        .collect();
    let handles: Vec<_> = targets
        .iter()
        .map(|&(x, y)| {
            let inst = Arc::clone(&inst);
            thread::spawn(move || {
                let _ = inst.scan_channel(0, 1);
                inst.probe_position(x, y).unwrap()
            })
        })
        .collect();
    let reports: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    // every move must follow exactly one other: the reports form one chain
    let key = |p: Option<ProbeCoordinates>| p.map(|p| (p.x.to_bits(), p.y.to_bits()));
    let by_previous: HashMap<_, _> = reports.iter().map(|r| (key(r.previous), r)).collect();
    assert_eq!(
        by_previous.len(),
        reports.len(),
        "two moves saw the same previous position"
    );
    let mut at = key(Some(ProbeCoordinates { x: 0.5, y: 0.5 }));
    for _ in 0..reports.len() {
        at = key(by_previous[&at].new);
    }
    assert_eq!(key(inst.snapshot().probe), at);
    assert!(!inst.scan_status());
}

#[test]
fn zero_zero_unsets_the_probe() {
    let (inst, _) = instrument(ScanParameters::default(), 1);
    let r = inst.probe_position(0.0, 0.0).unwrap();
    assert_eq!(r.previous, Some(ProbeCoordinates { x: 0.5, y: 0.5 }));
    assert_eq!(r.new, None);
    assert_eq!(inst.probe_position(0.3, 0.7).unwrap().previous, None);
}
