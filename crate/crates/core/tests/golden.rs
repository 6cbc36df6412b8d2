//! Byte-level regression pins. Regenerate with `UPDATE_GOLDEN=1 cargo test --test golden`.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use stemlink::data::{FrameMetadata, MeasurementRecord};
use stemlink::instrument::{Instrument, InstrumentConfig};
use stemlink::scenario::{load_scenario, run_scenario, RunOptions};
use stemlink::time::ManualClock;

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from the pinned copy");
}

fn frame_zero() -> stemlink::instrument::Frame {
    let cfg = InstrumentConfig {
        rng_seed: 42,
        ..InstrumentConfig::default()
    };
    let inst = Instrument::new(&cfg, Arc::new(ManualClock::new())).unwrap();
    inst.synthesize_frame(0, 0).unwrap()
}

#[test]
fn seed_42_frame_pixels() {
    let f = frame_zero();
    let mut h = Sha256::new();
    for p in &f.pixels {
        h.update(p.to_le_bytes());
    }
    let text = format!(
        "channel {} frame {} {}x{} at {}\nsha256 {}\n",
        f.channel,
        f.frame_index,
        f.width,
        f.height,
        f.acquired_at.as_nanos(),
        hex::encode(h.finalize())
    );
    check("frame_seed42_ch0.txt", &text);
}

#[test]
fn seed_42_record_bytes() {
    let f = frame_zero();
    let meta = FrameMetadata {
        session: "golden".into(),
        probe: f.probe_at_acquisition,
        acquired_at_ns: f.acquired_at.as_nanos(),
        scan: None,
    };
    let bytes = MeasurementRecord::from_frame("golden.stemfrm", &f, meta).encode();
    check(
        "record_seed42_ch0.sha256",
        &format!("{}\n", hex::encode(Sha256::digest(&bytes))),
    );
}

#[test]
fn ornl_steering_event_log() {
    let s = load_scenario("ornl-steering").unwrap();
    let r = run_scenario(&s, &RunOptions::default()).unwrap();
    assert!(r.passed);
    check("ornl-steering.log", &r.log);
}
