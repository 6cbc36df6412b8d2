use std::fs;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use stemlink::data::{export_share, mount_share, MeasurementStore, SessionMetadata, ShareError};
use stemlink::instrument::{Instrument, InstrumentConfig};
use stemlink::time::ManualClock;

const T: Duration = Duration::from_secs(10);

/// A store holding three frames from channel 1.
fn populated() -> (tempfile::TempDir, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let store = MeasurementStore::open(dir.path()).unwrap();
    let inst = Instrument::new(&InstrumentConfig::default(), Arc::new(ManualClock::new())).unwrap();
    let frames = inst.scan_channel(1, 3).unwrap();
    let meta = SessionMetadata {
        session: "t1".into(),
        scan: Some(inst.snapshot().scan_params),
    };
    let paths = store.store_measurement(&frames, &meta).unwrap();
    (dir, paths)
}

#[test]
fn list_stat_read_fetch() {
    let (dir, paths) = populated();
    let server = export_share(dir.path(), "127.0.0.1:0").unwrap();
    let mut h = mount_share(&server.local_addr().to_string(), T).unwrap();
    assert!(h.is_open());

    let listing = h.list_measurements().unwrap();
    assert_eq!(
        listing.iter().map(|e| e.path.clone()).collect::<Vec<_>>(),
        paths
    );

    let local = MeasurementStore::open(dir.path()).unwrap();
    for entry in &listing {
        let (size, checksum) = h.stat(&entry.path).unwrap();
        assert_eq!(
            (size, checksum.as_str()),
            (entry.size, entry.checksum.as_str())
        );

        let head = h.read(&entry.path, 0, 8).unwrap();
        assert_eq!(&head, b"STEMFRM1");

        // small chunks force many READ round trips
        let got = h.fetch_with_chunk(&entry.path, 1000).unwrap();
        assert_eq!(got.raw, fs::read(dir.path().join(&entry.path)).unwrap());
        assert_eq!(got.checksum, entry.checksum);
        assert_eq!(got.record, local.load(&entry.path).unwrap());
        assert_eq!(got.record.to_frame().channel, 1);
    }
}

#[test]
fn missing_and_out_of_range() {
    let (dir, paths) = populated();
    let server = export_share(dir.path(), "127.0.0.1:0").unwrap();
    let mut h = mount_share(&server.local_addr().to_string(), T).unwrap();

    assert!(matches!(
        h.stat("nope.stemfrm"),
        Err(ShareError::NotFound(_))
    ));
    assert!(matches!(
        h.fetch_measurement("../index.tsv"),
        Err(ShareError::NotFound(_))
    ));

    let size = h.stat(&paths[0]).unwrap().0;
    assert!(matches!(
        h.read(&paths[0], size - 4, 8),
        Err(ShareError::RangeError(_))
    ));
    assert!(matches!(
        h.read(&paths[0], u64::MAX, 1),
        Err(ShareError::RangeError(_))
    ));
    // the session survives errors
    assert_eq!(h.read(&paths[0], size - 4, 4).unwrap().len(), 4);
}

#[test]
fn tampered_record_is_detected() {
    let (dir, paths) = populated();
    let file = dir.path().join(&paths[1]);
    let mut bytes = fs::read(&file).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    fs::write(&file, bytes).unwrap();

    let server = export_share(dir.path(), "127.0.0.1:0").unwrap();
    let mut h = mount_share(&server.local_addr().to_string(), T).unwrap();
    assert!(h.fetch_measurement(&paths[0]).is_ok());
    match h.fetch_measurement(&paths[1]) {
        Err(ShareError::CorruptRecord(_)) => {}
        other => panic!("expected CorruptRecord, got {other:?}"),
    }
}

#[test]
fn closed_handle_is_stale() {
    let (dir, paths) = populated();
    let server = export_share(dir.path(), "127.0.0.1:0").unwrap();
    let mut h = mount_share(&server.local_addr().to_string(), T).unwrap();
    h.close();
    assert!(!h.is_open());
    assert_eq!(h.list_measurements().unwrap_err(), ShareError::StaleHandle);
    assert_eq!(
        h.fetch_measurement(&paths[0]).unwrap_err(),
        ShareError::StaleHandle
    );
}

#[test]
fn mount_without_server_is_refused() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let e = mount_share(&format!("127.0.0.1:{port}"), T).err().unwrap();
    assert!(matches!(e, ShareError::ConnectionRefused(_)), "{e:?}");
    assert!(e.is_connectivity());
}

#[test]
fn export_requires_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(export_share(dir.path().join("absent"), "127.0.0.1:0").is_err());
}
