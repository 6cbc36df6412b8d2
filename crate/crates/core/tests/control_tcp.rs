use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::json;

use stemlink::control::codec::{
    decode_body, encode_body, read_frame, write_frame, DEFAULT_MAX_BODY,
};
use stemlink::control::{
    connect, invoke, serve, ControlMessage, ControlServer, ErrorCode, InvokeError, ObjectRegistry,
    ObjectUri, Outcome, Proxy, Request, StemTaskObject, TcpTransport,
};
use stemlink::instrument::{Instrument, InstrumentConfig, ProbeCoordinates, ScanParameters};
use stemlink::time::SystemClock;

const T: Duration = Duration::from_secs(10);

/// 16 x 16 at 1 us plus 200 ms settle: about 0.2 s per frame request.
fn quick_config() -> InstrumentConfig {
    InstrumentConfig {
        scan: ScanParameters::new(16, 16, 1.0).unwrap(),
        settle_time_s: 0.2,
        ..InstrumentConfig::default()
    }
}

fn start() -> (ControlServer, ObjectUri) {
    let inst = Instrument::new(&quick_config(), Arc::new(SystemClock)).unwrap();
    let mut reg = ObjectRegistry::new();
    reg.register(
        "swift_server",
        Arc::new(StemTaskObject::new(Arc::new(inst))),
    )
    .unwrap();
    let server = serve(reg, "127.0.0.1:0").unwrap();
    let uri = ObjectUri::new("swift_server", "127.0.0.1", server.local_addr().port()).unwrap();
    (server, uri)
}

#[test]
fn steering_commands_over_tcp() {
    let (_server, uri) = start();
    let p = connect(&uri, T).unwrap();
    assert!(!p.scan_status().unwrap());
    let frames = p.scan_channel(1, 2).unwrap();
    assert_eq!(frames.len(), 2);
    assert!(frames
        .iter()
        .all(|f| f.channel == 1 && f.width == 16 && f.is_well_formed()));
    assert!(frames[0].frame_index < frames[1].frame_index);
    let r = p.probe_position(0.2, 0.8).unwrap();
    assert_eq!(r.previous, Some(ProbeCoordinates { x: 0.5, y: 0.5 }));
    assert_eq!(r.new, Some(ProbeCoordinates { x: 0.2, y: 0.8 }));
    assert!(!p.scan_status().unwrap());
}

#[test]
fn second_client_sees_the_scan() {
    let (_server, uri) = start();
    let u = uri.clone();
    let scanner = thread::spawn(move || connect(&u, T).unwrap().scan_channel(0, 1).unwrap());
    thread::sleep(Duration::from_millis(60));
    let other = connect(&uri, T).unwrap();
    assert!(other.scan_status().unwrap());
    match other.scan_channel(0, 1) {
        Err(InvokeError::Remote(e)) => {
            assert_eq!(e.code, ErrorCode::ApplicationError);
            assert_eq!(e.kind.as_deref(), Some("Busy"));
        }
        other => panic!("expected Busy, got {other:?}"),
    }
    assert_eq!(scanner.join().unwrap().len(), 1);
    assert!(!other.scan_status().unwrap());
}

#[test]
fn calls_pipeline_on_one_connection() {
    let (_server, uri) = start();
    let transport = TcpTransport::connect(&uri.endpoint(), T).unwrap();
    let slow = Proxy::new(uri.clone(), transport.clone()).with_timeout(T);
    let fast = Proxy::new(uri, transport).with_timeout(T);
    let started = Instant::now();
    let scan = thread::spawn(move || slow.scan_channel(0, 1).unwrap());
    thread::sleep(Duration::from_millis(60));
    // answered while the scan reply is still outstanding on the same socket
    assert!(fast.scan_status().unwrap());
    assert!(started.elapsed() < Duration::from_millis(190));
    assert_eq!(scan.join().unwrap().len(), 1);
}

#[test]
fn dispatch_errors() {
    let (_server, uri) = start();
    let port = uri.port();
    let wrong = ObjectUri::new("nobody", "127.0.0.1", port).unwrap();
    let code = |r: Result<serde_json::Value, InvokeError>| match r {
        Err(InvokeError::Remote(e)) => e.code,
        other => panic!("expected a remote error, got {other:?}"),
    };
    assert_eq!(
        code(invoke(&wrong, "scan_status", vec![])),
        ErrorCode::UnknownObject
    );
    assert_eq!(
        code(invoke(&uri, "self_destruct", vec![])),
        ErrorCode::UnknownMethod
    );
    assert_eq!(
        code(invoke(&uri, "scan_channel", vec![json!("zero")])),
        ErrorCode::BadArguments
    );
    let e = invoke(&uri, "scan_channel", vec![json!(9), json!(1)]).unwrap_err();
    assert!(!e.is_connectivity());
    match e {
        InvokeError::Remote(e) => assert_eq!(e.kind.as_deref(), Some("InvalidChannel")),
        other => panic!("{other:?}"),
    }
    // the server is still healthy
    assert_eq!(invoke(&uri, "scan_status", vec![]).unwrap(), json!(false));
}

fn raw(uri: &ObjectUri) -> TcpStream {
    let s = TcpStream::connect(uri.endpoint()).unwrap();
    s.set_read_timeout(Some(T)).unwrap();
    s
}

#[test]
fn undecodable_request_gets_error_then_close() {
    let (_server, uri) = start();
    let mut s = raw(&uri);
    write_frame(&mut s, b"{ not json").unwrap();
    let body = read_frame(&mut s, DEFAULT_MAX_BODY).unwrap().unwrap();
    match decode_body(&body).unwrap() {
        ControlMessage::Response(r) => {
            assert_eq!(r.id, 0);
            assert!(matches!(r.outcome, Outcome::Error(e) if e.code == ErrorCode::DecodeError));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(read_frame(&mut s, DEFAULT_MAX_BODY).unwrap_or(None), None);
}

#[test]
fn oversized_length_prefix_is_refused() {
    let (_server, uri) = start();
    let mut s = raw(&uri);
    s.write_all(&u32::MAX.to_be_bytes()).unwrap();
    let body = read_frame(&mut s, DEFAULT_MAX_BODY).unwrap().unwrap();
    match decode_body(&body).unwrap() {
        ControlMessage::Response(r) => {
            assert!(matches!(r.outcome, Outcome::Error(e) if e.code == ErrorCode::FrameTooLarge));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn raw_requests_match_by_id() {
    let (_server, uri) = start();
    let mut s = raw(&uri);
    for id in [7u64, 8, 9] {
        let req = ControlMessage::Request(Request {
            id,
            object: "swift_server".into(),
            method: "scan_status".into(),
            args: vec![],
        });
        write_frame(&mut s, &encode_body(&req, DEFAULT_MAX_BODY).unwrap()).unwrap();
    }
    for id in [7u64, 8, 9] {
        let body = read_frame(&mut s, DEFAULT_MAX_BODY).unwrap().unwrap();
        match decode_body(&body).unwrap() {
            ControlMessage::Response(r) => {
                assert_eq!(r.id, id);
                assert_eq!(r.outcome, Outcome::Ok(json!(false)));
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn nobody_listening_is_a_connectivity_failure() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let uri = ObjectUri::new("swift_server", "127.0.0.1", port).unwrap();
    let e = connect(&uri, T).err().expect("nothing listens");
    assert!(matches!(e, InvokeError::ConnectionRefused(_)), "{e:?}");
    assert!(e.is_connectivity());
}

#[test]
fn port_in_use_is_a_bind_error() {
    let (server, _) = start();
    let again = serve(ObjectRegistry::new(), server.local_addr());
    assert!(again.is_err());
}
