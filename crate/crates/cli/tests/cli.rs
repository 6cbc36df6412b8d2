use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_stemlink");

fn stemlink(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("STEMLINK_URI")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A background server that is killed when dropped.
struct Server {
    child: Child,
    first_line: String,
}

impl Server {
    fn start(args: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut first_line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut first_line)
            .unwrap();
        Server {
            child,
            first_line: first_line.trim().to_string(),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn fast_config(dir: &Path) -> String {
    let p = dir.join("fast.toml");
    fs::write(
        &p,
        "settle_time_s = 0.05\n[scan]\nwidth = 16\nheight = 16\ndwell_time_us = 1.0\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn bundled_scenario_passes() {
    let o = stemlink(&["vit", "run", "ornl-steering"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn scenario_flag_and_json_output() {
    let o = stemlink(&["vit", "run", "--scenario", "ornl-steering", "--json"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.trim_start().starts_with('{'));
    assert!(text.contains("\"passed\": true"));
}

#[test]
fn list_names_the_bundled_assets() {
    let o = stemlink(&["vit", "list"]);
    assert_eq!(code(&o), 0);
    for name in ["ornl-steering", "msvit-concurrent", "os-vit", "ms-vit"] {
        assert!(stdout(&o).contains(name), "{name}");
    }
}

#[test]
fn failing_scenario_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("wrong.toml");
    fs::write(
        &p,
        r#"
name = "wrong"
topology = "os-vit"
[[servers]]
kind = "instrument"
host = "microscope1"
[[steps]]
actor = "eapm"
action = "invoke"
uri = "PYRO:swift_server@160.91.156.73:9090"
method = "scan_status"
expect = true
"#,
    )
    .unwrap();
    let o = stemlink(&["vit", "run", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));

    // the same scenario from a host the firewall refuses
    let text = fs::read_to_string(&p)
        .unwrap()
        .replace("actor = \"eapm\"", "actor = \"k200comp\"");
    fs::write(&p, text).unwrap();
    let o = stemlink(&["vit", "run", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
}

#[test]
fn unreadable_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "name = [").unwrap();
    assert_eq!(code(&stemlink(&["vit", "run", p.to_str().unwrap()])), 2);
    assert_eq!(
        code(&stemlink(&["vit", "run", "/nonexistent/scenario.toml"])),
        2
    );
    assert_eq!(
        code(&stemlink(&[
            "vit",
            "run",
            "ornl-steering",
            "--topology",
            "nowhere"
        ])),
        2
    );
}

#[test]
fn unreachable_instrument_exits_3() {
    let uri = format!("PYRO:swift_server@127.0.0.1:{}", free_port());
    let o = stemlink(&["check-scan", "--uri", &uri, "--timeout", "2"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_uri_exits_2() {
    assert_eq!(
        code(&stemlink(&["check-scan", "--uri", "http://example"])),
        2
    );
}

#[test]
fn serve_and_steer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let store = dir.path().join("store");
    fs::create_dir(&store).unwrap();
    let server = Server::start(&[
        "serve-instrument",
        "--bind",
        "127.0.0.1:0",
        "--config",
        &cfg,
        "--store",
        store.to_str().unwrap(),
    ]);
    let uri = server.first_line.clone();
    assert!(uri.starts_with("PYRO:swift_server@127.0.0.1:"), "{uri}");

    let o = stemlink(&["check-scan", "--uri", &uri]);
    assert_eq!((code(&o), stdout(&o).trim()), (0, "False"));

    let o = stemlink(&["probe-position", "--uri", &uri, "--x", "0.2", "--y", "0.8"]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    assert!(
        line.contains("0.5") && line.contains("0.2") && line.contains("->"),
        "{line}"
    );

    let o = stemlink(&["probe-position", "--uri", &uri, "--x", "1.5", "--y", "0.5"]);
    assert_eq!(code(&o), 1);

    let out = dir.path().join("out");
    let o = stemlink(&[
        "scan-channel",
        "--uri",
        &uri,
        "--ch",
        "1",
        "--frames",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("wrote ").count(), 2);
    assert!(out.join("index.tsv").exists());

    // same port again
    let port = uri.rsplit(':').next().unwrap();
    let o = stemlink(&["serve-instrument", "--bind", &format!("127.0.0.1:{port}")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_instrument_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "channel_count = 0\n").unwrap();
    let o = stemlink(&[
        "serve-instrument",
        "--bind",
        "127.0.0.1:0",
        "--config",
        p.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = stemlink(&[
        "serve-instrument",
        "--bind",
        "127.0.0.1:0",
        "--config",
        "/nonexistent.toml",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn share_and_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let store = dir.path().join("store");
    fs::create_dir(&store).unwrap();
    let inst = Server::start(&[
        "serve-instrument",
        "--bind",
        "127.0.0.1:0",
        "--config",
        &cfg,
    ]);
    let o = stemlink(&[
        "scan-channel",
        "--uri",
        &inst.first_line,
        "--frames",
        "1",
        "--out",
        store.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);

    let share = Server::start(&[
        "serve-share",
        "--bind",
        "127.0.0.1:0",
        "--root",
        store.to_str().unwrap(),
    ]);
    let endpoint = share.first_line.rsplit(' ').next().unwrap().to_string();

    let o = stemlink(&["measure", "ls", "--endpoint", &endpoint]);
    assert_eq!(code(&o), 0);
    let listing = stdout(&o);
    assert_eq!(listing.lines().count(), 1);
    let path = listing.split('\t').next().unwrap().to_string();
    assert!(path.ends_with(".stemfrm"), "{listing}");

    let fetched = dir.path().join("copy.stemfrm");
    let o = stemlink(&[
        "measure",
        "get",
        "--endpoint",
        &endpoint,
        &path,
        "--out",
        fetched.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("verified"));
    // the checksum the index advertised is the one that was checked
    let advertised = listing.trim().rsplit('\t').next().unwrap();
    assert!(stdout(&o).contains(advertised));
    assert_eq!(
        fs::read(&fetched).unwrap(),
        fs::read(store.join(&path)).unwrap()
    );

    let o = stemlink(&["measure", "get", "--endpoint", &endpoint, "absent.stemfrm"]);
    assert_eq!(code(&o), 1);
    let o = stemlink(&[
        "measure",
        "ls",
        "--endpoint",
        &format!("127.0.0.1:{}", free_port()),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |n: &str| {
        let log = dir.path().join(n);
        let o = stemlink(&[
            "vit",
            "run",
            "msvit-concurrent",
            "--seed",
            "7",
            "--log",
            log.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        (stdout(&o), fs::read_to_string(log).unwrap())
    };
    let a = run("a.log");
    let b = run("b.log");
    assert!(!a.1.is_empty());
    assert_eq!(a, b);
}
