use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use stemlink::control::{self, ObjectRegistry, ObjectUri, StemTaskObject, DEFAULT_OBJECTID};
use stemlink::data::{export_share, mount_share, MeasurementStore, SessionMetadata, ShareError};
use stemlink::instrument::{Instrument, InstrumentConfig};
use stemlink::netem::RunMode;
use stemlink::scenario::{self, RunOptions, ScenarioError};
use stemlink::time::SystemClock;

const OK: u8 = 0;
const REMOTE: u8 = 1;
const CONFIG: u8 = 2;
const CONNECT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "stemlink",
    version,
    about = "Instrument control, data transfer and a virtual twin of the network"
)]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Remote {
    /// Object URI, e.g. PYRO:swift_server@160.91.156.73:9090
    #[arg(long, env = "STEMLINK_URI", default_value_t = format!("PYRO:{DEFAULT_OBJECTID}@127.0.0.1:9090"))]
    uri: String,
    /// Seconds to wait for a reply.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the simulated instrument behind a control server.
    ServeInstrument {
        #[arg(long, default_value = "0.0.0.0:9090")]
        bind: String,
        /// Instrument configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_OBJECTID)]
        objectid: String,
        /// Store every scan's frames in this directory.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Export a measurement store read-only.
    ServeShare {
        #[arg(long, default_value = "0.0.0.0:4450")]
        bind: String,
        #[arg(long)]
        root: PathBuf,
    },
    /// Print True while a scan is in progress, False otherwise.
    CheckScan(Remote),
    /// Acquire frames and print one line per frame.
    ScanChannel {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, visible_alias = "ch", default_value_t = 0)]
        channel: i64,
        #[arg(long, default_value_t = 1)]
        frames: i64,
        /// Also write the frames as STEMFRM1 records into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Park the probe at (x, y) in the unit scan field; (0, 0) unsets it.
    ProbePosition {
        #[command(flatten)]
        remote: Remote,
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
    },
    /// Run scenarios on the virtual twin.
    Vit {
        #[command(subcommand)]
        cmd: VitCmd,
    },
    /// Browse and fetch from a measurement share.
    Measure {
        #[command(subcommand)]
        cmd: MeasureCmd,
    },
}

#[derive(Subcommand)]
enum VitCmd {
    /// Run a bundled scenario by name, or a scenario file.
    Run {
        /// Scenario name or file (same as the positional argument).
        #[arg(long = "scenario", value_name = "SCENARIO")]
        scenario_flag: Option<String>,
        #[arg(
            required_unless_present = "scenario_flag",
            conflicts_with = "scenario_flag"
        )]
        scenario: Option<String>,
        /// Bundled topology name or topology file, replacing the scenario's.
        #[arg(long)]
        topology: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Mode::Virtual)]
        mode: Mode,
        /// Real seconds per virtual second in realtime mode.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Keep named stores under this directory.
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// List bundled scenarios and topologies.
    List,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Virtual,
    Realtime,
}

#[derive(Subcommand)]
enum MeasureCmd {
    /// List the records in a share.
    Ls {
        /// host:port of the share.
        #[arg(long, default_value = "127.0.0.1:4450")]
        endpoint: String,
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
    },
    /// Fetch and verify one record.
    Get {
        #[arg(long, default_value = "127.0.0.1:4450")]
        endpoint: String,
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        path: String,
        /// Where to write the record; defaults to its name in the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<control::InvokeError> for Failure {
    fn from(e: control::InvokeError) -> Self {
        Failure::new(if e.is_connectivity() { CONNECT } else { REMOTE }, e)
    }
}

impl From<ShareError> for Failure {
    fn from(e: ShareError) -> Self {
        Failure::new(if e.is_connectivity() { CONNECT } else { REMOTE }, e)
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::new(CONFIG, e)
    }
}

type CmdResult = Result<u8, Failure>;

fn timeout(secs: f64) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(secs)
        .map_err(|_| Failure::new(CONFIG, format!("bad timeout {secs}")))
}

fn proxy(r: &Remote) -> Result<control::Proxy<control::TcpTransport>, Failure> {
    let uri = ObjectUri::parse(&r.uri).map_err(|e| Failure::new(CONFIG, e))?;
    let t = timeout(r.timeout)?;
    Ok(control::connect(&uri, t)?.with_timeout(t))
}

fn serve_instrument(
    bind: &str,
    config: Option<PathBuf>,
    objectid: &str,
    store: Option<PathBuf>,
) -> CmdResult {
    let cfg = match config {
        Some(p) => InstrumentConfig::load(&p).map_err(|e| Failure::new(CONFIG, e))?,
        None => InstrumentConfig::default(),
    };
    let instrument =
        Instrument::new(&cfg, Arc::new(SystemClock)).map_err(|e| Failure::new(CONFIG, e))?;
    let mut obj = StemTaskObject::new(Arc::new(instrument));
    if let Some(dir) = store {
        obj = obj.with_store(Arc::new(
            MeasurementStore::open(dir).map_err(|e| Failure::new(CONFIG, e))?,
        ));
    }
    let mut reg = ObjectRegistry::new();
    reg.register(objectid, Arc::new(obj))
        .map_err(|e| Failure::new(CONFIG, e))?;
    let server = control::serve(reg, bind).map_err(|e| Failure::new(CONFIG, e))?;
    let addr = server.local_addr();
    println!("PYRO:{objectid}@{}:{}", addr.ip(), addr.port());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(OK)
}

fn serve_share(bind: &str, root: PathBuf) -> CmdResult {
    let server = export_share(&root, bind).map_err(|e| Failure::new(CONFIG, e))?;
    println!("sharing {} on {}", root.display(), server.local_addr());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(OK)
}

fn vit(cmd: VitCmd) -> CmdResult {
    match cmd {
        VitCmd::List => {
            println!("scenarios:");
            for (name, text) in scenario::SCENARIOS {
                let s = scenario::Scenario::from_toml_str(text)?;
                println!("  {name:<18} {}", s.description);
            }
            println!("topologies:");
            for (name, _) in scenario::TOPOLOGIES {
                println!("  {name}");
            }
            Ok(OK)
        }
        VitCmd::Run {
            scenario_flag,
            scenario: positional,
            topology,
            seed,
            mode,
            scale,
            json,
            log,
            store_dir,
        } => {
            let which = scenario_flag.or(positional).expect("clap requires one");
            let mode = match mode {
                Mode::Virtual => RunMode::Virtual,
                Mode::Realtime if scale.is_finite() && scale >= 0.0 => RunMode::Realtime { scale },
                Mode::Realtime => {
                    return Err(Failure::new(CONFIG, format!("bad realtime scale {scale}")))
                }
            };
            let opts = RunOptions {
                seed,
                mode,
                store_dir,
                topology,
                base_dir: None,
            };
            let report = if scenario::bundled::scenario_text(&which).is_some() {
                scenario::run_scenario(&scenario::load_scenario(&which)?, &opts)?
            } else {
                scenario::run_file(&PathBuf::from(&which), &opts)?
            };
            if let Some(p) = log {
                fs::write(&p, &report.log)
                    .map_err(|e| Failure::new(CONFIG, format!("{}: {e}", p.display())))?;
            }
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.render_human());
            }
            Ok(if report.passed {
                OK
            } else if report.connectivity_failure() {
                CONNECT
            } else {
                REMOTE
            })
        }
    }
}

fn measure(cmd: MeasureCmd) -> CmdResult {
    match cmd {
        MeasureCmd::Ls {
            endpoint,
            timeout: t,
        } => {
            let mut share = mount_share(&endpoint, timeout(t)?)?;
            for e in share.list_measurements()? {
                println!("{}\t{}\t{}", e.path, e.size, e.checksum);
            }
            Ok(OK)
        }
        MeasureCmd::Get {
            endpoint,
            timeout: t,
            path,
            out,
        } => {
            let mut share = mount_share(&endpoint, timeout(t)?)?;
            // fetch verifies the size and checksum the share reports
            let rec = share.fetch_measurement(&path)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&rec.record.path));
            fs::write(&out, &rec.raw)
                .map_err(|e| Failure::new(CONFIG, format!("{}: {e}", out.display())))?;
            let h = rec.record.header;
            println!(
                "{} -> {} ({} bytes, channel {}, frame {}, {}x{}, sha256 {} verified)",
                rec.record.path,
                out.display(),
                rec.raw.len(),
                h.channel,
                h.frame_index,
                h.width,
                h.height,
                rec.checksum
            );
            Ok(OK)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Cmd::ServeInstrument {
            bind,
            config,
            objectid,
            store,
        } => serve_instrument(&bind, config, &objectid, store),
        Cmd::ServeShare { bind, root } => serve_share(&bind, root),
        Cmd::CheckScan(r) => {
            let busy = proxy(&r)?.scan_status()?;
            println!("{}", if busy { "True" } else { "False" });
            Ok(OK)
        }
        Cmd::ScanChannel {
            remote,
            channel,
            frames,
            out,
        } => {
            let got = proxy(&remote)?.scan_channel(channel, frames)?;
            for f in &got {
                println!(
                    "channel {} frame {} {}x{} acquired at {}",
                    f.channel, f.frame_index, f.width, f.height, f.acquired_at
                );
            }
            if let (Some(dir), Some(first)) = (out, got.first()) {
                let store = MeasurementStore::open(&dir).map_err(|e| Failure::new(CONFIG, e))?;
                let meta = SessionMetadata {
                    session: format!("t{}", first.acquired_at.as_nanos()),
                    scan: None,
                };
                for path in store
                    .store_measurement(&got, &meta)
                    .map_err(|e| Failure::new(CONFIG, e))?
                {
                    println!("wrote {}", dir.join(path).display());
                }
            }
            Ok(OK)
        }
        Cmd::ProbePosition { remote, x, y } => {
            let r = proxy(&remote)?.probe_position(x, y)?;
            let fmt = |p: Option<stemlink::instrument::ProbeCoordinates>| {
                p.map_or("none".to_string(), |p| p.to_string())
            };
            println!("{} {} -> {}", r.probe_state, fmt(r.previous), fmt(r.new));
            Ok(OK)
        }
        Cmd::Vit { cmd } => vit(cmd),
        Cmd::Measure { cmd } => measure(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("stemlink: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
