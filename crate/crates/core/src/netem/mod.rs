//! The virtual infrastructure twin: an in-process, deterministic emulation
//! of hosts, switches, routers, links and firewalls.
//!
//! Servers run on the twin as [`VirtualService`]s built from the same
//! request handlers the TCP servers use; clients reach them through
//! [`transport`] or the scenario runner.

pub mod engine;
pub mod log;
pub mod route;
pub mod topology;
pub mod transport;

pub use engine::{
    ConnId, EchoService, Engine, LinkStats, Notice, RunMode, ServiceAction, VirtualService,
};
pub use log::{EventLog, LogRecord};
pub use route::{NetError, Path, Verdict};
pub use topology::{Action, Endpoint, FirewallRule, Topology, TopologyError};
pub use transport::{sim_mount, sim_proxy, SharedEngine, SimControlTransport, SimShareTransport};
