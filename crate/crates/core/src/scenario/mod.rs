//! Scripted multi-actor runs over the twin.

pub mod bundled;
pub mod report;
pub mod runner;
pub mod spec;

pub use bundled::{load_scenario, load_topology, SCENARIOS, TOPOLOGIES};
pub use report::{AssertReport, Failure, ScenarioReport, StepReport};
pub use runner::{run_file, run_scenario, run_with_topology, RunOptions};
pub use spec::{ActionKind, AssertKind, Scenario, ScenarioError, ServerKind, StepSpec};
