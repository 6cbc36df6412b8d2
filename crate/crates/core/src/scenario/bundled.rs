//! Topologies and scenarios shipped with the crate.

use std::path::Path;

use super::spec::{Scenario, ScenarioError};
use crate::netem::topology::Topology;

pub const TOPOLOGIES: &[(&str, &str)] = &[
    (
        "os-vit",
        include_str!("../../assets/topologies/os-vit.toml"),
    ),
    (
        "os-vit-shared",
        include_str!("../../assets/topologies/os-vit-shared.toml"),
    ),
    (
        "ms-vit",
        include_str!("../../assets/topologies/ms-vit.toml"),
    ),
];

pub const SCENARIOS: &[(&str, &str)] = &[
    (
        "ornl-steering",
        include_str!("../../assets/scenarios/ornl-steering.toml"),
    ),
    (
        "osvit-workflow",
        include_str!("../../assets/scenarios/osvit-workflow.toml"),
    ),
    (
        "msvit-concurrent",
        include_str!("../../assets/scenarios/msvit-concurrent.toml"),
    ),
    (
        "msvit-firewall",
        include_str!("../../assets/scenarios/msvit-firewall.toml"),
    ),
];

pub fn topology_text(name: &str) -> Option<&'static str> {
    TOPOLOGIES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn scenario_text(name: &str) -> Option<&'static str> {
    SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// A bundled topology by name, or a topology file (relative paths against `base`).
pub fn load_topology(spec: &str, base: Option<&Path>) -> Result<Topology, ScenarioError> {
    if let Some(text) = topology_text(spec) {
        return Ok(Topology::from_toml_str(text)?);
    }
    let path = match base {
        Some(b) if Path::new(spec).is_relative() => b.join(spec),
        _ => Path::new(spec).to_path_buf(),
    };
    if !path.exists() {
        let names: Vec<_> = TOPOLOGIES.iter().map(|(n, _)| *n).collect();
        return Err(ScenarioError::Invalid(format!(
            "no topology {spec:?}: not a file and not one of {}",
            names.join(", ")
        )));
    }
    Ok(Topology::load(&path)?)
}

/// A bundled scenario by name, or a scenario file.
pub fn load_scenario(spec: &str) -> Result<Scenario, ScenarioError> {
    match scenario_text(spec) {
        Some(text) => Scenario::from_toml_str(text),
        None => Scenario::load(Path::new(spec)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_assets_parse() {
        for (name, _) in TOPOLOGIES {
            let t = load_topology(name, None).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&t.name, name);
        }
        for (name, _) in SCENARIOS {
            let s = load_scenario(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&s.name, name);
            load_topology(&s.topology, None).unwrap();
        }
    }

    #[test]
    fn unknown_topology_names_the_bundled_ones() {
        let e = load_topology("nope", None).unwrap_err().to_string();
        assert!(e.contains("os-vit"), "{e}");
    }

    #[test]
    fn bundled_scenarios_pass() {
        for (name, _) in SCENARIOS {
            let s = load_scenario(name).unwrap();
            let r = crate::scenario::run_scenario(&s, &Default::default()).unwrap();
            assert!(r.passed, "{}", r.render_human());
        }
    }
}
