//! Declarative topologies: sites, hosts with interfaces, switches/routers,
//! links, static routes and firewall rules.
//!
//! ```toml
//! name = "example"
//! [[sites]]
//! name = "A"
//! [[hosts]]
//! name = "h1"
//! site = "A"
//! interfaces = [{ name = "eth0", address = "10.0.0.1" }]
//! [[nodes]]
//! name = "sw"
//! kind = "switch"
//! [[links]]
//! a = "h1:eth0"
//! b = "sw"
//! latency_ms = 0.1
//! bandwidth_bps = 1_000_000_000
//! [[routes]]
//! at = "sw"
//! prefix = "0.0.0.0/0"
//! next = "gw"
//! [[firewall]]
//! at = "gw"
//! src = "10.0.0.0/24"
//! dst = "10.9.0.1/32"
//! port = 9090
//! action = "allow"
//! priority = 10
//! ```
//!
//! Link endpoints are `host:interface` or a node name. A route `at` a node
//! names an adjacent host or node as `next`; a route `at` a host names one of
//! its interfaces. Firewall rules sit `at` a node (network firewall), a
//! `host:interface`, or a bare host name (all of its interfaces).

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::Duration;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{what} {name:?} is not declared")]
    DanglingReference { what: &'static str, name: String },
    #[error("address {address} is assigned to both {first} and {second}")]
    AddressCollision {
        address: Ipv4Addr,
        first: String,
        second: String,
    },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Switch,
    Router,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub sites: Vec<SiteConfig>,
    pub hosts: Vec<HostConfig>,
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub routes: Vec<RouteConfig>,
    #[serde(default)]
    pub firewall: Vec<RuleConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    pub name: String,
    pub site: String,
    pub interfaces: Vec<InterfaceConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceConfig {
    pub name: String,
    pub address: Ipv4Addr,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub site: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
    pub bandwidth_bps: u64,
    #[serde(default)]
    pub loss: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub at: String,
    pub prefix: Ipv4Net,
    pub next: String,
}

fn any_net() -> Ipv4Net {
    Ipv4Net::default()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub at: String,
    #[serde(default = "any_net")]
    pub src: Ipv4Net,
    #[serde(default = "any_net")]
    pub dst: Ipv4Net,
    #[serde(default)]
    pub port: Option<u16>,
    pub action: Action,
    #[serde(default)]
    pub priority: i64,
}

pub type HostId = usize;
pub type NodeId = usize;
pub type LinkId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Iface { host: HostId, iface: usize },
    Node(NodeId),
}

/// Where a firewall rule is enforced.
pub type Position = Endpoint;

#[derive(Debug, Clone)]
pub struct Interface {
    pub name: String,
    pub address: Ipv4Addr,
    pub link: Option<LinkId>,
}

#[derive(Debug, Clone)]
pub struct Host {
    pub name: String,
    pub site: String,
    pub interfaces: Vec<Interface>,
    /// (prefix, interface index)
    pub routes: Vec<(Ipv4Net, usize)>,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub site: Option<String>,
    pub links: Vec<LinkId>,
    pub routes: Vec<(Ipv4Net, Endpoint)>,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    pub latency: Duration,
    pub bandwidth_bps: u64,
    pub loss: f64,
}

impl Link {
    /// Time to clock `bytes` onto this link, rounded up to whole nanoseconds.
    pub fn serialization(&self, bytes: u64) -> Duration {
        let bits = bytes as u128 * 8 * 1_000_000_000;
        let bw = self.bandwidth_bps as u128;
        Duration::from_nanos(bits.div_ceil(bw) as u64)
    }

    pub fn other(&self, from: Endpoint) -> Option<(Endpoint, Dir)> {
        if self.a == from {
            Some((self.b, Dir::AtoB))
        } else if self.b == from {
            Some((self.a, Dir::BtoA))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    AtoB,
    BtoA,
}

impl Dir {
    pub fn index(self) -> usize {
        match self {
            Dir::AtoB => 0,
            Dir::BtoA => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirewallRule {
    pub at: Position,
    pub src: Ipv4Net,
    pub dst: Ipv4Net,
    pub port: Option<u16>,
    pub action: Action,
    pub priority: i64,
    /// Declaration order, the tie-breaker for equal priorities.
    pub order: usize,
}

impl FirewallRule {
    pub fn matches(&self, src: Ipv4Addr, dst: Ipv4Addr, port: u16) -> bool {
        self.src.contains(&src) && self.dst.contains(&dst) && self.port.is_none_or(|p| p == port)
    }
}

/// A validated topology.
#[derive(Debug, Clone)]
pub struct Topology {
    pub name: String,
    pub description: String,
    pub sites: Vec<String>,
    pub hosts: Vec<Host>,
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub rules: Vec<FirewallRule>,
    addresses: HashMap<Ipv4Addr, (HostId, usize)>,
    host_names: HashMap<String, HostId>,
    node_names: HashMap<String, NodeId>,
    rules_at: BTreeMap<Position, Vec<usize>>,
}

impl Topology {
    pub fn from_toml_str(text: &str) -> Result<Self, TopologyError> {
        let cfg: TopologyConfig =
            toml::from_str(text).map_err(|e| TopologyError::Schema(e.message().to_string()))?;
        Self::from_config(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_config(cfg: TopologyConfig) -> Result<Self, TopologyError> {
        let schema = |m: String| TopologyError::Schema(m);
        let dangling = |what, name: &str| TopologyError::DanglingReference {
            what,
            name: name.to_string(),
        };

        let mut sites = Vec::new();
        for s in &cfg.sites {
            if s.name.is_empty() || sites.contains(&s.name) {
                return Err(schema(format!(
                    "site name {:?} is empty or repeated",
                    s.name
                )));
            }
            sites.push(s.name.clone());
        }

        let mut host_names = HashMap::new();
        let mut node_names = HashMap::new();
        let mut addresses: HashMap<Ipv4Addr, (HostId, usize)> = HashMap::new();
        let mut hosts = Vec::new();
        for (hid, h) in cfg.hosts.iter().enumerate() {
            if h.name.is_empty()
                || h.name.contains(':')
                || host_names.insert(h.name.clone(), hid).is_some()
            {
                return Err(schema(format!(
                    "host name {:?} is invalid or repeated",
                    h.name
                )));
            }
            if !sites.contains(&h.site) {
                return Err(dangling("site", &h.site));
            }
            if h.interfaces.is_empty() {
                return Err(schema(format!("host {} has no interfaces", h.name)));
            }
            let mut ifaces: Vec<Interface> = Vec::new();
            for (i, ic) in h.interfaces.iter().enumerate() {
                if ifaces.iter().any(|x| x.name == ic.name) {
                    return Err(schema(format!(
                        "host {} repeats interface {}",
                        h.name, ic.name
                    )));
                }
                if let Some(&(oh, oi)) = addresses.get(&ic.address) {
                    return Err(TopologyError::AddressCollision {
                        address: ic.address,
                        first: format!(
                            "{}:{}",
                            cfg.hosts[oh].name, cfg.hosts[oh].interfaces[oi].name
                        ),
                        second: format!("{}:{}", h.name, ic.name),
                    });
                }
                addresses.insert(ic.address, (hid, i));
                ifaces.push(Interface {
                    name: ic.name.clone(),
                    address: ic.address,
                    link: None,
                });
            }
            hosts.push(Host {
                name: h.name.clone(),
                site: h.site.clone(),
                interfaces: ifaces,
                routes: Vec::new(),
            });
        }

        let mut nodes = Vec::new();
        for (nid, n) in cfg.nodes.iter().enumerate() {
            if n.name.is_empty()
                || n.name.contains(':')
                || host_names.contains_key(&n.name)
                || node_names.insert(n.name.clone(), nid).is_some()
            {
                return Err(schema(format!(
                    "node name {:?} is invalid or repeated",
                    n.name
                )));
            }
            if let Some(site) = &n.site {
                if !sites.contains(site) {
                    return Err(dangling("site", site));
                }
            }
            nodes.push(Node {
                name: n.name.clone(),
                kind: n.kind,
                site: n.site.clone(),
                links: Vec::new(),
                routes: Vec::new(),
            });
        }

        let mut topo = Topology {
            name: cfg.name.clone(),
            description: cfg.description.clone(),
            sites,
            hosts,
            nodes,
            links: Vec::new(),
            rules: Vec::new(),
            addresses,
            host_names,
            node_names,
            rules_at: BTreeMap::new(),
        };

        for l in &cfg.links {
            let a = topo.parse_endpoint(&l.a)?;
            let b = topo.parse_endpoint(&l.b)?;
            if a == b {
                return Err(schema(format!(
                    "link {} -- {} connects an endpoint to itself",
                    l.a, l.b
                )));
            }
            if !(l.latency_ms.is_finite() && l.latency_ms >= 0.0) {
                return Err(schema(format!(
                    "link {} -- {}: latency_ms must be ≥ 0",
                    l.a, l.b
                )));
            }
            if l.bandwidth_bps == 0 {
                return Err(schema(format!(
                    "link {} -- {}: bandwidth_bps must be > 0",
                    l.a, l.b
                )));
            }
            if !(0.0..1.0).contains(&l.loss) {
                return Err(schema(format!(
                    "link {} -- {}: loss must lie in [0, 1)",
                    l.a, l.b
                )));
            }
            let id = topo.links.len();
            for ep in [a, b] {
                match ep {
                    Endpoint::Iface { host, iface } => {
                        let slot = &mut topo.hosts[host].interfaces[iface].link;
                        if slot.is_some() {
                            return Err(schema(format!(
                                "interface {} is attached to more than one link",
                                topo.endpoint_name(ep)
                            )));
                        }
                        *slot = Some(id);
                    }
                    Endpoint::Node(n) => topo.nodes[n].links.push(id),
                }
            }
            topo.links.push(Link {
                a,
                b,
                latency: Duration::from_nanos((l.latency_ms * 1e6).round() as u64),
                bandwidth_bps: l.bandwidth_bps,
                loss: l.loss,
            });
        }

        for r in &cfg.routes {
            if let Some(&h) = topo.host_names.get(&r.at) {
                let iface = topo.hosts[h]
                    .interfaces
                    .iter()
                    .position(|i| i.name == r.next)
                    .ok_or_else(|| dangling("interface", &format!("{}:{}", r.at, r.next)))?;
                topo.hosts[h].routes.push((r.prefix, iface));
            } else if let Some(&n) = topo.node_names.get(&r.at) {
                let next = topo.resolve_neighbor(n, &r.next)?;
                topo.nodes[n].routes.push((r.prefix, next));
            } else {
                return Err(dangling("route position", &r.at));
            }
        }

        for (order, rc) in cfg.firewall.iter().enumerate() {
            let positions: Vec<Position> = if let Some(&h) = topo.host_names.get(&rc.at) {
                (0..topo.hosts[h].interfaces.len())
                    .map(|iface| Endpoint::Iface { host: h, iface })
                    .collect()
            } else {
                vec![topo.parse_endpoint(&rc.at)?]
            };
            for at in positions {
                let idx = topo.rules.len();
                topo.rules.push(FirewallRule {
                    at,
                    src: rc.src,
                    dst: rc.dst,
                    port: rc.port,
                    action: rc.action,
                    priority: rc.priority,
                    order,
                });
                topo.rules_at.entry(at).or_default().push(idx);
            }
        }
        for list in topo.rules_at.values_mut() {
            let rules = &topo.rules;
            list.sort_by_key(|&i| (rules[i].priority, rules[i].order));
        }
        Ok(topo)
    }

    fn parse_endpoint(&self, text: &str) -> Result<Endpoint, TopologyError> {
        if let Some((h, i)) = text.split_once(':') {
            let host = *self
                .host_names
                .get(h)
                .ok_or(TopologyError::DanglingReference {
                    what: "host",
                    name: h.to_string(),
                })?;
            let iface = self.hosts[host]
                .interfaces
                .iter()
                .position(|x| x.name == i)
                .ok_or(TopologyError::DanglingReference {
                    what: "interface",
                    name: text.to_string(),
                })?;
            return Ok(Endpoint::Iface { host, iface });
        }
        if let Some(&n) = self.node_names.get(text) {
            return Ok(Endpoint::Node(n));
        }
        if let Some(&h) = self.host_names.get(text) {
            if self.hosts[h].interfaces.len() == 1 {
                return Ok(Endpoint::Iface { host: h, iface: 0 });
            }
            return Err(TopologyError::Schema(format!(
                "host {text} has several interfaces; name one as {text}:<interface>"
            )));
        }
        Err(TopologyError::DanglingReference {
            what: "host or node",
            name: text.to_string(),
        })
    }

    /// `next` for a node route: an adjacent node, `host:iface`, or a host
    /// with exactly one interface adjacent to `n`.
    fn resolve_neighbor(&self, n: NodeId, next: &str) -> Result<Endpoint, TopologyError> {
        let target = match self.host_names.get(next) {
            Some(&h) if !next.contains(':') => self
                .node_neighbors(n)
                .find(|ep| matches!(ep, Endpoint::Iface { host, .. } if *host == h))
                .ok_or_else(|| {
                    TopologyError::Schema(format!(
                        "route at {}: {next} is not adjacent",
                        self.nodes[n].name
                    ))
                })?,
            _ => self.parse_endpoint(next)?,
        };
        if !self.node_neighbors(n).any(|ep| ep == target) {
            return Err(TopologyError::Schema(format!(
                "route at {}: next hop {next} is not adjacent",
                self.nodes[n].name
            )));
        }
        Ok(target)
    }

    fn node_neighbors(&self, n: NodeId) -> impl Iterator<Item = Endpoint> + '_ {
        self.nodes[n]
            .links
            .iter()
            .filter_map(move |&l| self.links[l].other(Endpoint::Node(n)).map(|(ep, _)| ep))
    }

    pub fn endpoint_name(&self, ep: Endpoint) -> String {
        match ep {
            Endpoint::Iface { host, iface } => {
                format!(
                    "{}:{}",
                    self.hosts[host].name, self.hosts[host].interfaces[iface].name
                )
            }
            Endpoint::Node(n) => self.nodes[n].name.clone(),
        }
    }

    pub fn link_name(&self, l: LinkId) -> String {
        format!(
            "{}--{}",
            self.endpoint_name(self.links[l].a),
            self.endpoint_name(self.links[l].b)
        )
    }

    pub fn host_id(&self, name: &str) -> Option<HostId> {
        self.host_names.get(name).copied()
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_names.get(name).copied()
    }

    pub fn host(&self, id: HostId) -> &Host {
        &self.hosts[id]
    }

    pub fn iface_id(&self, host: HostId, name: &str) -> Option<usize> {
        self.hosts[host]
            .interfaces
            .iter()
            .position(|i| i.name == name)
    }

    /// Owner of an address.
    pub fn lookup(&self, addr: Ipv4Addr) -> Option<(HostId, usize)> {
        self.addresses.get(&addr).copied()
    }

    /// An address literal, a host name (its first interface), or `host:iface`.
    pub fn resolve(&self, text: &str) -> Option<Ipv4Addr> {
        if let Ok(a) = text.parse::<Ipv4Addr>() {
            return Some(a);
        }
        if let Some((h, i)) = text.split_once(':') {
            let host = self.host_id(h)?;
            let iface = self.iface_id(host, i)?;
            return Some(self.hosts[host].interfaces[iface].address);
        }
        let host = self.host_id(text)?;
        Some(self.hosts[host].interfaces[0].address)
    }

    pub fn rules_at(&self, at: Position) -> impl Iterator<Item = &FirewallRule> {
        self.rules_at
            .get(&at)
            .into_iter()
            .flat_map(move |v| v.iter().map(move |&i| &self.rules[i]))
    }

    pub fn has_rules_at(&self, at: Position) -> bool {
        self.rules_at.contains_key(&at)
    }

    /// Interface a host uses to reach `dst`: longest-prefix host route, else
    /// the first interface.
    pub fn source_iface(&self, host: HostId, dst: Ipv4Addr) -> usize {
        self.hosts[host]
            .routes
            .iter()
            .filter(|(net, _)| net.contains(&dst))
            .max_by_key(|(net, _)| net.prefix_len())
            .map(|&(_, i)| i)
            .unwrap_or(0)
    }
}
