//! Path computation over static tables and firewall evaluation along a path.

use std::net::Ipv4Addr;

use thiserror::Error;

use super::topology::{Action, Dir, Endpoint, HostId, LinkId, Topology};

/// Hop limit for forwarding walks.
pub const MAX_HOPS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("unroutable: {0}")]
    Unroutable(String),
    #[error("no such connection")]
    NoSuchConnection,
    #[error("unknown host {0:?}")]
    UnknownHost(String),
}

/// A one-way path between two host interfaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub hops: Vec<(LinkId, Dir)>,
    /// Every forwarding node crossed, in order.
    pub nodes: Vec<usize>,
}

impl Path {
    /// Enforcement points in traversal order: source interface, nodes, destination interface.
    pub fn points(&self) -> Vec<Endpoint> {
        let mut v = vec![self.src];
        v.extend(self.nodes.iter().map(|&n| Endpoint::Node(n)));
        if self.dst != self.src {
            v.push(self.dst);
        }
        v
    }
}

impl Topology {
    pub fn iface_address(&self, ep: Endpoint) -> Option<Ipv4Addr> {
        match ep {
            Endpoint::Iface { host, iface } => Some(self.hosts[host].interfaces[iface].address),
            Endpoint::Node(_) => None,
        }
    }

    /// Walks the forwarding tables from `src_host` (leaving by `via`, or by
    /// its host routes) to the owner of `dst`.
    pub fn route(
        &self,
        src_host: HostId,
        via: Option<usize>,
        dst: Ipv4Addr,
    ) -> Result<Path, NetError> {
        let src_name = &self.hosts[src_host].name;
        let (dst_host, dst_iface) = self
            .lookup(dst)
            .ok_or_else(|| NetError::Unroutable(format!("{dst} is not assigned to any host")))?;
        let src_iface = via.unwrap_or_else(|| self.source_iface(src_host, dst));
        let src = Endpoint::Iface {
            host: src_host,
            iface: src_iface,
        };
        if src_host == dst_host {
            return Ok(Path {
                src,
                dst: Endpoint::Iface {
                    host: dst_host,
                    iface: dst_iface,
                },
                hops: Vec::new(),
                nodes: Vec::new(),
            });
        }
        let mut link = self.hosts[src_host].interfaces[src_iface]
            .link
            .ok_or_else(|| {
                NetError::Unroutable(format!("{} is not attached", self.endpoint_name(src)))
            })?;
        let mut at = src;
        let mut hops = Vec::new();
        let mut nodes = Vec::new();
        while hops.len() < MAX_HOPS {
            let (next, dir) = self.links[link]
                .other(at)
                .expect("link is attached to its endpoint");
            hops.push((link, dir));
            match next {
                Endpoint::Iface { host, .. } if host == dst_host => {
                    return Ok(Path {
                        src,
                        dst: next,
                        hops,
                        nodes,
                    });
                }
                Endpoint::Iface { .. } => {
                    return Err(NetError::Unroutable(format!(
                        "{src_name} -> {dst}: reached {}, which does not forward",
                        self.endpoint_name(next)
                    )));
                }
                Endpoint::Node(n) => {
                    nodes.push(n);
                    link = self.next_link(n, dst_host, dst_iface, dst).ok_or_else(|| {
                        NetError::Unroutable(format!(
                            "{src_name} -> {dst}: no route at {}",
                            self.nodes[n].name
                        ))
                    })?;
                    at = next;
                }
            }
        }
        Err(NetError::Unroutable(format!(
            "{src_name} -> {dst}: hop limit exceeded"
        )))
    }

    fn next_link(
        &self,
        n: usize,
        dst_host: HostId,
        dst_iface: usize,
        dst: Ipv4Addr,
    ) -> Option<LinkId> {
        let here = Endpoint::Node(n);
        let direct = Endpoint::Iface {
            host: dst_host,
            iface: dst_iface,
        };
        let link_to = |target: Endpoint| {
            self.nodes[n]
                .links
                .iter()
                .copied()
                .find(|&l| self.links[l].other(here).map(|(ep, _)| ep) == Some(target))
        };
        if let Some(l) = link_to(direct) {
            return Some(l);
        }
        let (_, next) = self.nodes[n]
            .routes
            .iter()
            .filter(|(net, _)| net.contains(&dst))
            .max_by_key(|(net, _)| net.prefix_len())?;
        link_to(*next)
    }

    fn site_of(&self, ep: Endpoint) -> &str {
        match ep {
            Endpoint::Iface { host, .. } => &self.hosts[host].site,
            Endpoint::Node(_) => "",
        }
    }

    /// Default policy: allow within a site, deny between sites.
    pub fn default_allows(&self, path: &Path) -> bool {
        self.site_of(path.src) == self.site_of(path.dst)
    }

    /// Decides whether a connection to `port` may be opened along `path`.
    ///
    /// Every enforcement point that carries rules is consulted in path order.
    /// At each point the first matching rule (lowest priority value, then
    /// declaration order) decides; a point whose rules do not match applies
    /// the default policy. A path with no enforcing point gets the default
    /// policy. Any deny refuses the connection.
    pub fn evaluate(&self, path: &Path, port: u16) -> Verdict {
        let src = self
            .iface_address(path.src)
            .expect("path starts at an interface");
        let dst = self
            .iface_address(path.dst)
            .expect("path ends at an interface");
        let default = if self.default_allows(path) {
            Action::Allow
        } else {
            Action::Deny
        };
        let mut enforced = false;
        for point in path.points() {
            if !self.has_rules_at(point) {
                continue;
            }
            enforced = true;
            let action = self
                .rules_at(point)
                .find(|r| r.matches(src, dst, port))
                .map(|r| r.action)
                .unwrap_or(default);
            if action == Action::Deny {
                return Verdict::Deny {
                    at: self.endpoint_name(point),
                };
            }
        }
        if !enforced && default == Action::Deny {
            return Verdict::Deny {
                at: "default policy".into(),
            };
        }
        Verdict::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny { at: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    const NET: &str = r#"
        [[sites]]
        name = "A"
        [[sites]]
        name = "B"
        [[hosts]]
        name = "a1"
        site = "A"
        interfaces = [{ name = "eth0", address = "10.1.0.1" }]
        [[hosts]]
        name = "a2"
        site = "A"
        interfaces = [{ name = "eth0", address = "10.1.0.2" }]
        [[hosts]]
        name = "b1"
        site = "B"
        interfaces = [{ name = "eth0", address = "10.2.0.1" }]
        [[nodes]]
        name = "swa"
        kind = "switch"
        [[nodes]]
        name = "gw"
        kind = "router"
        [[links]]
        a = "a1"
        b = "swa"
        latency_ms = 5
        bandwidth_bps = 1_000_000
        [[links]]
        a = "a2"
        b = "swa"
        latency_ms = 5
        bandwidth_bps = 1_000_000
        [[links]]
        a = "swa"
        b = "gw"
        latency_ms = 5
        bandwidth_bps = 1_000_000
        [[links]]
        a = "gw"
        b = "b1"
        latency_ms = 5
        bandwidth_bps = 1_000_000
        [[routes]]
        at = "swa"
        prefix = "0.0.0.0/0"
        next = "gw"
        [[routes]]
        at = "gw"
        prefix = "10.1.0.0/16"
        next = "swa"
    "#;

    fn addr(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    #[test]
    fn walks_tables() {
        let t = Topology::from_toml_str(NET).unwrap();
        let p = t.route(0, None, addr("10.2.0.1")).unwrap();
        assert_eq!(p.hops.len(), 3);
        assert_eq!(p.nodes, vec![0, 1]);
        let back = t.route(2, None, addr("10.1.0.2")).unwrap();
        assert_eq!(back.hops.len(), 3);
        assert_eq!(t.route(0, None, addr("10.1.0.2")).unwrap().hops.len(), 2);
        assert!(matches!(
            t.route(0, None, addr("10.9.9.9")),
            Err(NetError::Unroutable(_))
        ));
    }

    #[test]
    fn default_policy_without_rules() {
        let t = Topology::from_toml_str(NET).unwrap();
        let intra = t.route(0, None, addr("10.1.0.2")).unwrap();
        let inter = t.route(0, None, addr("10.2.0.1")).unwrap();
        assert_eq!(t.evaluate(&intra, 22), Verdict::Allow);
        assert!(matches!(t.evaluate(&inter, 22), Verdict::Deny { .. }));
    }

    #[test]
    fn priority_then_order() {
        let rules = r#"
            [[firewall]]
            at = "gw"
            src = "10.1.0.1/32"
            port = 9090
            action = "allow"
            priority = 10
            [[firewall]]
            at = "gw"
            src = "10.1.0.0/16"
            action = "deny"
            priority = 5
            [[firewall]]
            at = "gw"
            src = "10.1.0.2/32"
            port = 9090
            action = "allow"
            priority = 1
        "#;
        let t = Topology::from_toml_str(&format!("{NET}{rules}")).unwrap();
        let from_a1 = t.route(0, None, addr("10.2.0.1")).unwrap();
        let from_a2 = t.route(1, None, addr("10.2.0.1")).unwrap();
        // deny at priority 5 shadows a1's allow at 10
        assert!(matches!(t.evaluate(&from_a1, 9090), Verdict::Deny { .. }));
        assert_eq!(t.evaluate(&from_a2, 9090), Verdict::Allow);
        assert!(matches!(t.evaluate(&from_a2, 22), Verdict::Deny { .. }));
    }

    #[test]
    fn host_firewall_blocks_intra_site() {
        let rules = r#"
            [[firewall]]
            at = "a2"
            port = 22
            action = "deny"
        "#;
        let t = Topology::from_toml_str(&format!("{NET}{rules}")).unwrap();
        let p = t.route(0, None, addr("10.1.0.2")).unwrap();
        assert_eq!(
            t.evaluate(&p, 22),
            Verdict::Deny {
                at: "a2:eth0".into()
            }
        );
        assert_eq!(t.evaluate(&p, 80), Verdict::Allow);
    }
}
