use std::fmt;
use std::str::FromStr;

use thiserror::Error;

const SCHEME: &str = "PYRO:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed object URI {text:?}: {reason}")]
pub struct MalformedUri {
    pub text: String,
    pub reason: &'static str,
}

/// Address of a published object: `PYRO:objectid@host:port`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectUri {
    objectid: String,
    host: String,
    port: u16,
}

fn valid_objectid(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c == '@' || c.is_whitespace() || c.is_control())
}

fn valid_host(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'))
}

impl ObjectUri {
    pub fn new(
        objectid: impl Into<String>,
        host: impl Into<String>,
        port: u16,
    ) -> Result<Self, MalformedUri> {
        let uri = Self {
            objectid: objectid.into(),
            host: host.into(),
            port,
        };
        let err = |reason| {
            Err(MalformedUri {
                text: uri.to_string(),
                reason,
            })
        };
        if !valid_objectid(&uri.objectid) {
            return err("bad objectid");
        }
        if !valid_host(&uri.host) {
            return err("bad host");
        }
        if uri.port == 0 {
            return err("port out of range");
        }
        Ok(uri)
    }

    pub fn parse(text: &str) -> Result<Self, MalformedUri> {
        let err = |reason| MalformedUri {
            text: text.to_string(),
            reason,
        };
        let rest = text
            .strip_prefix(SCHEME)
            .ok_or_else(|| err("missing PYRO: scheme"))?;
        let mut parts = rest.split('@');
        let (objectid, location) = match (parts.next(), parts.next(), parts.next()) {
            (Some(o), Some(l), None) => (o, l),
            _ => return Err(err("expected exactly one '@'")),
        };
        if !valid_objectid(objectid) {
            return Err(err("empty or invalid objectid"));
        }
        let (host, port) = location
            .rsplit_once(':')
            .ok_or_else(|| err("missing port"))?;
        if !valid_host(host) {
            return Err(err("empty or invalid host"));
        }
        if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("port is not a number"));
        }
        let port: u32 = port.parse().map_err(|_| err("port out of range"))?;
        if !(1..=65535).contains(&port) {
            return Err(err("port out of range"));
        }
        Ok(Self {
            objectid: objectid.to_string(),
            host: host.to_string(),
            port: port as u16,
        })
    }

    pub fn objectid(&self) -> &str {
        &self.objectid
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// `host:port`, suitable for socket address resolution.
    pub fn endpoint(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for ObjectUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCHEME}{}@{}:{}", self.objectid, self.host, self.port)
    }
}

impl FromStr for ObjectUri {
    type Err = MalformedUri;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_the_swift_server_uri() {
        let u = ObjectUri::parse("PYRO:swift_server@160.91.156.73:9090").unwrap();
        assert_eq!(u.objectid(), "swift_server");
        assert_eq!(u.host(), "160.91.156.73");
        assert_eq!(u.port(), 9090);
        assert_eq!(u.to_string(), "PYRO:swift_server@160.91.156.73:9090");
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "PYRO:x@h:0",
            "PYRO:x@h:65536",
            "PYRO:x@h:",
            "PYRO:x@h",
            "PYRO:@h:1",
            "pyro:x@h:1",
            "x@h:1",
            "PYRO:x@y@h:1",
            "PYRO:x@:1",
            "PYRO:x@h:+1",
            "PYRO:x@h:99999999999999999999",
            "PYRO:a b@h:1",
        ] {
            assert!(ObjectUri::parse(bad).is_err(), "{bad} should be rejected");
        }
    }

    #[test]
    fn objectid_is_case_sensitive() {
        let a = ObjectUri::parse("PYRO:Swift_Server@h:1").unwrap();
        let b = ObjectUri::parse("PYRO:swift_server@h:1").unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(
            objectid in "[A-Za-z0-9_.:/-]{1,24}",
            host in "[a-z0-9][a-z0-9.-]{0,20}",
            port in 1u16..,
        ) {
            let u = ObjectUri::new(objectid, host, port).unwrap();
            prop_assert_eq!(ObjectUri::parse(&u.to_string()).unwrap(), u);
        }
    }
}
