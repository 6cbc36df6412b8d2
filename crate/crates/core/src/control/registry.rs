use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::message::{ErrorCode, RemoteError, Request, Value};

pub type CallResult = Result<Value, RemoteError>;

/// What an exposed method hands back to the server.
///
/// `Deferred` lets a method ask its host to wait before completing. A TCP
/// server sleeps on a worker thread; the twin schedules a timer event. Either
/// way the connection keeps serving other requests meanwhile.
pub enum Reply {
    Ready(CallResult),
    Deferred {
        delay: Duration,
        finish: Box<dyn FnOnce() -> CallResult + Send>,
    },
}

impl Reply {
    pub fn ok(v: impl Into<Value>) -> Self {
        Reply::Ready(Ok(v.into()))
    }

    pub fn err(e: RemoteError) -> Self {
        Reply::Ready(Err(e))
    }

    /// Runs a deferred reply to completion with the given wait.
    pub fn complete_with(self, wait: impl FnOnce(Duration)) -> CallResult {
        match self {
            Reply::Ready(r) => r,
            Reply::Deferred { delay, finish } => {
                wait(delay);
                finish()
            }
        }
    }
}

impl fmt::Debug for Reply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reply::Ready(r) => f.debug_tuple("Ready").field(r).finish(),
            Reply::Deferred { delay, .. } => {
                f.debug_struct("Deferred").field("delay", delay).finish()
            }
        }
    }
}

/// An object published on the control channel.
pub trait RemoteObject: Send + Sync {
    /// The advertised method set. Dispatch only reaches `call` for these names.
    fn methods(&self) -> &[&'static str];

    fn call(&self, method: &str, args: &[Value]) -> Reply;
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("object id {0:?} is already registered")]
pub struct DuplicateObject(pub String);

/// The daemon's publication table: objectid → object.
#[derive(Default, Clone)]
pub struct ObjectRegistry {
    objects: BTreeMap<String, Arc<dyn RemoteObject>>,
}

impl fmt::Debug for ObjectRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.objects.keys()).finish()
    }
}

impl ObjectRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        objectid: impl Into<String>,
        object: Arc<dyn RemoteObject>,
    ) -> Result<(), DuplicateObject> {
        let id = objectid.into();
        if self.objects.contains_key(&id) {
            return Err(DuplicateObject(id));
        }
        self.objects.insert(id, object);
        Ok(())
    }

    pub fn objectids(&self) -> impl Iterator<Item = &str> {
        self.objects.keys().map(String::as_str)
    }

    pub fn dispatch(&self, req: &Request) -> Reply {
        let Some(obj) = self.objects.get(&req.object) else {
            return Reply::err(RemoteError::new(
                ErrorCode::UnknownObject,
                format!("no object {:?} is published", req.object),
            ));
        };
        if !obj.methods().contains(&req.method.as_str()) {
            return Reply::err(RemoteError::new(
                ErrorCode::UnknownMethod,
                format!("object {:?} has no method {:?}", req.object, req.method),
            ));
        }
        obj.call(&req.method, &req.args)
    }
}

/// Argument accessors that turn shape mismatches into `BadArguments`.
pub mod args {
    use super::*;

    pub fn expect_len(args: &[Value], n: usize) -> Result<(), RemoteError> {
        if args.len() != n {
            return Err(RemoteError::bad_arguments(format!(
                "expected {n} arguments, got {}",
                args.len()
            )));
        }
        Ok(())
    }

    pub fn int(args: &[Value], i: usize, name: &str) -> Result<i64, RemoteError> {
        args.get(i).and_then(Value::as_i64).ok_or_else(|| {
            RemoteError::bad_arguments(format!("argument {name} must be an integer"))
        })
    }

    pub fn real(args: &[Value], i: usize, name: &str) -> Result<f64, RemoteError> {
        args.get(i)
            .and_then(Value::as_f64)
            .ok_or_else(|| RemoteError::bad_arguments(format!("argument {name} must be a number")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl RemoteObject for Echo {
        fn methods(&self) -> &[&'static str] {
            &["echo", "later"]
        }

        fn call(&self, method: &str, a: &[Value]) -> Reply {
            match method {
                "echo" => Reply::ok(Value::Array(a.to_vec())),
                _ => Reply::Deferred {
                    delay: Duration::from_millis(5),
                    finish: Box::new(|| Ok(Value::from("done"))),
                },
            }
        }
    }

    fn req(object: &str, method: &str) -> Request {
        Request {
            id: 1,
            object: object.into(),
            method: method.into(),
            args: vec![Value::from(3)],
        }
    }

    #[test]
    fn dispatch_paths() {
        let mut reg = ObjectRegistry::new();
        reg.register("echo", Arc::new(Echo)).unwrap();
        assert_eq!(
            reg.register("echo", Arc::new(Echo)),
            Err(DuplicateObject("echo".into()))
        );
        let done = |r: Reply| r.complete_with(|_| {});
        assert_eq!(
            done(reg.dispatch(&req("echo", "echo"))),
            Ok(serde_json::json!([3]))
        );
        assert_eq!(
            done(reg.dispatch(&req("nope", "echo"))).unwrap_err().code,
            ErrorCode::UnknownObject
        );
        assert_eq!(
            done(reg.dispatch(&req("echo", "no_such_method")))
                .unwrap_err()
                .code,
            ErrorCode::UnknownMethod
        );
        let mut waited = Duration::ZERO;
        let r = reg
            .dispatch(&req("echo", "later"))
            .complete_with(|d| waited = d);
        assert_eq!(r, Ok(Value::from("done")));
        assert_eq!(waited, Duration::from_millis(5));
    }

    #[test]
    fn empty_registry_knows_nothing() {
        let reg = ObjectRegistry::new();
        let r = reg
            .dispatch(&req("swift_server", "scan_status"))
            .complete_with(|_| {});
        assert_eq!(r.unwrap_err().code, ErrorCode::UnknownObject);
    }

    #[test]
    fn argument_helpers() {
        let a = [Value::from(2), Value::from(0.5), Value::from("x")];
        assert_eq!(args::int(&a, 0, "ch"), Ok(2));
        assert_eq!(args::real(&a, 1, "x"), Ok(0.5));
        assert_eq!(args::real(&a, 0, "x"), Ok(2.0));
        assert_eq!(
            args::int(&a, 1, "ch").unwrap_err().code,
            ErrorCode::BadArguments
        );
        assert_eq!(
            args::int(&a, 9, "ch").unwrap_err().code,
            ErrorCode::BadArguments
        );
        assert!(args::expect_len(&a, 2).is_err());
    }
}
