//! Remote-object publication and invocation.
//!
//! Objects are published in an [`ObjectRegistry`] under an objectid and
//! addressed by `PYRO:objectid@host:port` URIs. Messages are length-prefixed
//! JSON documents; see [`codec`].

pub mod client;
pub mod codec;
pub mod message;
pub mod registry;
pub mod server;
pub mod stem;
pub mod uri;

pub use client::{
    connect, invoke, ControlTransport, InvokeError, Proxy, TcpTransport, DEFAULT_TIMEOUT,
};
pub use message::{ControlMessage, ErrorCode, Outcome, RemoteError, Request, Response, Value};
pub use registry::{CallResult, ObjectRegistry, RemoteObject, Reply};
pub use server::{
    serve, serve_with, BindError, ControlServer, ControlService, Handled, DEFAULT_CONTROL_PORT,
};
pub use stem::{StemTaskObject, DEFAULT_OBJECTID};
pub use uri::{MalformedUri, ObjectUri};
