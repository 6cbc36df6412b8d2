//! Remote steering of a (simulated) scanning transmission electron microscope
//! over separate control and data channels, plus a deterministic virtual
//! infrastructure twin for developing and testing steering workflows.
//!
//! * [`instrument`]: the virtual microscope and its three task functions.
//! * [`control`]: remote-object publication, invocation and the control wire format.
//! * [`data`]: the `STEMFRM1` measurement store and the read-only file-share protocol.
//! * [`netem`]: the discrete-event network twin (topologies, links, firewalls, event log).
//! * [`scenario`]: data-driven workflow scenarios and the bundled site topologies.

pub mod control;
pub mod data;
pub mod instrument;
pub mod netem;
pub mod scenario;
pub mod tcp;
pub mod time;
