//! Core logic of the gridlet job-brokering suite.
//!
//! * [`rpc`]: the XML-RPC subset and its binary-response extension.
//! * [`acl`]: caller identity and allow/deny access control.
//! * [`monitor`]: host sampling and the load coefficient.
//! * [`broker`]: peer registry, least-loaded routing, job index, leadership.
//! * [`worker`]: staging, execution, status, outputs and the file service.

pub mod acl;
pub mod broker;
pub mod methods;
pub mod monitor;
pub mod rpc;
pub mod worker;

mod fsutil;

pub use fsutil::write_atomic;
