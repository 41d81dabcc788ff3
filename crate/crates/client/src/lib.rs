//! Client side of gridlet: an XML-RPC client for nodes, typed method
//! wrappers, resumable downloads and the `gridlet` command-line tool.

pub mod api;
pub mod cli;
pub mod rpc;
pub mod transfer;

pub use api::{AclRow, RoleInfo};
pub use rpc::{Auth, ClientError, RpcClient};
