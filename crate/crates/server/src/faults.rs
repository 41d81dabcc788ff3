//! Mapping of component errors onto wire faults.

use gridlet_client::ClientError;
use gridlet_core::acl::{AclError, AuthError};
use gridlet_core::broker::BrokerError;
use gridlet_core::rpc::{fault_code as fc, Fault, ValueError};
use gridlet_core::worker::WorkerError;

pub fn worker(e: WorkerError) -> Fault {
    let code = match &e {
        WorkerError::InvalidRequest(_) => fc::INVALID_REQUEST,
        WorkerError::DuplicateJob(_) => fc::DUPLICATE_JOB,
        WorkerError::UnknownJob(_) => fc::UNKNOWN_JOB,
        WorkerError::InputFetch(_) => fc::INPUT_FETCH_FAILED,
        WorkerError::SubmitParse(_) => fc::SUBMIT_PARSE,
        WorkerError::Executor(_) => fc::EXECUTOR_FAILED,
        WorkerError::NotFound(_) => fc::NOT_FOUND,
        WorkerError::Range(_) => fc::RANGE_ERROR,
        WorkerError::OutsideRoot(_) => fc::OUTSIDE_ROOT,
        WorkerError::BadPattern(_) => fc::BAD_PATTERN,
        WorkerError::Corrupt(_) | WorkerError::Io(_) => fc::INTERNAL,
    };
    Fault::new(code, e.to_string())
}

pub fn broker(e: BrokerError) -> Fault {
    let code = match &e {
        BrokerError::UnknownPeer(_) => fc::UNKNOWN_PEER,
        BrokerError::NoFreshPeers => fc::NO_FRESH_PEERS,
        BrokerError::UnknownJob(_) => fc::UNKNOWN_JOB,
        BrokerError::StaleEpoch { .. } => fc::STALE_EPOCH,
    };
    Fault::new(code, e.to_string())
}

pub fn acl(e: AclError) -> Fault {
    let code = match &e {
        AclError::Unauthorized(_) => fc::ACCESS_DENIED,
        AclError::InvalidScope(_) => fc::INVALID_SCOPE,
        AclError::InvalidEntry(_) => fc::BAD_PARAMS,
        AclError::NotFound(_) => fc::NOT_FOUND,
        AclError::Corrupt { .. } | AclError::Io(_) => fc::INTERNAL,
    };
    Fault::new(code, e.to_string())
}

pub fn auth(e: AuthError) -> Fault {
    Fault::new(fc::INVALID_CREDENTIAL, e.to_string())
}

pub fn params(e: ValueError) -> Fault {
    Fault::new(fc::BAD_PARAMS, e.to_string())
}

/// A relayed call's error. Faults pass through verbatim; anything else
/// becomes `code` with `context` prefixed.
pub fn relayed(e: ClientError, code: i32, context: &str) -> Fault {
    match e {
        ClientError::Fault(f) => f,
        other => Fault::new(code, format!("{context}: {other}")),
    }
}
