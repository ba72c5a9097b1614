use std::fmt;

use lorafuse_core::Error;

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const INCOMPATIBLE: u8 = 5;
pub const TASK_MISMATCH: u8 = 6;
pub const VERIFY_FAILED: u8 = 7;

/// An error that carries its process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit(code: u8, message: impl Into<String>) -> Exit {
    Exit {
        code,
        message: message.into(),
    }
}

pub fn config_error(message: impl Into<String>) -> Exit {
    exit(CONFIG, message)
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Format(_)
        | Error::MissingTensor(_)
        | Error::TensorShape { .. }
        | Error::Dimension { .. }
        | Error::Path { .. }
        | Error::Io(_)
        | Error::Json(_) => CONFIG,
        Error::Data(_) | Error::Image(_) | Error::Target(_) | Error::DegenerateSample(_) => DATA,
        Error::Numeric(_) | Error::Divergence(_) => DIVERGENCE,
        Error::Compatibility(_) | Error::AdapterMismatch { .. } | Error::Lookup { .. } => INCOMPATIBLE,
        Error::UnknownTask(_) => TASK_MISMATCH,
    }
}

/// The first recognised error in the chain decides the code.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
    }
    OTHER
}
