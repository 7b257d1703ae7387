// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stable exit-code contract: 0 success, 2 usage, 3 I/O, 4 numerical,
//! 5 verification failure.

use std::fmt;

use causalgaze::dataio::DataError;
use causalgaze::detector::DetectorError;
use causalgaze::interpret::InterpretError;
use causalgaze::train::TrainError;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const VERIFICATION: u8 = 5;

/// An error that carries its own exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Coded { code: USAGE, message: message.into() }.into()
}

pub fn io_failure(message: impl Into<String>) -> anyhow::Error {
    Coded { code: IO, message: message.into() }.into()
}

pub fn verification(message: impl Into<String>) -> anyhow::Error {
    Coded { code: VERIFICATION, message: message.into() }.into()
}

fn detector_code(e: &DetectorError) -> u8 {
    match e {
        DetectorError::Io { .. } | DetectorError::Checkpoint { .. } => IO,
        DetectorError::Engine(_) => NUMERICAL,
        _ => USAGE,
    }
}

/// Maps any error chain to its exit code; the first recognized cause wins.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if cause.downcast_ref::<DataError>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::NonFinite { .. } | TrainError::MissingGradient(_) => NUMERICAL,
                TrainError::Detector(d) => detector_code(d),
                _ => USAGE,
            };
        }
        if let Some(d) = cause.downcast_ref::<DetectorError>() {
            return detector_code(d);
        }
        if let Some(i) = cause.downcast_ref::<InterpretError>() {
            return match i {
                InterpretError::Detector(d) => detector_code(d),
                _ => USAGE,
            };
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_survive_context_wrapping() {
        let e = usage("bad flag").context("while parsing");
        assert_eq!(code_for(&e), USAGE);
        let e = anyhow::Error::from(TrainError::NonFinite { param: "proj_w".into() }).context("training");
        assert_eq!(code_for(&e), NUMERICAL);
        assert!(format!("{e:#}").contains("proj_w"));
        assert_eq!(code_for(&verification("x")), VERIFICATION);
        let e = anyhow::Error::from(DataError::UnrecognizedFormat("f".into()));
        assert_eq!(code_for(&e), IO);
    }
}
