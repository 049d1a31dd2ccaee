//! Crate-wide error type with process exit-code mapping.
//!
//! Validation problems (bad config, malformed input files) map to exit 1;
//! runtime problems (I/O, numeric blow-ups, shape bugs) map to exit 2.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad field values, impossible combinations).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (JSONL records, vocab files,
    /// feature files with bad magic, id mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape mismatch; indicates a caller bug, reported with both
    /// shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numeric failure at runtime (non-finite loss, degenerate schedule).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) => 1,
            Error::Shape(_) | Error::Numeric(_) | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_validation_from_runtime() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 1);
        assert_eq!(Error::Shape("x".into()).exit_code(), 2);
        assert_eq!(Error::Numeric("x".into()).exit_code(), 2);
        let io = Error::from(std::io::Error::new(std::io::ErrorKind::Other, "x"));
        assert_eq!(io.exit_code(), 2);
    }
}
