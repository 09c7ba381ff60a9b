//! Command-line driver: config handling, artifact layout and the
//! `prepare`, `merge`, `surgery`, `report` and `reproduce` commands.

pub mod artifacts;
pub mod commands;
pub mod config;

use repsurgery::Error;

/// Raised by `reproduce` when a trend check fails.
#[derive(Debug, thiserror::Error)]
#[error("{failed} trend check(s) failed")]
pub struct TrendViolation {
    pub failed: usize,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_TREND: i32 = 3;

/// Maps an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<TrendViolation>().is_some() {
        return EXIT_TREND;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            };
        }
    }
    EXIT_USAGE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(
            exit_code(&anyhow::Error::new(TrendViolation { failed: 1 })),
            EXIT_TREND
        );
        assert_eq!(
            exit_code(&anyhow::Error::new(Error::Divergence("nan".into()))),
            EXIT_NUMERICAL
        );
        assert_eq!(
            exit_code(&anyhow::Error::new(Error::NonFinite("loss"))),
            EXIT_NUMERICAL
        );
        assert_eq!(
            exit_code(&anyhow::Error::new(Error::Config("bad".into()))),
            EXIT_USAGE
        );
        let wrapped = anyhow::Error::new(Error::Divergence("x".into())).context("while merging");
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }
}
