use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("timestep {t} out of range 1..={steps}")]
    Timestep { t: usize, steps: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("non-finite {term} at step {step}: {value}")]
    NonFinite {
        step: u64,
        term: &'static str,
        value: f64,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
