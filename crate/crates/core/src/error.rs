use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where a non-finite value was observed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DivergenceSite {
    /// Free-form role of the offending tensor, e.g. `"activations[3]"`.
    pub role: Option<String>,
    /// Training iteration, if known.
    pub iteration: Option<usize>,
    /// Flat element index inside the tensor, if known.
    pub index: Option<usize>,
}

impl fmt::Display for DivergenceSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(role) = &self.role {
            parts.push(format!("role {role}"));
        }
        if let Some(it) = self.iteration {
            parts.push(format!("iteration {it}"));
        }
        if let Some(i) = self.index {
            parts.push(format!("element {i}"));
        }
        if parts.is_empty() {
            f.write_str("unknown site")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format <{il},{fl}>: {reason}")]
    InvalidFormat { il: i32, fl: i32, reason: &'static str },

    #[error("non-finite value {value} cannot be quantized")]
    NonFinite { value: f64 },

    #[error("training diverged: non-finite value at {0}")]
    Divergence(DivergenceSite),

    #[error("statistics window is empty")]
    EmptyWindow,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("IDX parse error at byte offset {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches role and iteration context to a divergence error.
    pub fn in_context(self, role: &str, iteration: Option<usize>) -> Self {
        match self {
            Error::Divergence(mut site) => {
                if site.role.is_none() {
                    site.role = Some(role.to_string());
                }
                if site.iteration.is_none() {
                    site.iteration = iteration;
                }
                Error::Divergence(site)
            }
            Error::NonFinite { .. } => Error::Divergence(DivergenceSite {
                role: Some(role.to_string()),
                iteration,
                index: None,
            }),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::NonFinite { .. })
    }
}
