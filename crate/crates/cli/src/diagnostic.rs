use entroproj::Error;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IDENTITY: i32 = 4;

/// Machine-readable error report, printed to stderr as one JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub exit_code: i32,
}

impl Diagnostic {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: "validation", message: message.into(), field: None, exit_code: EXIT_VALIDATION }
    }

    pub fn not_converged(message: impl Into<String>) -> Self {
        Self { kind: "not_converged", message: message.into(), field: None, exit_code: EXIT_NOT_CONVERGED }
    }

    pub fn failure(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), field: None, exit_code: EXIT_FAILURE }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", self.message))
    }
}

impl From<Error> for Diagnostic {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidInput(_)
            | Error::Precondition(_)
            | Error::NodeOutOfRange { .. }
            | Error::ConstraintTooRare { .. }
            | Error::EquivalenceViolation(_) => Self::validation(message),
            Error::NotConverged { .. } | Error::FixedPointNotReached(_) | Error::DualUnbounded { .. } => {
                Self::not_converged(message)
            }
            Error::IdentityViolation(_) => {
                Self { kind: "identity_violation", message, field: None, exit_code: EXIT_IDENTITY }
            }
            Error::DegenerateTilt
            | Error::NonFiniteDrift { .. }
            | Error::NonFiniteConstraint { .. }
            | Error::NonFiniteIntegrand(_)
            | Error::IncompatiblePotentials => Self::failure("numerical", message),
        }
    }
}

impl From<std::io::Error> for Diagnostic {
    fn from(e: std::io::Error) -> Self {
        Self::failure("io", e.to_string())
    }
}
