//! Machine-readable command failures and their exit codes.

use riskctl_core::{Error, ErrorKind};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: Category,
    pub message: String,
    /// Offending flag, environment variable or JSON path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointer: Option<String>,
}

impl CliError {
    pub fn new(error: Category, message: impl Into<String>) -> Self {
        Self {
            error,
            message: message.into(),
            pointer: None,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Category::Data, message)
    }

    pub fn at(mut self, pointer: impl Into<String>) -> Self {
        self.pointer = Some(pointer.into());
        self
    }

    pub fn exit_code(&self) -> u8 {
        match self.error {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", self.message))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match e.kind() {
            ErrorKind::Config => Category::Config,
            ErrorKind::Data => Category::Data,
            ErrorKind::Numeric => Category::Numeric,
        };
        let pointer = match &e {
            Error::InvalidParameter { name, .. } => Some((*name).to_string()),
            _ => None,
        };
        Self {
            error: category,
            message: e.to_string(),
            pointer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::invalid("K", "bad")).exit_code(), 2);
        assert_eq!(CliError::from(Error::Format("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::NumericBlowup { period: 3 }).exit_code(), 4);
    }

    #[test]
    fn json_carries_the_pointer() {
        let e = CliError::from(Error::invalid("alpha", "must be in (0, 1)"));
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["pointer"], "alpha");
    }
}
