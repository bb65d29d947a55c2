use serde::{Deserialize, Serialize};

/// Parameter name of the class-specific query token for class `c`.
pub fn token_name(c: usize) -> String {
    format!("token.{c:05}")
}

/// Parameter names of the binary classifier for class `c`.
pub fn head_names(c: usize) -> (String, String) {
    (format!("head.w.{c:05}"), format!("head.b.{c:05}"))
}

/// Bookkeeping for the class-specific tokens.
///
/// Token values live in the model's [`ParamStore`](crate::numerics::ParamStore)
/// under [`token_name`]; this records where each row came from and whether it
/// is frozen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTokenStore {
    pub origin_session: Vec<usize>,
    pub frozen: Vec<bool>,
}

impl ClassTokenStore {
    pub fn rows(&self) -> usize {
        self.origin_session.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn trainable_count(&self) -> usize {
        self.rows() - self.frozen_count()
    }
}

/// Bookkeeping for the per-class binary classifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierBank {
    pub frozen: Vec<bool>,
}

impl ClassifierBank {
    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }
}
