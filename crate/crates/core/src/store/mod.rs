//! Document store abstraction.
//!
//! Documents are JSON values addressed by `(collection, key)` and carry a
//! version counter that increments by exactly one per successful write. All
//! read-modify-write flows in the crate go through conditional writes
//! (`expected` version) rather than locks held across calls.
//!
//! The set of collections is closed. There is deliberately no collection for
//! chat text or screenshots: analysis input never reaches this layer.

mod document;

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use document::{DocumentStore, WriteAudit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Users,
    Contacts,
    Schedules,
    Alerts,
    Outbox,
    History,
    Assessments,
}

impl Collection {
    pub const ALL: [Collection; 7] = [
        Collection::Users,
        Collection::Contacts,
        Collection::Schedules,
        Collection::Alerts,
        Collection::Outbox,
        Collection::History,
        Collection::Assessments,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collection::Users => "users",
            Collection::Contacts => "contacts",
            Collection::Schedules => "schedules",
            Collection::Alerts => "alerts",
            Collection::Outbox => "outbox",
            Collection::History => "history",
            Collection::Assessments => "assessments",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Collection {
    type Err = StoreError;

    /// Unknown names (including `chats`) resolve to `NotFound`: such a
    /// collection cannot exist.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Collection::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| StoreError::NotFound {
                collection: s.to_string(),
                key: String::new(),
            })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("{collection}/{key} not found")]
    NotFound { collection: String, key: String },
    #[error("version conflict on {collection}/{key}: expected {expected}, found {actual}")]
    VersionConflict {
        collection: String,
        key: String,
        expected: u64,
        actual: u64,
    },
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("stored document is malformed: {0}")]
    Malformed(String),
}

impl StoreError {
    pub(crate) fn not_found(collection: Collection, key: &str) -> Self {
        StoreError::NotFound {
            collection: collection.name().to_string(),
            key: key.to_string(),
        }
    }

    pub fn is_conflict(&self) -> bool {
        matches!(self, StoreError::VersionConflict { .. })
    }
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub key: String,
    pub version: u64,
    pub doc: Value,
}

impl Record {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, StoreError> {
        T::deserialize(&self.doc).map_err(|e| StoreError::Malformed(format!("{}: {e}", self.key)))
    }
}

/// One conditional write inside a batch.
///
/// `expected = Some(0)` means "must not exist yet"; `None` writes
/// unconditionally.
#[derive(Debug, Clone)]
pub struct Put {
    pub collection: Collection,
    pub key: String,
    pub doc: Value,
    pub expected: Option<u64>,
}

impl Put {
    pub fn new(collection: Collection, key: impl Into<String>, doc: Value) -> Self {
        Self {
            collection,
            key: key.into(),
            doc,
            expected: None,
        }
    }

    pub fn create(collection: Collection, key: impl Into<String>, doc: Value) -> Self {
        Self::new(collection, key, doc).expecting(0)
    }

    pub fn expecting(mut self, version: u64) -> Self {
        self.expected = Some(version);
        self
    }

    pub fn typed<T: Serialize>(
        collection: Collection,
        key: impl Into<String>,
        value: &T,
    ) -> Result<Self, StoreError> {
        let doc = serde_json::to_value(value).map_err(|e| StoreError::Malformed(e.to_string()))?;
        Ok(Self::new(collection, key, doc))
    }
}

/// Predicate over a stored document.
pub type Filter<'a> = &'a dyn Fn(&Value) -> bool;

pub trait Store: Send + Sync {
    fn get(&self, collection: Collection, key: &str) -> Result<Record, StoreError>;

    /// Applies every write or none of them. Returns the new version of each
    /// written key in batch order.
    fn apply(&self, batch: Vec<Put>) -> Result<Vec<u64>, StoreError>;

    fn delete(&self, collection: Collection, key: &str) -> Result<(), StoreError>;

    fn list(&self, collection: Collection, filter: Filter<'_>) -> Result<Vec<Record>, StoreError>;

    fn put(
        &self,
        collection: Collection,
        key: &str,
        doc: Value,
        expected: Option<u64>,
    ) -> Result<u64, StoreError> {
        let put = Put {
            collection,
            key: key.to_string(),
            doc,
            expected,
        };
        Ok(self.apply(vec![put])?[0])
    }

    fn count(&self, collection: Collection, filter: Filter<'_>) -> Result<usize, StoreError> {
        Ok(self.list(collection, filter)?.len())
    }

    /// Rewrites on-disk state to its minimal form. No-op for in-memory stores.
    fn compact(&self) -> Result<(), StoreError> {
        Ok(())
    }
}

/// Typed convenience layer over [`Store`].
pub trait StoreExt: Store {
    fn get_typed<T: DeserializeOwned>(
        &self,
        collection: Collection,
        key: &str,
    ) -> Result<(T, u64), StoreError> {
        let rec = self.get(collection, key)?;
        Ok((rec.decode()?, rec.version))
    }

    fn get_opt<T: DeserializeOwned>(
        &self,
        collection: Collection,
        key: &str,
    ) -> Result<Option<(T, u64)>, StoreError> {
        match self.get_typed(collection, key) {
            Ok(v) => Ok(Some(v)),
            Err(StoreError::NotFound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn put_typed<T: Serialize>(
        &self,
        collection: Collection,
        key: &str,
        value: &T,
        expected: Option<u64>,
    ) -> Result<u64, StoreError> {
        let doc = serde_json::to_value(value).map_err(|e| StoreError::Malformed(e.to_string()))?;
        self.put(collection, key, doc, expected)
    }

    fn list_typed<T: DeserializeOwned>(
        &self,
        collection: Collection,
        filter: Filter<'_>,
    ) -> Result<Vec<(T, u64)>, StoreError> {
        self.list(collection, filter)?
            .iter()
            .map(|r| Ok((r.decode()?, r.version)))
            .collect()
    }
}

impl<S: Store + ?Sized> StoreExt for S {}

/// String field accessor for list filters.
pub fn field_str<'a>(doc: &'a Value, name: &str) -> Option<&'a str> {
    doc.get(name).and_then(Value::as_str)
}

/// Filter that accepts every document.
pub fn all(_: &Value) -> bool {
    true
}
