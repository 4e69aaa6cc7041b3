//! Identifiers and records shared between modules.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_type!(UserId);
id_type!(ScheduleId);
id_type!(
    /// Idempotency key of an alert.
    AlertId
);
id_type!(ContactId);

pub(crate) fn fresh_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoLocation {
    pub latitude: f64,
    pub longitude: f64,
    pub captured_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_m: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocationError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("location timestamp is in the future")]
    FromFuture,
    #[error("accuracy must be a non-negative number of meters")]
    Accuracy,
    #[error("latitude and longitude must be given together")]
    Incomplete,
}

impl GeoLocation {
    pub fn new(latitude: f64, longitude: f64, captured_at: DateTime<Utc>) -> Self {
        Self {
            latitude,
            longitude,
            captured_at,
            accuracy_m: None,
        }
    }

    pub fn validate(&self, now: DateTime<Utc>) -> Result<(), LocationError> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(LocationError::Latitude(self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(LocationError::Longitude(self.longitude));
        }
        if self.captured_at > now {
            return Err(LocationError::FromFuture);
        }
        if let Some(acc) = self.accuracy_m {
            if !(acc.is_finite() && acc >= 0.0) {
                return Err(LocationError::Accuracy);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub display_name: String,
    /// SHA-256 of the bearer token, hex encoded. The token itself is never stored.
    pub token_sha256: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub last_location: Option<GeoLocation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyContact {
    pub contact_id: ContactId,
    pub user_id: UserId,
    pub name: String,
    pub email: String,
    pub priority: u8,
}
