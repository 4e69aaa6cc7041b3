//! Users, bearer tokens and emergency contacts.

use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::model::{fresh_id, ContactId, EmergencyContact, GeoLocation, UserId, UserProfile};
use crate::store::{Collection, Store, StoreError, StoreExt};

pub const MAX_CONTACTS: usize = 10;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("at most {MAX_CONTACTS} emergency contacts are allowed, got {0}")]
    TooMany(usize),
    #[error("invalid email address {0:?}")]
    InvalidEmail(String),
    #[error("priority {0} is used by more than one contact")]
    DuplicatePriority(u8),
    #[error("contact name must not be empty")]
    EmptyName,
    #[error("user not found")]
    UnknownUser,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Contact as submitted by a client; ids are assigned on save.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactInput {
    pub name: String,
    pub email: String,
    pub priority: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContactList {
    user_id: UserId,
    contacts: Vec<EmergencyContact>,
}

/// Syntactic RFC 5322 addr-spec check.
pub fn is_valid_email(email: &str) -> bool {
    email.trim() == email && lettre::Address::from_str(email).is_ok()
}

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

#[derive(Clone)]
pub struct Directory<'a> {
    store: &'a dyn Store,
}

impl<'a> Directory<'a> {
    pub fn new(store: &'a dyn Store) -> Self {
        Self { store }
    }

    /// Creates a user and returns it with its freshly generated bearer token
    /// (256 random bits, hex). Only the token's hash is stored.
    pub fn create_user(&self, display_name: &str, now: DateTime<Utc>) -> Result<(UserProfile, String), StoreError> {
        let mut raw = [0u8; 32];
        rand::rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let profile = UserProfile {
            user_id: UserId::new(fresh_id("usr")),
            display_name: display_name.to_string(),
            token_sha256: hash_token(&token),
            created_at: now,
            last_location: None,
        };
        self.store
            .put_typed(Collection::Users, profile.user_id.as_str(), &profile, Some(0))?;
        Ok((profile, token))
    }

    /// Resolves a bearer token. Every stored hash is compared in constant time.
    pub fn authenticate(&self, token: &str) -> Result<Option<UserId>, StoreError> {
        let presented = hash_token(token);
        let users = self.store.list_typed::<UserProfile>(Collection::Users, &crate::store::all)?;
        let mut found = None;
        for (user, _) in users {
            if bool::from(user.token_sha256.as_bytes().ct_eq(presented.as_bytes())) {
                found = Some(user.user_id);
            }
        }
        Ok(found)
    }

    pub fn profile(&self, user: &UserId) -> Result<UserProfile, StoreError> {
        Ok(self.store.get_typed::<UserProfile>(Collection::Users, user.as_str())?.0)
    }

    pub fn record_location(&self, user: &UserId, location: &GeoLocation) -> Result<(), StoreError> {
        loop {
            let (mut profile, version) = self.store.get_typed::<UserProfile>(Collection::Users, user.as_str())?;
            profile.last_location = Some(location.clone());
            match self
                .store
                .put_typed(Collection::Users, user.as_str(), &profile, Some(version))
            {
                Err(e) if e.is_conflict() => continue,
                other => return other.map(|_| ()),
            }
        }
    }

    /// Replaces the user's full contact list.
    pub fn set_contacts(&self, user: &UserId, input: Vec<ContactInput>) -> Result<Vec<EmergencyContact>, ContactError> {
        if input.len() > MAX_CONTACTS {
            return Err(ContactError::TooMany(input.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &input {
            if c.name.trim().is_empty() {
                return Err(ContactError::EmptyName);
            }
            if !is_valid_email(&c.email) {
                return Err(ContactError::InvalidEmail(c.email.clone()));
            }
            if !seen.insert(c.priority) {
                return Err(ContactError::DuplicatePriority(c.priority));
            }
        }
        match self.store.get(Collection::Users, user.as_str()) {
            Err(StoreError::NotFound { .. }) => return Err(ContactError::UnknownUser),
            other => {
                other?;
            }
        }
        let mut contacts: Vec<EmergencyContact> = input
            .into_iter()
            .map(|c| EmergencyContact {
                contact_id: ContactId::new(fresh_id("ct")),
                user_id: user.clone(),
                name: c.name.trim().to_string(),
                email: c.email,
                priority: c.priority,
            })
            .collect();
        contacts.sort_by_key(|c| c.priority);
        let list = ContactList {
            user_id: user.clone(),
            contacts: contacts.clone(),
        };
        self.store.put_typed(Collection::Contacts, user.as_str(), &list, None)?;
        Ok(contacts)
    }

    /// Contacts ordered by priority (1 first).
    pub fn contacts(&self, user: &UserId) -> Result<Vec<EmergencyContact>, StoreError> {
        Ok(self
            .store
            .get_opt::<ContactList>(Collection::Contacts, user.as_str())?
            .map(|(l, _)| l.contacts)
            .unwrap_or_default())
    }
}
