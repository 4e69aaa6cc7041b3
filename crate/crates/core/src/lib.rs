//! SafeSpace backend: toxicity analysis, check-in (dead-man's switch) and SOS
//! alerting with an email outbox, and a weighted relationship questionnaire.

pub mod api;
pub mod clock;
pub mod config;
pub mod directory;
pub mod dispatch;
pub mod history;
pub mod model;
pub mod ping;
pub mod questionnaire;
pub mod service;
pub mod sim;
pub mod store;
pub mod tox;
