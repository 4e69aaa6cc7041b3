//! Per-user activity log shown on the history dashboard.

use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::UserId;
use crate::store::{field_str, Collection, Put, Store, StoreError, StoreExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HistoryKind {
    AnalysisPerformed,
    CheckIn,
    LateCheckIn,
    AlertSent,
    SosTriggered,
    QuestionnaireScored,
}

impl std::str::FromStr for HistoryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown history kind {s:?}"))
    }
}

/// One dashboard entry. `summary` never contains analyzed text; for
/// analyses it carries the verdict and scores only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub event_id: String,
    pub user_id: UserId,
    pub kind: HistoryKind,
    pub summary: String,
    pub occurred_at: DateTime<Utc>,
}

static SEQ: AtomicU64 = AtomicU64::new(0);

impl HistoryEvent {
    pub fn new(user_id: UserId, kind: HistoryKind, summary: impl Into<String>, at: DateTime<Utc>) -> Self {
        let seq = SEQ.fetch_add(1, Ordering::Relaxed);
        let nanos = at.timestamp_nanos_opt().unwrap_or_default();
        Self {
            event_id: format!("{nanos:020}-{seq:010}"),
            user_id,
            kind,
            summary: summary.into(),
            occurred_at: at,
        }
    }

    pub fn into_put(self) -> Result<Put, StoreError> {
        let key = self.event_id.clone();
        Ok(Put::typed(Collection::History, key, &self)?.expecting(0))
    }
}

pub fn append_history(store: &dyn Store, event: HistoryEvent) -> Result<(), StoreError> {
    store.apply(vec![event.into_put()?])?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct HistoryQuery {
    pub since: Option<DateTime<Utc>>,
    pub kind: Option<HistoryKind>,
}

/// Events for one user, newest first.
pub fn query_history(
    store: &dyn Store,
    user: &UserId,
    query: &HistoryQuery,
) -> Result<Vec<HistoryEvent>, StoreError> {
    let uid = user.as_str();
    let mut events: Vec<HistoryEvent> = store
        .list_typed::<HistoryEvent>(Collection::History, &|doc| field_str(doc, "user_id") == Some(uid))?
        .into_iter()
        .map(|(e, _)| e)
        .filter(|e| query.since.is_none_or(|s| e.occurred_at >= s))
        .filter(|e| query.kind.is_none_or(|k| e.kind == k))
        .collect();
    events.sort_by(|a, b| {
        b.occurred_at
            .cmp(&a.occurred_at)
            .then_with(|| b.event_id.cmp(&a.event_id))
    });
    Ok(events)
}

/// Deletes every event that occurred strictly before `before`. Returns the
/// number removed.
pub fn prune_history(store: &dyn Store, before: DateTime<Utc>) -> Result<usize, StoreError> {
    let old = store.list_typed::<HistoryEvent>(Collection::History, &crate::store::all)?;
    let mut removed = 0;
    for (event, _) in old.into_iter().filter(|(e, _)| e.occurred_at < before) {
        store.delete(Collection::History, &event.event_id)?;
        removed += 1;
    }
    if removed > 0 {
        store.compact()?;
    }
    Ok(removed)
}
