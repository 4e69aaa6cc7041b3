//! Alerts, the durable outbox and email delivery.
//!
//! An alert fans out to one outbox entry per emergency contact. Entries are
//! written in the same store batch as the state change that caused them, so
//! an alert is either fully queued or not queued at all. [`Dispatcher::flush`]
//! drains due entries in priority order and reschedules failures with
//! exponential backoff.

mod format;
mod smtp;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

pub use format::{format_alert, map_link, render_body, subject, MimeMessage, LOCATION_UNAVAILABLE, SUBJECT_PREFIX};
pub use smtp::{SmtpConfig, SmtpMailer};

use crate::clock::Clock;
use crate::history::{append_history, HistoryEvent, HistoryKind};
use crate::model::{fresh_id, AlertId, ContactId, EmergencyContact, GeoLocation, ScheduleId, UserId, UserProfile};
use crate::store::{field_str, Collection, Put, Store, StoreError, StoreExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertKind {
    MissedCheckIn,
    Sos,
}

impl AlertKind {
    pub fn label(self) -> &'static str {
        match self {
            AlertKind::MissedCheckIn => "Missed check-in",
            AlertKind::Sos => "SOS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertStatus {
    Pending,
    Queued,
    Sent,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: AlertId,
    pub kind: AlertKind,
    pub user_id: UserId,
    #[serde(default)]
    pub schedule_id: Option<ScheduleId>,
    /// Deadline that was missed, for check-in alerts.
    #[serde(default)]
    pub deadline: Option<DateTime<Utc>>,
    #[serde(default)]
    pub location: Option<GeoLocation>,
    #[serde(default)]
    pub note: Option<String>,
    /// Rendered email body.
    pub message: String,
    pub created_at: DateTime<Utc>,
    pub status: AlertStatus,
}

impl Alert {
    /// Deterministic id: the same missed deadline always maps to the same alert.
    pub fn missed_check_in_id(schedule: &ScheduleId, deadline: DateTime<Utc>) -> AlertId {
        let mut h = Sha256::new();
        h.update(schedule.as_str().as_bytes());
        h.update(b"|");
        h.update(deadline.timestamp_micros().to_string().as_bytes());
        AlertId::new(format!("mci-{}", &hex::encode(h.finalize())[..32]))
    }

    pub fn missed_check_in(
        schedule: ScheduleId,
        user: UserId,
        deadline: DateTime<Utc>,
        location: Option<GeoLocation>,
        now: DateTime<Utc>,
        user_display_name: &str,
    ) -> Self {
        let mut alert = Alert {
            alert_id: Self::missed_check_in_id(&schedule, deadline),
            kind: AlertKind::MissedCheckIn,
            user_id: user,
            schedule_id: Some(schedule),
            deadline: Some(deadline),
            location,
            note: None,
            message: String::new(),
            created_at: now,
            status: AlertStatus::Pending,
        };
        alert.message = render_body(&alert, user_display_name);
        alert
    }

    pub fn sos(
        user: UserId,
        location: Option<GeoLocation>,
        note: Option<String>,
        now: DateTime<Utc>,
        user_display_name: &str,
    ) -> Self {
        let mut alert = Alert {
            alert_id: AlertId::new(fresh_id("sos")),
            kind: AlertKind::Sos,
            user_id: user,
            schedule_id: None,
            deadline: None,
            location,
            note,
            message: String::new(),
            created_at: now,
            status: AlertStatus::Pending,
        };
        alert.message = render_body(&alert, user_display_name);
        alert
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryStatus {
    Pending,
    Sent,
    Failed,
}

/// One alert addressed to one contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub entry_id: String,
    pub alert_id: AlertId,
    pub user_id: UserId,
    pub contact_id: ContactId,
    pub contact_name: String,
    pub recipient: String,
    pub priority: u8,
    pub attempts: u32,
    pub next_attempt_at: DateTime<Utc>,
    #[serde(default)]
    pub last_attempt_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub last_error: Option<String>,
    pub status: EntryStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub sent_at: Option<DateTime<Utc>>,
}

impl OutboxEntry {
    pub fn key(alert: &AlertId, recipient: &str) -> String {
        format!("{alert}|{}", recipient.to_ascii_lowercase())
    }

    fn contact(&self) -> EmergencyContact {
        EmergencyContact {
            contact_id: self.contact_id.clone(),
            user_id: self.user_id.clone(),
            name: self.contact_name.clone(),
            email: self.recipient.clone(),
            priority: self.priority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered,
    TransientFailure(String),
    PermanentFailure(String),
}

impl fmt::Display for DeliveryOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeliveryOutcome::Delivered => f.write_str("delivered"),
            DeliveryOutcome::TransientFailure(e) => write!(f, "transient failure: {e}"),
            DeliveryOutcome::PermanentFailure(e) => write!(f, "permanent failure: {e}"),
        }
    }
}

/// Something that can hand a message to a mail server.
pub trait MailTransport: Send + Sync {
    fn send(&self, message: &MimeMessage, recipient: &str) -> DeliveryOutcome;
}

impl<T: MailTransport + ?Sized> MailTransport for Arc<T> {
    fn send(&self, message: &MimeMessage, recipient: &str) -> DeliveryOutcome {
        (**self).send(message, recipient)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchConfig {
    /// Envelope and `From:` address.
    pub sender: String,
    pub max_attempts: u32,
    pub backoff_base_secs: u64,
    pub backoff_cap_secs: u64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self {
            sender: "alerts@safespace.invalid".into(),
            max_attempts: 8,
            backoff_base_secs: 10,
            backoff_cap_secs: 3600,
        }
    }
}

impl DispatchConfig {
    /// Delay before the next attempt after `attempts` failures:
    /// `min(2^attempts * base, cap)`.
    pub fn backoff(&self, attempts: u32) -> Duration {
        let factor = 1u64.checked_shl(attempts).unwrap_or(u64::MAX);
        let secs = factor.saturating_mul(self.backoff_base_secs).min(self.backoff_cap_secs);
        Duration::seconds(secs as i64)
    }
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("user has no emergency contacts")]
    NoEmergencyContacts,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchSummary {
    pub attempted: usize,
    pub sent: usize,
    /// Failed attempts that will be retried.
    pub failed: usize,
    /// Entries that used their last attempt in this pass.
    pub exhausted: usize,
    /// Entries still waiting for delivery.
    pub pending: usize,
    pub next_due: Option<DateTime<Utc>>,
}

pub struct Dispatcher {
    store: Arc<dyn Store>,
    config: DispatchConfig,
}

impl Dispatcher {
    pub fn new(store: Arc<dyn Store>, config: DispatchConfig) -> Self {
        Self { store, config }
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.config
    }

    /// Writes that create `alert` and one entry per distinct recipient, for
    /// inclusion in a caller's batch. Returns no writes if the alert already
    /// exists. With no contacts the alert is recorded as `Failed`.
    pub fn enqueue_puts(&self, alert: &Alert, contacts: &[EmergencyContact]) -> Result<Vec<Put>, StoreError> {
        if self.store.get_opt::<Alert>(Collection::Alerts, alert.alert_id.as_str())?.is_some() {
            debug!(alert = %alert.alert_id, "alert already queued");
            return Ok(Vec::new());
        }
        let mut by_recipient: BTreeMap<String, &EmergencyContact> = BTreeMap::new();
        for c in contacts {
            let key = OutboxEntry::key(&alert.alert_id, &c.email);
            match by_recipient.get(&key) {
                Some(existing) if existing.priority <= c.priority => {}
                _ => {
                    by_recipient.insert(key, c);
                }
            }
        }

        let mut stored = alert.clone();
        stored.status = if by_recipient.is_empty() {
            AlertStatus::Failed
        } else {
            AlertStatus::Queued
        };
        let mut puts = vec![Put::typed(Collection::Alerts, stored.alert_id.as_str(), &stored)?.expecting(0)];
        for (key, c) in by_recipient {
            let entry = OutboxEntry {
                entry_id: key.clone(),
                alert_id: alert.alert_id.clone(),
                user_id: alert.user_id.clone(),
                contact_id: c.contact_id.clone(),
                contact_name: c.name.clone(),
                recipient: c.email.clone(),
                priority: c.priority,
                attempts: 0,
                next_attempt_at: alert.created_at,
                last_attempt_at: None,
                last_error: None,
                status: EntryStatus::Pending,
                created_at: alert.created_at,
                sent_at: None,
            };
            puts.push(Put::typed(Collection::Outbox, key, &entry)?.expecting(0));
        }
        Ok(puts)
    }

    /// Queues `alert` on its own. Idempotent on the alert id.
    pub fn enqueue(&self, alert: &Alert, contacts: &[EmergencyContact]) -> Result<(), DispatchError> {
        if contacts.is_empty() {
            return Err(DispatchError::NoEmergencyContacts);
        }
        let puts = self.enqueue_puts(alert, contacts)?;
        if puts.is_empty() {
            return Ok(());
        }
        match self.store.apply(puts) {
            Err(e) if e.is_conflict() => Ok(()),
            other => other.map(|_| ()).map_err(Into::into),
        }
    }

    pub fn entries(&self, alert: Option<&AlertId>) -> Result<Vec<OutboxEntry>, StoreError> {
        let wanted = alert.map(|a| a.as_str().to_string());
        let filter = move |doc: &serde_json::Value| match &wanted {
            Some(id) => field_str(doc, "alert_id") == Some(id.as_str()),
            None => true,
        };
        let mut entries: Vec<OutboxEntry> = self
            .store
            .list_typed(Collection::Outbox, &filter)?
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        sort_for_delivery(&mut entries);
        Ok(entries)
    }

    pub fn pending_count(&self) -> Result<usize, StoreError> {
        self.store.count(Collection::Outbox, &|d| field_str(d, "status") == Some("Pending"))
    }

    /// Earliest `next_attempt_at` among pending entries.
    pub fn next_due(&self) -> Result<Option<DateTime<Utc>>, StoreError> {
        let pending: Vec<(OutboxEntry, u64)> = self
            .store
            .list_typed(Collection::Outbox, &|d| field_str(d, "status") == Some("Pending"))?;
        Ok(pending.iter().map(|(e, _)| e.next_attempt_at).min())
    }

    /// Attempts every due entry once.
    pub fn flush(&self, transport: &dyn MailTransport, clock: &dyn Clock) -> Result<DispatchSummary, StoreError> {
        self.flush_inner(transport, clock, false)
    }

    /// Attempts every pending entry once, ignoring backoff. For operators
    /// draining the outbox after an outage.
    pub fn flush_all(&self, transport: &dyn MailTransport, clock: &dyn Clock) -> Result<DispatchSummary, StoreError> {
        self.flush_inner(transport, clock, true)
    }

    fn flush_inner(
        &self,
        transport: &dyn MailTransport,
        clock: &dyn Clock,
        ignore_backoff: bool,
    ) -> Result<DispatchSummary, StoreError> {
        let started = clock.now();
        let mut due: Vec<(OutboxEntry, u64)> = self.store.list_typed(Collection::Outbox, &|d| {
            field_str(d, "status") == Some("Pending")
        })?;
        due.retain(|(e, _)| ignore_backoff || e.next_attempt_at <= started);
        due.sort_by(|(a, _), (b, _)| delivery_order(a, b));

        let mut summary = DispatchSummary::default();
        let mut touched = BTreeSet::new();
        let mut alerts: BTreeMap<AlertId, Option<Alert>> = BTreeMap::new();
        let mut names: BTreeMap<UserId, String> = BTreeMap::new();

        for (mut entry, version) in due {
            let alert = match alerts.entry(entry.alert_id.clone()) {
                std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(self.store.get_opt::<Alert>(Collection::Alerts, entry.alert_id.as_str())?.map(|(a, _)| a))
                }
            };
            let Some(alert) = alert.as_ref() else {
                warn!(entry = %entry.entry_id, "outbox entry without alert, skipping");
                continue;
            };
            let name = match names.get(&entry.user_id) {
                Some(n) => n.clone(),
                None => {
                    let n = self
                        .store
                        .get_opt::<UserProfile>(Collection::Users, entry.user_id.as_str())?
                        .map(|(p, _)| p.display_name)
                        .unwrap_or_else(|| entry.user_id.to_string());
                    names.insert(entry.user_id.clone(), n.clone());
                    n
                }
            };

            let message = format_alert(alert, &name, &entry.contact(), &self.config.sender);
            let outcome = transport.send(&message, &entry.recipient);
            let now = clock.now();
            summary.attempted += 1;
            entry.attempts += 1;
            entry.last_attempt_at = Some(now);
            match &outcome {
                DeliveryOutcome::Delivered => {
                    entry.status = EntryStatus::Sent;
                    entry.sent_at = Some(now);
                    entry.last_error = None;
                    summary.sent += 1;
                }
                DeliveryOutcome::TransientFailure(err) | DeliveryOutcome::PermanentFailure(err) => {
                    entry.last_error = Some(err.clone());
                    if entry.attempts >= self.config.max_attempts {
                        entry.status = EntryStatus::Failed;
                        summary.exhausted += 1;
                        warn!(alert = %entry.alert_id, attempts = entry.attempts, "delivery attempts exhausted");
                    } else {
                        entry.next_attempt_at = now + self.config.backoff(entry.attempts);
                        summary.failed += 1;
                    }
                }
            }
            debug!(alert = %entry.alert_id, attempt = entry.attempts, %outcome, "delivery attempt");
            match self
                .store
                .put_typed(Collection::Outbox, &entry.entry_id, &entry, Some(version))
            {
                Ok(_) => {
                    touched.insert(entry.alert_id.clone());
                }
                Err(e) if e.is_conflict() => {
                    warn!(entry = %entry.entry_id, "outbox entry changed during flush");
                }
                Err(e) => return Err(e),
            }
        }

        for alert_id in touched {
            self.refresh_alert_status(&alert_id, clock.now())?;
        }

        let pending: Vec<(OutboxEntry, u64)> = self
            .store
            .list_typed(Collection::Outbox, &|d| field_str(d, "status") == Some("Pending"))?;
        summary.pending = pending.len();
        summary.next_due = pending.iter().map(|(e, _)| e.next_attempt_at).min();
        Ok(summary)
    }

    /// Derives the alert status from its entries: `Sent` once every entry is
    /// delivered, `Failed` once none are pending and one gave up.
    fn refresh_alert_status(&self, alert_id: &AlertId, now: DateTime<Utc>) -> Result<(), StoreError> {
        let entries = self.entries(Some(alert_id))?;
        let status = if entries.iter().all(|e| e.status == EntryStatus::Sent) {
            AlertStatus::Sent
        } else if entries.iter().any(|e| e.status == EntryStatus::Pending) {
            AlertStatus::Queued
        } else {
            AlertStatus::Failed
        };
        loop {
            let (mut alert, version) = self.store.get_typed::<Alert>(Collection::Alerts, alert_id.as_str())?;
            if alert.status == status {
                return Ok(());
            }
            alert.status = status;
            match self
                .store
                .put_typed(Collection::Alerts, alert_id.as_str(), &alert, Some(version))
            {
                Ok(_) => {}
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e),
            }
            if status == AlertStatus::Sent {
                let summary = format!("{} alert delivered to {} contact(s)", alert.kind.label(), entries.len());
                append_history(
                    self.store.as_ref(),
                    HistoryEvent::new(alert.user_id.clone(), HistoryKind::AlertSent, summary, now),
                )?;
            }
            return Ok(());
        }
    }
}

fn delivery_order(a: &OutboxEntry, b: &OutboxEntry) -> std::cmp::Ordering {
    (a.created_at, &a.alert_id, a.priority, &a.entry_id).cmp(&(b.created_at, &b.alert_id, b.priority, &b.entry_id))
}

fn sort_for_delivery(entries: &mut [OutboxEntry]) {
    entries.sort_by(delivery_order);
}

/// Transport for tests and simulations that replays a fixed script of
/// outcomes and records what it was asked to send.
#[derive(Default)]
pub struct ScriptedTransport {
    script: std::sync::Mutex<std::collections::VecDeque<DeliveryOutcome>>,
    sent: std::sync::Mutex<Vec<(String, MimeMessage)>>,
}

impl ScriptedTransport {
    /// Delivers everything unless outcomes are pushed.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, outcome: DeliveryOutcome) {
        self.script.lock().unwrap().push_back(outcome);
    }

    /// Messages delivered so far, with their recipients.
    pub fn delivered(&self) -> Vec<(String, MimeMessage)> {
        self.sent.lock().unwrap().clone()
    }
}

impl MailTransport for ScriptedTransport {
    fn send(&self, message: &MimeMessage, recipient: &str) -> DeliveryOutcome {
        let outcome = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(DeliveryOutcome::Delivered);
        if outcome == DeliveryOutcome::Delivered {
            self.sent.lock().unwrap().push((recipient.to_string(), message.clone()));
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimulatedClock;
    use crate::directory::{ContactInput, Directory};
    use crate::store::DocumentStore;

    struct Fixture {
        store: Arc<DocumentStore>,
        clock: SimulatedClock,
        dispatcher: Dispatcher,
        user: UserId,
        contacts: Vec<EmergencyContact>,
    }

    fn fixture(n_contacts: u8) -> Fixture {
        let store = Arc::new(DocumentStore::in_memory());
        let clock = SimulatedClock::at_epoch();
        let dir = Directory::new(store.as_ref());
        let (user, _) = dir.create_user("Priya", clock.now()).unwrap();
        let contacts = dir
            .set_contacts(
                &user.user_id,
                (1..=n_contacts)
                    .map(|i| ContactInput {
                        name: format!("Contact {i}"),
                        email: format!("c{i}@example.org"),
                        priority: i,
                    })
                    .collect(),
            )
            .unwrap();
        Fixture {
            dispatcher: Dispatcher::new(store.clone(), DispatchConfig::default()),
            store,
            clock,
            user: user.user_id,
            contacts,
        }
    }

    fn sos(f: &Fixture) -> Alert {
        Alert::sos(f.user.clone(), None, None, f.clock.now(), "Priya")
    }

    #[test]
    fn backoff_doubles_until_the_cap() {
        let c = DispatchConfig::default();
        let secs: Vec<i64> = (0..12).map(|a| c.backoff(a).num_seconds()).collect();
        assert_eq!(secs, [10, 20, 40, 80, 160, 320, 640, 1280, 2560, 3600, 3600, 3600]);
        assert_eq!(c.backoff(200).num_seconds(), 3600);
    }

    #[test]
    fn missed_check_in_ids_are_stable_per_deadline() {
        let d = Utc::now();
        let s = ScheduleId::from("s");
        assert_eq!(Alert::missed_check_in_id(&s, d), Alert::missed_check_in_id(&s, d));
        assert_ne!(
            Alert::missed_check_in_id(&s, d),
            Alert::missed_check_in_id(&s, d + Duration::seconds(1))
        );
        assert_ne!(
            Alert::missed_check_in_id(&s, d),
            Alert::missed_check_in_id(&ScheduleId::from("t"), d)
        );
    }

    #[test]
    fn enqueue_is_idempotent() {
        let f = fixture(2);
        let alert = sos(&f);
        f.dispatcher.enqueue(&alert, &f.contacts).unwrap();
        f.dispatcher.enqueue(&alert, &f.contacts).unwrap();
        assert_eq!(f.dispatcher.entries(None).unwrap().len(), 2);
        assert!(matches!(
            f.dispatcher.enqueue(&sos(&f), &[]),
            Err(DispatchError::NoEmergencyContacts)
        ));
    }

    #[test]
    fn duplicate_recipients_collapse_to_the_higher_priority_contact() {
        let f = fixture(2);
        let mut contacts = f.contacts.clone();
        contacts[1].email = "C1@example.org".into();
        f.dispatcher.enqueue(&sos(&f), &contacts).unwrap();
        let entries = f.dispatcher.entries(None).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].priority, 1);
    }

    #[test]
    fn flush_delivers_in_priority_order_and_marks_the_alert_sent() {
        let f = fixture(3);
        let alert = sos(&f);
        f.dispatcher.enqueue(&alert, &f.contacts).unwrap();
        let transport = ScriptedTransport::new();
        let summary = f.dispatcher.flush(&transport, &f.clock).unwrap();
        assert_eq!((summary.attempted, summary.sent, summary.pending), (3, 3, 0));
        let order: Vec<String> = transport.delivered().into_iter().map(|(r, _)| r).collect();
        assert_eq!(order, ["c1@example.org", "c2@example.org", "c3@example.org"]);
        let (stored, _) = f.store.get_typed::<Alert>(Collection::Alerts, alert.alert_id.as_str()).unwrap();
        assert_eq!(stored.status, AlertStatus::Sent);
        let history = crate::history::query_history(f.store.as_ref(), &f.user, &Default::default()).unwrap();
        assert!(history.iter().any(|h| h.kind == HistoryKind::AlertSent));
    }

    #[test]
    fn failures_back_off_and_count_every_attempt() {
        let f = fixture(1);
        f.dispatcher.enqueue(&sos(&f), &f.contacts).unwrap();
        let transport = ScriptedTransport::new();
        for _ in 0..3 {
            transport.push(DeliveryOutcome::TransientFailure("421 try later".into()));
        }
        let s = f.dispatcher.flush(&transport, &f.clock).unwrap();
        assert_eq!((s.failed, s.pending), (1, 1));
        assert_eq!(s.next_due, Some(f.clock.now() + Duration::seconds(20)));

        // Not due yet: nothing happens.
        f.clock.advance_secs(19);
        assert_eq!(f.dispatcher.flush(&transport, &f.clock).unwrap().attempted, 0);
        f.clock.advance_secs(1);
        f.dispatcher.flush(&transport, &f.clock).unwrap();
        f.clock.advance_secs(40);
        f.dispatcher.flush(&transport, &f.clock).unwrap();
        f.clock.advance_secs(80);
        let s = f.dispatcher.flush(&transport, &f.clock).unwrap();
        assert_eq!(s.sent, 1);
        let entry = &f.dispatcher.entries(None).unwrap()[0];
        assert_eq!(entry.status, EntryStatus::Sent);
        assert_eq!(entry.attempts, 4);
    }

    #[test]
    fn flush_all_ignores_backoff() {
        let f = fixture(1);
        f.dispatcher.enqueue(&sos(&f), &f.contacts).unwrap();
        let transport = ScriptedTransport::new();
        transport.push(DeliveryOutcome::TransientFailure("421 try later".into()));
        f.dispatcher.flush(&transport, &f.clock).unwrap();
        assert_eq!(f.dispatcher.flush(&transport, &f.clock).unwrap().attempted, 0);
        let s = f.dispatcher.flush_all(&transport, &f.clock).unwrap();
        assert_eq!((s.sent, s.pending), (1, 0));
    }

    #[test]
    fn exhausted_entries_fail_with_the_last_error() {
        let f = fixture(1);
        let alert = sos(&f);
        f.dispatcher.enqueue(&alert, &f.contacts).unwrap();
        let transport = ScriptedTransport::new();
        for _ in 0..8 {
            transport.push(DeliveryOutcome::PermanentFailure("550 mailbox unavailable".into()));
        }
        let mut exhausted = 0;
        for _ in 0..8 {
            let s = f.dispatcher.flush(&transport, &f.clock).unwrap();
            exhausted += s.exhausted;
            f.clock.advance_secs(3600);
        }
        assert_eq!(exhausted, 1);
        let entry = &f.dispatcher.entries(None).unwrap()[0];
        assert_eq!(entry.status, EntryStatus::Failed);
        assert_eq!(entry.attempts, 8);
        assert_eq!(entry.last_error.as_deref(), Some("550 mailbox unavailable"));
        let (stored, _) = f.store.get_typed::<Alert>(Collection::Alerts, alert.alert_id.as_str()).unwrap();
        assert_eq!(stored.status, AlertStatus::Failed);
        assert_eq!(f.dispatcher.flush(&transport, &f.clock).unwrap().attempted, 0);
    }

    #[test]
    fn alert_stays_queued_while_any_entry_is_pending() {
        let f = fixture(2);
        let alert = sos(&f);
        f.dispatcher.enqueue(&alert, &f.contacts).unwrap();
        let transport = ScriptedTransport::new();
        transport.push(DeliveryOutcome::Delivered);
        transport.push(DeliveryOutcome::TransientFailure("timeout".into()));
        f.dispatcher.flush(&transport, &f.clock).unwrap();
        let (stored, _) = f.store.get_typed::<Alert>(Collection::Alerts, alert.alert_id.as_str()).unwrap();
        assert_eq!(stored.status, AlertStatus::Queued);
    }
}
