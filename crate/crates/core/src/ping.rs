//! Check-in schedules (dead-man's switch) and SOS.
//!
//! Each schedule is a small state machine. [`transition`] is the complete
//! table; [`SafetyPing`] applies it under a per-schedule lock and persists
//! the result with a versioned write, batching any alert it fires with the
//! schedule update.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::clock::Clock;
use crate::directory::Directory;
use crate::dispatch::{Alert, Dispatcher};
use crate::history::{append_history, HistoryEvent, HistoryKind};
use crate::model::{fresh_id, AlertId, GeoLocation, LocationError, ScheduleId, UserId};
use crate::store::{field_str, Collection, Put, Store, StoreError, StoreExt};

pub const MAX_NOTE_BYTES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleState {
    Active,
    Paused,
    Triggered,
    Disarmed,
}

impl ScheduleState {
    pub const ALL: [ScheduleState; 4] = [
        ScheduleState::Active,
        ScheduleState::Paused,
        ScheduleState::Triggered,
        ScheduleState::Disarmed,
    ];
}

impl fmt::Display for ScheduleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleEvent {
    CheckIn,
    /// The scheduler noticed the clock; fires only if the deadline passed.
    Deadline,
    Pause,
    Resume,
    Disarm,
}

impl ScheduleEvent {
    pub const ALL: [ScheduleEvent; 5] = [
        ScheduleEvent::CheckIn,
        ScheduleEvent::Deadline,
        ScheduleEvent::Pause,
        ScheduleEvent::Resume,
        ScheduleEvent::Disarm,
    ];
}

impl fmt::Display for ScheduleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What to do in response to an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Start a fresh window from now.
    Rearm,
    /// Alert for the missed deadline and move to `Triggered`.
    Fire,
    /// Check-in arrived after the deadline but before the scheduler noticed:
    /// alert for the missed deadline, then start a fresh window.
    FireAndRearm,
    /// Check-in after an alert went out. The alert stands.
    LateRearm,
    Pause,
    Resume,
    Disarm,
    Ignore,
}

impl Action {
    pub fn target(self, from: ScheduleState) -> ScheduleState {
        match self {
            Action::Rearm | Action::FireAndRearm | Action::LateRearm | Action::Resume => ScheduleState::Active,
            Action::Fire => ScheduleState::Triggered,
            Action::Pause => ScheduleState::Paused,
            Action::Disarm => ScheduleState::Disarmed,
            Action::Ignore => from,
        }
    }

    pub fn fires(self) -> bool {
        matches!(self, Action::Fire | Action::FireAndRearm)
    }
}

/// The transition table. `deadline_passed` is `now >= deadline + grace`.
pub fn transition(state: ScheduleState, event: ScheduleEvent, deadline_passed: bool) -> Result<Action, PingError> {
    use ScheduleEvent as E;
    use ScheduleState as S;
    let action = match (state, event) {
        (_, E::Disarm) => Action::Disarm,
        (S::Active, E::CheckIn) if deadline_passed => Action::FireAndRearm,
        (S::Active, E::CheckIn) => Action::Rearm,
        (S::Active, E::Deadline) if deadline_passed => Action::Fire,
        (S::Active, E::Pause) => Action::Pause,
        (S::Paused, E::Resume) => Action::Resume,
        (S::Triggered, E::CheckIn) => Action::LateRearm,
        (_, E::Deadline) => Action::Ignore,
        (state, event) => return Err(PingError::InvalidState { state, event }),
    };
    Ok(action)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckInSchedule {
    pub schedule_id: ScheduleId,
    pub user_id: UserId,
    pub interval_secs: u64,
    pub state: ScheduleState,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub last_check_in: Option<DateTime<Utc>>,
    pub next_deadline: DateTime<Utc>,
    #[serde(default)]
    pub last_alert_id: Option<AlertId>,
}

impl CheckInSchedule {
    fn rearm(&mut self, now: DateTime<Utc>) {
        self.next_deadline = now + Duration::seconds(self.interval_secs as i64);
    }
}

#[derive(Debug, Error)]
pub enum PingError {
    #[error("interval must be at least {min} seconds, got {got}")]
    IntervalTooShort { min: u64, got: u64 },
    #[error("user has no emergency contacts")]
    NoEmergencyContacts,
    #[error("schedule {0} not found")]
    NotFound(ScheduleId),
    #[error("user not found")]
    UnknownUser,
    #[error("cannot {event} a schedule that is {state}")]
    InvalidState { state: ScheduleState, event: ScheduleEvent },
    #[error("invalid location: {0}")]
    InvalidLocation(#[from] LocationError),
    #[error("note is {0} bytes, the limit is {MAX_NOTE_BYTES}")]
    NoteTooLong(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PingConfig {
    pub min_interval_secs: u64,
    /// Slack after a deadline before the alert fires.
    pub grace_secs: u64,
    pub tick_secs: u64,
}

impl Default for PingConfig {
    fn default() -> Self {
        Self {
            min_interval_secs: 60,
            grace_secs: 0,
            tick_secs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckInOutcome {
    pub schedule: CheckInSchedule,
    /// Deadline that this check-in replaced.
    pub previous_deadline: DateTime<Utc>,
    /// True when the check-in came after the deadline.
    pub late: bool,
    /// Alert fired for the missed deadline, if this check-in caused one.
    pub alert: Option<Alert>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SosRequest {
    #[serde(default, rename = "lat", alias = "latitude")]
    pub latitude: Option<f64>,
    #[serde(default, rename = "lon", alias = "longitude")]
    pub longitude: Option<f64>,
    #[serde(default)]
    pub accuracy_m: Option<f64>,
    #[serde(default)]
    pub note: Option<String>,
}

const LOCK_STRIPES: usize = 64;

struct Applied {
    schedule: CheckInSchedule,
    previous_deadline: DateTime<Utc>,
    action: Action,
    alert: Option<Alert>,
}

pub struct SafetyPing {
    store: Arc<dyn Store>,
    clock: Arc<dyn Clock>,
    dispatcher: Arc<Dispatcher>,
    config: PingConfig,
    locks: Vec<Mutex<()>>,
}

impl SafetyPing {
    pub fn new(store: Arc<dyn Store>, clock: Arc<dyn Clock>, dispatcher: Arc<Dispatcher>, config: PingConfig) -> Self {
        Self {
            store,
            clock,
            dispatcher,
            config,
            locks: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn config(&self) -> &PingConfig {
        &self.config
    }

    fn directory(&self) -> Directory<'_> {
        Directory::new(self.store.as_ref())
    }

    fn lock_for(&self, id: &ScheduleId) -> std::sync::MutexGuard<'_, ()> {
        let mut h = DefaultHasher::new();
        id.hash(&mut h);
        let stripe = (h.finish() as usize) % self.locks.len();
        self.locks[stripe].lock().unwrap_or_else(|p| p.into_inner())
    }

    fn grace(&self) -> Duration {
        Duration::seconds(self.config.grace_secs as i64)
    }

    pub fn create_schedule(&self, user: &UserId, interval_secs: u64) -> Result<CheckInSchedule, PingError> {
        if interval_secs < self.config.min_interval_secs {
            return Err(PingError::IntervalTooShort {
                min: self.config.min_interval_secs,
                got: interval_secs,
            });
        }
        if self.store.get_opt::<serde_json::Value>(Collection::Users, user.as_str())?.is_none() {
            return Err(PingError::UnknownUser);
        }
        if self.directory().contacts(user)?.is_empty() {
            return Err(PingError::NoEmergencyContacts);
        }
        let now = self.clock.now();
        let schedule = CheckInSchedule {
            schedule_id: ScheduleId::new(fresh_id("sch")),
            user_id: user.clone(),
            interval_secs,
            state: ScheduleState::Active,
            created_at: now,
            last_check_in: Some(now),
            next_deadline: now + Duration::seconds(interval_secs as i64),
            last_alert_id: None,
        };
        self.store
            .put_typed(Collection::Schedules, schedule.schedule_id.as_str(), &schedule, Some(0))?;
        Ok(schedule)
    }

    pub fn get(&self, id: &ScheduleId) -> Result<CheckInSchedule, PingError> {
        match self.store.get_opt(Collection::Schedules, id.as_str())? {
            Some((s, _)) => Ok(s),
            None => Err(PingError::NotFound(id.clone())),
        }
    }

    pub fn list_for_user(&self, user: &UserId) -> Result<Vec<CheckInSchedule>, PingError> {
        let uid = user.as_str();
        let mut list: Vec<CheckInSchedule> = self
            .store
            .list_typed(Collection::Schedules, &|d| field_str(d, "user_id") == Some(uid))?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        list.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.schedule_id.cmp(&b.schedule_id)));
        Ok(list)
    }

    pub fn check_in(&self, id: &ScheduleId) -> Result<CheckInOutcome, PingError> {
        let applied = self.apply_event(id, ScheduleEvent::CheckIn)?;
        let late = applied.action != Action::Rearm;
        Ok(CheckInOutcome {
            schedule: applied.schedule,
            previous_deadline: applied.previous_deadline,
            late,
            alert: applied.alert,
        })
    }

    pub fn pause(&self, id: &ScheduleId) -> Result<CheckInSchedule, PingError> {
        Ok(self.apply_event(id, ScheduleEvent::Pause)?.schedule)
    }

    pub fn resume(&self, id: &ScheduleId) -> Result<CheckInSchedule, PingError> {
        Ok(self.apply_event(id, ScheduleEvent::Resume)?.schedule)
    }

    pub fn disarm(&self, id: &ScheduleId) -> Result<CheckInSchedule, PingError> {
        Ok(self.apply_event(id, ScheduleEvent::Disarm)?.schedule)
    }

    /// Fires every active schedule whose deadline (plus grace) has passed.
    /// Returns the alerts queued in this pass.
    pub fn poll_deadlines(&self) -> Result<Vec<Alert>, PingError> {
        let cutoff = self.clock.now() - self.grace();
        let due: Vec<CheckInSchedule> = self
            .store
            .list_typed(Collection::Schedules, &|d| {
                field_str(d, "state") == Some("Active")
                    && field_str(d, "next_deadline")
                        .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                        .is_some_and(|t| t <= cutoff)
            })?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let mut fired = Vec::new();
        for schedule in due {
            let applied = self.apply_event(&schedule.schedule_id, ScheduleEvent::Deadline)?;
            fired.extend(applied.alert);
        }
        Ok(fired)
    }

    /// Earliest moment at which [`Self::poll_deadlines`] has work to do.
    pub fn next_due(&self) -> Result<Option<DateTime<Utc>>, StoreError> {
        let active: Vec<(CheckInSchedule, u64)> = self
            .store
            .list_typed(Collection::Schedules, &|d| field_str(d, "state") == Some("Active"))?;
        Ok(active.iter().map(|(s, _)| s.next_deadline + self.grace()).min())
    }

    fn apply_event(&self, id: &ScheduleId, event: ScheduleEvent) -> Result<Applied, PingError> {
        let _guard = self.lock_for(id);
        loop {
            let Some((mut schedule, version)) = self.store.get_opt::<CheckInSchedule>(Collection::Schedules, id.as_str())?
            else {
                return Err(PingError::NotFound(id.clone()));
            };
            let now = self.clock.now();
            let previous_deadline = schedule.next_deadline;
            let passed = now >= previous_deadline + self.grace();
            let from = schedule.state;
            let action = transition(from, event, passed)?;
            if action == Action::Ignore {
                return Ok(Applied {
                    schedule,
                    previous_deadline,
                    action,
                    alert: None,
                });
            }

            let mut puts: Vec<Put> = Vec::new();
            let mut alert = None;
            if action.fires() {
                let dir = self.directory();
                let profile = match dir.profile(&schedule.user_id) {
                    Ok(p) => p,
                    Err(StoreError::NotFound { .. }) => return Err(PingError::UnknownUser),
                    Err(e) => return Err(e.into()),
                };
                let contacts = dir.contacts(&schedule.user_id)?;
                if contacts.is_empty() {
                    warn!(schedule = %id, "deadline missed but the user has no emergency contacts");
                }
                let a = Alert::missed_check_in(
                    id.clone(),
                    schedule.user_id.clone(),
                    previous_deadline,
                    profile.last_location.clone(),
                    now,
                    &profile.display_name,
                );
                puts.extend(self.dispatcher.enqueue_puts(&a, &contacts)?);
                schedule.last_alert_id = Some(a.alert_id.clone());
                alert = Some(a);
            }
            match action {
                Action::Rearm | Action::FireAndRearm | Action::LateRearm => {
                    schedule.last_check_in = Some(now);
                    schedule.rearm(now);
                }
                Action::Resume => {
                    schedule.last_check_in = Some(now);
                    schedule.rearm(now);
                }
                _ => {}
            }
            schedule.state = action.target(from);
            puts.push(Put::typed(Collection::Schedules, id.as_str(), &schedule)?.expecting(version));

            match self.store.apply(puts) {
                Ok(_) => {}
                Err(e) if e.is_conflict() => continue,
                Err(e) => return Err(e.into()),
            }

            if let Some(a) = &alert {
                info!(schedule = %id, alert = %a.alert_id, "missed check-in alert queued");
            }
            let history = match action {
                Action::Rearm => Some((HistoryKind::CheckIn, "Checked in on time".to_string())),
                Action::FireAndRearm | Action::LateRearm => Some((
                    HistoryKind::LateCheckIn,
                    format!("Checked in after the deadline of {}", previous_deadline.to_rfc3339()),
                )),
                _ => None,
            };
            if let Some((kind, summary)) = history {
                if let Err(e) = append_history(
                    self.store.as_ref(),
                    HistoryEvent::new(schedule.user_id.clone(), kind, summary, now),
                ) {
                    warn!(error = %e, "could not record check-in history");
                }
            }
            return Ok(Applied {
                schedule,
                previous_deadline,
                action,
                alert,
            });
        }
    }

    /// Queues an SOS alert to every emergency contact immediately.
    pub fn trigger_sos(&self, user: &UserId, request: &SosRequest) -> Result<Alert, PingError> {
        let now = self.clock.now();
        let note = request.note.as_ref().filter(|n| !n.trim().is_empty()).cloned();
        if let Some(n) = &note {
            if n.len() > MAX_NOTE_BYTES {
                return Err(PingError::NoteTooLong(n.len()));
            }
        }
        let location = match (request.latitude, request.longitude) {
            (Some(lat), Some(lon)) => {
                let loc = GeoLocation {
                    latitude: lat,
                    longitude: lon,
                    captured_at: now,
                    accuracy_m: request.accuracy_m,
                };
                loc.validate(now)?;
                Some(loc)
            }
            (None, None) => None,
            _ => return Err(LocationError::Incomplete.into()),
        };

        let dir = self.directory();
        let profile = match dir.profile(user) {
            Ok(p) => p,
            Err(StoreError::NotFound { .. }) => return Err(PingError::UnknownUser),
            Err(e) => return Err(e.into()),
        };
        let contacts = dir.contacts(user)?;
        if contacts.is_empty() {
            return Err(PingError::NoEmergencyContacts);
        }
        let alert = Alert::sos(user.clone(), location.clone(), note, now, &profile.display_name);
        let puts = self.dispatcher.enqueue_puts(&alert, &contacts)?;
        self.store.apply(puts)?;
        info!(alert = %alert.alert_id, contacts = contacts.len(), "SOS alert queued");

        if let Some(loc) = &location {
            if let Err(e) = dir.record_location(user, loc) {
                warn!(error = %e, "could not record last known location");
            }
        }
        if let Err(e) = append_history(
            self.store.as_ref(),
            HistoryEvent::new(
                user.clone(),
                HistoryKind::SosTriggered,
                format!("SOS sent to {} contact(s)", contacts.len()),
                now,
            ),
        ) {
            warn!(error = %e, "could not record SOS history");
        }
        let (stored, _) = self.store.get_typed::<Alert>(Collection::Alerts, alert.alert_id.as_str())?;
        Ok(stored)
    }
}
