//! Discrete-event simulation of the check-in and alert pipeline.
//!
//! Every simulated user gets one schedule with a random interval, checks in
//! on time a random number of times, then stops. Each schedule must therefore
//! produce exactly one missed-check-in alert, delivered to every contact over
//! a transport that fails each attempt independently with probability
//! `fail_rate`.
//!
//! The scheduler and dispatcher run on a fixed tick grid anchored at the
//! simulation start. Ticks where neither has work are skipped: such a tick
//! would be a no-op, so skipping it changes no outcome and keeps long
//! simulated spans cheap.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SimulatedClock};
use crate::directory::{ContactInput, Directory};
use crate::dispatch::{Alert, AlertStatus, DeliveryOutcome, DispatchConfig, Dispatcher, EntryStatus, MailTransport, MimeMessage};
use crate::model::ScheduleId;
use crate::ping::{PingConfig, SafetyPing, ScheduleState};
use crate::store::{Collection, DocumentStore, StoreExt};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub schedules: usize,
    pub seed: u64,
    pub fail_rate: f64,
    pub tick_secs: u64,
    pub max_attempts: u32,
    pub min_interval_secs: u64,
    pub max_interval_secs: u64,
    pub max_contacts: u8,
    pub max_on_time_check_ins: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            schedules: 1000,
            seed: 1,
            fail_rate: 0.2,
            tick_secs: 5,
            max_attempts: DispatchConfig::default().max_attempts,
            min_interval_secs: 60,
            max_interval_secs: 24 * 3600,
            max_contacts: 3,
            max_on_time_check_ins: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    fn from_samples(mut s: Vec<f64>) -> Self {
        if s.is_empty() {
            return Self::default();
        }
        s.sort_by(f64::total_cmp);
        let idx = ((s.len() as f64 * 0.95).ceil() as usize).clamp(1, s.len()) - 1;
        Self {
            count: s.len(),
            mean_s: s.iter().sum::<f64>() / s.len() as f64,
            p95_s: s[idx],
            max_s: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schedules: usize,
    pub seed: u64,
    pub fail_rate: f64,
    pub tick_secs: u64,
    pub on_time_check_ins: usize,
    pub expected_alerts: usize,
    pub alerts_created: usize,
    /// Alerts delivered to every one of their recipients.
    pub alerts_sent: usize,
    pub alerts_failed: usize,
    /// Alerts sharing a (schedule, deadline) pair with another alert.
    pub duplicate_alerts: usize,
    /// Alerts for a deadline the user had met.
    pub false_alarms: usize,
    pub expected_deliveries: usize,
    pub deliveries_sent: usize,
    pub duplicate_deliveries: usize,
    pub send_attempts: usize,
    pub transport_failures: usize,
    /// `alerts_sent / expected_alerts`; 1.0 when nothing was expected.
    pub reliability: f64,
    /// Missed deadline to alert enqueue.
    pub enqueue_latency: LatencyStats,
    /// Missed deadline to the last recipient's delivery.
    pub delivery_latency: LatencyStats,
    /// Every alert was enqueued no later than deadline + tick.
    pub latency_bound_held: bool,
    pub scheduler_ticks: usize,
    pub simulated_seconds: i64,
}

/// Transport that fails each attempt with a fixed probability, drawn from a
/// seeded generator so runs are reproducible.
pub struct FlakyTransport {
    rng: Mutex<ChaCha8Rng>,
    fail_rate: f64,
    attempts: AtomicUsize,
    failures: AtomicUsize,
    delivered: Mutex<HashMap<String, usize>>,
}

impl FlakyTransport {
    pub fn new(seed: u64, fail_rate: f64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            fail_rate,
            attempts: AtomicUsize::new(0),
            failures: AtomicUsize::new(0),
            delivered: Mutex::new(HashMap::new()),
        }
    }
}

impl MailTransport for FlakyTransport {
    fn send(&self, message: &MimeMessage, recipient: &str) -> DeliveryOutcome {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        if self.rng.lock().unwrap().random_bool(self.fail_rate) {
            self.failures.fetch_add(1, Ordering::Relaxed);
            return DeliveryOutcome::TransientFailure("421 simulated outage".into());
        }
        let id = message.header("Message-ID").unwrap_or(recipient).to_string();
        *self.delivered.lock().unwrap().entry(id).or_default() += 1;
        DeliveryOutcome::Delivered
    }
}

fn ceil_to_grid(t: DateTime<Utc>, start: DateTime<Utc>, tick: i64) -> DateTime<Utc> {
    let offset = (t - start).num_milliseconds().max(0);
    let step = tick * 1000;
    start + Duration::milliseconds((offset + step - 1) / step * step)
}

struct Planned {
    id: ScheduleId,
    remaining_check_ins: u32,
    interval: i64,
    met_deadlines: HashSet<DateTime<Utc>>,
}

pub fn run(config: &SimConfig) -> anyhow::Result<SimReport> {
    anyhow::ensure!((0.0..1.0).contains(&config.fail_rate), "fail rate must be in [0, 1)");
    anyhow::ensure!(config.tick_secs > 0, "tick must be positive");
    anyhow::ensure!(
        config.min_interval_secs >= 2 && config.min_interval_secs <= config.max_interval_secs,
        "interval bounds are inconsistent"
    );

    let store = Arc::new(DocumentStore::in_memory());
    let clock = Arc::new(SimulatedClock::at_epoch());
    let start = clock.now();
    let dispatch_config = DispatchConfig {
        max_attempts: config.max_attempts,
        sender: "alerts@sim.safespace.invalid".into(),
        ..DispatchConfig::default()
    };
    let dispatcher = Arc::new(Dispatcher::new(store.clone(), dispatch_config));
    let ping = SafetyPing::new(
        store.clone(),
        clock.clone(),
        dispatcher.clone(),
        PingConfig {
            min_interval_secs: config.min_interval_secs,
            grace_secs: 0,
            tick_secs: config.tick_secs,
        },
    );
    let transport = FlakyTransport::new(config.seed ^ 0x5eed_f1a2, config.fail_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dir = Directory::new(store.as_ref());

    let mut plans: Vec<Planned> = Vec::with_capacity(config.schedules);
    let mut actions: BinaryHeap<Reverse<(DateTime<Utc>, usize)>> = BinaryHeap::new();
    let mut deadlines: BTreeMap<(DateTime<Utc>, usize), ()> = BTreeMap::new();
    let mut expected_deliveries = 0;

    for i in 0..config.schedules {
        let (user, _) = dir.create_user(&format!("Sim User {i}"), start)?;
        let n_contacts = rng.random_range(1..=config.max_contacts.max(1));
        let contacts = (1..=n_contacts)
            .map(|p| ContactInput {
                name: format!("Contact {p} of {i}"),
                email: format!("u{i}.c{p}@sim.safespace.invalid"),
                priority: p,
            })
            .collect();
        expected_deliveries += n_contacts as usize;
        dir.set_contacts(&user.user_id, contacts)?;
        let interval = rng.random_range(config.min_interval_secs..=config.max_interval_secs);
        let s = ping.create_schedule(&user.user_id, interval)?;
        let remaining = rng.random_range(0..=config.max_on_time_check_ins);
        let interval = interval as i64;
        if remaining > 0 {
            let at = start + Duration::seconds(rng.random_range(1..interval));
            actions.push(Reverse((at, i)));
        }
        deadlines.insert((s.next_deadline, i), ());
        plans.push(Planned {
            id: s.schedule_id,
            remaining_check_ins: remaining,
            interval,
            met_deadlines: HashSet::new(),
        });
    }

    let tick = config.tick_secs as i64;
    let mut outbox_due: Option<DateTime<Utc>> = None;
    let mut on_time = 0;
    let mut enqueue_samples = Vec::new();
    let mut latency_bound_held = true;
    let mut ticks = 0;

    loop {
        let next_deadline = deadlines.keys().next().map(|(t, _)| *t);
        let next_tick = [next_deadline, outbox_due]
            .into_iter()
            .flatten()
            .min()
            .map(|t| ceil_to_grid(t, start, tick));
        let next_action = actions.peek().map(|Reverse((t, _))| *t);

        match (next_action, next_tick) {
            (None, None) => break,
            (Some(at), tick_at) if tick_at.is_none_or(|t| at < t) => {
                let Reverse((at_, i)) = actions.pop().expect("peeked");
                debug_assert_eq!(at, at_);
                clock.set(at);
                let plan = &mut plans[i];
                let out = ping.check_in(&plan.id)?;
                anyhow::ensure!(!out.late && out.alert.is_none(), "on-time check-in was treated as late");
                on_time += 1;
                plan.met_deadlines.insert(out.previous_deadline);
                deadlines.remove(&(out.previous_deadline, i));
                deadlines.insert((out.schedule.next_deadline, i), ());
                plan.remaining_check_ins -= 1;
                if plan.remaining_check_ins > 0 {
                    let at = at + Duration::seconds(rng.random_range(1..plan.interval));
                    actions.push(Reverse((at, i)));
                }
            }
            (_, Some(tick_at)) => {
                clock.set(tick_at);
                ticks += 1;
                for alert in ping.poll_deadlines()? {
                    let deadline = alert.deadline.expect("missed check-in alerts carry their deadline");
                    let delay = (alert.created_at - deadline).num_milliseconds() as f64 / 1000.0;
                    if alert.created_at > deadline + Duration::seconds(tick) {
                        latency_bound_held = false;
                    }
                    enqueue_samples.push(delay);
                }
                while let Some((&(t, i), _)) = deadlines.iter().next() {
                    if t > tick_at {
                        break;
                    }
                    deadlines.remove(&(t, i));
                    let s = ping.get(&plans[i].id)?;
                    if s.state == ScheduleState::Active {
                        deadlines.insert((s.next_deadline, i), ());
                    }
                }
                outbox_due = dispatcher.flush(&transport, clock.as_ref())?.next_due;
            }
            (Some(_), None) => unreachable!("handled by the first arm"),
        }
    }

    let alerts: Vec<(Alert, u64)> = store.list_typed(Collection::Alerts, &crate::store::all)?;
    let mut per_deadline: HashMap<(String, DateTime<Utc>), usize> = HashMap::new();
    let mut false_alarms = 0;
    let index: HashMap<&ScheduleId, &Planned> = plans.iter().map(|p| (&p.id, p)).collect();
    for (a, _) in &alerts {
        if let (Some(s), Some(d)) = (&a.schedule_id, a.deadline) {
            *per_deadline.entry((s.to_string(), d)).or_default() += 1;
            if index.get(s).is_some_and(|p| p.met_deadlines.contains(&d)) {
                false_alarms += 1;
            }
        }
    }
    let duplicate_alerts = per_deadline.values().map(|n| n - 1).sum();
    let alerts_sent = alerts.iter().filter(|(a, _)| a.status == AlertStatus::Sent).count();
    let alerts_failed = alerts.iter().filter(|(a, _)| a.status == AlertStatus::Failed).count();

    let entries = dispatcher.entries(None)?;
    let deliveries_sent = entries.iter().filter(|e| e.status == EntryStatus::Sent).count();
    let by_alert: HashMap<String, &Alert> = alerts.iter().map(|(a, _)| (a.alert_id.to_string(), a)).collect();
    let mut last_delivery: HashMap<String, DateTime<Utc>> = HashMap::new();
    for e in entries.iter().filter(|e| e.status == EntryStatus::Sent) {
        let sent = e.sent_at.expect("sent entries record their time");
        let slot = last_delivery.entry(e.alert_id.to_string()).or_insert(sent);
        *slot = (*slot).max(sent);
    }
    let delivery_samples: Vec<f64> = last_delivery
        .iter()
        .filter_map(|(id, sent)| {
            let alert = by_alert.get(id)?;
            let deadline = alert.deadline?;
            (alert.status == AlertStatus::Sent).then(|| (*sent - deadline).num_milliseconds() as f64 / 1000.0)
        })
        .collect();

    let duplicate_deliveries: usize = transport.delivered.lock().unwrap().values().map(|n| n - 1).sum();
    let expected_alerts = config.schedules;
    Ok(SimReport {
        schedules: config.schedules,
        seed: config.seed,
        fail_rate: config.fail_rate,
        tick_secs: config.tick_secs,
        on_time_check_ins: on_time,
        expected_alerts,
        alerts_created: alerts.len(),
        alerts_sent,
        alerts_failed,
        duplicate_alerts,
        false_alarms,
        expected_deliveries,
        deliveries_sent,
        duplicate_deliveries,
        send_attempts: transport.attempts.load(Ordering::Relaxed),
        transport_failures: transport.failures.load(Ordering::Relaxed),
        reliability: if expected_alerts == 0 {
            1.0
        } else {
            alerts_sent as f64 / expected_alerts as f64
        },
        enqueue_latency: LatencyStats::from_samples(enqueue_samples),
        delivery_latency: LatencyStats::from_samples(delivery_samples),
        latency_bound_held,
        scheduler_ticks: ticks,
        simulated_seconds: (clock.now() - start).num_seconds(),
    })
}
