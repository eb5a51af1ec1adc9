//! Discrete-event scenario runner.
//!
//! Sensors feed emulated bedside devices, devices talk to the server over a
//! simulated link, and the server escalates alerts over the internet and
//! GSM channel models. Time is virtual: events are processed in
//! `(time, insertion order)` order, so a run is a pure function of its
//! configuration and seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io;
use std::path::Path;

use comawatch_core::rng::{derive_seed, sim_rng, SimRng};
use comawatch_core::{
    apply_anomaly, channel_send, generate_stream, is_up, sms_send, AlertEvent, AnomalySpec,
    ChannelKind, ChannelModel, DeliveryResult, DeviceState, Effect, Reading, RecordBody,
    SendResult, SensorKind, Thresholds,
};
use thiserror::Error;

use super::config::{ConfigError, ScenarioConfig};
use super::report::{mean, percentile, MetricsReport};
use crate::server::auth::HashParams;
use crate::server::escalation::{ChannelStates, Notifier};
use crate::server::log::{encode_entries, LogError};
use crate::server::registry::{PatientRecord, Registry};
use crate::server::{alert_id, Server, ServerConfig};

/// User recorded on acknowledgements made by the simulated clinician.
pub const SIM_CLINICIAN: &str = "sim-clinician";

/// Log entries pushed to the cloud replica per tick.
const CLOUD_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sensor setup: {0}")]
    Sensor(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug)]
enum Event {
    Tick,
    Arrive { bed: usize, line: String },
    AckArrive { bed: usize, seq: u64 },
    ChannelChange,
    EscalationRetry,
    AutoAck { alert_id: String },
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_order: u64,
}

impl EventQueue {
    fn push(&mut self, at: u64, event: Event) {
        self.heap.push(Scheduled {
            at,
            order: self.next_order,
            event,
        });
        self.next_order += 1;
    }

    fn pop(&mut self) -> Option<Scheduled> {
        self.heap.pop()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum FirstTry {
    Untried,
    Delivered,
    Lost,
}

/// One patient with their device and simulation bookkeeping.
struct Bed {
    device: DeviceState,
    thresholds: Thresholds,
    readings: Vec<Reading>,
    cursor: usize,
    samples: Vec<u64>,
    /// Indexed by seq.
    first_try: Vec<FirstTry>,
    /// `(seq, onset_ms)` of every raised alert.
    raised: Vec<(u64, u64)>,
    /// Earliest device-side SMS delivery per alert seq.
    device_sms: BTreeMap<u64, u64>,
}

struct Rngs {
    uplink: SimRng,
    downlink: SimRng,
    internet: SimRng,
    gsm: SimRng,
    device_sms: SimRng,
    cloud: SimRng,
}

impl Rngs {
    fn new(seed: u64) -> Rngs {
        let s = |label| sim_rng(derive_seed(seed, label));
        Rngs {
            uplink: s(1),
            downlink: s(2),
            internet: s(3),
            gsm: s(4),
            device_sms: s(5),
            cloud: s(6),
        }
    }
}

/// Sends server-side alert notifications through the channel models.
struct SimNotifier<'a> {
    internet: &'a ChannelModel,
    gsm: &'a ChannelModel,
    internet_rng: &'a mut SimRng,
    gsm_rng: &'a mut SimRng,
}

impl Notifier for SimNotifier<'_> {
    fn send(&mut self, channel: ChannelKind, _alert: &AlertEvent, now_ms: u64) -> DeliveryResult {
        match channel {
            ChannelKind::Internet => channel_send(self.internet, now_ms, self.internet_rng),
            ChannelKind::GsmSms => {
                sms_send(self.gsm, now_ms, self.gsm_rng).expect("gsm model has the GSM kind")
            }
            ChannelKind::LocalLed => DeliveryResult::Delivered { latency_ms: 0 },
        }
    }
}

/// Result of a completed run.
#[derive(Debug)]
pub struct SimOutcome {
    pub report: MetricsReport,
    /// The server's event log in its on-disk format.
    pub trace: Vec<u8>,
    pub registry: Registry,
    pub server: Server,
    pub cloud: Option<Server>,
}

impl SimOutcome {
    /// Writes `report.txt`, `report.csv`, `trace.log` and `registry.json`.
    pub fn write_artifacts(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.report.render_text())?;
        std::fs::write(dir.join("report.csv"), self.report.render_csv())?;
        std::fs::write(dir.join("trace.log"), &self.trace)?;
        self.registry.save(&dir.join("registry.json"))
    }
}

pub fn registry_for(cfg: &ScenarioConfig) -> Registry {
    let mut registry = Registry::default();
    for p in &cfg.patients {
        registry.patients.insert(
            p.patient_id.clone(),
            PatientRecord {
                patient_id: p.patient_id.clone(),
                display_name: p.display_name.clone(),
                assigned_device_id: p.device_id.clone(),
                thresholds: p.thresholds,
            },
        );
    }
    registry
}

/// Perturbs the readings in the anomaly window, leaving the rest in place.
fn perturb(readings: &mut Vec<Reading>, spec: &AnomalySpec) -> Result<(), SimError> {
    let lo = readings.partition_point(|r| r.t_ms < spec.start_ms);
    let hi = readings.partition_point(|r| r.t_ms < spec.end_ms());
    let window = readings[lo..hi].to_vec();
    let changed = apply_anomaly(window, spec).map_err(|e| SimError::Sensor(e.to_string()))?;
    if changed.len() == hi - lo {
        readings[lo..hi].copy_from_slice(&changed);
    } else {
        readings.splice(lo..hi, changed);
    }
    Ok(())
}

fn patient_readings(cfg: &ScenarioConfig, index: usize) -> Result<Vec<Reading>, SimError> {
    let patient = &cfg.patients[index];
    let seed = derive_seed(cfg.seed, 1000 + index as u64);
    let mut all = Vec::new();
    for kind in SensorKind::ALL {
        let mut stream = generate_stream(&patient.profile, kind, cfg.sample_period_ms, cfg.duration_ms, seed)
            .map_err(|e| SimError::Sensor(format!("{}: {e}", patient.patient_id)))?;
        for anomaly in cfg.anomalies.iter().filter(|a| a.patient == index && a.spec.kind == kind) {
            for occurrence in anomaly.occurrences() {
                perturb(&mut stream, &occurrence)?;
            }
        }
        all.extend(stream);
    }
    all.sort_by_key(|r| (r.t_ms, r.kind.index()));
    Ok(all)
}

struct Sim<'c> {
    cfg: &'c ScenarioConfig,
    queue: EventQueue,
    beds: Vec<Bed>,
    server: Server,
    cloud: Option<(Server, usize)>,
    rngs: Rngs,
    in_transit: u64,
    retry_scheduled: bool,
    led_latency_max: Option<u64>,
    max_backlog: u64,
    ack_failures: u64,
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c ScenarioConfig) -> Result<Sim<'c>, SimError> {
        cfg.validate()?;
        let registry = registry_for(cfg);
        let server_config = ServerConfig {
            policy: cfg.alert_policy,
            // nobody logs in during a simulation
            hash: HashParams::insecure_fast(),
            ..ServerConfig::default()
        };
        let mut beds = Vec::with_capacity(cfg.patients.len());
        for (i, p) in cfg.patients.iter().enumerate() {
            beds.push(Bed {
                device: DeviceState::new(&p.device_id, &p.patient_id)
                    .map_err(|e| SimError::Sensor(e.to_string()))?,
                thresholds: p.thresholds,
                readings: patient_readings(cfg, i)?,
                cursor: 0,
                samples: Vec::new(),
                first_try: Vec::new(),
                raised: Vec::new(),
                device_sms: BTreeMap::new(),
            });
        }
        let cloud = cfg
            .cloud_sync
            .then(|| (Server::in_memory(server_config, registry.clone()), 0));
        Ok(Sim {
            cfg,
            queue: EventQueue::default(),
            beds,
            server: Server::in_memory(server_config, registry),
            cloud,
            rngs: Rngs::new(cfg.seed),
            in_transit: 0,
            retry_scheduled: false,
            led_latency_max: None,
            max_backlog: 0,
            ack_failures: 0,
        })
    }

    fn horizon(&self) -> u64 {
        self.cfg.duration_ms + self.cfg.drain_ms
    }

    fn channel_states(&self, now_ms: u64) -> ChannelStates {
        ChannelStates {
            internet_up: is_up(&self.cfg.internet, now_ms),
            gsm_up: is_up(&self.cfg.gsm, now_ms),
        }
    }

    fn quiescent(&self) -> bool {
        self.in_transit == 0 && self.beds.iter().all(|b| b.device.outbox_len() == 0)
    }

    fn run(&mut self) {
        self.queue.push(0, Event::Tick);
        let mut changes: Vec<u64> = self
            .cfg
            .internet
            .transitions()
            .chain(self.cfg.gsm.transitions())
            .collect();
        changes.sort_unstable();
        changes.dedup();
        for t in changes {
            self.queue.push(t, Event::ChannelChange);
        }
        let horizon = self.horizon();
        while let Some(Scheduled { at, event, .. }) = self.queue.pop() {
            if at > horizon {
                break;
            }
            match event {
                Event::Tick => self.on_tick(at),
                Event::Arrive { bed, line } => self.on_arrive(at, bed, &line),
                Event::AckArrive { bed, seq } => {
                    self.in_transit -= 1;
                    self.beds[bed].device.on_ack(&[seq]);
                }
                Event::ChannelChange => self.retry_escalations(at),
                Event::EscalationRetry => {
                    self.retry_scheduled = false;
                    self.retry_escalations(at);
                }
                Event::AutoAck { alert_id } => {
                    if self.server.acknowledge_as(&alert_id, SIM_CLINICIAN, at).is_err() {
                        self.ack_failures += 1;
                    }
                }
            }
        }
    }

    fn on_tick(&mut self, now: u64) {
        let cfg = self.cfg;
        let link = cfg.link();
        let link_up = is_up(link, now);
        for index in 0..self.beds.len() {
            let bed = &mut self.beds[index];
            bed.device.wifi_believed_up = link_up;
            let end = bed.cursor + bed.readings[bed.cursor..].partition_point(|r| r.t_ms <= now);
            let effects = bed
                .device
                .tick(&bed.readings[bed.cursor..end], now, &bed.thresholds, &cfg.device);
            bed.cursor = end;
            for effect in effects {
                match effect {
                    Effect::EnqueuedSample(seq) => bed.samples.push(seq),
                    Effect::RaisedAlert { seq, onset_ms, .. } => {
                        bed.raised.push((seq, onset_ms));
                        let latency = now.saturating_sub(onset_ms);
                        self.led_latency_max = Some(self.led_latency_max.map_or(latency, |m| m.max(latency)));
                    }
                    Effect::SmsRequested(_) => {
                        let &(seq, _) = bed.raised.last().expect("sms follows a raised alert");
                        let sent = sms_send(&cfg.gsm, now, &mut self.rngs.device_sms)
                            .expect("gsm model has the GSM kind");
                        if let DeliveryResult::Delivered { latency_ms } = sent {
                            bed.device_sms.entry(seq).or_insert(now + latency_ms);
                        }
                    }
                    Effect::TransmitBatch(seqs) => {
                        for seq in seqs {
                            let record = bed.device.record(seq).expect("batched record is queued");
                            let is_sample = matches!(record.body, RecordBody::Sample(_));
                            let line = record.to_wire(&bed.device.device_id).encode();
                            let result = channel_send(link, now, &mut self.rngs.uplink);
                            if is_sample && !matches!(result, DeliveryResult::ChannelDown) {
                                let slot = seq as usize;
                                if bed.first_try.len() <= slot {
                                    bed.first_try.resize(slot + 1, FirstTry::Untried);
                                }
                                if bed.first_try[slot] == FirstTry::Untried {
                                    bed.first_try[slot] = if result.is_delivered() {
                                        FirstTry::Delivered
                                    } else {
                                        FirstTry::Lost
                                    };
                                }
                            }
                            let outcome = match result {
                                DeliveryResult::Delivered { latency_ms } => {
                                    self.in_transit += 1;
                                    self.queue.push(now + latency_ms, Event::Arrive { bed: index, line });
                                    SendResult::Delivered
                                }
                                DeliveryResult::Lost => SendResult::Lost,
                                DeliveryResult::ChannelDown => SendResult::ChannelDown,
                            };
                            bed.device.on_send_result(seq, outcome, now, &cfg.device);
                        }
                    }
                    Effect::LcdUpdated | Effect::LedChanged(_) => {}
                }
            }
            self.max_backlog = self.max_backlog.max(bed.device.outbox_len() as u64);
        }
        self.cloud_step(now);

        let next = now + cfg.tick_period_ms;
        let keep_going = now < cfg.duration_ms || !self.quiescent();
        if keep_going && next <= self.horizon() {
            self.queue.push(next, Event::Tick);
        }
    }

    fn on_arrive(&mut self, now: u64, bed: usize, line: &str) {
        self.in_transit -= 1;
        let Ok(ingested) = self.server.ingest(line, now) else {
            // counted by the server; nothing to acknowledge
            return;
        };
        if let DeliveryResult::Delivered { latency_ms } =
            channel_send(self.cfg.link(), now, &mut self.rngs.downlink)
        {
            self.in_transit += 1;
            self.queue.push(
                now + latency_ms,
                Event::AckArrive {
                    bed,
                    seq: ingested.seq,
                },
            );
        }
        if let Some(id) = ingested.new_alert {
            let states = self.channel_states(now);
            let mut notifier = SimNotifier {
                internet: &self.cfg.internet,
                gsm: &self.cfg.gsm,
                internet_rng: &mut self.rngs.internet,
                gsm_rng: &mut self.rngs.gsm,
            };
            self.server.escalate(&id, states, &mut notifier, now);
            if let Some(after) = self.cfg.ack_after_ms {
                self.queue.push(now + after, Event::AutoAck { alert_id: id });
            }
            self.schedule_retry(now);
        }
    }

    fn retry_escalations(&mut self, now: u64) {
        let states = self.channel_states(now);
        let mut notifier = SimNotifier {
            internet: &self.cfg.internet,
            gsm: &self.cfg.gsm,
            internet_rng: &mut self.rngs.internet,
            gsm_rng: &mut self.rngs.gsm,
        };
        self.server.retry_pending(states, &mut notifier, now);
        self.schedule_retry(now);
    }

    fn schedule_retry(&mut self, now: u64) {
        if self.retry_scheduled || self.server.pending_alerts().next().is_none() {
            return;
        }
        let at = now + self.cfg.escalation_retry_ms;
        if at <= self.horizon() {
            self.queue.push(at, Event::EscalationRetry);
            self.retry_scheduled = true;
        }
    }

    /// Pushes new log entries to the cloud replica over the internet channel,
    /// in order; a lost entry is retried on the next tick.
    fn cloud_step(&mut self, now: u64) {
        let Some((replica, cursor)) = self.cloud.as_mut() else {
            return;
        };
        let entries = self.server.log_entries();
        let end = (*cursor + CLOUD_BATCH).min(entries.len());
        while *cursor < end {
            match channel_send(&self.cfg.internet, now, &mut self.rngs.cloud) {
                DeliveryResult::Delivered { .. } => {
                    // replica shares the registry, so imports cannot be rejected
                    let _ = replica.import(entries[*cursor].clone());
                    *cursor += 1;
                }
                DeliveryResult::Lost | DeliveryResult::ChannelDown => break,
            }
        }
    }

    fn finish(self) -> Result<SimOutcome, SimError> {
        let mut violations = Vec::new();
        let mut report = MetricsReport {
            seed: self.cfg.seed,
            duration_ms: self.cfg.duration_ms,
            led_latency_max_ms: self.led_latency_max,
            max_outbox_backlog: self.max_backlog,
            ..MetricsReport::default()
        };
        let server = &self.server;
        let mut first_ok = 0u64;
        let mut first_tried = 0u64;
        let mut sms_latencies = Vec::new();
        for bed in &self.beds {
            let dev = &bed.device;
            let dead: std::collections::BTreeSet<u64> =
                dev.dead_letters().iter().map(|d| d.record.seq).collect();
            report.samples_emitted += bed.samples.len() as u64;
            for &seq in &bed.samples {
                if server.has_record(&dev.device_id, seq) {
                    report.samples_stored += 1;
                } else if dead.contains(&seq) {
                    report.samples_dead_lettered += 1;
                } else if dev.record(seq).is_some() {
                    report.samples_in_flight += 1;
                } else {
                    violations.push(format!("sample {}/{seq} vanished", dev.device_id));
                }
                match bed.first_try.get(seq as usize) {
                    Some(FirstTry::Delivered) => {
                        first_ok += 1;
                        first_tried += 1;
                    }
                    Some(FirstTry::Lost) => first_tried += 1,
                    _ => {}
                }
            }
            for &(seq, onset) in &bed.raised {
                report.alerts_raised += 1;
                let id = alert_id(&dev.device_id, seq);
                let stored = server.alert(&id);
                let device_sms = bed.device_sms.get(&seq).copied();
                let server_sms = stored.and_then(|a| {
                    a.dispatches
                        .iter()
                        .filter(|d| d.channel == ChannelKind::GsmSms)
                        .filter_map(|d| d.delivered_at_ms)
                        .min()
                });
                let first_sms = match (device_sms, server_sms) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
                if let Some(at) = first_sms {
                    sms_latencies.push(at.saturating_sub(onset));
                }
                let remote = stored.is_some_and(AlertEvent::delivered_remotely);
                if remote || device_sms.is_some() {
                    report.alerts_delivered += 1;
                }
                match stored {
                    Some(a) if a.ack.is_some() => report.alerts_acknowledged += 1,
                    Some(_) if remote => {}
                    Some(_) if server.is_pending(&id) => report.alerts_pending += 1,
                    Some(_) => violations.push(format!("alert {id} is neither delivered nor pending")),
                    None if dev.record(seq).is_some() => report.alerts_pending += 1,
                    None => violations.push(format!("alert {id} was dropped")),
                }
            }
        }
        let stats = server.stats();
        report.duplicates = stats.duplicates;
        report.rejected = stats.rejected;
        report.seq_gaps = stats.seq_gaps;
        report.raw_delivery_rate = (first_tried > 0).then(|| first_ok as f64 / first_tried as f64);
        report.eventual_delivery_rate = (report.samples_emitted > 0)
            .then(|| report.samples_stored as f64 / report.samples_emitted as f64);
        report.sms_latency_mean_ms = mean(&sms_latencies);
        report.sms_latency_p95_ms = percentile(&mut sms_latencies, 95.0);
        let mut sample_latencies: Vec<u64> = server
            .stored_samples()
            .map(|s| s.recv_at_ms.saturating_sub(s.sample.t_ms))
            .collect();
        report.sample_latency_mean_ms = mean(&sample_latencies);
        report.sample_latency_p95_ms = percentile(&mut sample_latencies, 95.0);
        report.cloud_replicated = self.cloud.as_ref().map(|(c, _)| c.log_entries().len() as u64);

        if stats.samples as u64 != report.samples_stored {
            violations.push(format!(
                "server holds {} samples but {} emitted samples are stored",
                stats.samples, report.samples_stored
            ));
        }
        let accounted = report.samples_stored + report.samples_dead_lettered + report.samples_in_flight;
        if accounted != report.samples_emitted {
            violations.push(format!(
                "conservation: stored {} + dead {} + in flight {} != emitted {}",
                report.samples_stored,
                report.samples_dead_lettered,
                report.samples_in_flight,
                report.samples_emitted
            ));
        }
        if self.ack_failures > 0 {
            violations.push(format!("{} local acknowledgements failed", self.ack_failures));
        }
        if !violations.is_empty() {
            return Err(SimError::Invariant(violations.join("; ")));
        }
        let trace = encode_entries(server.log_entries())?;
        Ok(SimOutcome {
            report,
            trace,
            registry: server.registry().clone(),
            server: self.server,
            cloud: self.cloud.map(|(c, _)| c),
        })
    }
}

/// Runs a scenario to completion on the virtual clock.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimOutcome, SimError> {
    let mut sim = Sim::new(cfg)?;
    sim.run();
    sim.finish()
}
