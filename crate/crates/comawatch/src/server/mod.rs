//! Central monitoring service.
//!
//! All state is rebuilt from an append-only event log plus a small JSON
//! registry, so the service works entirely from local storage. Device
//! records are deduplicated on `(device_id, seq)`: transport is
//! at-least-once, storage is exactly-once.

pub mod auth;
pub mod escalation;
pub mod log;
pub mod registry;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use comawatch_core::wire::valid_id;
use comawatch_core::{
    AlertEvent, ChannelKind, DeliveryResult, SensorKind, Thresholds, VitalSample, WireRecord,
};
use thiserror::Error;

use self::auth::{
    authorize, hash_secret, Action, AuthError, Authenticator, Forbidden, HashParams, Role,
    Session, UserAccount, DEFAULT_SESSION_TTL_MS,
};
use self::escalation::{dispatch_alert, AlertPolicy, ChannelStates, DispatchPlan, Notifier};
use self::log::{LogEntry, LogError, LogWriter};
use self::registry::{PatientRecord, Registry};

pub const LOG_FILE: &str = "events.log";
pub const REGISTRY_FILE: &str = "registry.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub policy: AlertPolicy,
    pub session_ttl_ms: u64,
    pub hash: HashParams,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            policy: AlertPolicy::Both,
            session_ttl_ms: DEFAULT_SESSION_TTL_MS,
            hash: HashParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("storage failure: {0}")]
    Storage(String),
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("unknown alert `{0}`")]
    UnknownAlert(String),
    #[error(transparent)]
    Forbidden(#[from] Forbidden),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("username `{0}` already exists")]
    DuplicateUser(String),
    #[error("patient `{0}` already exists")]
    DuplicatePatient(String),
    #[error("device `{0}` is already assigned")]
    DeviceTaken(String),
    #[error("invalid identifier `{0}`")]
    InvalidId(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("event log: {0}")]
    Log(#[from] LogError),
    #[error("unreadable log entry at index {index}: {reason}")]
    BadEntry { index: usize, reason: String },
    #[error("registry: {0}")]
    Registry(#[from] std::io::Error),
    #[error("password hashing: {0}")]
    Hash(#[from] auth::HashError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub device_id: String,
    pub seq: u64,
    /// False for a replayed duplicate.
    pub fresh: bool,
    /// Id of the alert created by this record, if any.
    pub new_alert: Option<String>,
}

impl Ingested {
    pub fn ack(&self) -> WireRecord {
        WireRecord::Ack {
            device_id: self.device_id.clone(),
            seq: self.seq,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub log_entries: usize,
    pub samples: usize,
    pub alerts: usize,
    pub duplicates: u64,
    pub rejected: u64,
    pub seq_gaps: u64,
    pub pending_alerts: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub entries: usize,
    pub torn_bytes: u64,
}

/// Per-device sequence bookkeeping.
#[derive(Debug, Default, Clone)]
struct DeviceCursor {
    /// Every seq in `1..=contiguous` has been applied.
    contiguous: u64,
    above: BTreeSet<u64>,
    max_seen: u64,
    distinct: u64,
}

impl DeviceCursor {
    fn contains(&self, seq: u64) -> bool {
        (seq >= 1 && seq <= self.contiguous) || self.above.contains(&seq)
    }

    fn mark(&mut self, seq: u64) {
        self.distinct += 1;
        self.max_seen = self.max_seen.max(seq);
        self.above.insert(seq);
        while self.above.remove(&(self.contiguous + 1)) {
            self.contiguous += 1;
        }
    }

    /// Seqs below the highest seen that have not arrived (yet).
    fn gaps(&self) -> u64 {
        self.max_seen.saturating_sub(self.distinct)
    }
}

#[derive(Debug, Clone)]
pub struct StoredSample {
    pub sample: VitalSample,
    pub recv_at_ms: u64,
}

#[derive(Debug)]
enum Sink {
    Memory,
    File(LogWriter),
}

/// Server-only log records, kept alongside the device wire records.
enum ServerRecord {
    Dispatch {
        alert_id: String,
        channel: ChannelKind,
        dispatched_at_ms: u64,
        delivered_at_ms: Option<u64>,
    },
    AlertAck {
        alert_id: String,
        user_id: String,
        ack_at_ms: u64,
    },
}

impl ServerRecord {
    fn encode(&self) -> String {
        match self {
            ServerRecord::Dispatch {
                alert_id,
                channel,
                dispatched_at_ms,
                delivered_at_ms,
            } => {
                let delivered = delivered_at_ms.map_or_else(|| "-".to_owned(), |d| d.to_string());
                format!("DSP|{alert_id}|{}|{dispatched_at_ms}|{delivered}", channel.code())
            }
            ServerRecord::AlertAck {
                alert_id,
                user_id,
                ack_at_ms,
            } => format!("AACK|{alert_id}|{user_id}|{ack_at_ms}"),
        }
    }

    fn parse(line: &str) -> Option<ServerRecord> {
        let f: Vec<&str> = line.split('|').collect();
        match f.as_slice() {
            ["DSP", id, channel, at, delivered] => {
                let channel = [ChannelKind::Internet, ChannelKind::GsmSms, ChannelKind::LocalLed]
                    .into_iter()
                    .find(|c| c.code() == *channel)?;
                let delivered_at_ms = match *delivered {
                    "-" => None,
                    d => Some(d.parse().ok()?),
                };
                Some(ServerRecord::Dispatch {
                    alert_id: (*id).to_owned(),
                    channel,
                    dispatched_at_ms: at.parse().ok()?,
                    delivered_at_ms,
                })
            }
            ["AACK", id, user, at] => Some(ServerRecord::AlertAck {
                alert_id: (*id).to_owned(),
                user_id: (*user).to_owned(),
                ack_at_ms: at.parse().ok()?,
            }),
            _ => None,
        }
    }
}

pub fn alert_id(device_id: &str, seq: u64) -> String {
    format!("{device_id}-{seq}")
}

#[derive(Debug)]
pub struct Server {
    config: ServerConfig,
    registry: Registry,
    device_index: HashMap<String, String>,
    registry_path: Option<PathBuf>,
    auth: Authenticator,
    sink: Sink,
    entries: Vec<LogEntry>,
    cursors: HashMap<String, DeviceCursor>,
    samples: HashMap<String, BTreeMap<(u64, u64, String), StoredSample>>,
    sample_count: usize,
    alerts: BTreeMap<String, AlertEvent>,
    pending: BTreeSet<String>,
    duplicates: u64,
    rejected: u64,
}

impl Server {
    /// Volatile server; the log lives only in memory.
    pub fn in_memory(config: ServerConfig, registry: Registry) -> Server {
        let device_index = index_devices(&registry);
        Server {
            auth: Authenticator::new(config.session_ttl_ms, &config.hash),
            config,
            registry,
            device_index,
            registry_path: None,
            sink: Sink::Memory,
            entries: Vec::new(),
            cursors: HashMap::new(),
            samples: HashMap::new(),
            sample_count: 0,
            alerts: BTreeMap::new(),
            pending: BTreeSet::new(),
            duplicates: 0,
            rejected: 0,
        }
    }

    /// Rebuilds state from a log image. A torn final entry is dropped;
    /// interior damage is reported as corruption.
    pub fn recover(
        config: ServerConfig,
        registry: Registry,
        log_bytes: &[u8],
    ) -> Result<(Server, RecoveryReport), ServerError> {
        let recovered = log::decode(log_bytes)?;
        let mut server = Server::in_memory(config, registry);
        let report = RecoveryReport {
            entries: recovered.entries.len(),
            torn_bytes: recovered.torn_bytes,
        };
        server.replay_entries(recovered.entries)?;
        Ok((server, report))
    }

    /// Opens (or creates) a file-backed store in `data_dir`.
    pub fn open(config: ServerConfig, data_dir: &Path) -> Result<(Server, RecoveryReport), ServerError> {
        std::fs::create_dir_all(data_dir)?;
        let registry_path = data_dir.join(REGISTRY_FILE);
        let log_path = data_dir.join(LOG_FILE);
        let registry = Registry::load(&registry_path)?;
        let recovered = log::recover_file(&log_path)?;
        let mut server = Server::in_memory(config, registry);
        let report = RecoveryReport {
            entries: recovered.entries.len(),
            torn_bytes: recovered.torn_bytes,
        };
        server.replay_entries(recovered.entries)?;
        server.sink = Sink::File(LogWriter::open(&log_path)?);
        server.registry_path = Some(registry_path);
        Ok((server, report))
    }

    fn replay_entries(&mut self, entries: Vec<LogEntry>) -> Result<(), ServerError> {
        for (index, entry) in entries.into_iter().enumerate() {
            self.apply_entry(entry)
                .map_err(|reason| ServerError::BadEntry { index, reason })?;
        }
        Ok(())
    }

    /// Applies one recovered entry without re-logging it.
    fn apply_entry(&mut self, entry: LogEntry) -> Result<(), String> {
        if let Some(rec) = ServerRecord::parse(&entry.payload) {
            self.apply_server_record(&rec);
            self.entries.push(entry);
            return Ok(());
        }
        let record = WireRecord::parse(&entry.payload).map_err(|e| e.to_string())?;
        let patient_id = self
            .device_index
            .get(record.device_id())
            .cloned()
            .ok_or_else(|| format!("unknown device {}", record.device_id()))?;
        if self.is_duplicate(&record) {
            return Err(format!("duplicate record {}", entry.payload));
        }
        let recv_at_ms = entry.recv_at_ms;
        self.entries.push(entry);
        self.apply_record(record, &patient_id, recv_at_ms);
        Ok(())
    }

    fn apply_server_record(&mut self, rec: &ServerRecord) {
        match rec {
            ServerRecord::Dispatch {
                alert_id,
                channel,
                dispatched_at_ms,
                delivered_at_ms,
            } => {
                if let Some(alert) = self.alerts.get_mut(alert_id) {
                    alert.record_dispatch(*channel, *dispatched_at_ms, *delivered_at_ms);
                    if channel.is_remote() && delivered_at_ms.is_some() {
                        self.pending.remove(alert_id);
                    }
                }
            }
            ServerRecord::AlertAck {
                alert_id,
                user_id,
                ack_at_ms,
            } => {
                if let Some(alert) = self.alerts.get_mut(alert_id) {
                    alert.acknowledge(user_id, *ack_at_ms);
                    self.pending.remove(alert_id);
                }
            }
        }
    }

    fn is_duplicate(&self, record: &WireRecord) -> bool {
        self.cursors
            .get(record.device_id())
            .is_some_and(|c| c.contains(record.seq()))
    }

    /// Updates indices for a fresh record. Returns the new alert id, if any.
    fn apply_record(&mut self, record: WireRecord, patient_id: &str, recv_at_ms: u64) -> Option<String> {
        self.cursors
            .entry(record.device_id().to_owned())
            .or_default()
            .mark(record.seq());
        match record {
            WireRecord::Sample {
                device_id,
                seq,
                t_ms,
                kind,
                value,
            } => {
                let sample = VitalSample {
                    device_id: device_id.clone(),
                    patient_id: patient_id.to_owned(),
                    seq,
                    t_ms,
                    kind,
                    value,
                };
                self.samples
                    .entry(patient_id.to_owned())
                    .or_default()
                    .insert((t_ms, seq, device_id), StoredSample { sample, recv_at_ms });
                self.sample_count += 1;
                None
            }
            WireRecord::Alert {
                device_id,
                seq,
                t_ms,
                cause,
                severity,
            } => {
                let id = alert_id(&device_id, seq);
                let mut alert = AlertEvent {
                    alert_id: id.clone(),
                    device_id,
                    patient_id: patient_id.to_owned(),
                    cause,
                    severity,
                    raised_at_ms: t_ms,
                    sample_seq: None,
                    dispatches: Vec::new(),
                    ack: None,
                };
                // the bedside LED fired when the device raised the alert
                alert.record_dispatch(ChannelKind::LocalLed, t_ms, Some(t_ms));
                self.alerts.insert(id.clone(), alert);
                self.pending.insert(id.clone());
                Some(id)
            }
            WireRecord::Ack { .. } => None,
        }
    }

    fn append(&mut self, entry: LogEntry) -> Result<(), LogError> {
        if let Sink::File(w) = &mut self.sink {
            w.append(&entry)?;
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Stores one device record. Replays return the original ack without a
    /// second append.
    pub fn ingest(&mut self, line: &str, now_ms: u64) -> Result<Ingested, Reject> {
        let result = self.ingest_inner(line, now_ms);
        if result.is_err() {
            self.rejected += 1;
        }
        result
    }

    fn ingest_inner(&mut self, line: &str, now_ms: u64) -> Result<Ingested, Reject> {
        let record = WireRecord::parse(line).map_err(|e| Reject::MalformedRecord(e.to_string()))?;
        if matches!(record, WireRecord::Ack { .. }) {
            return Err(Reject::MalformedRecord("acks are not ingested".into()));
        }
        let device_id = record.device_id().to_owned();
        let seq = record.seq();
        let Some(patient_id) = self.device_index.get(&device_id).cloned() else {
            return Err(Reject::UnknownDevice(device_id));
        };
        if self.is_duplicate(&record) {
            self.duplicates += 1;
            return Ok(Ingested {
                device_id,
                seq,
                fresh: false,
                new_alert: None,
            });
        }
        self.append(LogEntry {
            recv_at_ms: now_ms,
            payload: line.to_owned(),
        })
        .map_err(|e| Reject::Storage(e.to_string()))?;
        let new_alert = self.apply_record(record, &patient_id, now_ms);
        Ok(Ingested {
            device_id,
            seq,
            fresh: true,
            new_alert,
        })
    }

    fn log_server_record(&mut self, rec: ServerRecord, now_ms: u64) {
        let entry = LogEntry {
            recv_at_ms: now_ms,
            payload: rec.encode(),
        };
        if let Err(e) = self.append(entry) {
            // state stays correct in memory; the record is lost on restart
            ::log::error!("failed to persist server record: {e}");
        }
    }

    /// Copies one entry from another store's log. Device records already
    /// present are skipped; returns whether the entry was applied.
    pub fn import(&mut self, entry: LogEntry) -> Result<bool, Reject> {
        if let Some(rec) = ServerRecord::parse(&entry.payload) {
            if self.already_applied(&rec) {
                return Ok(false);
            }
            self.apply_server_record(&rec);
            self.append(entry).map_err(|e| Reject::Storage(e.to_string()))?;
            return Ok(true);
        }
        let record =
            WireRecord::parse(&entry.payload).map_err(|e| Reject::MalformedRecord(e.to_string()))?;
        if matches!(record, WireRecord::Ack { .. }) {
            return Err(Reject::MalformedRecord("acks are not stored".into()));
        }
        let Some(patient_id) = self.device_index.get(record.device_id()).cloned() else {
            return Err(Reject::UnknownDevice(record.device_id().to_owned()));
        };
        if self.is_duplicate(&record) {
            return Ok(false);
        }
        let recv_at_ms = entry.recv_at_ms;
        self.append(entry).map_err(|e| Reject::Storage(e.to_string()))?;
        self.apply_record(record, &patient_id, recv_at_ms);
        Ok(true)
    }

    fn already_applied(&self, rec: &ServerRecord) -> bool {
        match rec {
            ServerRecord::Dispatch {
                alert_id,
                channel,
                dispatched_at_ms,
                delivered_at_ms,
            } => self.alerts.get(alert_id).is_some_and(|a| {
                a.dispatches.iter().any(|d| {
                    d.channel == *channel
                        && d.dispatched_at_ms == *dispatched_at_ms
                        && d.delivered_at_ms == *delivered_at_ms
                })
            }),
            ServerRecord::AlertAck { alert_id, .. } => {
                self.alerts.get(alert_id).is_some_and(|a| a.ack.is_some())
            }
        }
    }

    pub fn has_record(&self, device_id: &str, seq: u64) -> bool {
        self.cursors.get(device_id).is_some_and(|c| c.contains(seq))
    }

    /// Plans and executes remote dispatch for an alert. Alerts with no
    /// successful remote delivery stay in the pending-escalation queue.
    pub fn escalate(
        &mut self,
        alert_id: &str,
        states: ChannelStates,
        notifier: &mut dyn Notifier,
        now_ms: u64,
    ) -> Option<DispatchPlan> {
        let alert = self.alerts.get(alert_id)?;
        if alert.ack.is_some() {
            self.pending.remove(alert_id);
            return None;
        }
        let plan = dispatch_alert(alert, states, self.config.policy);
        let mut outcomes = Vec::new();
        for (channel, _) in plan.steps.iter().filter(|(c, _)| c.is_remote()) {
            let alert = &self.alerts[alert_id];
            let delivered_at_ms = match notifier.send(*channel, alert, now_ms) {
                DeliveryResult::Delivered { latency_ms } => Some(now_ms + latency_ms),
                DeliveryResult::Lost | DeliveryResult::ChannelDown => None,
            };
            outcomes.push((*channel, delivered_at_ms));
        }
        for (channel, delivered_at_ms) in outcomes {
            let rec = ServerRecord::Dispatch {
                alert_id: alert_id.to_owned(),
                channel,
                dispatched_at_ms: now_ms,
                delivered_at_ms,
            };
            self.apply_server_record(&rec);
            self.log_server_record(rec, now_ms);
        }
        Some(plan)
    }

    /// Re-escalates every pending alert; returns how many left the queue.
    pub fn retry_pending(
        &mut self,
        states: ChannelStates,
        notifier: &mut dyn Notifier,
        now_ms: u64,
    ) -> usize {
        if !(states.internet_up || states.gsm_up) {
            return 0;
        }
        let before = self.pending.len();
        let ids: Vec<String> = self.pending.iter().cloned().collect();
        for id in ids {
            self.escalate(&id, states, notifier, now_ms);
        }
        before - self.pending.len()
    }

    pub fn pending_alerts(&self) -> impl Iterator<Item = &str> {
        self.pending.iter().map(String::as_str)
    }

    pub fn is_pending(&self, alert_id: &str) -> bool {
        self.pending.contains(alert_id)
    }

    pub fn alert(&self, alert_id: &str) -> Option<&AlertEvent> {
        self.alerts.get(alert_id)
    }

    pub fn alerts(&self) -> impl Iterator<Item = &AlertEvent> {
        self.alerts.values()
    }

    /// Alerts raised at or after `since_ms`, newest first.
    pub fn alerts_since(&self, since_ms: u64) -> Vec<&AlertEvent> {
        let mut out: Vec<&AlertEvent> = self
            .alerts
            .values()
            .filter(|a| a.raised_at_ms >= since_ms)
            .collect();
        out.sort_by(|a, b| {
            b.raised_at_ms
                .cmp(&a.raised_at_ms)
                .then_with(|| a.alert_id.cmp(&b.alert_id))
        });
        out
    }

    /// Samples in `[from_ms, to_ms]` ordered by `(t_ms, seq)`.
    pub fn query_vitals(
        &self,
        patient_id: &str,
        from_ms: u64,
        to_ms: u64,
        kinds: Option<&[SensorKind]>,
    ) -> Result<Vec<VitalSample>, ServerError> {
        if !self.registry.patients.contains_key(patient_id) {
            return Err(ServerError::UnknownPatient(patient_id.to_owned()));
        }
        let Some(series) = self.samples.get(patient_id) else {
            return Ok(Vec::new());
        };
        if from_ms > to_ms {
            return Ok(Vec::new());
        }
        let lo = (from_ms, 0, String::new());
        Ok(series
            .range(lo..)
            .take_while(|((t, _, _), _)| *t <= to_ms)
            .filter(|(_, s)| kinds.is_none_or(|k| k.contains(&s.sample.kind)))
            .map(|(_, s)| s.sample.clone())
            .collect())
    }

    /// Every stored sample with its receive time, in `(t_ms, seq)` order per patient.
    pub fn stored_samples(&self) -> impl Iterator<Item = &StoredSample> {
        let mut patients: Vec<&String> = self.samples.keys().collect();
        patients.sort();
        patients
            .into_iter()
            .flat_map(move |p| self.samples[p].values())
    }

    pub fn authenticate(&mut self, username: &str, secret: &str, now_ms: u64) -> Result<Session, AuthError> {
        let account = self.registry.users.get(username);
        self.auth.authenticate(username, account, secret, now_ms)
    }

    pub fn session(&mut self, token: &str, now_ms: u64) -> Result<Session, AuthError> {
        self.auth.session(token, now_ms)
    }

    pub fn logout(&mut self, token: &str) {
        self.auth.logout(token);
    }

    /// First acknowledgement wins; later ones return it unchanged.
    pub fn acknowledge_alert(
        &mut self,
        alert_id: &str,
        session: &Session,
        now_ms: u64,
    ) -> Result<AlertEvent, ServerError> {
        authorize(session.role, Action::AcknowledgeAlert)?;
        self.acknowledge_as(alert_id, &session.user_id, now_ms)
    }

    /// Acknowledgement on behalf of an already-authorized user.
    pub fn acknowledge_as(
        &mut self,
        alert_id: &str,
        user_id: &str,
        now_ms: u64,
    ) -> Result<AlertEvent, ServerError> {
        let alert = self
            .alerts
            .get(alert_id)
            .ok_or_else(|| ServerError::UnknownAlert(alert_id.to_owned()))?;
        if alert.ack.is_none() {
            let rec = ServerRecord::AlertAck {
                alert_id: alert_id.to_owned(),
                user_id: user_id.to_owned(),
                ack_at_ms: now_ms,
            };
            self.apply_server_record(&rec);
            self.log_server_record(rec, now_ms);
        }
        Ok(self.alerts[alert_id].clone())
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn registry_changed(&mut self) -> Result<(), ServerError> {
        self.device_index = index_devices(&self.registry);
        if let Some(path) = &self.registry_path {
            self.registry.save(path)?;
        }
        Ok(())
    }

    pub fn add_patient(&mut self, record: PatientRecord) -> Result<(), ServerError> {
        for id in [&record.patient_id, &record.assigned_device_id] {
            if !valid_id(id) {
                return Err(ServerError::InvalidId(id.clone()));
            }
        }
        record
            .thresholds
            .validate()
            .map_err(|e| ServerError::InvalidThresholds(e.to_string()))?;
        if self.registry.patients.contains_key(&record.patient_id) {
            return Err(ServerError::DuplicatePatient(record.patient_id));
        }
        if self.device_index.contains_key(&record.assigned_device_id) {
            return Err(ServerError::DeviceTaken(record.assigned_device_id));
        }
        self.registry
            .patients
            .insert(record.patient_id.clone(), record);
        self.registry_changed()
    }

    pub fn set_thresholds(&mut self, patient_id: &str, thresholds: Thresholds) -> Result<(), ServerError> {
        thresholds
            .validate()
            .map_err(|e| ServerError::InvalidThresholds(e.to_string()))?;
        let patient = self
            .registry
            .patients
            .get_mut(patient_id)
            .ok_or_else(|| ServerError::UnknownPatient(patient_id.to_owned()))?;
        patient.thresholds = thresholds;
        self.registry_changed()
    }

    pub fn add_user(&mut self, username: &str, secret: &str, role: Role) -> Result<UserAccount, ServerError> {
        if !valid_id(username) {
            return Err(ServerError::InvalidId(username.to_owned()));
        }
        if self.registry.users.contains_key(username) {
            return Err(ServerError::DuplicateUser(username.to_owned()));
        }
        let account = UserAccount {
            user_id: format!("u{}", self.registry.users.len() + 1),
            username: username.to_owned(),
            secret_hash: hash_secret(secret, &self.config.hash)?,
            role,
        };
        self.registry
            .users
            .insert(username.to_owned(), account.clone());
        self.registry_changed()?;
        Ok(account)
    }

    pub fn log_entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn seq_gaps(&self) -> u64 {
        self.cursors.values().map(DeviceCursor::gaps).sum()
    }

    /// Highest seq such that every earlier seq from the device is stored.
    pub fn contiguous_seq(&self, device_id: &str) -> u64 {
        self.cursors.get(device_id).map_or(0, |c| c.contiguous)
    }

    pub fn stats(&self) -> ServerStats {
        ServerStats {
            log_entries: self.entries.len(),
            samples: self.sample_count,
            alerts: self.alerts.len(),
            duplicates: self.duplicates,
            rejected: self.rejected,
            seq_gaps: self.seq_gaps(),
            pending_alerts: self.pending.len(),
        }
    }

    pub fn sync(&mut self) -> Result<(), ServerError> {
        if let Sink::File(w) = &mut self.sink {
            w.sync()?;
        }
        Ok(())
    }
}

fn index_devices(registry: &Registry) -> HashMap<String, String> {
    registry
        .patients
        .values()
        .map(|p| (p.assigned_device_id.clone(), p.patient_id.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use comawatch_core::{AlertCause, Measurement};

    fn registry() -> Registry {
        let mut reg = Registry::default();
        for i in 1..=2 {
            reg.patients.insert(
                format!("p{i}"),
                PatientRecord {
                    patient_id: format!("p{i}"),
                    display_name: format!("Bed {i}"),
                    assigned_device_id: format!("dev{i}"),
                    thresholds: Thresholds::default(),
                },
            );
        }
        reg
    }

    fn config() -> ServerConfig {
        ServerConfig {
            hash: HashParams::insecure_fast(),
            ..ServerConfig::default()
        }
    }

    fn server() -> Server {
        Server::in_memory(config(), registry())
    }

    fn hr(dev: &str, seq: u64, t: u64) -> String {
        format!("V1|{dev}|{seq}|{t}|HR|72")
    }

    struct Scripted(Vec<DeliveryResult>);

    impl Notifier for Scripted {
        fn send(&mut self, _c: ChannelKind, _a: &AlertEvent, _now: u64) -> DeliveryResult {
            if self.0.is_empty() {
                DeliveryResult::Delivered { latency_ms: 10 }
            } else {
                self.0.remove(0)
            }
        }
    }

    #[test]
    fn ingest_is_idempotent() {
        let mut s = server();
        let first = s.ingest(&hr("dev1", 7, 0), 5).unwrap();
        assert!(first.fresh);
        assert_eq!(first.ack().encode(), "ACK|dev1|7");
        assert_eq!(s.log_entries().len(), 1);
        let again = s.ingest(&hr("dev1", 7, 0), 6).unwrap();
        assert!(!again.fresh);
        assert_eq!(again.ack(), first.ack());
        assert_eq!(s.log_entries().len(), 1);
        assert_eq!(s.stats().duplicates, 1);
    }

    #[test]
    fn gap_counter() {
        let mut s = server();
        for seq in 1..=7 {
            s.ingest(&hr("dev1", seq, seq * 1000), 0).unwrap();
        }
        assert_eq!(s.seq_gaps(), 0);
        assert!(s.ingest(&hr("dev1", 9, 9000), 0).unwrap().fresh);
        assert_eq!(s.seq_gaps(), 1);
        assert_eq!(s.contiguous_seq("dev1"), 7);
        s.ingest(&hr("dev1", 8, 8000), 0).unwrap();
        assert_eq!(s.seq_gaps(), 0);
        assert_eq!(s.contiguous_seq("dev1"), 9);
    }

    #[test]
    fn rejects() {
        let mut s = server();
        assert!(matches!(s.ingest("garbage", 0), Err(Reject::MalformedRecord(_))));
        assert!(matches!(s.ingest("ACK|dev1|1", 0), Err(Reject::MalformedRecord(_))));
        assert_eq!(
            s.ingest(&hr("dev9", 1, 0), 0),
            Err(Reject::UnknownDevice("dev9".into()))
        );
        assert_eq!(s.stats().rejected, 3);
        assert!(s.log_entries().is_empty());
    }

    #[test]
    fn query_examples() {
        let mut s = server();
        assert!(s.query_vitals("p1", 0, u64::MAX, None).unwrap().is_empty());
        assert!(matches!(
            s.query_vitals("nobody", 0, 1, None),
            Err(ServerError::UnknownPatient(_))
        ));
        // arrive out of order, come back time ordered
        for (seq, t) in [(3, 3000), (1, 1000), (2, 2000)] {
            s.ingest(&hr("dev1", seq, t), 0).unwrap();
        }
        s.ingest(&hr("dev1", 2, 2000), 0).unwrap();
        s.ingest("V1|dev1|4|2500|TEMP|36.6", 0).unwrap();
        s.ingest(&hr("dev2", 1, 1500), 0).unwrap();
        let all = s.query_vitals("p1", 0, 10_000, Some(&[SensorKind::HeartRate])).unwrap();
        assert_eq!(all.iter().map(|v| v.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(all.iter().all(|v| v.patient_id == "p1"));
        let window = s.query_vitals("p1", 2000, 2500, None).unwrap();
        assert_eq!(window.iter().map(|v| v.seq).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(window[1].value, Measurement::Celsius(36.6));
        assert!(s.query_vitals("p1", 5, 4, None).unwrap().is_empty());
    }

    #[test]
    fn alert_lifecycle() {
        let mut s = server();
        let ing = s.ingest("A1|dev1|2|1000|LOW_HR|CRIT", 1040).unwrap();
        let id = ing.new_alert.unwrap();
        assert_eq!(id, "dev1-2");
        assert!(s.is_pending(&id));
        let alert = s.alert(&id).unwrap();
        assert_eq!(alert.cause, AlertCause::LowHeartRate);
        assert_eq!(alert.dispatches[0].channel, ChannelKind::LocalLed);

        // both remote channels down: stays pending
        let dark = ChannelStates {
            internet_up: false,
            gsm_up: false,
        };
        let plan = s.escalate(&id, dark, &mut Scripted(vec![]), 1040).unwrap();
        assert_eq!(plan.channels(), vec![ChannelKind::LocalLed]);
        assert!(s.is_pending(&id));

        // internet back
        let up = ChannelStates {
            internet_up: true,
            gsm_up: false,
        };
        assert_eq!(s.retry_pending(up, &mut Scripted(vec![]), 5000), 1);
        let alert = s.alert(&id).unwrap();
        assert!(alert.delivered_remotely());
        let d = alert.dispatches.last().unwrap();
        assert_eq!(d.channel, ChannelKind::Internet);
        assert_eq!(d.delivered_at_ms, Some(5010));
    }

    #[test]
    fn lost_dispatch_keeps_alert_pending() {
        let mut s = server();
        let id = s.ingest("A1|dev1|2|0|HIGH_TEMP|CRIT", 0).unwrap().new_alert.unwrap();
        let mut lossy = Scripted(vec![DeliveryResult::Lost, DeliveryResult::Lost]);
        s.escalate(&id, ChannelStates::ALL_UP, &mut lossy, 0);
        assert!(s.is_pending(&id));
        assert_eq!(s.alert(&id).unwrap().dispatches.len(), 3);
    }

    #[test]
    fn acknowledgement_rules() {
        let mut s = server();
        s.add_user("nina", "pw", Role::Nurse).unwrap();
        s.add_user("doc", "pw", Role::Doctor).unwrap();
        let id = s.ingest("A1|dev1|2|0|BLINK|NOTE", 0).unwrap().new_alert.unwrap();
        let nurse = s.authenticate("nina", "pw", 0).unwrap();
        let doc = s.authenticate("doc", "pw", 0).unwrap();
        let acked = s.acknowledge_alert(&id, &nurse, 100).unwrap();
        assert_eq!(acked.ack.as_ref().unwrap().user_id, nurse.user_id);
        assert!(!s.is_pending(&id));
        let again = s.acknowledge_alert(&id, &doc, 200).unwrap();
        assert_eq!(again.ack.unwrap().ack_at_ms, 100);
        assert!(matches!(
            s.acknowledge_alert("nope", &nurse, 0),
            Err(ServerError::UnknownAlert(_))
        ));
        assert!(matches!(s.add_user("nina", "x", Role::Admin), Err(ServerError::DuplicateUser(_))));
    }

    #[test]
    fn patient_registration_rules() {
        let mut s = server();
        let rec = |p: &str, d: &str| PatientRecord {
            patient_id: p.into(),
            display_name: p.into(),
            assigned_device_id: d.into(),
            thresholds: Thresholds::default(),
        };
        assert!(matches!(s.add_patient(rec("p1", "dev7")), Err(ServerError::DuplicatePatient(_))));
        assert!(matches!(s.add_patient(rec("p3", "dev1")), Err(ServerError::DeviceTaken(_))));
        assert!(matches!(s.add_patient(rec("p|3", "dev3")), Err(ServerError::InvalidId(_))));
        s.add_patient(rec("p3", "dev3")).unwrap();
        assert!(s.ingest(&hr("dev3", 1, 0), 0).unwrap().fresh);
        let mut th = Thresholds::default();
        th.heart_rate.min = 200.0;
        assert!(matches!(s.set_thresholds("p3", th), Err(ServerError::InvalidThresholds(_))));
    }

    #[test]
    fn recovery_rebuilds_alert_state() {
        let mut s = server();
        s.add_user("nina", "pw", Role::Nurse).unwrap();
        for seq in 1..=20 {
            s.ingest(&hr("dev1", seq, seq * 1000), seq).unwrap();
        }
        let id = s.ingest("A1|dev1|21|21000|LOW_HR|CRIT", 21).unwrap().new_alert.unwrap();
        s.escalate(&id, ChannelStates::ALL_UP, &mut Scripted(vec![]), 22);
        let pending = s.ingest("A1|dev2|1|500|BLINK|NOTE", 23).unwrap().new_alert.unwrap();
        s.acknowledge_as(&id, "u1", 30).unwrap();
        let bytes = log::encode_entries(s.log_entries()).unwrap();
        let (r, report) = Server::recover(config(), s.registry().clone(), &bytes).unwrap();
        assert_eq!(report.entries, s.log_entries().len());
        assert_eq!(r.alert(&id), s.alert(&id));
        assert!(r.is_pending(&pending));
        assert_eq!(
            r.query_vitals("p1", 0, u64::MAX, None).unwrap(),
            s.query_vitals("p1", 0, u64::MAX, None).unwrap()
        );
        // rewrite of the recovered log is a fixpoint
        let again = log::encode_entries(r.log_entries()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn import_is_idempotent() {
        let mut s = server();
        s.ingest("A1|dev1|1|0|LOW_HR|CRIT", 0).unwrap();
        s.escalate("dev1-1", ChannelStates::ALL_UP, &mut Scripted(vec![]), 5);
        s.acknowledge_as("dev1-1", "u1", 9).unwrap();
        s.ingest(&hr("dev1", 2, 10), 10).unwrap();
        let entries = s.log_entries().to_vec();
        let mut copy = Server::in_memory(config(), registry());
        let applied: Vec<bool> = entries.iter().map(|e| copy.import(e.clone()).unwrap()).collect();
        assert!(applied.iter().all(|&a| a));
        let again: Vec<bool> = entries.iter().map(|e| copy.import(e.clone()).unwrap()).collect();
        assert!(again.iter().all(|&a| !a));
        assert_eq!(copy.log_entries(), s.log_entries());
        assert_eq!(copy.alert("dev1-1"), s.alert("dev1-1"));
        assert!(matches!(
            copy.import(LogEntry { recv_at_ms: 0, payload: "V1|ghost|1|0|HR|70".into() }),
            Err(Reject::UnknownDevice(_))
        ));
    }

    #[test]
    fn file_backed_server_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut s, report) = Server::open(config(), dir.path()).unwrap();
            assert_eq!(report.entries, 0);
            s.add_patient(PatientRecord {
                patient_id: "p1".into(),
                display_name: "Bed 1".into(),
                assigned_device_id: "dev1".into(),
                thresholds: Thresholds::default(),
            })
            .unwrap();
            s.add_user("admin", "pw", Role::Admin).unwrap();
            for seq in 1..=5 {
                s.ingest(&hr("dev1", seq, seq), 0).unwrap();
            }
            s.sync().unwrap();
        }
        let (mut s, report) = Server::open(config(), dir.path()).unwrap();
        assert_eq!(report.entries, 5);
        assert_eq!(s.query_vitals("p1", 0, 100, None).unwrap().len(), 5);
        assert!(!s.ingest(&hr("dev1", 3, 3), 0).unwrap().fresh);
        assert!(s.authenticate("admin", "pw", 0).is_ok());
    }
}
