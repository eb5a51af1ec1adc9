//! Emulated bedside unit.
//!
//! The firmware main loop is a pure state machine: [`DeviceState::tick`]
//! consumes the readings that became available since the previous tick and
//! returns a list of [`Effect`]s for the caller to execute. Transmission
//! outcomes and server acknowledgements are fed back through
//! [`DeviceState::on_send_result`] and [`DeviceState::on_ack`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{
    classify, AlertCause, AlertSkeleton, Classification, Debouncer, Measurement, Reading,
    SensorKind, Severity, Thresholds, VitalSample,
};
use crate::wire::{self, WireRecord};

pub const LCD_ROWS: usize = 4;
pub const LCD_COLS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("invalid identifier `{0}`")]
    InvalidId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DevicePolicy {
    pub batch_size: usize,
    pub base_backoff_ms: u64,
    pub max_retries: u32,
    /// Quiet period after the last trigger before AlertActive clears.
    pub clear_hold_ms: u64,
    /// How long a delivered record waits for its ack before it is resent.
    pub ack_timeout_ms: u64,
    /// Request an SMS from the local modem when Wi-Fi is believed down.
    pub device_sms: bool,
}

impl Default for DevicePolicy {
    fn default() -> Self {
        DevicePolicy {
            batch_size: 16,
            base_backoff_ms: 500,
            max_retries: 5,
            clear_hold_ms: 10_000,
            ack_timeout_ms: 5_000,
            device_sms: true,
        }
    }
}

impl DevicePolicy {
    /// Delay before the next attempt after `failed` consecutive failures:
    /// `base * 2^(failed - 1)`, with the exponent capped at `max_exp`.
    pub fn backoff_ms(&self, failed: u32, max_exp: u32) -> u64 {
        let exp = failed.saturating_sub(1).min(max_exp).min(40);
        self.base_backoff_ms.saturating_mul(1u64 << exp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Boot,
    Monitoring,
    AlertActive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Led {
    Off,
    On(Severity),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordBody {
    Sample(VitalSample),
    Alert(AlertSkeleton),
}

/// One queued record awaiting delivery and acknowledgement.
///
/// Sample records are dead-lettered once `attempts` reaches
/// `max_retries + 1`. Alert records are never dead-lettered; they keep
/// retrying at the capped backoff so no raised alert is lost on the device.
#[derive(Debug, Clone, PartialEq)]
pub struct OutboundRecord {
    pub seq: u64,
    pub body: RecordBody,
    /// Failed attempts so far; drives the backoff.
    pub attempts: u32,
    pub next_attempt_at_ms: u64,
    /// Handed to the transport, outcome not yet reported.
    pub in_flight: bool,
}

impl OutboundRecord {
    pub fn is_alert(&self) -> bool {
        matches!(self.body, RecordBody::Alert(_))
    }

    pub fn to_wire(&self, device_id: &str) -> WireRecord {
        match &self.body {
            RecordBody::Sample(s) => WireRecord::from_sample(s),
            RecordBody::Alert(a) => WireRecord::Alert {
                device_id: String::from(device_id),
                seq: self.seq,
                t_ms: a.raised_at_ms,
                cause: a.cause,
                severity: a.severity,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLetter {
    pub record: OutboundRecord,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    LcdUpdated,
    LedChanged(Led),
    EnqueuedSample(u64),
    /// `onset_ms` is the timestamp of the triggering reading.
    RaisedAlert {
        cause: AlertCause,
        seq: u64,
        onset_ms: u64,
    },
    TransmitBatch(Vec<u64>),
    SmsRequested(AlertCause),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendResult {
    Delivered,
    Lost,
    /// The link reported itself down; the attempt does not count.
    ChannelDown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LastReading {
    pub value: Measurement,
    pub t_ms: u64,
}

/// 4×20 character display contents, always space padded.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct LcdBuffer([[u8; LCD_COLS]; LCD_ROWS]);

impl LcdBuffer {
    pub fn blank() -> LcdBuffer {
        LcdBuffer([[b' '; LCD_COLS]; LCD_ROWS])
    }

    pub fn line(&self, row: usize) -> &str {
        // only printable ASCII is ever written
        core::str::from_utf8(&self.0[row]).expect("lcd holds ASCII")
    }

    pub fn lines(&self) -> [&str; LCD_ROWS] {
        [self.line(0), self.line(1), self.line(2), self.line(3)]
    }
}

impl fmt::Debug for LcdBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.lines()).finish()
    }
}

struct RowWriter<'a> {
    row: &'a mut [u8; LCD_COLS],
    pos: usize,
}

impl fmt::Write for RowWriter<'_> {
    fn write_str(&mut self, s: &str) -> fmt::Result {
        for b in s.bytes() {
            if self.pos == LCD_COLS {
                break;
            }
            self.row[self.pos] = if (0x20..0x7f).contains(&b) { b } else { b'?' };
            self.pos += 1;
        }
        Ok(())
    }
}

fn rounded(v: f64) -> i64 {
    libm::round(v).clamp(-99_999.0, 99_999.0) as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub device_id: String,
    pub patient_id: String,
    pub mode: Mode,
    pub led: Led,
    pub lcd: LcdBuffer,
    pub wifi_believed_up: bool,
    last_reading: [Option<LastReading>; 5],
    outbox: BTreeMap<u64, OutboundRecord>,
    dead_letters: Vec<DeadLetter>,
    next_seq: u64,
    /// Current out-of-range cause per analog kind.
    active: [Option<AlertCause>; 3],
    shown_cause: Option<AlertCause>,
    last_trigger_ms: Option<u64>,
    debouncers: [Debouncer; 2],
    last_tick_ms: Option<u64>,
    malformed_dropped: u64,
}

impl DeviceState {
    pub fn new(device_id: &str, patient_id: &str) -> Result<DeviceState, DeviceError> {
        for id in [device_id, patient_id] {
            if !wire::valid_id(id) {
                return Err(DeviceError::InvalidId(String::from(id)));
            }
        }
        Ok(DeviceState {
            device_id: String::from(device_id),
            patient_id: String::from(patient_id),
            mode: Mode::Boot,
            led: Led::Off,
            lcd: LcdBuffer::blank(),
            wifi_believed_up: true,
            last_reading: [None; 5],
            outbox: BTreeMap::new(),
            dead_letters: Vec::new(),
            next_seq: 1,
            active: [None; 3],
            shown_cause: None,
            last_trigger_ms: None,
            debouncers: [Debouncer::default(); 2],
            last_tick_ms: None,
            malformed_dropped: 0,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn last_reading(&self, kind: SensorKind) -> Option<LastReading> {
        self.last_reading[kind.index()]
    }

    pub fn outbox(&self) -> impl Iterator<Item = &OutboundRecord> {
        self.outbox.values()
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.len()
    }

    pub fn record(&self, seq: u64) -> Option<&OutboundRecord> {
        self.outbox.get(&seq)
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead_letters
    }

    pub fn malformed_dropped(&self) -> u64 {
        self.malformed_dropped
    }

    fn take_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    fn enqueue(&mut self, seq: u64, body: RecordBody, now_ms: u64) {
        self.outbox.insert(
            seq,
            OutboundRecord {
                seq,
                body,
                attempts: 0,
                next_attempt_at_ms: now_ms,
                in_flight: false,
            },
        );
    }

    /// One pass of the firmware main loop.
    pub fn tick(
        &mut self,
        inputs: &[Reading],
        now_ms: u64,
        th: &Thresholds,
        policy: &DevicePolicy,
    ) -> Vec<Effect> {
        let now_ms = self.last_tick_ms.map_or(now_ms, |prev| now_ms.max(prev));
        self.last_tick_ms = Some(now_ms);
        let mut effects = Vec::new();

        // 1. ingest
        let mut accepted: Vec<(u64, Reading)> = Vec::with_capacity(inputs.len());
        for reading in inputs {
            if reading.value.validate(reading.kind).is_err() {
                self.malformed_dropped += 1;
                continue;
            }
            let seq = self.take_seq();
            self.last_reading[reading.kind.index()] = Some(LastReading {
                value: reading.value,
                t_ms: reading.t_ms,
            });
            let sample = VitalSample {
                device_id: self.device_id.clone(),
                patient_id: self.patient_id.clone(),
                seq,
                t_ms: reading.t_ms,
                kind: reading.kind,
                value: reading.value,
            };
            self.enqueue(seq, RecordBody::Sample(sample), now_ms);
            effects.push(Effect::EnqueuedSample(seq));
            accepted.push((seq, *reading));
        }

        // 2. detect
        if self.mode == Mode::Boot {
            self.mode = Mode::Monitoring;
        }
        for (sample_seq, reading) in accepted {
            if reading.kind.is_digital() {
                let Measurement::DigitalEdge { rising: true } = reading.value else {
                    continue;
                };
                let slot = reading.kind.index() - SensorKind::EyeBlink.index();
                if self.debouncers[slot].accept(reading.t_ms, th.debounce_ms) {
                    let cause = AlertCause::for_digital(reading.kind).expect("digital kind");
                    self.raise(cause, sample_seq, reading.t_ms, now_ms, policy, &mut effects);
                }
                continue;
            }
            let slot = reading.kind.index();
            match classify(reading.kind, &reading.value, th) {
                Ok(Classification::OutOfRange(cause)) => {
                    self.last_trigger_ms = Some(now_ms);
                    if self.active[slot] != Some(cause) {
                        self.active[slot] = Some(cause);
                        self.raise(cause, sample_seq, reading.t_ms, now_ms, policy, &mut effects);
                    }
                }
                Ok(Classification::Normal) => self.active[slot] = None,
                Err(_) => self.malformed_dropped += 1,
            }
        }
        if self.mode == Mode::AlertActive && self.active.iter().all(Option::is_none) {
            let quiet = self
                .last_trigger_ms
                .map_or(true, |t| now_ms.saturating_sub(t) >= policy.clear_hold_ms);
            if quiet {
                self.mode = Mode::Monitoring;
                self.shown_cause = None;
                self.led = Led::Off;
                effects.push(Effect::LedChanged(Led::Off));
            }
        }

        // 3. display
        let lcd = self.render_lcd();
        if lcd != self.lcd {
            self.lcd = lcd;
            effects.push(Effect::LcdUpdated);
        }

        // 4. transmit
        if self.wifi_believed_up {
            let batch: Vec<u64> = self
                .outbox
                .values()
                .filter(|r| !r.in_flight && r.next_attempt_at_ms <= now_ms)
                .take(policy.batch_size)
                .map(|r| r.seq)
                .collect();
            if !batch.is_empty() {
                for seq in &batch {
                    if let Some(r) = self.outbox.get_mut(seq) {
                        r.in_flight = true;
                    }
                }
                effects.push(Effect::TransmitBatch(batch));
            }
        }
        effects
    }

    fn raise(
        &mut self,
        cause: AlertCause,
        sample_seq: u64,
        onset_ms: u64,
        now_ms: u64,
        policy: &DevicePolicy,
        effects: &mut Vec<Effect>,
    ) {
        let seq = self.take_seq();
        let severity = cause.severity();
        self.enqueue(
            seq,
            RecordBody::Alert(AlertSkeleton {
                cause,
                severity,
                raised_at_ms: now_ms,
                sample_seq,
            }),
            now_ms,
        );
        effects.push(Effect::RaisedAlert {
            cause,
            seq,
            onset_ms,
        });
        let led = match self.led {
            Led::On(current) if current >= severity => Led::On(current),
            _ => Led::On(severity),
        };
        if led != self.led {
            self.led = led;
            effects.push(Effect::LedChanged(led));
        }
        self.mode = Mode::AlertActive;
        self.shown_cause = Some(cause);
        self.last_trigger_ms = Some(now_ms);
        if policy.device_sms && !self.wifi_believed_up {
            effects.push(Effect::SmsRequested(cause));
        }
    }

    /// Renders the bedside display from the current state.
    pub fn render_lcd(&self) -> LcdBuffer {
        let mut buf = LcdBuffer::blank();
        let mut rows = buf.0.iter_mut();
        let mut next_row = || RowWriter {
            row: rows.next().expect("four rows"),
            pos: 0,
        };

        let mut w = next_row();
        match self.last_reading(SensorKind::HeartRate).map(|r| r.value) {
            Some(Measurement::Bpm(v)) => write!(w, "HR:{} BPM", rounded(v)),
            _ => w.write_str("HR:-- BPM"),
        }
        .ok();

        let mut w = next_row();
        match self.last_reading(SensorKind::BodyTemperature).map(|r| r.value) {
            Some(Measurement::Celsius(v)) if v.abs() < 1e5 => write!(w, "T:{v:.1}C"),
            _ => w.write_str("T:--C"),
        }
        .ok();

        let mut w = next_row();
        match self.last_reading(SensorKind::BloodPressure).map(|r| r.value) {
            Some(Measurement::Pressure {
                systolic,
                diastolic,
            }) => write!(w, "BP:{}/{}", rounded(systolic), rounded(diastolic)),
            _ => w.write_str("BP:--/--"),
        }
        .ok();

        let mut w = next_row();
        match (self.mode, self.shown_cause) {
            (Mode::AlertActive, Some(cause)) => write!(w, "ALERT: {}", cause.lcd_code()),
            (Mode::Boot, _) => w.write_str("STATUS: BOOT"),
            _ => w.write_str("STATUS: OK"),
        }
        .ok();
        buf
    }

    /// Drops acknowledged records; unknown seqs are ignored.
    pub fn on_ack(&mut self, acked_seqs: &[u64]) {
        for seq in acked_seqs {
            self.outbox.remove(seq);
        }
    }

    pub fn on_send_result(
        &mut self,
        seq: u64,
        result: SendResult,
        now_ms: u64,
        policy: &DevicePolicy,
    ) {
        let Some(record) = self.outbox.get_mut(&seq) else {
            return;
        };
        record.in_flight = false;
        match result {
            SendResult::Delivered => {
                record.next_attempt_at_ms = now_ms.saturating_add(policy.ack_timeout_ms);
            }
            SendResult::ChannelDown => {
                record.next_attempt_at_ms = now_ms;
                self.wifi_believed_up = false;
            }
            SendResult::Lost => {
                record.attempts += 1;
                let exhausted = record.attempts > policy.max_retries;
                if exhausted && !record.is_alert() {
                    let record = self.outbox.remove(&seq).expect("present");
                    self.dead_letters.push(DeadLetter {
                        record,
                        at_ms: now_ms,
                    });
                } else {
                    let cap = if record.is_alert() { policy.max_retries } else { u32::MAX };
                    record.next_attempt_at_ms =
                        now_ms.saturating_add(policy.backoff_ms(record.attempts, cap));
                }
            }
        }
    }
}
