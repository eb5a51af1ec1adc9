//! Domain types and the pure vital-sign computations.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("fewer than two pulses inside the window")]
    NoReading,
    #[error("operation not defined for {0:?} readings")]
    KindMismatch(SensorKind),
    #[error("window must be positive")]
    InvalidWindow,
    #[error("pulse timestamps must be strictly increasing")]
    UnorderedPulses,
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(&'static str),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SensorKind {
    HeartRate,
    BodyTemperature,
    BloodPressure,
    EyeBlink,
    BodyMotion,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::HeartRate,
        SensorKind::BodyTemperature,
        SensorKind::BloodPressure,
        SensorKind::EyeBlink,
        SensorKind::BodyMotion,
    ];

    pub const ANALOG: [SensorKind; 3] = [
        SensorKind::HeartRate,
        SensorKind::BodyTemperature,
        SensorKind::BloodPressure,
    ];

    /// PIR-backed kinds deliver edges, not values.
    pub fn is_digital(self) -> bool {
        matches!(self, SensorKind::EyeBlink | SensorKind::BodyMotion)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short code used on the wire and in config files.
    pub fn code(self) -> &'static str {
        match self {
            SensorKind::HeartRate => "HR",
            SensorKind::BodyTemperature => "TEMP",
            SensorKind::BloodPressure => "BP",
            SensorKind::EyeBlink => "BLINK",
            SensorKind::BodyMotion => "MOTION",
        }
    }

    pub fn from_code(code: &str) -> Option<SensorKind> {
        SensorKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    Bpm(f64),
    Celsius(f64),
    Pressure { systolic: f64, diastolic: f64 },
    DigitalEdge { rising: bool },
}

/// Upper bound on a plausible heart rate; anything above is a generator bug.
pub const BPM_CEILING: f64 = 400.0;

impl Measurement {
    pub fn matches(&self, kind: SensorKind) -> bool {
        matches!(
            (self, kind),
            (Measurement::Bpm(_), SensorKind::HeartRate)
                | (Measurement::Celsius(_), SensorKind::BodyTemperature)
                | (Measurement::Pressure { .. }, SensorKind::BloodPressure)
                | (Measurement::DigitalEdge { .. }, SensorKind::EyeBlink)
                | (Measurement::DigitalEdge { .. }, SensorKind::BodyMotion)
        )
    }

    pub fn validate(&self, kind: SensorKind) -> Result<(), ModelError> {
        if !self.matches(kind) {
            return Err(ModelError::KindMismatch(kind));
        }
        match *self {
            Measurement::Bpm(v) if !v.is_finite() || !(0.0..BPM_CEILING).contains(&v) => {
                Err(ModelError::InvalidMeasurement("bpm outside [0, 400)"))
            }
            Measurement::Celsius(v) if !v.is_finite() => {
                Err(ModelError::InvalidMeasurement("temperature not finite"))
            }
            Measurement::Pressure {
                systolic,
                diastolic,
            } => {
                if !(systolic.is_finite() && diastolic.is_finite()) {
                    Err(ModelError::InvalidMeasurement("pressure not finite"))
                } else if diastolic <= 0.0 {
                    Err(ModelError::InvalidMeasurement("pressure must be positive"))
                } else if systolic <= diastolic {
                    Err(ModelError::InvalidMeasurement("systolic must exceed diastolic"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// A sensor reading before the device stamps it with identity and sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub t_ms: u64,
    pub kind: SensorKind,
    pub value: Measurement,
}

/// One timestamped reading from one device; the unit of telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct VitalSample {
    pub device_id: String,
    pub patient_id: String,
    pub seq: u64,
    pub t_ms: u64,
    pub kind: SensorKind,
    pub value: Measurement,
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Range {
        Range { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn is_well_formed(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min < self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub heart_rate: Range,
    pub temperature: Range,
    pub systolic: Range,
    pub diastolic: Range,
    pub debounce_ms: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            heart_rate: Range::new(50.0, 120.0),
            temperature: Range::new(35.0, 38.5),
            systolic: Range::new(90.0, 160.0),
            diastolic: Range::new(60.0, 100.0),
            debounce_ms: 200,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks = [
            (self.heart_rate, "heart rate range"),
            (self.temperature, "temperature range"),
            (self.systolic, "systolic range"),
            (self.diastolic, "diastolic range"),
        ];
        for (range, what) in checks {
            if !range.is_well_formed() {
                return Err(ModelError::InvalidThresholds(what));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    /// Responsiveness event (blink or motion).
    Notice,
    /// Vital sign out of range.
    Critical,
}

impl Severity {
    pub fn code(self) -> &'static str {
        match self {
            Severity::Critical => "CRIT",
            Severity::Notice => "NOTE",
        }
    }

    pub fn from_code(code: &str) -> Option<Severity> {
        match code {
            "CRIT" => Some(Severity::Critical),
            "NOTE" => Some(Severity::Notice),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlertCause {
    LowHeartRate,
    HighHeartRate,
    LowTemperature,
    HighTemperature,
    LowBloodPressure,
    HighBloodPressure,
    EyeBlinkDetected,
    BodyMotionDetected,
}

impl AlertCause {
    pub const ALL: [AlertCause; 8] = [
        AlertCause::LowHeartRate,
        AlertCause::HighHeartRate,
        AlertCause::LowTemperature,
        AlertCause::HighTemperature,
        AlertCause::LowBloodPressure,
        AlertCause::HighBloodPressure,
        AlertCause::EyeBlinkDetected,
        AlertCause::BodyMotionDetected,
    ];

    pub fn kind(self) -> SensorKind {
        match self {
            AlertCause::LowHeartRate | AlertCause::HighHeartRate => SensorKind::HeartRate,
            AlertCause::LowTemperature | AlertCause::HighTemperature => {
                SensorKind::BodyTemperature
            }
            AlertCause::LowBloodPressure | AlertCause::HighBloodPressure => {
                SensorKind::BloodPressure
            }
            AlertCause::EyeBlinkDetected => SensorKind::EyeBlink,
            AlertCause::BodyMotionDetected => SensorKind::BodyMotion,
        }
    }

    pub fn severity(self) -> Severity {
        if self.kind().is_digital() {
            Severity::Notice
        } else {
            Severity::Critical
        }
    }

    /// Responsiveness cause raised by a digital sensor kind.
    pub fn for_digital(kind: SensorKind) -> Option<AlertCause> {
        match kind {
            SensorKind::EyeBlink => Some(AlertCause::EyeBlinkDetected),
            SensorKind::BodyMotion => Some(AlertCause::BodyMotionDetected),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            AlertCause::LowHeartRate => "LOW_HR",
            AlertCause::HighHeartRate => "HIGH_HR",
            AlertCause::LowTemperature => "LOW_TEMP",
            AlertCause::HighTemperature => "HIGH_TEMP",
            AlertCause::LowBloodPressure => "LOW_BP",
            AlertCause::HighBloodPressure => "HIGH_BP",
            AlertCause::EyeBlinkDetected => "BLINK",
            AlertCause::BodyMotionDetected => "MOTION",
        }
    }

    pub fn from_code(code: &str) -> Option<AlertCause> {
        AlertCause::ALL.into_iter().find(|c| c.code() == code)
    }

    /// Text shown on the bedside display.
    pub fn lcd_code(self) -> &'static str {
        match self {
            AlertCause::LowHeartRate => "LOW HR",
            AlertCause::HighHeartRate => "HIGH HR",
            AlertCause::LowTemperature => "LOW TEMP",
            AlertCause::HighTemperature => "HIGH TEMP",
            AlertCause::LowBloodPressure => "LOW BP",
            AlertCause::HighBloodPressure => "HIGH BP",
            AlertCause::EyeBlinkDetected => "BLINK",
            AlertCause::BodyMotionDetected => "MOTION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKind {
    Internet,
    GsmSms,
    /// Bedside indicator; never traverses a network.
    LocalLed,
}

impl ChannelKind {
    pub fn is_remote(self) -> bool {
        !matches!(self, ChannelKind::LocalLed)
    }

    pub fn code(self) -> &'static str {
        match self {
            ChannelKind::Internet => "internet",
            ChannelKind::GsmSms => "gsm",
            ChannelKind::LocalLed => "led",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub channel: ChannelKind,
    pub dispatched_at_ms: u64,
    /// `None` when the channel did not deliver.
    pub delivered_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ack {
    pub user_id: String,
    pub ack_at_ms: u64,
}

/// The part of an alert the device knows about when it raises it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlertSkeleton {
    pub cause: AlertCause,
    pub severity: Severity,
    pub raised_at_ms: u64,
    pub sample_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlertEvent {
    pub alert_id: String,
    pub device_id: String,
    pub patient_id: String,
    pub cause: AlertCause,
    pub severity: Severity,
    pub raised_at_ms: u64,
    /// Triggering sample; unknown when the alert was rebuilt from the wire.
    pub sample_seq: Option<u64>,
    pub dispatches: Vec<Dispatch>,
    pub ack: Option<Ack>,
}

impl AlertEvent {
    /// Appends a dispatch, clamping timestamps so that
    /// `delivered >= dispatched >= raised` always holds.
    pub fn record_dispatch(
        &mut self,
        channel: ChannelKind,
        dispatched_at_ms: u64,
        delivered_at_ms: Option<u64>,
    ) {
        let dispatched_at_ms = dispatched_at_ms.max(self.raised_at_ms);
        let delivered_at_ms = delivered_at_ms.map(|d| d.max(dispatched_at_ms));
        self.dispatches.push(Dispatch {
            channel,
            dispatched_at_ms,
            delivered_at_ms,
        });
    }

    pub fn delivered_remotely(&self) -> bool {
        self.dispatches
            .iter()
            .any(|d| d.channel.is_remote() && d.delivered_at_ms.is_some())
    }

    /// First writer wins; later calls return the existing acknowledgement.
    pub fn acknowledge(&mut self, user_id: &str, now_ms: u64) -> &Ack {
        self.ack.get_or_insert_with(|| Ack {
            user_id: String::from(user_id),
            ack_at_ms: now_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Normal,
    OutOfRange(AlertCause),
}

/// Heart rate from the pulse events in the trailing `window_ms` ending at
/// the last pulse: `60000 * (n - 1) / (t_n - t_1)`.
pub fn compute_bpm(pulse_timestamps: &[u64], window_ms: u64) -> Result<f64, ModelError> {
    if window_ms == 0 {
        return Err(ModelError::InvalidWindow);
    }
    if pulse_timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ModelError::UnorderedPulses);
    }
    let Some(&last) = pulse_timestamps.last() else {
        return Err(ModelError::NoReading);
    };
    let start = last.saturating_sub(window_ms);
    let first_in = pulse_timestamps.partition_point(|&t| t < start);
    let in_window = &pulse_timestamps[first_in..];
    if in_window.len() < 2 {
        return Err(ModelError::NoReading);
    }
    let span = (last - in_window[0]) as f64;
    Ok(60_000.0 * (in_window.len() - 1) as f64 / span)
}

/// Checks an analog value against its closed normal range.
pub fn classify(
    kind: SensorKind,
    value: &Measurement,
    th: &Thresholds,
) -> Result<Classification, ModelError> {
    if kind.is_digital() || !value.matches(kind) {
        return Err(ModelError::KindMismatch(kind));
    }
    let banded = |v: f64, range: &Range, low: AlertCause, high: AlertCause| {
        if v < range.min {
            Classification::OutOfRange(low)
        } else if v > range.max {
            Classification::OutOfRange(high)
        } else {
            Classification::Normal
        }
    };
    let class = match *value {
        Measurement::Bpm(v) => banded(
            v,
            &th.heart_rate,
            AlertCause::LowHeartRate,
            AlertCause::HighHeartRate,
        ),
        Measurement::Celsius(v) => banded(
            v,
            &th.temperature,
            AlertCause::LowTemperature,
            AlertCause::HighTemperature,
        ),
        Measurement::Pressure {
            systolic,
            diastolic,
        } => {
            let low = systolic < th.systolic.min || diastolic < th.diastolic.min;
            let high = systolic > th.systolic.max || diastolic > th.diastolic.max;
            // Low outranks high when the two components disagree.
            if low {
                Classification::OutOfRange(AlertCause::LowBloodPressure)
            } else if high {
                Classification::OutOfRange(AlertCause::HighBloodPressure)
            } else {
                Classification::Normal
            }
        }
        Measurement::DigitalEdge { .. } => unreachable!("digital kinds rejected above"),
    };
    Ok(class)
}

/// Suppresses events closer than `debounce_ms` to the previously accepted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Debouncer {
    last_accepted: Option<u64>,
}

impl Debouncer {
    pub fn accept(&mut self, t_ms: u64, debounce_ms: u64) -> bool {
        match self.last_accepted {
            Some(prev) if t_ms.saturating_sub(prev) < debounce_ms => false,
            _ => {
                self.last_accepted = Some(t_ms);
                true
            }
        }
    }

    pub fn last_accepted(&self) -> Option<u64> {
        self.last_accepted
    }
}

/// Turns a PIR level trace into responsiveness events, one per accepted
/// rising edge. The line is assumed low before the first entry.
pub fn detect_edges(
    kind: SensorKind,
    raw_levels: &[(u64, bool)],
    debounce_ms: u64,
) -> Result<Vec<(u64, AlertCause)>, ModelError> {
    let cause = AlertCause::for_digital(kind).ok_or(ModelError::KindMismatch(kind))?;
    let mut debouncer = Debouncer::default();
    let mut level = false;
    let mut events = Vec::new();
    for &(t, high) in raw_levels {
        if high && !level && debouncer.accept(t, debounce_ms) {
            events.push((t, cause));
        }
        level = high;
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn th() -> Thresholds {
        Thresholds::default()
    }

    #[test]
    fn bpm_examples() {
        assert_eq!(compute_bpm(&[0, 1000, 2000, 3000], 5000), Ok(60.0));
        assert_eq!(compute_bpm(&[0, 500, 1000, 1500], 5000), Ok(120.0));
        assert_eq!(compute_bpm(&[0], 5000), Err(ModelError::NoReading));
        // mean interval 600 ms
        assert_eq!(compute_bpm(&[0, 400, 1000, 1800], 5000), Ok(100.0));
    }

    #[test]
    fn bpm_only_uses_trailing_window() {
        // 0 and 1000 fall outside [6000, 9000]
        assert_eq!(compute_bpm(&[0, 1000, 6000, 7000, 8000, 9000], 3000), Ok(60.0));
        assert_eq!(compute_bpm(&[0, 9000], 3000), Err(ModelError::NoReading));
    }

    #[test]
    fn bpm_rejects_bad_input() {
        assert_eq!(compute_bpm(&[0, 10], 0), Err(ModelError::InvalidWindow));
        assert_eq!(compute_bpm(&[10, 10], 100), Err(ModelError::UnorderedPulses));
        assert_eq!(compute_bpm(&[], 100), Err(ModelError::NoReading));
    }

    #[test]
    fn classify_examples() {
        let hr = SensorKind::HeartRate;
        assert_eq!(classify(hr, &Measurement::Bpm(72.0), &th()), Ok(Classification::Normal));
        assert_eq!(
            classify(hr, &Measurement::Bpm(45.0), &th()),
            Ok(Classification::OutOfRange(AlertCause::LowHeartRate))
        );
        assert_eq!(
            classify(SensorKind::BodyTemperature, &Measurement::Celsius(39.0), &th()),
            Ok(Classification::OutOfRange(AlertCause::HighTemperature))
        );
        let bp = Measurement::Pressure {
            systolic: 85.0,
            diastolic: 70.0,
        };
        assert_eq!(
            classify(SensorKind::BloodPressure, &bp, &th()),
            Ok(Classification::OutOfRange(AlertCause::LowBloodPressure))
        );
    }

    #[test]
    fn pressure_low_wins_tie() {
        let bp = Measurement::Pressure {
            systolic: 170.0,
            diastolic: 50.0,
        };
        assert_eq!(
            classify(SensorKind::BloodPressure, &bp, &th()),
            Ok(Classification::OutOfRange(AlertCause::LowBloodPressure))
        );
        let high_dia = Measurement::Pressure {
            systolic: 150.0,
            diastolic: 105.0,
        };
        assert_eq!(
            classify(SensorKind::BloodPressure, &high_dia, &th()),
            Ok(Classification::OutOfRange(AlertCause::HighBloodPressure))
        );
    }

    #[test]
    fn classify_rejects_digital() {
        let edge = Measurement::DigitalEdge { rising: true };
        assert_eq!(
            classify(SensorKind::EyeBlink, &edge, &th()),
            Err(ModelError::KindMismatch(SensorKind::EyeBlink))
        );
    }

    #[test]
    fn edge_examples() {
        let k = SensorKind::EyeBlink;
        assert_eq!(detect_edges(k, &[(0, false), (50, false)], 200), Ok(vec![]));
        assert_eq!(
            detect_edges(k, &[(0, false), (100, true)], 200),
            Ok(vec![(100, AlertCause::EyeBlinkDetected)])
        );
        assert_eq!(
            detect_edges(k, &[(0, false), (100, true), (150, false), (180, true)], 200),
            Ok(vec![(100, AlertCause::EyeBlinkDetected)])
        );
        assert_eq!(detect_edges(k, &[], 200), Ok(vec![]));
        assert!(detect_edges(SensorKind::HeartRate, &[], 0).is_err());
    }

    #[test]
    fn cause_tables_are_consistent() {
        for cause in AlertCause::ALL {
            assert_eq!(AlertCause::from_code(cause.code()), Some(cause));
            let expected = if cause.kind().is_digital() {
                Severity::Notice
            } else {
                Severity::Critical
            };
            assert_eq!(cause.severity(), expected);
        }
        for kind in SensorKind::ALL {
            assert_eq!(SensorKind::from_code(kind.code()), Some(kind));
        }
    }

    #[test]
    fn ack_is_first_writer_wins() {
        let mut alert = AlertEvent {
            alert_id: "a".into(),
            device_id: "d".into(),
            patient_id: "p".into(),
            cause: AlertCause::LowHeartRate,
            severity: Severity::Critical,
            raised_at_ms: 10,
            sample_seq: Some(1),
            dispatches: vec![],
            ack: None,
        };
        alert.acknowledge("nurse", 20);
        let ack = alert.acknowledge("doctor", 30).clone();
        assert_eq!(ack.user_id, "nurse");
        assert_eq!(ack.ack_at_ms, 20);
        alert.record_dispatch(ChannelKind::GsmSms, 5, Some(3));
        let d = alert.dispatches[0];
        assert!(d.delivered_at_ms.unwrap() >= d.dispatched_at_ms);
        assert!(d.dispatched_at_ms >= alert.raised_at_ms);
    }

    #[test]
    fn measurement_validation() {
        let bad = Measurement::Pressure {
            systolic: 80.0,
            diastolic: 90.0,
        };
        assert!(bad.validate(SensorKind::BloodPressure).is_err());
        assert!(Measurement::Bpm(450.0).validate(SensorKind::HeartRate).is_err());
        assert!(Measurement::Bpm(f64::NAN).validate(SensorKind::HeartRate).is_err());
        assert!(Measurement::Bpm(72.0).validate(SensorKind::BodyTemperature).is_err());
        assert!(Measurement::Bpm(72.0).validate(SensorKind::HeartRate).is_ok());
    }

    fn range_strategy() -> impl Strategy<Value = Range> {
        (-500.0f64..500.0, 0.001f64..300.0).prop_map(|(min, w)| Range::new(min, min + w))
    }

    proptest! {
        #[test]
        fn closed_range_bounds_are_normal(r in range_strategy(), pick_max in any::<bool>()) {
            let th = Thresholds { heart_rate: r, temperature: r, ..Thresholds::default() };
            let v = if pick_max { r.max } else { r.min };
            prop_assert_eq!(
                classify(SensorKind::HeartRate, &Measurement::Bpm(v), &th),
                Ok(Classification::Normal)
            );
            prop_assert_eq!(
                classify(SensorKind::BodyTemperature, &Measurement::Celsius(v), &th),
                Ok(Classification::Normal)
            );
        }

        #[test]
        fn bpm_is_shift_invariant(
            gaps in proptest::collection::vec(1u64..3000, 1..40),
            shift in 0u64..1_000_000_000,
            window in 1u64..100_000,
        ) {
            let mut ts = vec![0u64];
            for g in gaps {
                let next = ts.last().unwrap() + g;
                ts.push(next);
            }
            let shifted: Vec<u64> = ts.iter().map(|t| t + shift).collect();
            prop_assert_eq!(compute_bpm(&ts, window), compute_bpm(&shifted, window));
        }

        #[test]
        fn edge_count_bounded_by_rising_edges(
            levels in proptest::collection::vec((0u64..50, any::<bool>()), 0..200),
            debounce in 0u64..500,
        ) {
            let mut t = 0;
            let trace: Vec<(u64, bool)> = levels
                .into_iter()
                .map(|(dt, l)| { t += dt; (t, l) })
                .collect();
            let mut rising = 0;
            let mut prev = false;
            for &(_, l) in &trace {
                if l && !prev { rising += 1; }
                prev = l;
            }
            let with_debounce = detect_edges(SensorKind::BodyMotion, &trace, debounce).unwrap();
            let without = detect_edges(SensorKind::BodyMotion, &trace, 0).unwrap();
            prop_assert!(with_debounce.len() <= rising);
            prop_assert_eq!(without.len(), rising);
        }
    }
}
