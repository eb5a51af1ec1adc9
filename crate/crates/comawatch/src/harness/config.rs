//! Scenario files.
//!
//! INI-style: `[section]` headers, `key = value` pairs, `#` comments.
//! Durations take an optional unit suffix (`ms`, `s`, `m`, `h`); a bare
//! number is milliseconds. Outage lists are written `1h-2h, 5h-5h30m`.

use std::collections::BTreeMap;
use std::fmt;

use comawatch_core::sensor::Jitter;
use comawatch_core::{
    AnomalyShape, AnomalySpec, ChannelKind, ChannelModel, DevicePolicy, Outage, PatientProfile,
    SensorKind, Thresholds,
};
use thiserror::Error;

use crate::server::escalation::AlertPolicy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    /// 1-based line number; 0 when the problem is not tied to one line.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: ", self.line)?;
        }
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

fn err(line: usize, field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientConfig {
    pub patient_id: String,
    pub device_id: String,
    pub display_name: String,
    pub profile: PatientProfile,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyConfig {
    /// Index into [`ScenarioConfig::patients`].
    pub patient: usize,
    pub spec: AnomalySpec,
    pub repeat: u32,
    pub every_ms: u64,
}

impl AnomalyConfig {
    /// Every occurrence of the anomaly, in time order.
    pub fn occurrences(&self) -> impl Iterator<Item = AnomalySpec> + '_ {
        (0..self.repeat as u64).map(move |i| AnomalySpec {
            start_ms: self.spec.start_ms + i * self.every_ms,
            ..self.spec
        })
    }

    pub fn last_end_ms(&self) -> u64 {
        self.spec.end_ms() + (self.repeat as u64).saturating_sub(1) * self.every_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_ms: u64,
    pub tick_period_ms: u64,
    pub sample_period_ms: u64,
    /// Extra simulated time allowed after `duration_ms` for queues to drain.
    pub drain_ms: u64,
    pub alert_policy: AlertPolicy,
    pub device: DevicePolicy,
    /// How often the server re-escalates alerts that found no live channel.
    pub escalation_retry_ms: u64,
    /// Simulated clinician acknowledges each alert this long after it is stored.
    pub ack_after_ms: Option<u64>,
    pub cloud_sync: bool,
    pub patients: Vec<PatientConfig>,
    pub anomalies: Vec<AnomalyConfig>,
    pub internet: ChannelModel,
    pub gsm: ChannelModel,
    /// Bedside-to-server link; the internet model is used when absent.
    pub lan: Option<ChannelModel>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            duration_ms: 60 * 60 * 1000,
            tick_period_ms: 500,
            sample_period_ms: 1000,
            drain_ms: 60 * 60 * 1000,
            alert_policy: AlertPolicy::Both,
            device: DevicePolicy::default(),
            escalation_retry_ms: 30_000,
            ack_after_ms: None,
            cloud_sync: false,
            patients: Vec::new(),
            anomalies: Vec::new(),
            internet: ChannelModel::internet_default(),
            gsm: ChannelModel::gsm_default(),
            lan: None,
        }
    }
}

impl ScenarioConfig {
    pub fn link(&self) -> &ChannelModel {
        self.lan.as_ref().unwrap_or(&self.internet)
    }

    /// Cross-field checks that do not depend on line positions.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.duration_ms == 0 {
            return Err(err(0, "scenario.duration", "must be positive"));
        }
        if self.tick_period_ms == 0 {
            return Err(err(0, "scenario.tick_period", "must be positive"));
        }
        if self.sample_period_ms == 0 {
            return Err(err(0, "scenario.sample_period", "must be positive"));
        }
        if self.escalation_retry_ms == 0 {
            return Err(err(0, "scenario.escalation_retry", "must be positive"));
        }
        if self.device.batch_size == 0 {
            return Err(err(0, "scenario.batch_size", "must be positive"));
        }
        if self.patients.is_empty() {
            return Err(err(0, "patient", "at least one [patient.N] section is required"));
        }
        let mut devices = BTreeMap::new();
        let mut ids = BTreeMap::new();
        for p in &self.patients {
            if ids.insert(&p.patient_id, ()).is_some() {
                return Err(err(0, "patient.id", format!("duplicate patient `{}`", p.patient_id)));
            }
            if devices.insert(&p.device_id, ()).is_some() {
                return Err(err(0, "patient.device", format!("device `{}` assigned twice", p.device_id)));
            }
        }
        let horizon = self.duration_ms + self.drain_ms;
        for (name, model) in [
            ("channel.internet", Some(&self.internet)),
            ("channel.gsm", Some(&self.gsm)),
            ("channel.lan", self.lan.as_ref()),
        ] {
            if let Some(last) = model.and_then(|m| m.outages().last()) {
                if last.to_ms > horizon {
                    return Err(err(0, format!("{name}.outages"), "outage extends past the end of the run"));
                }
            }
        }
        for a in &self.anomalies {
            if a.repeat > 1 && a.every_ms < a.spec.duration_ms {
                return Err(err(0, "anomaly.every", "repeats must not overlap"));
            }
            if a.last_end_ms() > self.duration_ms {
                return Err(err(0, "anomaly", "anomaly window extends past the scenario duration"));
            }
        }
        Ok(())
    }
}

pub fn parse_duration(s: &str) -> Option<u64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    // compound forms such as 5h30m
    let mut total: u64 = 0;
    let mut rest = s;
    while !rest.is_empty() {
        let digits = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        if digits == 0 {
            return None;
        }
        let n: u64 = rest[..digits].parse().ok()?;
        rest = &rest[digits..];
        let unit_len = rest.find(|c: char| c.is_ascii_digit()).unwrap_or(rest.len());
        let scale = match &rest[..unit_len] {
            "" | "ms" => 1,
            "s" => 1000,
            "m" => 60_000,
            "h" => 3_600_000,
            _ => return None,
        };
        total = total.checked_add(n.checked_mul(scale)?)?;
        rest = &rest[unit_len..];
    }
    Some(total)
}

fn parse_outages(s: &str) -> Option<Vec<Outage>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let (a, b) = part.split_once('-')?;
            Some(Outage::new(parse_duration(a)?, parse_duration(b)?))
        })
        .collect()
}

/// One `key = value` line with its position.
struct Field<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Field<'_> {
    fn name(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }

    fn fail(&self, message: impl Into<String>) -> ConfigError {
        err(self.line, self.name(), message)
    }

    fn duration(&self) -> Result<u64, ConfigError> {
        parse_duration(self.value).ok_or_else(|| self.fail(format!("invalid duration `{}`", self.value)))
    }

    fn uint<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value
            .parse()
            .map_err(|_| self.fail(format!("expected a non-negative integer, got `{}`", self.value)))
    }

    fn float(&self) -> Result<f64, ConfigError> {
        match self.value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.fail(format!("expected a number, got `{}`", self.value))),
        }
    }

    fn boolean(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            v => Err(self.fail(format!("expected true or false, got `{v}`"))),
        }
    }

    fn id(&self) -> Result<String, ConfigError> {
        if comawatch_core::wire::valid_id(self.value) {
            Ok(self.value.to_owned())
        } else {
            Err(self.fail(format!("invalid identifier `{}`", self.value)))
        }
    }
}

#[derive(Default)]
struct ChannelDraft {
    loss: Option<f64>,
    latency: Option<u64>,
    jitter: Option<u64>,
    outages: Vec<Outage>,
    line: usize,
}

impl ChannelDraft {
    fn build(self, name: &str, kind: ChannelKind, base: &ChannelModel) -> Result<ChannelModel, ConfigError> {
        ChannelModel::new(
            kind,
            self.loss.unwrap_or(base.loss_prob),
            self.latency.unwrap_or(base.latency_mean_ms),
            self.jitter.unwrap_or(base.latency_jitter_ms),
            self.outages,
        )
        .map_err(|e| err(self.line, format!("channel.{name}"), e.to_string()))
    }
}

struct AnomalyDraft {
    line: usize,
    patient: Option<(usize, String)>,
    kind: Option<SensorKind>,
    start: Option<u64>,
    duration: Option<u64>,
    shape: Option<String>,
    delta: Option<f64>,
    count: Option<u32>,
    repeat: u32,
    every: Option<u64>,
}

/// Parses a scenario file. Unknown sections or keys are errors.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig::default();
    let mut patients: BTreeMap<u32, (usize, PatientConfig)> = BTreeMap::new();
    let mut anomalies: BTreeMap<u32, AnomalyDraft> = BTreeMap::new();
    let mut channels: BTreeMap<&str, ChannelDraft> = BTreeMap::new();
    let mut section: Option<&str> = None;
    let mut seen_keys: BTreeMap<(String, String), usize> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, "", "unterminated section header"))?
                .trim();
            open_section(name, line, &mut patients, &mut anomalies, &mut channels)?;
            section = Some(name);
            continue;
        }
        let Some(sec) = section else {
            return Err(err(line, "", "key outside of any section"));
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, "", format!("expected `key = value`, got `{content}`")))?;
        let field = Field {
            line,
            section: sec,
            key: key.trim(),
            value: value.trim(),
        };
        if let Some(first) = seen_keys.insert((sec.to_owned(), field.key.to_owned()), line) {
            return Err(field.fail(format!("duplicate key (first set on line {first})")));
        }
        if sec == "scenario" {
            scenario_field(&mut cfg, &field)?;
        } else if let Some(n) = sec.strip_prefix("patient.") {
            let n: u32 = n.parse().expect("checked when the section opened");
            patient_field(&mut patients.get_mut(&n).expect("opened").1, &field)?;
        } else if let Some(n) = sec.strip_prefix("anomaly.") {
            let n: u32 = n.parse().expect("checked when the section opened");
            anomaly_field(anomalies.get_mut(&n).expect("opened"), &field)?;
        } else if let Some(name) = sec.strip_prefix("channel.") {
            channel_field(channels.get_mut(name).expect("opened"), &field)?;
        }
    }

    cfg.patients = patients.into_values().map(|(_, p)| p).collect();
    for (n, draft) in anomalies {
        cfg.anomalies.push(finish_anomaly(n, draft, &cfg.patients)?);
    }
    for (name, draft) in channels {
        match name {
            "internet" => cfg.internet = draft.build(name, ChannelKind::Internet, &ChannelModel::internet_default())?,
            "gsm" => cfg.gsm = draft.build(name, ChannelKind::GsmSms, &ChannelModel::gsm_default())?,
            // the bedside link is Wi-Fi to the local server; internet kind is the closest match
            "lan" => cfg.lan = Some(draft.build(name, ChannelKind::Internet, &ChannelModel::internet_default())?),
            _ => unreachable!("rejected when the section opened"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_section<'a>(
    name: &'a str,
    line: usize,
    patients: &mut BTreeMap<u32, (usize, PatientConfig)>,
    anomalies: &mut BTreeMap<u32, AnomalyDraft>,
    channels: &mut BTreeMap<&'a str, ChannelDraft>,
) -> Result<(), ConfigError> {
    let numbered = |prefix: &str| -> Result<Option<u32>, ConfigError> {
        match name.strip_prefix(prefix) {
            None => Ok(None),
            Some(n) => n
                .parse()
                .map(Some)
                .map_err(|_| err(line, name, "section index must be a non-negative integer")),
        }
    };
    let duplicate = || err(line, name, "section appears twice");
    if name == "scenario" {
        return Ok(());
    }
    if let Some(n) = numbered("patient.")? {
        let p = PatientConfig {
            patient_id: format!("p{n}"),
            device_id: format!("dev{n}"),
            display_name: format!("Patient {n}"),
            profile: PatientProfile::default(),
            thresholds: Thresholds::default(),
        };
        return match patients.insert(n, (line, p)) {
            None => Ok(()),
            Some(_) => Err(duplicate()),
        };
    }
    if let Some(n) = numbered("anomaly.")? {
        let draft = AnomalyDraft {
            line,
            patient: None,
            kind: None,
            start: None,
            duration: None,
            shape: None,
            delta: None,
            count: None,
            repeat: 1,
            every: None,
        };
        return match anomalies.insert(n, draft) {
            None => Ok(()),
            Some(_) => Err(duplicate()),
        };
    }
    if let Some(ch) = name.strip_prefix("channel.") {
        if !matches!(ch, "internet" | "gsm" | "lan") {
            return Err(err(line, name, "unknown channel (expected internet, gsm or lan)"));
        }
        let draft = ChannelDraft {
            line,
            ..ChannelDraft::default()
        };
        return match channels.insert(ch, draft) {
            None => Ok(()),
            Some(_) => Err(duplicate()),
        };
    }
    Err(err(line, name, "unknown section"))
}

fn scenario_field(cfg: &mut ScenarioConfig, f: &Field<'_>) -> Result<(), ConfigError> {
    match f.key {
        "seed" => cfg.seed = f.uint()?,
        "duration" => cfg.duration_ms = f.duration()?,
        "tick_period" => cfg.tick_period_ms = f.duration()?,
        "sample_period" => cfg.sample_period_ms = f.duration()?,
        "drain" => cfg.drain_ms = f.duration()?,
        "alert_policy" => {
            cfg.alert_policy = AlertPolicy::parse(f.value)
                .ok_or_else(|| f.fail("expected `both` or `fallback_only`"))?
        }
        "max_retries" => cfg.device.max_retries = f.uint()?,
        "base_backoff" => cfg.device.base_backoff_ms = f.duration()?,
        "batch_size" => cfg.device.batch_size = f.uint()?,
        "ack_timeout" => cfg.device.ack_timeout_ms = f.duration()?,
        "clear_hold" => cfg.device.clear_hold_ms = f.duration()?,
        "device_sms" => cfg.device.device_sms = f.boolean()?,
        "escalation_retry" => cfg.escalation_retry_ms = f.duration()?,
        "ack_after" => {
            cfg.ack_after_ms = match f.value {
                "none" => None,
                _ => Some(f.duration()?),
            }
        }
        "cloud_sync" => cfg.cloud_sync = f.boolean()?,
        _ => return Err(f.fail("unknown key")),
    }
    Ok(())
}

fn patient_field(p: &mut PatientConfig, f: &Field<'_>) -> Result<(), ConfigError> {
    let th = &mut p.thresholds;
    let prof = &mut p.profile;
    let jit: &mut Jitter = &mut prof.jitter;
    match f.key {
        "id" => p.patient_id = f.id()?,
        "device" => p.device_id = f.id()?,
        "name" => p.display_name = f.value.to_owned(),
        "baseline_bpm" => prof.baseline_bpm = f.float()?,
        "baseline_temp" => prof.baseline_temp_c = f.float()?,
        "baseline_sys" => prof.baseline_sys = f.float()?,
        "baseline_dia" => prof.baseline_dia = f.float()?,
        "jitter_bpm" => jit.bpm = f.float()?,
        "jitter_temp" => jit.temp = f.float()?,
        "jitter_sys" => jit.sys = f.float()?,
        "jitter_dia" => jit.dia = f.float()?,
        "blink_rate" => prof.blink_rate_per_hour = f.float()?,
        "motion_rate" => prof.motion_rate_per_hour = f.float()?,
        "hr_min" => th.heart_rate.min = f.float()?,
        "hr_max" => th.heart_rate.max = f.float()?,
        "temp_min" => th.temperature.min = f.float()?,
        "temp_max" => th.temperature.max = f.float()?,
        "sys_min" => th.systolic.min = f.float()?,
        "sys_max" => th.systolic.max = f.float()?,
        "dia_min" => th.diastolic.min = f.float()?,
        "dia_max" => th.diastolic.max = f.float()?,
        "debounce" => th.debounce_ms = f.duration()?,
        _ => return Err(f.fail("unknown key")),
    }
    // checked per key so the error points at the offending line
    let profile_key = f.key.starts_with("baseline") || f.key.starts_with("jitter") || f.key.ends_with("_rate");
    if profile_key {
        prof.validate().map_err(|e| f.fail(e.to_string()))?;
    }
    Ok(())
}

fn anomaly_field(a: &mut AnomalyDraft, f: &Field<'_>) -> Result<(), ConfigError> {
    match f.key {
        "patient" => a.patient = Some((f.line, f.value.to_owned())),
        "kind" => {
            a.kind = Some(
                SensorKind::from_code(f.value)
                    .ok_or_else(|| f.fail("expected one of HR, TEMP, BP, BLINK, MOTION"))?,
            )
        }
        "start" => a.start = Some(f.duration()?),
        "duration" => a.duration = Some(f.duration()?),
        "shape" => {
            if !matches!(f.value, "step" | "ramp" | "burst") {
                return Err(f.fail("expected step, ramp or burst"));
            }
            a.shape = Some(f.value.to_owned())
        }
        "delta" => a.delta = Some(f.float()?),
        "count" => a.count = Some(f.uint()?),
        "repeat" => {
            a.repeat = f.uint()?;
            if a.repeat == 0 {
                return Err(f.fail("must be at least 1"));
            }
        }
        "every" => a.every = Some(f.duration()?),
        _ => return Err(f.fail("unknown key")),
    }
    Ok(())
}

fn channel_field(c: &mut ChannelDraft, f: &Field<'_>) -> Result<(), ConfigError> {
    match f.key {
        "loss" => c.loss = Some(f.float()?),
        "latency" => c.latency = Some(f.duration()?),
        "jitter" => c.jitter = Some(f.duration()?),
        "outages" => {
            c.outages =
                parse_outages(f.value).ok_or_else(|| f.fail("expected a list like `1h-2h, 3h-3h30m`"))?
        }
        _ => return Err(f.fail("unknown key")),
    }
    Ok(())
}

fn finish_anomaly(n: u32, d: AnomalyDraft, patients: &[PatientConfig]) -> Result<AnomalyConfig, ConfigError> {
    let section = format!("anomaly.{n}");
    let missing = |key: &str| err(d.line, format!("{section}.{key}"), "required key is missing");
    let (pline, pname) = d.patient.ok_or_else(|| missing("patient"))?;
    let patient = patients
        .iter()
        .position(|p| p.patient_id == pname)
        .or_else(|| {
            // also accept the numeric section label
            let label = format!("p{pname}");
            patients.iter().position(|p| p.patient_id == label)
        })
        .ok_or_else(|| err(pline, format!("{section}.patient"), format!("unknown patient `{pname}`")))?;
    let kind = d.kind.ok_or_else(|| missing("kind"))?;
    let shape = match d.shape.as_deref() {
        Some("burst") => AnomalyShape::Burst(d.count.ok_or_else(|| missing("count"))?),
        Some("ramp") => AnomalyShape::Ramp(d.delta.ok_or_else(|| missing("delta"))?),
        Some(_) => AnomalyShape::Step(d.delta.ok_or_else(|| missing("delta"))?),
        None if kind.is_digital() => AnomalyShape::Burst(d.count.ok_or_else(|| missing("count"))?),
        None => AnomalyShape::Step(d.delta.ok_or_else(|| missing("delta"))?),
    };
    let spec = AnomalySpec {
        kind,
        start_ms: d.start.ok_or_else(|| missing("start"))?,
        duration_ms: d.duration.ok_or_else(|| missing("duration"))?,
        shape,
    };
    spec.validate().map_err(|e| err(d.line, section.clone(), e.to_string()))?;
    if d.repeat > 1 && d.every.is_none() {
        return Err(missing("every"));
    }
    Ok(AnomalyConfig {
        patient,
        spec,
        repeat: d.repeat,
        every_ms: d.every.unwrap_or(0),
    })
}
