//! Seeded generators standing in for the bedside sensors, plus declarative
//! anomaly injection.
//!
//! Analog kinds sample `baseline * (1 + N(0, jitter))` on a fixed period.
//! Digital kinds (PIR blink and motion) emit rising edges from a Poisson
//! process at the profile's hourly rate.

use alloc::vec::Vec;

use thiserror::Error;

use crate::model::{Measurement, Reading, SensorKind, Thresholds};
use crate::rng::{self, SimRng};
use rand_core::SeedableRng;

const MS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensorError {
    #[error("invalid patient profile: {0}")]
    InvalidProfile(&'static str),
    #[error("sample period must be positive for analog kinds")]
    InvalidPeriod,
    #[error("invalid anomaly: {0}")]
    InvalidAnomaly(&'static str),
    #[error("anomaly shape does not apply to {0:?}")]
    ShapeMismatch(SensorKind),
}

/// Relative standard deviation per analog channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub bpm: f64,
    pub temp: f64,
    pub sys: f64,
    pub dia: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            bpm: 0.02,
            temp: 0.005,
            sys: 0.02,
            dia: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientProfile {
    pub baseline_bpm: f64,
    pub baseline_temp_c: f64,
    pub baseline_sys: f64,
    pub baseline_dia: f64,
    pub jitter: Jitter,
    pub blink_rate_per_hour: f64,
    pub motion_rate_per_hour: f64,
}

impl Default for PatientProfile {
    fn default() -> Self {
        PatientProfile {
            baseline_bpm: 72.0,
            baseline_temp_c: 36.8,
            baseline_sys: 120.0,
            baseline_dia: 80.0,
            jitter: Jitter::default(),
            blink_rate_per_hour: 0.0,
            motion_rate_per_hour: 0.0,
        }
    }
}

impl PatientProfile {
    /// Intrinsic sanity of the profile.
    pub fn validate(&self) -> Result<(), SensorError> {
        let finite = [
            self.baseline_bpm,
            self.baseline_temp_c,
            self.baseline_sys,
            self.baseline_dia,
            self.jitter.bpm,
            self.jitter.temp,
            self.jitter.sys,
            self.jitter.dia,
            self.blink_rate_per_hour,
            self.motion_rate_per_hour,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(SensorError::InvalidProfile("non-finite parameter"));
        }
        if self.baseline_bpm <= 0.0 || self.baseline_bpm >= crate::model::BPM_CEILING {
            return Err(SensorError::InvalidProfile("baseline_bpm outside (0, 400)"));
        }
        if self.baseline_dia <= 0.0 || self.baseline_sys <= self.baseline_dia {
            return Err(SensorError::InvalidProfile(
                "baseline pressure needs systolic > diastolic > 0",
            ));
        }
        let j = self.jitter;
        if [j.bpm, j.temp, j.sys, j.dia].iter().any(|&v| v < 0.0) {
            return Err(SensorError::InvalidProfile("negative jitter"));
        }
        if self.blink_rate_per_hour < 0.0 || self.motion_rate_per_hour < 0.0 {
            return Err(SensorError::InvalidProfile("negative event rate"));
        }
        Ok(())
    }

    /// Baselines must sit inside the normal ranges so an unperturbed
    /// patient raises nothing.
    pub fn validate_against(&self, th: &Thresholds) -> Result<(), SensorError> {
        self.validate()?;
        if !th.heart_rate.contains(self.baseline_bpm) {
            return Err(SensorError::InvalidProfile("baseline_bpm outside thresholds"));
        }
        if !th.temperature.contains(self.baseline_temp_c) {
            return Err(SensorError::InvalidProfile("baseline_temp_c outside thresholds"));
        }
        if !th.systolic.contains(self.baseline_sys) {
            return Err(SensorError::InvalidProfile("baseline_sys outside thresholds"));
        }
        if !th.diastolic.contains(self.baseline_dia) {
            return Err(SensorError::InvalidProfile("baseline_dia outside thresholds"));
        }
        Ok(())
    }

    fn rate_per_hour(&self, kind: SensorKind) -> f64 {
        match kind {
            SensorKind::EyeBlink => self.blink_rate_per_hour,
            SensorKind::BodyMotion => self.motion_rate_per_hour,
            _ => 0.0,
        }
    }
}

/// Lazy, pull-based stream of readings for one sensor kind.
#[derive(Debug, Clone)]
pub struct SensorStream {
    profile: PatientProfile,
    kind: SensorKind,
    period_ms: u64,
    duration_ms: u64,
    rng: SimRng,
    // analog: next sample time; digital: continuous Poisson clock in ms
    next_t: u64,
    poisson_t: f64,
}

impl SensorStream {
    pub fn new(
        profile: PatientProfile,
        kind: SensorKind,
        sample_period_ms: u64,
        duration_ms: u64,
        seed: u64,
    ) -> Result<SensorStream, SensorError> {
        profile.validate()?;
        if !kind.is_digital() && sample_period_ms == 0 {
            return Err(SensorError::InvalidPeriod);
        }
        Ok(SensorStream {
            profile,
            kind,
            period_ms: sample_period_ms,
            duration_ms,
            rng: SimRng::seed_from_u64(rng::derive_seed(seed, kind.index() as u64)),
            next_t: 0,
            poisson_t: 0.0,
        })
    }

    fn scaled(&mut self, baseline: f64, jitter: f64) -> f64 {
        baseline * (1.0 + jitter * rng::standard_normal(&mut self.rng))
    }

    fn next_analog(&mut self) -> Option<Reading> {
        if self.next_t >= self.duration_ms {
            return None;
        }
        let t_ms = self.next_t;
        self.next_t += self.period_ms;
        let p = self.profile;
        let value = match self.kind {
            SensorKind::HeartRate => Measurement::Bpm(self.scaled(p.baseline_bpm, p.jitter.bpm)),
            SensorKind::BodyTemperature => {
                Measurement::Celsius(self.scaled(p.baseline_temp_c, p.jitter.temp))
            }
            SensorKind::BloodPressure => {
                let systolic = self.scaled(p.baseline_sys, p.jitter.sys);
                let diastolic = self.scaled(p.baseline_dia, p.jitter.dia);
                Measurement::Pressure {
                    systolic,
                    diastolic,
                }
            }
            SensorKind::EyeBlink | SensorKind::BodyMotion => unreachable!(),
        };
        Some(Reading {
            t_ms,
            kind: self.kind,
            value,
        })
    }

    fn next_digital(&mut self) -> Option<Reading> {
        let rate = self.profile.rate_per_hour(self.kind);
        if rate <= 0.0 {
            return None;
        }
        self.poisson_t += rng::exponential(&mut self.rng, rate / MS_PER_HOUR);
        if self.poisson_t >= self.duration_ms as f64 {
            // park the clock so the stream stays exhausted
            self.poisson_t = f64::INFINITY;
            return None;
        }
        Some(Reading {
            t_ms: self.poisson_t as u64,
            kind: self.kind,
            value: Measurement::DigitalEdge { rising: true },
        })
    }
}

impl Iterator for SensorStream {
    type Item = Reading;

    fn next(&mut self) -> Option<Reading> {
        if self.kind.is_digital() {
            self.next_digital()
        } else {
            self.next_analog()
        }
    }
}

/// Eager form of [`SensorStream`]; identical contents for identical inputs.
pub fn generate_stream(
    profile: &PatientProfile,
    kind: SensorKind,
    sample_period_ms: u64,
    duration_ms: u64,
    seed: u64,
) -> Result<Vec<Reading>, SensorError> {
    Ok(SensorStream::new(*profile, kind, sample_period_ms, duration_ms, seed)?.collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnomalyShape {
    /// Adds `delta` to every in-window value.
    Step(f64),
    /// Adds `delta * (t - start) / duration`.
    Ramp(f64),
    /// Inserts evenly spaced rising edges.
    Burst(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    pub kind: SensorKind,
    pub start_ms: u64,
    pub duration_ms: u64,
    pub shape: AnomalyShape,
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<(), SensorError> {
        if self.duration_ms == 0 {
            return Err(SensorError::InvalidAnomaly("duration_ms must be positive"));
        }
        match self.shape {
            AnomalyShape::Burst(0) => Err(SensorError::InvalidAnomaly("burst count must be >= 1")),
            AnomalyShape::Burst(_) if !self.kind.is_digital() => {
                Err(SensorError::ShapeMismatch(self.kind))
            }
            AnomalyShape::Step(d) | AnomalyShape::Ramp(d) if !d.is_finite() => {
                Err(SensorError::InvalidAnomaly("delta must be finite"))
            }
            AnomalyShape::Step(_) | AnomalyShape::Ramp(_) if self.kind.is_digital() => {
                Err(SensorError::ShapeMismatch(self.kind))
            }
            _ => Ok(()),
        }
    }

    pub fn end_ms(&self) -> u64 {
        self.start_ms.saturating_add(self.duration_ms)
    }

    /// Window is `[start, start + duration)`.
    pub fn covers(&self, t_ms: u64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms()
    }
}

fn shift(value: Measurement, delta: f64) -> Measurement {
    match value {
        Measurement::Bpm(v) => Measurement::Bpm(v + delta),
        Measurement::Celsius(v) => Measurement::Celsius(v + delta),
        Measurement::Pressure {
            systolic,
            diastolic,
        } => Measurement::Pressure {
            systolic: systolic + delta,
            diastolic: diastolic + delta,
        },
        edge @ Measurement::DigitalEdge { .. } => edge,
    }
}

/// Perturbs one kind's readings inside the anomaly window. Readings of other
/// kinds and readings outside the window pass through untouched.
pub fn apply_anomaly(stream: Vec<Reading>, spec: &AnomalySpec) -> Result<Vec<Reading>, SensorError> {
    spec.validate()?;
    match spec.shape {
        AnomalyShape::Step(delta) => Ok(stream
            .into_iter()
            .map(|mut r| {
                if r.kind == spec.kind && spec.covers(r.t_ms) {
                    r.value = shift(r.value, delta);
                }
                r
            })
            .collect()),
        AnomalyShape::Ramp(delta) => Ok(stream
            .into_iter()
            .map(|mut r| {
                if r.kind == spec.kind && spec.covers(r.t_ms) {
                    let frac = (r.t_ms - spec.start_ms) as f64 / spec.duration_ms as f64;
                    r.value = shift(r.value, delta * frac);
                }
                r
            })
            .collect()),
        AnomalyShape::Burst(count) => {
            let spacing = spec.duration_ms / count as u64;
            let mut out = stream;
            out.reserve(count as usize);
            for i in 0..count as u64 {
                let t_ms = spec.start_ms + i * spacing;
                let at = out.partition_point(|r| r.t_ms <= t_ms);
                out.insert(
                    at,
                    Reading {
                        t_ms,
                        kind: spec.kind,
                        value: Measurement::DigitalEdge { rising: true },
                    },
                );
            }
            Ok(out)
        }
    }
}
