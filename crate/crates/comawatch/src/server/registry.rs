//! Patients, device assignments and user accounts.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use comawatch_core::{Range, Thresholds};
use serde::{Deserialize, Serialize};

use super::auth::UserAccount;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub display_name: String,
    pub assigned_device_id: String,
    #[serde(with = "thresholds_serde")]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub patients: BTreeMap<String, PatientRecord>,
    /// Keyed by username.
    pub users: BTreeMap<String, UserAccount>,
}

impl Registry {
    pub fn patient_for_device(&self, device_id: &str) -> Option<&PatientRecord> {
        self.patients
            .values()
            .find(|p| p.assigned_device_id == device_id)
    }

    pub fn load(path: &Path) -> io::Result<Registry> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(io::Error::other),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Registry::default()),
            Err(e) => Err(e),
        }
    }

    /// Write-then-rename so a crash never leaves a half-written registry.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)
    }
}

/// Serde view of [`Thresholds`], whose home crate has no serde.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsDto {
    pub hr_min: f64,
    pub hr_max: f64,
    pub temp_min: f64,
    pub temp_max: f64,
    pub sys_min: f64,
    pub sys_max: f64,
    pub dia_min: f64,
    pub dia_max: f64,
    pub debounce_ms: u64,
}

impl From<Thresholds> for ThresholdsDto {
    fn from(t: Thresholds) -> Self {
        ThresholdsDto {
            hr_min: t.heart_rate.min,
            hr_max: t.heart_rate.max,
            temp_min: t.temperature.min,
            temp_max: t.temperature.max,
            sys_min: t.systolic.min,
            sys_max: t.systolic.max,
            dia_min: t.diastolic.min,
            dia_max: t.diastolic.max,
            debounce_ms: t.debounce_ms,
        }
    }
}

impl From<ThresholdsDto> for Thresholds {
    fn from(d: ThresholdsDto) -> Self {
        Thresholds {
            heart_rate: Range::new(d.hr_min, d.hr_max),
            temperature: Range::new(d.temp_min, d.temp_max),
            systolic: Range::new(d.sys_min, d.sys_max),
            diastolic: Range::new(d.dia_min, d.dia_max),
            debounce_ms: d.debounce_ms,
        }
    }
}

mod thresholds_serde {
    use super::ThresholdsDto;
    use comawatch_core::Thresholds;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Thresholds, s: S) -> Result<S::Ok, S::Error> {
        ThresholdsDto::from(*t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Thresholds, D::Error> {
        ThresholdsDto::deserialize(d).map(Thresholds::from)
    }
}
