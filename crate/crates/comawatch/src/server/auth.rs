//! Accounts, sessions and the role matrix.

use std::collections::{HashMap, VecDeque};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOCKOUT_FAILURES: usize = 5;
pub const LOCKOUT_WINDOW_MS: u64 = 15 * 60 * 1000;
pub const DEFAULT_SESSION_TTL_MS: u64 = 8 * 60 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    Doctor,
    Nurse,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_lowercase().as_str() {
            "admin" => Some(Role::Admin),
            "doctor" => Some(Role::Doctor),
            "nurse" => Some(Role::Nurse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    ReadPatients,
    ReadVitals,
    ReadAlerts,
    AcknowledgeAlert,
    EditThresholds,
    ManagePatients,
    ManageUsers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("forbidden")]
pub struct Forbidden;

pub fn authorize(role: Role, action: Action) -> Result<(), Forbidden> {
    use Action::*;
    let allowed = match role {
        Role::Admin => true,
        Role::Doctor => matches!(
            action,
            ReadPatients | ReadVitals | ReadAlerts | AcknowledgeAlert | EditThresholds
        ),
        Role::Nurse => matches!(action, ReadPatients | ReadVitals | ReadAlerts | AcknowledgeAlert),
    };
    if allowed {
        Ok(())
    } else {
        Err(Forbidden)
    }
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            m_cost_kib: 19_456,
            t_cost: 2,
            p_cost: 1,
        }
    }
}

impl HashParams {
    /// Cheap parameters for tests.
    pub fn insecure_fast() -> HashParams {
        HashParams {
            m_cost_kib: 64,
            t_cost: 1,
            p_cost: 1,
        }
    }

    fn hasher(&self) -> Argon2<'static> {
        let params = Params::new(self.m_cost_kib, self.t_cost, self.p_cost, None)
            .expect("argon2 parameters in range");
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
    }
}

#[derive(Debug, Error)]
pub enum HashError {
    #[error("password hashing failed: {0}")]
    Hash(String),
}

/// PHC-format salted hash of `secret`.
pub fn hash_secret(secret: &str, params: &HashParams) -> Result<String, HashError> {
    let salt_bytes: [u8; 16] = rand::random();
    let salt = SaltString::encode_b64(&salt_bytes).map_err(|e| HashError::Hash(e.to_string()))?;
    params
        .hasher()
        .hash_password(secret.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| HashError::Hash(e.to_string()))
}

/// Constant-time verification; parameters come from the stored hash.
pub fn verify_secret(secret: &str, stored: &str) -> bool {
    match PasswordHash::new(stored) {
        Ok(parsed) => Argon2::default()
            .verify_password(secret.as_bytes(), &parsed)
            .is_ok(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: String,
    pub username: String,
    pub secret_hash: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub user_id: String,
    pub role: Role,
    pub token: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("invalid credentials")]
    Invalid,
    #[error("account locked")]
    Locked,
    #[error("session expired or unknown")]
    NoSession,
}

#[derive(Debug, Default)]
struct FailureWindow {
    recent: VecDeque<u64>,
    locked_until: Option<u64>,
}

fn random_token() -> String {
    let bytes: [u8; 32] = rand::random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Session table plus per-username failure tracking.
#[derive(Debug)]
pub struct Authenticator {
    sessions: HashMap<String, Session>,
    failures: HashMap<String, FailureWindow>,
    ttl_ms: u64,
    decoy_hash: String,
}

impl Authenticator {
    pub fn new(ttl_ms: u64, params: &HashParams) -> Authenticator {
        Authenticator {
            sessions: HashMap::new(),
            failures: HashMap::new(),
            ttl_ms,
            decoy_hash: hash_secret("decoy", params).expect("decoy hash"),
        }
    }

    /// `account` is the looked-up user, if any. Unknown users still pay for
    /// a hash verification so the two failure modes look alike.
    pub fn authenticate(
        &mut self,
        username: &str,
        account: Option<&UserAccount>,
        secret: &str,
        now_ms: u64,
    ) -> Result<Session, AuthError> {
        let window = self.failures.entry(username.to_owned()).or_default();
        if let Some(until) = window.locked_until {
            if now_ms < until {
                return Err(AuthError::Locked);
            }
            window.locked_until = None;
            window.recent.clear();
        }
        let ok = match account {
            Some(a) => verify_secret(secret, &a.secret_hash),
            None => {
                let _ = verify_secret(secret, &self.decoy_hash);
                false
            }
        };
        let Some(account) = account.filter(|_| ok) else {
            window.recent.push_back(now_ms);
            while window
                .recent
                .front()
                .is_some_and(|&t| now_ms.saturating_sub(t) >= LOCKOUT_WINDOW_MS)
            {
                window.recent.pop_front();
            }
            if window.recent.len() >= LOCKOUT_FAILURES {
                window.locked_until = Some(now_ms + LOCKOUT_WINDOW_MS);
            }
            return Err(AuthError::Invalid);
        };
        window.recent.clear();
        let session = Session {
            user_id: account.user_id.clone(),
            role: account.role,
            token: random_token(),
            expires_at_ms: now_ms.saturating_add(self.ttl_ms),
        };
        self.sessions.insert(session.token.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&mut self, token: &str, now_ms: u64) -> Result<Session, AuthError> {
        match self.sessions.get(token) {
            Some(s) if now_ms < s.expires_at_ms => Ok(s.clone()),
            Some(_) => {
                self.sessions.remove(token);
                Err(AuthError::NoSession)
            }
            None => Err(AuthError::NoSession),
        }
    }

    pub fn logout(&mut self, token: &str) {
        self.sessions.remove(token);
    }
}
