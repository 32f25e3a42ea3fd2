//! Password hashing and in-memory bearer sessions.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use argon2::password_hash::phc::PasswordHash;
use argon2::password_hash::{PasswordHasher, PasswordVerifier};
use argon2::Argon2;
use prelabel_core::store::{Store, StoreError};
use serde::Serialize;

pub fn hash_password(password: &str) -> String {
    Argon2::default().hash_password(password.as_bytes()).expect("argon2 with default params").to_string()
}

pub fn verify_password(password: &str, phc: &str) -> bool {
    PasswordHash::new(phc).is_ok_and(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
}

/// Creates the default account when the store has no users yet.
pub fn ensure_default_admin(store: &Store, user: &str, password: &str) -> Result<bool, StoreError> {
    if store.user_count()? > 0 {
        return Ok(false);
    }
    store.create_user(user, &hash_password(password))?;
    log::info!("created default user {user:?}");
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub token: String,
    pub username: String,
    /// Unix seconds.
    pub expires_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// 256 random bits from the OS-seeded thread generator, hex encoded.
fn new_token() -> String {
    let mut bytes = [0u8; 32];
    rand::fill(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct Sessions {
    ttl: Duration,
    map: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, map: Mutex::new(HashMap::new()) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Session>> {
        self.map.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn create(&self, username: &str) -> Session {
        let s = Session { token: new_token(), username: username.into(), expires_at: unix_now() + self.ttl.as_secs() };
        let mut map = self.lock();
        let now = unix_now();
        map.retain(|_, v| v.expires_at > now);
        map.insert(s.token.clone(), s.clone());
        s
    }

    /// The live session for `token`; expired ones are dropped.
    pub fn resolve(&self, token: &str) -> Option<Session> {
        let mut map = self.lock();
        match map.get(token) {
            Some(s) if s.expires_at > unix_now() => Some(s.clone()),
            Some(_) => {
                map.remove(token);
                None
            }
            None => None,
        }
    }

    pub fn revoke(&self, token: &str) -> bool {
        self.lock().remove(token).is_some()
    }
}
