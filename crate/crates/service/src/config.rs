//! Service settings, read from `PRELABEL_*` environment variables.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use prelabel_core::providers::mock::DetectorNoise;
use prelabel_core::providers::{ProviderConfig, ProviderKind};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{var}: {message}")]
pub struct ConfigError {
    pub var: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub provider: ProviderConfig,
    pub session_ttl: Duration,
    /// Built UI assets served for unmatched paths, when set.
    pub static_dir: Option<PathBuf>,
    /// Account created on first start when no user exists.
    pub admin_user: String,
    pub admin_password: String,
    pub allow_registration: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8000)),
            data_dir: PathBuf::from("prelabel-data"),
            provider: ProviderConfig::default(),
            session_ttl: Duration::from_secs(12 * 3600),
            static_dir: None,
            admin_user: "admin".into(),
            admin_password: "admin".into(),
            allow_registration: false,
        }
    }
}

/// Every variable the service reads.
pub const ENV_VARS: [&str; 12] = [
    "PRELABEL_BIND",
    "PRELABEL_DATA_DIR",
    "PRELABEL_PROVIDER",
    "PRELABEL_SIDECAR_URL",
    "PRELABEL_MODEL_ID",
    "PRELABEL_SEED",
    "PRELABEL_MOCK_NOISE",
    "PRELABEL_SESSION_TTL_SECS",
    "PRELABEL_STATIC_DIR",
    "PRELABEL_ADMIN_USER",
    "PRELABEL_ADMIN_PASSWORD",
    "PRELABEL_ALLOW_REGISTRATION",
];

fn parse<T: std::str::FromStr>(var: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError { var: var.into(), message: format!("{raw:?}: {e}") })
}

fn parse_range(var: &str, raw: &str) -> Result<(usize, usize), ConfigError> {
    match raw.split_once("..") {
        Some((lo, hi)) => Ok((parse(var, lo)?, parse(var, hi)?)),
        None => {
            let n = parse(var, raw)?;
            Ok((n, n))
        }
    }
}

/// Mock detector noise as `key=value` pairs separated by commas, e.g.
/// `duplicates=1..4,jitter=0.02,mislabel=0.3,false_positives=2`.
pub fn parse_noise(var: &str, raw: &str) -> Result<DetectorNoise, ConfigError> {
    let mut noise = DetectorNoise::default();
    let err = |message: String| ConfigError { var: var.into(), message };
    for pair in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').ok_or_else(|| err(format!("{pair:?} is not key=value")))?;
        match key.trim() {
            "duplicates" => noise.duplicates = parse_range(var, value)?,
            "jitter" => noise.jitter = parse(var, value)?,
            "mislabel" => noise.mislabel_prob = parse(var, value)?,
            "false_positives" => noise.false_positives = parse(var, value)?,
            other => return Err(err(format!("unknown noise key {other:?}"))),
        }
    }
    let (lo, hi) = noise.duplicates;
    if lo == 0 || lo > hi {
        return Err(err(format!("duplicates range {lo}..{hi} must be nonempty and start at 1 or more")));
    }
    if !(0.0..=1.0).contains(&noise.mislabel_prob) || !(0.0..0.5).contains(&noise.jitter) {
        return Err(err("mislabel must be in [0, 1] and jitter in [0, 0.5)".into()));
    }
    Ok(noise)
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Defaults overridden by whatever `lookup` returns.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get("PRELABEL_BIND") {
            c.bind = parse("PRELABEL_BIND", &v)?;
        }
        if let Some(v) = get("PRELABEL_DATA_DIR") {
            c.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get("PRELABEL_PROVIDER") {
            c.provider.kind = match v.trim() {
                "mock" => ProviderKind::Mock,
                "sidecar" => ProviderKind::Sidecar,
                other => {
                    return Err(ConfigError { var: "PRELABEL_PROVIDER".into(), message: format!("{other:?} is not mock or sidecar") })
                }
            };
        }
        c.provider.endpoint = get("PRELABEL_SIDECAR_URL").or(c.provider.endpoint);
        if let Some(v) = get("PRELABEL_MODEL_ID") {
            c.provider.model_id = v;
        }
        if let Some(v) = get("PRELABEL_SEED") {
            c.provider.seed = parse("PRELABEL_SEED", &v)?;
        }
        if let Some(v) = get("PRELABEL_MOCK_NOISE") {
            c.provider.noise = parse_noise("PRELABEL_MOCK_NOISE", &v)?;
        }
        if let Some(v) = get("PRELABEL_SESSION_TTL_SECS") {
            c.session_ttl = Duration::from_secs(parse("PRELABEL_SESSION_TTL_SECS", &v)?);
        }
        c.static_dir = get("PRELABEL_STATIC_DIR").map(PathBuf::from);
        if let Some(v) = get("PRELABEL_ADMIN_USER") {
            c.admin_user = v;
        }
        if let Some(v) = get("PRELABEL_ADMIN_PASSWORD") {
            c.admin_password = v;
        }
        if let Some(v) = get("PRELABEL_ALLOW_REGISTRATION") {
            c.allow_registration = parse("PRELABEL_ALLOW_REGISTRATION", &v)?;
        }
        c.provider.validate().map_err(|e| ConfigError { var: "PRELABEL_PROVIDER".into(), message: e.to_string() })?;
        Ok(c)
    }
}
