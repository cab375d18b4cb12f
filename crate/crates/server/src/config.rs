use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const PORT_ENV: &str = "NEBULA_PORT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    /// Defaults to the file name without its `.store` extension.
    #[serde(default)]
    pub id: Option<String>,
    pub path: PathBuf,
}

impl StoreEntry {
    pub fn from_path(path: impl Into<PathBuf>) -> Self {
        Self {
            id: None,
            path: path.into(),
        }
    }

    pub fn dataset_id(&self) -> String {
        if let Some(id) = &self.id {
            return id.clone();
        }
        let name = self
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match name.strip_suffix(".store") {
            Some(stem) if !stem.is_empty() => stem.to_owned(),
            _ => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    pub frame_rate: f64,
    pub iters_per_frame: u32,
    pub max_sessions: usize,
    pub idle_timeout_secs: u64,
    /// Directory served at `/` for the browser explorer, if any.
    pub static_dir: Option<PathBuf>,
    pub stores: Vec<StoreEntry>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
            frame_rate: 30.0,
            iters_per_frame: 2,
            max_sessions: 16,
            idle_timeout_secs: 600,
            static_dir: None,
            stores: Vec::new(),
        }
    }
}

pub const MAX_FRAME_RATE: f64 = 240.0;
pub const MAX_ITERS_PER_FRAME: u32 = 1000;

pub fn valid_frame_rate(fps: f64) -> bool {
    fps.is_finite() && fps > 0.0 && fps <= MAX_FRAME_RATE
}

pub fn valid_iters_per_frame(iters: u32) -> bool {
    (1..=MAX_ITERS_PER_FRAME).contains(&iters)
}

impl ServiceConfig {
    /// Parses TOML. Relative store and static paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServiceConfig = toml::from_str(text)?;
        for s in &mut cfg.stores {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        if let Some(dir) = &cfg.static_dir {
            if dir.is_relative() {
                cfg.static_dir = Some(base.join(dir));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Applies `NEBULA_PORT` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(PORT_ENV) {
            self.port = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{PORT_ENV}={v:?} is not a port")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !valid_frame_rate(self.frame_rate) {
            return Err(ConfigError::Invalid(format!(
                "frame_rate must be in (0, {MAX_FRAME_RATE}], got {}",
                self.frame_rate
            )));
        }
        if !valid_iters_per_frame(self.iters_per_frame) {
            return Err(ConfigError::Invalid(format!(
                "iters_per_frame must be in 1..={MAX_ITERS_PER_FRAME}, got {}",
                self.iters_per_frame
            )));
        }
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be at least 1".into()));
        }
        if self.idle_timeout_secs == 0 {
            return Err(ConfigError::Invalid("idle_timeout_secs must be at least 1".into()));
        }
        let mut ids: Vec<String> = self.stores.iter().map(StoreEntry::dataset_id).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid(format!("duplicate dataset id {:?}", w[0])));
        }
        Ok(())
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.idle_timeout_secs)
    }
}
