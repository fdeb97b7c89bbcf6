//! Backends, response cache and the cache-directory lock for one process.

use std::fs::{File, OpenOptions, TryLockError};
use std::sync::Arc;

use cocotree::backends::{
    CachedBackend, MockBackend, MockTable, ModelBackend, OpenAiBackend, Request, ResponseCache, Role,
    YesNoLogits,
};
use cocotree::eval::Backends;
use cocotree::{Error, Result};

use crate::config::RunConfig;
use crate::exit::Failure;

/// Stands in for a role the current command does not need.
struct Unconfigured(Role);

impl ModelBackend for Unconfigured {
    fn identity(&self) -> String {
        format!("unconfigured:{}", self.0)
    }

    fn yes_no(&self, _: &Request) -> Result<YesNoLogits> {
        Err(Error::InvalidInput(format!("no {} endpoint configured", self.0)))
    }

    fn generate(&self, _: &Request) -> Result<String> {
        Err(Error::InvalidInput(format!("no {} endpoint configured", self.0)))
    }
}

pub struct Session {
    llm: Option<Arc<dyn ModelBackend>>,
    vlm: Option<Arc<dyn ModelBackend>>,
    judge: Option<Arc<dyn ModelBackend>>,
    cache: Option<Arc<ResponseCache>>,
    _lock: Option<File>,
}

impl Session {
    pub fn open(cfg: &RunConfig) -> Result<Self, Failure> {
        let (cache, lock) = if cfg.no_cache {
            (None, None)
        } else {
            let lock = lock_dir(cfg)?;
            let cache = ResponseCache::open(&cfg.cache_dir)?;
            (Some(Arc::new(cache)), Some(lock))
        };
        let wrap = |b: Arc<dyn ModelBackend>| -> Arc<dyn ModelBackend> {
            match &cache {
                Some(c) => Arc::new(CachedBackend::new(b, c.clone())),
                None => b,
            }
        };
        let (llm, vlm, judge) = if let Some(path) = &cfg.mock {
            let table = MockTable::from_path(path).map_err(|e| Failure::usage(format!("mock table: {e}")))?;
            let [l, v, j] = MockBackend::trio(table)?;
            (
                Some(wrap(l as Arc<dyn ModelBackend>)),
                Some(wrap(v as Arc<dyn ModelBackend>)),
                Some(wrap(j as Arc<dyn ModelBackend>)),
            )
        } else {
            let http = |e: &Option<cocotree::backends::EndpointConfig>| -> Result<Option<Arc<dyn ModelBackend>>, Failure> {
                Ok(match e {
                    Some(c) => Some(wrap(Arc::new(OpenAiBackend::new(c.clone())?))),
                    None => None,
                })
            };
            (http(&cfg.llm)?, http(&cfg.vlm)?, http(&cfg.judge)?)
        };
        Ok(Self {
            llm,
            vlm,
            judge,
            cache,
            _lock: lock,
        })
    }

    pub fn role(&self, role: Role) -> Result<Arc<dyn ModelBackend>, Failure> {
        let slot = match role {
            Role::Llm => &self.llm,
            Role::Vlm => &self.vlm,
            Role::Judge => &self.judge,
        };
        slot.clone().ok_or_else(|| {
            let hint = match role {
                Role::Llm => "--llm-endpoint, the config file's [llm] table, or COCOTREE_LLM_URL",
                Role::Vlm => "--vlm-endpoint, the config file's [vlm] table, or COCOTREE_VLM_URL",
                Role::Judge => "--judge-endpoint, the config file's [judge] table, or an LLM endpoint",
            };
            Failure::usage(format!("no {role} endpoint configured; set {hint}, or pass --mock"))
        })
    }

    /// All three roles; `required` ones must be configured.
    pub fn backends(&self, required: &[Role]) -> Result<Backends, Failure> {
        let get = |role: Role| -> Result<Arc<dyn ModelBackend>, Failure> {
            if required.contains(&role) {
                self.role(role)
            } else {
                Ok(self.role(role).unwrap_or_else(|_| Arc::new(Unconfigured(role))))
            }
        };
        Ok(Backends {
            llm: get(Role::Llm)?,
            vlm: get(Role::Vlm)?,
            judge: get(Role::Judge)?,
        })
    }

    pub fn finish(&self) -> Result<(), Failure> {
        if let Some(c) = &self.cache {
            c.persist_stats()?;
        }
        Ok(())
    }
}

/// Takes the advisory lock that keeps one process per cache directory.
pub fn lock_dir(cfg: &RunConfig) -> Result<File, Failure> {
    std::fs::create_dir_all(&cfg.cache_dir).map_err(|e| {
        Failure::usage(format!("cache dir {} not writable: {e}", cfg.cache_dir.display()))
    })?;
    let path = cfg.cache_dir.join(".lock");
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Failure::usage(format!("cache lock {}: {e}", path.display())))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(Failure::usage(format!(
            "cache dir {} is in use by another cocotree process",
            cfg.cache_dir.display()
        ))),
        Err(TryLockError::Error(e)) => Err(Failure::usage(format!("cache lock {}: {e}", path.display()))),
    }
}
