//! Run configuration: command-line flags over a TOML file over environment
//! variables over built-in defaults.

use std::path::{Path, PathBuf};

use cocotree::backends::EndpointConfig;
use cocotree::eval::ScorerConfig;
use cocotree::search::{SearchConfig, Strategy, DEFAULT_BEAM_WIDTH};
use cocotree::tree::TreeParams;
use serde::{Deserialize, Serialize};

use crate::exit::Failure;

pub const ENV_LLM_URL: &str = "COCOTREE_LLM_URL";
pub const ENV_VLM_URL: &str = "COCOTREE_VLM_URL";
pub const ENV_API_KEY: &str = "COCOTREE_API_KEY";
pub const DEFAULT_CACHE_DIR: &str = ".cocotree-cache";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialEndpoint {
    pub base_url: Option<String>,
    pub model_id: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<u32>,
}

impl PartialEndpoint {
    fn over(self, lower: Self) -> Self {
        Self {
            base_url: self.base_url.or(lower.base_url),
            model_id: self.model_id.or(lower.model_id),
            api_key: self.api_key.or(lower.api_key),
            timeout_secs: self.timeout_secs.or(lower.timeout_secs),
            max_retries: self.max_retries.or(lower.max_retries),
        }
    }

    fn resolve(self) -> Option<EndpointConfig> {
        let mut cfg = EndpointConfig::new(self.base_url?, self.model_id.unwrap_or_else(|| "default".into()));
        cfg.api_key = self.api_key;
        if let Some(t) = self.timeout_secs {
            cfg.timeout_secs = t;
        }
        if let Some(r) = self.max_retries {
            cfg.max_retries = r;
        }
        Some(cfg)
    }
}

/// One configuration layer; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub entities: Option<usize>,
    pub split: Option<usize>,
    pub depth: Option<usize>,
    pub beam_width: Option<usize>,
    pub strategy: Option<String>,
    pub prune_frontier: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: Option<bool>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub mock: Option<PathBuf>,
    #[serde(default)]
    pub llm: PartialEndpoint,
    #[serde(default)]
    pub vlm: PartialEndpoint,
    #[serde(default)]
    pub judge: PartialEndpoint,
}

impl PartialConfig {
    /// Field-wise: values in `self` win over values in `lower`.
    pub fn over(self, lower: Self) -> Self {
        Self {
            alpha: self.alpha.or(lower.alpha),
            beta: self.beta.or(lower.beta),
            entities: self.entities.or(lower.entities),
            split: self.split.or(lower.split),
            depth: self.depth.or(lower.depth),
            beam_width: self.beam_width.or(lower.beam_width),
            strategy: self.strategy.or(lower.strategy),
            prune_frontier: self.prune_frontier.or(lower.prune_frontier),
            cache_dir: self.cache_dir.or(lower.cache_dir),
            no_cache: self.no_cache.or(lower.no_cache),
            dataset: self.dataset.or(lower.dataset),
            out: self.out.or(lower.out),
            seed: self.seed.or(lower.seed),
            parallelism: self.parallelism.or(lower.parallelism),
            mock: self.mock.or(lower.mock),
            llm: self.llm.over(lower.llm),
            vlm: self.vlm.over(lower.vlm),
            judge: self.judge.over(lower.judge),
        }
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.cache_dir, &mut cfg.dataset, &mut cfg.out, &mut cfg.mock] {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Self {
        let key = get(ENV_API_KEY).filter(|k| !k.is_empty());
        let endpoint = |url: Option<String>| PartialEndpoint {
            base_url: url.filter(|u| !u.is_empty()),
            api_key: key.clone(),
            ..Default::default()
        };
        Self {
            llm: endpoint(get(ENV_LLM_URL)),
            vlm: endpoint(get(ENV_VLM_URL)),
            judge: endpoint(None),
            ..Default::default()
        }
    }

    pub fn resolve(self) -> Result<RunConfig, Failure> {
        let strategy = match self.strategy.as_deref() {
            None => Strategy::Beam,
            Some(s) => s.parse().map_err(|e: cocotree::Error| Failure::usage(e.to_string()))?,
        };
        let llm = self.llm.resolve();
        let judge = self.judge.resolve().or_else(|| llm.clone());
        let cfg = RunConfig {
            alpha: self.alpha.unwrap_or(0.6),
            beta: self.beta.unwrap_or(0.8),
            m: self.entities.unwrap_or(2),
            s: self.split.unwrap_or(3),
            l: self.depth.unwrap_or(3),
            beam_width: self.beam_width.unwrap_or(DEFAULT_BEAM_WIDTH),
            strategy,
            prune_frontier: self.prune_frontier,
            cache_dir: self.cache_dir.unwrap_or_else(|| DEFAULT_CACHE_DIR.into()),
            no_cache: self.no_cache.unwrap_or(false),
            dataset: self.dataset,
            out: self.out,
            seed: self.seed,
            parallelism: self.parallelism.unwrap_or(4),
            mock: self.mock,
            llm,
            vlm: self.vlm.resolve(),
            judge,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    pub m: usize,
    pub s: usize,
    pub l: usize,
    pub beam_width: usize,
    pub strategy: Strategy,
    pub prune_frontier: Option<usize>,
    pub cache_dir: PathBuf,
    pub no_cache: bool,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: usize,
    pub mock: Option<PathBuf>,
    pub llm: Option<EndpointConfig>,
    pub vlm: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        if self.parallelism == 0 {
            return Err(Failure::usage("parallelism must be at least 1"));
        }
        self.scorer_config().validate().map_err(|e| Failure::usage(e.to_string()))?;
        for e in [&self.llm, &self.vlm, &self.judge].into_iter().flatten() {
            e.validate().map_err(|e| Failure::usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            prune_frontier: self.prune_frontier,
            ..TreeParams::new(self.m, self.s, self.l)
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            strategy: self.strategy,
            beam_width: self.beam_width,
            beta: self.beta,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            alpha: self.alpha,
            tree: self.tree_params(),
            search: self.search(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> PartialConfig {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        PartialConfig::from_env(|k| map.get(k).cloned())
    }

    #[test]
    fn defaults() {
        let c = PartialConfig::default().resolve().unwrap();
        assert_eq!((c.alpha, c.beta, c.m, c.s, c.l, c.beam_width), (0.6, 0.8, 2, 3, 3, 3));
        assert_eq!(c.strategy, Strategy::Beam);
        assert_eq!(c.cache_dir, PathBuf::from(DEFAULT_CACHE_DIR));
        assert!(c.llm.is_none() && c.judge.is_none());
    }

    #[test]
    fn flags_beat_file_beat_env() {
        let flags = PartialConfig {
            alpha: Some(0.1),
            ..Default::default()
        };
        let file: PartialConfig = toml::from_str(
            "alpha = 0.2\nbeta = 0.3\n[llm]\nbase_url = \"http://file.test/v1\"\nmodel_id = \"m\"\n",
        )
        .unwrap();
        let env = env(&[
            (ENV_LLM_URL, "http://env.test/v1"),
            (ENV_VLM_URL, "http://vlm.test/v1"),
            (ENV_API_KEY, "k"),
        ]);
        let c = flags.over(file).over(env).resolve().unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.beta, 0.3);
        let llm = c.llm.unwrap();
        assert_eq!(llm.base_url, "http://file.test/v1");
        assert_eq!(llm.model_id, "m");
        assert_eq!(llm.api_key.as_deref(), Some("k"));
        assert_eq!(c.vlm.unwrap().base_url, "http://vlm.test/v1");
        assert_eq!(c.judge.unwrap().base_url, "http://file.test/v1");
    }

    #[test]
    fn ranges_enforced() {
        for bad in [
            PartialConfig { alpha: Some(1.5), ..Default::default() },
            PartialConfig { beta: Some(-0.1), ..Default::default() },
            PartialConfig { entities: Some(0), ..Default::default() },
            PartialConfig { beam_width: Some(0), ..Default::default() },
            PartialConfig { parallelism: Some(0), ..Default::default() },
            PartialConfig { strategy: Some("dfs".into()), ..Default::default() },
        ] {
            assert_eq!(bad.resolve().unwrap_err().code, 1);
        }
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(toml::from_str::<PartialConfig>("alhpa = 0.2").is_err());
    }

    #[test]
    fn file_paths_resolve_against_file_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "dataset = \"data/m.json\"\nmock = \"/abs/t.json\"\n").unwrap();
        let c = PartialConfig::from_file(&path).unwrap();
        assert_eq!(c.dataset.unwrap(), dir.path().join("data/m.json"));
        assert_eq!(c.mock.unwrap(), PathBuf::from("/abs/t.json"));
    }
}
