//! TOML configuration: backend files and run files.
//!
//! A backend file describes one provider plus its cache, retry and rate
//! settings. A run file names a dataset, a method and a backend file. CLI
//! flags override run-file values, which override defaults; the resolved
//! result is written next to the run's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use m3cot_core::bench::MethodId;
use m3cot_core::chat::GenerationConfig;
use m3cot_core::m3cot::M3CoTConfig;
use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, RateLimit, RetryPolicy};
use crate::http::{Dialect, HostedHttp};
use crate::scripted::{ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HostedHttp,
    ScriptedMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default)]
    pub dialect: Dialect,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    120_000
}

/// One scripted rule; no `contains` means "any request".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub provider: ProviderKind,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_seed", skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_ceiling: Option<u64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub rate_limit: RateLimit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptEntry>,
}

fn default_model() -> String {
    GenerationConfig::default().model_id
}

fn default_max_tokens() -> u32 {
    GenerationConfig::default().max_tokens
}

fn default_seed() -> Option<u64> {
    Some(0)
}

impl BackendConfig {
    pub fn scripted(rules: Vec<ScriptEntry>) -> Self {
        Self {
            provider: ProviderKind::ScriptedMock,
            model_id: default_model(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: default_seed(),
            cache_dir: None,
            call_ceiling: None,
            retry: RetryPolicy::default(),
            rate_limit: RateLimit::default(),
            http: None,
            script: rules,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(format!("backend config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file; a relative `cache_dir` is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        if let Some(dir) = cfg.cache_dir.as_mut().filter(|d| d.is_relative()) {
            *dir = path.parent().unwrap_or(Path::new(".")).join(&*dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.provider {
            ProviderKind::HostedHttp => match &self.http {
                None => return err("hosted_http requires an [http] table with endpoint and api_key_env"),
                Some(h) if h.endpoint.trim().is_empty() => return err("[http] endpoint must be non-empty"),
                Some(h) if h.api_key_env.trim().is_empty() => return err("[http] api_key_env must be non-empty"),
                Some(_) => {}
            },
            ProviderKind::ScriptedMock if self.script.is_empty() => {
                return err("scripted_mock requires at least one [[script]] rule")
            }
            ProviderKind::ScriptedMock => {}
        }
        if self.retry.max_attempts < 1 {
            return err("retry.max_attempts must be at least 1");
        }
        if self.retry.max_backoff_ms < self.retry.base_backoff_ms {
            return err("retry.max_backoff_ms must be >= retry.base_backoff_ms");
        }
        if self.rate_limit.max_in_flight < 1 {
            return err("rate_limit.max_in_flight must be at least 1");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return err("temperature must be finite and non-negative");
        }
        if self.max_tokens == 0 {
            return err("max_tokens must be positive");
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }

    pub fn script_rules(&self) -> Vec<ScriptRule> {
        self.script
            .iter()
            .map(|e| match &e.contains {
                Some(c) => ScriptRule::contains(c.clone(), e.reply.clone()),
                None => ScriptRule::any(e.reply.clone()),
            })
            .collect()
    }

    /// Build the gateway. For the scripted provider the backend handle is
    /// returned too, so callers can read its counters.
    pub fn build(&self) -> Result<(Gateway, Option<Arc<ScriptedBackend>>), ConfigError> {
        self.validate()?;
        let (builder, scripted) = match self.provider {
            ProviderKind::ScriptedMock => {
                let s = Arc::new(ScriptedBackend::new(self.script_rules()));
                (Gateway::builder(Arc::clone(&s)), Some(s))
            }
            ProviderKind::HostedHttp => {
                let h = self.http.as_ref().expect("validated");
                let provider =
                    HostedHttp::new(&h.endpoint, &h.api_key_env, h.dialect, Duration::from_millis(h.timeout_ms))
                        .map_err(|e| ConfigError(e.to_string()))?;
                (Gateway::builder(provider), None)
            }
        };
        let gw = builder
            .cache_dir(self.cache_dir.clone())
            .retry(self.retry)
            .rate_limit(self.rate_limit)
            .call_ceiling(self.call_ceiling)
            .build();
        Ok((gw, scripted))
    }
}

/// Run-file contents; every field optional so flags can fill the gaps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub dataset: Option<PathBuf>,
    pub method: Option<String>,
    pub runs: Option<u32>,
    pub backend: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_items: Option<usize>,
    pub seed: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub templates: Option<PathBuf>,
    pub system_prompt: Option<bool>,
    pub m3cot: Option<M3CoTConfig>,
}

impl RunFile {
    /// Parse a run file; relative paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut f: Self = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut f.dataset, &mut f.backend, &mut f.out, &mut f.templates].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(f)
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub dataset: Option<PathBuf>,
    pub method: Option<String>,
    pub runs: Option<u32>,
    pub backend: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_items: Option<usize>,
    pub seed: Option<u64>,
    pub max_iterations: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub method: MethodId,
    pub runs: u32,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_in_flight: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    pub system_prompt: bool,
    pub m3cot: M3CoTConfig,
    pub backend_file: PathBuf,
    pub backend: BackendConfig,
}

impl RunConfig {
    /// Flags > run file > defaults.
    pub fn resolve(file: RunFile, flags: RunOverrides) -> Result<Self, ConfigError> {
        let dataset = flags.dataset.or(file.dataset).ok_or_else(|| ConfigError("--dataset is required".into()))?;
        let method_name = flags.method.or(file.method).ok_or_else(|| ConfigError("--method is required".into()))?;
        let method: MethodId = method_name.parse().map_err(|e: m3cot_core::bench::UnknownMethod| ConfigError(e.to_string()))?;
        let backend_file = flags.backend.or(file.backend).ok_or_else(|| ConfigError("--backend is required".into()))?;
        let backend = BackendConfig::load(&backend_file)?;
        let default_runs = match backend.provider {
            ProviderKind::ScriptedMock => 1,
            ProviderKind::HostedHttp => 3,
        };
        let runs = flags.runs.or(file.runs).unwrap_or(default_runs);
        if runs < 1 {
            return err("--runs must be at least 1");
        }
        let max_items = flags.max_items.or(file.max_items);
        if max_items == Some(0) {
            return err("--max-items must be at least 1");
        }
        let mut m3cot = file.m3cot.unwrap_or_default();
        if let Some(k) = flags.max_iterations {
            m3cot.max_iterations = k;
        }
        m3cot.validate().map_err(|e| ConfigError(e.to_string()))?;
        let max_in_flight = flags.max_in_flight.or(file.max_in_flight).unwrap_or(backend.rate_limit.max_in_flight);
        if max_in_flight < 1 {
            return err("--max-in-flight must be at least 1");
        }
        Ok(Self {
            dataset,
            method,
            runs,
            out_dir: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("runs")),
            max_items,
            seed: flags.seed.or(file.seed).or(backend.seed),
            max_in_flight,
            templates: flags.templates.or(file.templates),
            system_prompt: file.system_prompt.unwrap_or(true),
            m3cot,
            backend_file,
            backend,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# unserializable config: {e}\n"))
    }

    /// Short hash of the resolved config, used in the run directory name.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..4])
    }

    /// Generation settings for run `k`: the seed advances per run.
    pub fn generation(&self, run_index: u32) -> GenerationConfig {
        GenerationConfig { seed: self.seed.map(|s| s.wrapping_add(run_index as u64)), ..self.backend.generation() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MOCK: &str = r#"
provider = "scripted_mock"
cache_dir = "cache"

[retry]
max_attempts = 2

[[script]]
contains = "scene graph"
reply = '{"objects": []}'

[[script]]
reply = "A)"
"#;

    #[test]
    fn parses_backend_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mock.toml");
        fs::write(&p, MOCK).unwrap();
        let cfg = BackendConfig::load(&p).unwrap();
        assert_eq!(cfg.cache_dir.as_deref(), Some(dir.path().join("cache").as_path()));
        assert_eq!(cfg.retry.max_attempts, 2);
        assert_eq!(cfg.retry.max_backoff_ms, RetryPolicy::default().max_backoff_ms);
        assert_eq!(cfg.script_rules()[0], ScriptRule::contains("scene graph", "{\"objects\": []}"));
        assert!(cfg.build().unwrap().1.is_some());
    }

    #[test]
    fn validation_messages() {
        let e = BackendConfig::parse("provider = \"hosted_http\"").unwrap_err();
        assert!(e.0.contains("endpoint"), "{e}");
        let e = BackendConfig::parse("provider = \"scripted_mock\"").unwrap_err();
        assert!(e.0.contains("script"), "{e}");
        let e = BackendConfig::parse(
            "provider = \"scripted_mock\"\n[retry]\nbase_backoff_ms = 10\nmax_backoff_ms = 5\n[[script]]\nreply = \"A)\"",
        )
        .unwrap_err();
        assert!(e.0.contains("max_backoff_ms"), "{e}");
        assert!(BackendConfig::parse("provider = \"other\"").is_err());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let backend = dir.path().join("mock.toml");
        fs::write(&backend, MOCK).unwrap();
        let file = RunFile {
            dataset: Some("from-file.jsonl".into()),
            method: Some("ddcot".into()),
            runs: Some(2),
            backend: Some(backend),
            ..Default::default()
        };
        let flags = RunOverrides { method: Some("m3cot".into()), max_iterations: Some(3), ..Default::default() };
        let cfg = RunConfig::resolve(file.clone(), flags).unwrap();
        assert_eq!(cfg.method, MethodId::M3CoT);
        assert_eq!(cfg.runs, 2);
        assert_eq!(cfg.dataset, PathBuf::from("from-file.jsonl"));
        assert_eq!(cfg.m3cot.max_iterations, 3);
        assert_eq!(cfg.generation(2).seed, Some(2));
        let echoed: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(echoed, cfg);

        let bad = RunOverrides { method: Some("cot".into()), ..Default::default() };
        let e = RunConfig::resolve(file, bad).unwrap_err();
        assert!(e.0.contains("default, ddcot, cocot, ccot, m3cot"), "{e}");
    }
}
