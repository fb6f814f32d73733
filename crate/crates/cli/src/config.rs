//! Run configuration: flags first, then an optional TOML file layered on top.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use snowball_core::backend::{Capabilities, ModelBackend};
use snowball_core::conversation::{ConvSetting, PromptMode};
use snowball_core::decoding::{DecodingMode, SamplingConfig};
use snowball_core::metrics::MatchMode;
use snowball_core::sim::{Scenario, ScenarioBackend};
use snowball_net::{ChatOnlyBackend, ClientOptions, RemoteBackend};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// In-process simulated model loaded from a scenario file.
    Mock {
        scenario: PathBuf,
        #[serde(default)]
        no_logits: bool,
    },
    /// A server speaking the backend protocol.
    Remote { url: String },
    /// A chat-completion endpoint; completions only.
    Chat { url: String, auth_env: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub backend: BackendSpec,
    #[serde(default = "default_settings")]
    pub settings: Vec<ConvSetting>,
    #[serde(default = "default_prompt_mode")]
    pub prompt_mode: PromptMode,
    #[serde(default = "default_decoding")]
    pub decoding: DecodingMode,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    /// Model label written into outcomes; defaults to the backend's name.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub match_mode: MatchMode,
}

fn default_settings() -> Vec<ConvSetting> {
    vec![ConvSetting::CleanConv, ConvSetting::HalluConv]
}

fn default_prompt_mode() -> PromptMode {
    PromptMode::FormattingPrompt
}

fn default_decoding() -> DecodingMode {
    DecodingMode::Regular
}

fn default_max_new_tokens() -> usize {
    32
}

fn default_parallelism() -> usize {
    4
}

impl RunConfig {
    pub fn new(dataset: PathBuf, backend: BackendSpec) -> Self {
        RunConfig {
            dataset,
            backend,
            settings: default_settings(),
            prompt_mode: default_prompt_mode(),
            decoding: default_decoding(),
            sampling: SamplingConfig::default(),
            max_new_tokens: default_max_new_tokens(),
            cache_dir: None,
            parallelism: default_parallelism(),
            seed: 0,
            model: None,
            match_mode: MatchMode::default(),
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        if self.settings.is_empty() {
            return Err(UsageError("no conversation settings selected".into()));
        }
        self.sampling.validate().map_err(|e| UsageError(e.to_string()))?;
        if let Some(cfg) = self.decoding.rvd_config(self.sampling, self.max_new_tokens) {
            cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        }
        if self.decoding.needs_logits() && matches!(self.backend, BackendSpec::Chat { .. }) {
            return Err(UsageError(format!("{} decoding needs a logits-capable backend", self.decoding)));
        }
        Ok(())
    }
}

/// Reads a TOML run configuration.
pub fn read_config_file(path: &Path) -> Result<toml::Table, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    text.parse().map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
}

/// Resolves a run configuration from flag values and an optional config file. Tables
/// merge key by key and file values win; a file naming a different backend kind
/// replaces the whole backend table.
pub fn resolve(flags: toml::Table, file: Option<toml::Table>) -> Result<RunConfig, UsageError> {
    let mut base = flags;
    if let Some(file) = file {
        if let (Some(toml::Value::Table(b)), Some(toml::Value::Table(f))) = (base.get("backend"), file.get("backend")) {
            if f.contains_key("kind") && f.get("kind") != b.get("kind") {
                base.remove("backend");
            }
        }
        merge(&mut base, file);
    }
    let cfg: RunConfig = toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Connects to the configured backend. Failures here are configuration errors.
pub fn open_backend(spec: &BackendSpec) -> Result<Arc<dyn ModelBackend>, UsageError> {
    match spec {
        BackendSpec::Mock { scenario, no_logits } => {
            let text = std::fs::read_to_string(scenario)
                .map_err(|e| UsageError(format!("cannot read scenario {}: {e}", scenario.display())))?;
            let sc = Scenario::from_json(&text)
                .map_err(|e| UsageError(format!("invalid scenario {}: {e}", scenario.display())))?;
            let caps = Capabilities { logits: !no_logits, complete: true };
            let b = ScenarioBackend::with_capabilities(sc, caps)
                .map_err(|e| UsageError(format!("invalid scenario {}: {e}", scenario.display())))?;
            Ok(Arc::new(b))
        }
        BackendSpec::Remote { url } => RemoteBackend::with_options(url, ClientOptions::default())
            .map(|b| Arc::new(b) as Arc<dyn ModelBackend>)
            .map_err(|e| UsageError(format!("cannot connect to {url}: {e}"))),
        BackendSpec::Chat { url, auth_env, model } => ChatOnlyBackend::new(url, auth_env, model, ClientOptions::default())
            .map(|b| Arc::new(b) as Arc<dyn ModelBackend>)
            .map_err(|e| UsageError(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use snowball_core::decoding::Divergence;

    fn base() -> RunConfig {
        RunConfig::new("flags.jsonl".into(), BackendSpec::Mock { scenario: "s.json".into(), no_logits: false })
    }

    fn flags(cfg: &RunConfig) -> toml::Table {
        toml::Table::try_from(cfg).unwrap()
    }

    #[test]
    fn file_overrides_flags() {
        let file: toml::Table = r#"
            dataset = "file.jsonl"
            seed = 9
            [decoding]
            mode = "rvd"
            beta = 3.0
            divergence = "kld"
            [sampling]
            greedy = true
        "#
        .parse()
        .unwrap();
        let mut from_flags = base();
        from_flags.sampling.top_p = 0.5;
        let cfg = resolve(flags(&from_flags), Some(file)).unwrap();
        assert_eq!(cfg.dataset, PathBuf::from("file.jsonl"));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.decoding, DecodingMode::Rvd { beta: 3.0, divergence: Divergence::Kld });
        assert!(cfg.sampling.greedy);
        // untouched keys keep their flag values
        assert_eq!(cfg.sampling.top_p, 0.5);
        assert_eq!(cfg.settings, default_settings());
    }

    #[test]
    fn backend_kind_switch_replaces_table() {
        let file: toml::Table = r#"
            [backend]
            kind = "remote"
            url = "http://localhost:1"
        "#
        .parse()
        .unwrap();
        let cfg = resolve(flags(&base()), Some(file)).unwrap();
        assert_eq!(cfg.backend, BackendSpec::Remote { url: "http://localhost:1".into() });
    }

    #[test]
    fn rvd_on_chat_backend_is_rejected() {
        let mut cfg = RunConfig::new("d".into(), BackendSpec::Chat { url: "u".into(), auth_env: "T".into(), model: "m".into() });
        cfg.decoding = DecodingMode::Rvd { beta: 2.0, divergence: Divergence::Jsd };
        assert!(cfg.validate().unwrap_err().0.contains("logits-capable"));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let file: toml::Table = "[sampling]\ntop_p = 1.5".parse().unwrap();
        assert!(resolve(flags(&base()), Some(file)).is_err());
        let file: toml::Table = "settings = []".parse().unwrap();
        assert!(resolve(flags(&base()), Some(file)).is_err());
    }
}
