//! Configuration file and provider wiring.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use geoscout_core::agent::AgentConfig;
use geoscout_core::experience::MemoryStore;
use geoscout_core::imaging::sha256_hex;
use geoscout_core::providers::live::{
    ChatCompletionsVision, HttpClient, HttpFetcher, HttpImageSearch, HttpSettings, SearchEndpoints, SidecarEmbedder,
};
use geoscout_core::providers::mock::{MockFixtures, MockSuite};
use geoscout_core::Providers;
use serde::{Deserialize, Serialize};

/// The TOML configuration file. Every section is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Live services. Mutually exclusive with `--mock`.
    pub providers: Option<LiveProviders>,
    pub agent: AgentConfig,
    /// Prompt memory file used by the EAP tool and `memorize`.
    pub memory_path: Option<PathBuf>,
    /// Worker threads for `batch` and `ablate`; defaults to the CPU count.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveProviders {
    #[serde(default)]
    pub http: HttpSettings,
    pub vision: VisionSettings,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub search: SearchEndpoints,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSettings {
    /// Base URL of an OpenAI-compatible chat-completions API.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_key_env() -> String {
    "GEOSCOUT_API_KEY".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    /// Base URL of the embedding sidecar.
    pub base_url: String,
    /// Space used for prompt memory and heat grids.
    pub geo_space: String,
    /// Space used to filter reverse-search hits.
    pub search_space: String,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        EmbedSettings {
            base_url: "http://127.0.0.1:8752".into(),
            geo_space: "geoclip".into(),
            search_space: "clip".into(),
        }
    }
}

/// Everything a command needs to talk to services.
pub struct Setup {
    pub providers: Providers,
    pub config: CliConfig,
    pub memory: Arc<MemoryStore>,
    /// SHA-256 over the configuration and fixture files plus the
    /// effective agent settings.
    pub config_digest: String,
    /// Files the setup read, for the run log.
    pub inputs: Vec<PathBuf>,
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<(CliConfig, Vec<u8>)> {
    let Some(path) = path else {
        return Ok((CliConfig::default(), Vec::new()));
    };
    let bytes = std::fs::read(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
    let cfg: CliConfig = toml::from_str(text).with_context(|| format!("invalid config {}", path.display()))?;
    cfg.agent.validate().context("invalid [agent] settings")?;
    Ok((cfg, bytes))
}

fn live(p: &LiveProviders) -> anyhow::Result<Providers> {
    let client = Arc::new(HttpClient::new(p.http.clone()));
    let key = std::env::var(&p.vision.api_key_env).ok();
    if key.is_none() {
        log::warn!(
            "{} is not set; calling the vision API without a key",
            p.vision.api_key_env
        );
    }
    let geo = Arc::new(SidecarEmbedder::new(
        client.clone(),
        &p.embed.base_url,
        &p.embed.geo_space,
    ));
    let search_embedder = if p.embed.search_space == p.embed.geo_space {
        geo.clone()
    } else {
        Arc::new(SidecarEmbedder::new(
            client.clone(),
            &p.embed.base_url,
            &p.embed.search_space,
        ))
    };
    Ok(Providers {
        vision: Arc::new(ChatCompletionsVision::new(
            client.clone(),
            &p.vision.base_url,
            &p.vision.model,
            key,
        )),
        geo_embedder: geo,
        search_embedder,
        search: Arc::new(HttpImageSearch::new(client.clone(), p.search.clone())),
        fetcher: Arc::new(HttpFetcher::new(client)),
    })
}

/// Resolves providers from exactly one of a live `[providers]` section or
/// a mock fixture file.
pub fn setup(config: Option<&Path>, mock: Option<&Path>, memory_override: Option<&Path>) -> anyhow::Result<Setup> {
    let (mut cfg, cfg_bytes) = load_config(config)?;
    let mut inputs: Vec<PathBuf> = config.into_iter().map(Path::to_path_buf).collect();
    let mut digest_input = cfg_bytes;
    let providers = match (&cfg.providers, mock) {
        (Some(_), Some(_)) => bail!("use either a [providers] config section or --mock, not both"),
        (None, None) => bail!("no providers: pass --mock <fixtures.json> or a --config with a [providers] section"),
        (Some(p), None) => live(p)?,
        (None, Some(path)) => {
            let fixtures =
                MockFixtures::load(path).with_context(|| format!("cannot load fixtures {}", path.display()))?;
            digest_input.extend(std::fs::read(path)?);
            inputs.push(path.to_path_buf());
            MockSuite::new(fixtures).providers()
        }
    };
    if let Some(m) = memory_override {
        cfg.memory_path = Some(m.to_path_buf());
    }
    let memory = match &cfg.memory_path {
        Some(p) => MemoryStore::open(p).with_context(|| format!("cannot open prompt memory {}", p.display()))?,
        None => MemoryStore::in_memory(),
    };
    digest_input.extend(serde_json::to_vec(&cfg.agent).expect("agent config serializes"));
    Ok(Setup {
        providers,
        config_digest: sha256_hex(&digest_input),
        config: cfg,
        memory: Arc::new(memory),
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parses() {
        let text = r#"
            memory_path = "mem.bin"
            workers = 2
            [providers.vision]
            base_url = "https://api.example/v1"
            model = "some-vision-model"
            [providers.embed]
            base_url = "http://127.0.0.1:9000"
            geo_space = "geo"
            search_space = "geo"
            [agent]
            refine = false
            [agent.strategy]
            ablation = "eap_rs"
            [agent.budget]
            provider_call_limit = 40
        "#;
        let cfg: CliConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.workers, Some(2));
        assert_eq!(cfg.agent.budget.provider_call_limit, 40);
        assert_eq!(cfg.providers.unwrap().vision.api_key_env, "GEOSCOUT_API_KEY");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("colour = 1").is_err());
    }
}
