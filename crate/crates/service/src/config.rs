use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use copa_core::agents::{AgentConfig, EvidenceAgents};
use copa_core::backends::{ChatBackendConfig, EmbeddingConfig, TemplateSet};
use copa_core::catalog::Catalog;
use copa_core::dialogue::{DialogueAgent, DialogueConfig, PolicyRuleTable};
use copa_core::engine::{Engine, EngineConfig, Journal};
use serde::{Deserialize, Serialize};

/// Backend routing: evidence agents and the dialogue agent may use different
/// backends. Absent means rule-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendRouting {
    #[serde(default)]
    pub evidence: Option<ChatBackendConfig>,
    #[serde(default)]
    pub dialogue: Option<ChatBackendConfig>,
}

/// Service configuration file. Secrets never live here: remote backends name
/// the environment variable that holds their token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Journal segments and snapshots.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Translation table, rubrics, experts and knowledge corpus; bundled when unset.
    #[serde(default)]
    pub catalog_dir: Option<PathBuf>,
    #[serde(default)]
    pub rule_table: Option<PathBuf>,
    /// Prompt template overrides.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    /// Built web UI assets, served under `/app`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default = "default_engine")]
    pub engine: EngineConfig,
    #[serde(default)]
    pub dialogue: DialogueConfig,
    #[serde(default)]
    pub agents: AgentConfig,
    #[serde(default)]
    pub backends: BackendRouting,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    /// Events per journal segment.
    #[serde(default = "default_segment_events")]
    pub segment_events: usize,
    /// Write a learner-model snapshot every this many journaled events; 0 disables.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    /// Call fsync after every journal append.
    #[serde(default)]
    pub fsync: bool,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("copa-data")
}

fn default_engine() -> EngineConfig {
    // Action posts are acknowledged before the agents finish.
    EngineConfig { evidence_mode: copa_core::engine::EvidenceMode::Background, ..EngineConfig::default() }
}

fn default_segment_events() -> usize {
    5_000
}

fn default_snapshot_every() -> usize {
    1_000
}

impl Default for ServiceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn catalog(&self) -> anyhow::Result<Arc<Catalog>> {
        Ok(Arc::new(match &self.catalog_dir {
            Some(dir) => Catalog::load(dir)?,
            None => Catalog::bundled(),
        }))
    }

    pub fn rules(&self) -> anyhow::Result<PolicyRuleTable> {
        Ok(match &self.rule_table {
            Some(p) => PolicyRuleTable::from_file(p)?,
            None => PolicyRuleTable::bundled(),
        })
    }

    pub fn templates(&self) -> anyhow::Result<TemplateSet> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::bundled(),
        })
    }

    /// Builds an engine writing to `journal`. Nothing is restored.
    pub fn engine(&self, journal: Arc<dyn Journal>) -> anyhow::Result<Engine> {
        let catalog = self.catalog()?;
        let templates = self.templates()?;
        let mut agents = EvidenceAgents::new(catalog.clone());
        agents.config = self.agents.clone();
        agents.templates = templates.clone();
        if let Some(b) = &self.backends.evidence {
            agents.backend = Some(b.build()?);
        }
        let mut dialogue = DialogueAgent::new(catalog.clone(), self.rules()?);
        dialogue.config = self.dialogue.clone();
        dialogue.templates = templates;
        if let Some(b) = &self.backends.dialogue {
            dialogue = dialogue.with_backend(b.build()?);
        }
        Ok(Engine::new(catalog, agents, dialogue, journal, self.engine.clone())?)
    }
}
