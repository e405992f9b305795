//! TOML run configuration. Everything is validated before any work starts.
//!
//! ```toml
//! seed = 7
//! algo = "dqn"
//! mode = "online"
//! output_dir = "runs/dqn"
//!
//! [dqn]
//! num_episodes = 3000
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. When `[paths]` is omitted the bundled toy-shop world is used.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dialogue::{ActionCatalog, EncoderConfig};
use crate::compliance::RuleSet;
use crate::dqn::DqnConfig;
use crate::error::{Error, Result};
use crate::policy::Algo;
use crate::ppo::PpoConfig;
use crate::rlhf::{RewardModelConfig, RlhfConfig, SftConfig};
use crate::scenario::Scenario;
use crate::world::{toyshop_catalog, toyshop_rules, toyshop_scenario, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Learn from recorded data only.
    Offline,
    /// Interact with the sampled simulator.
    #[default]
    Online,
    /// Interact with the simulator's deterministic aggregate feedback.
    Aggregate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldPaths {
    pub scenario: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub rules: Option<PathBuf>,
}

/// Inputs for the data-driven stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory of `*.jsonl` conversation logs.
    pub logs: Option<PathBuf>,
    /// Annotated conversations for behaviour cloning.
    pub annotated: Option<PathBuf>,
    /// Number of oracle-labelled conversations to add to the cloning set.
    pub expert_episodes: Option<usize>,
    pub preferences: Option<PathBuf>,
    pub base_artifact: Option<PathBuf>,
    pub reward_artifact: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Policy served to chat sessions and used to generate label tasks.
    pub artifact: Option<PathBuf>,
    pub preferences: PathBuf,
    pub sessions: PathBuf,
    pub lease_secs: u64,
    /// Create new label tasks on demand when the queue is empty.
    pub generate_tasks: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            artifact: None,
            preferences: PathBuf::from("preferences.jsonl"),
            sessions: PathBuf::from("sessions.jsonl"),
            lease_secs: 120,
            generate_tasks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algo: Algo,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub paths: WorldPaths,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub reward_model: RewardModelConfig,
    #[serde(default)]
    pub rlhf: RlhfConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub service: ServiceConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Digest of everything that influences the trained result. The output
    /// directory is left out so the same run written elsewhere matches.
    pub fn digest(&self) -> Result<String> {
        let mut cfg = self.clone();
        cfg.output_dir = PathBuf::new();
        crate::policy::config_digest(&cfg)
    }

    /// Parse without touching the file system. Paths stay as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(|| "<root>".to_owned(), |s| field_at(text, s.start));
            Error::config(field, e.message().trim().to_owned())
        })?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Parse, resolve relative paths against the file's directory and check
    /// that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        cfg.validate_files()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.paths.scenario,
            &mut self.paths.catalog,
            &mut self.paths.rules,
            &mut self.data.logs,
            &mut self.data.annotated,
            &mut self.data.preferences,
            &mut self.data.base_artifact,
            &mut self.data.reward_artifact,
            &mut self.service.artifact,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.service.preferences);
        fix(&mut self.service.sessions);
    }

    fn validate_values(&self) -> Result<()> {
        self.encoder.validate()?;
        match self.algo {
            Algo::Dqn => self.dqn.validate()?,
            Algo::Ppo => self.ppo.validate()?,
            Algo::Sft => self.sft.validate()?,
            Algo::RewardModel => self.reward_model.validate()?,
            Algo::Rlhf => self.rlhf.validate()?,
        }
        let needs_offline = matches!(self.algo, Algo::Sft | Algo::RewardModel);
        if needs_offline && self.mode != TrainMode::Offline {
            return Err(Error::config("mode", format!("{} trains from recorded data; use mode = \"offline\"", self.algo.as_str())));
        }
        if matches!(self.algo, Algo::Ppo | Algo::Rlhf) && self.mode == TrainMode::Offline {
            return Err(Error::config("mode", format!("{} needs an environment; offline mode is not supported", self.algo.as_str())));
        }
        if self.mode == TrainMode::Offline && self.algo == Algo::Dqn && self.data.logs.is_none() {
            return Err(Error::config("data.logs", "offline dqn needs a log directory"));
        }
        match self.algo {
            Algo::RewardModel if self.data.preferences.is_none() => {
                Err(Error::config("data.preferences", "required for reward-model training"))
            }
            Algo::Rlhf if self.data.base_artifact.is_none() => {
                Err(Error::config("data.base_artifact", "required for rlhf"))
            }
            Algo::Rlhf if self.data.reward_artifact.is_none() => {
                Err(Error::config("data.reward_artifact", "required for rlhf"))
            }
            _ => Ok(()),
        }
    }

    fn validate_files(&self) -> Result<()> {
        let checks = [
            ("paths.scenario", &self.paths.scenario),
            ("paths.catalog", &self.paths.catalog),
            ("paths.rules", &self.paths.rules),
            ("data.logs", &self.data.logs),
            ("data.annotated", &self.data.annotated),
            ("data.preferences", &self.data.preferences),
            ("data.base_artifact", &self.data.base_artifact),
            ("data.reward_artifact", &self.data.reward_artifact),
            ("service.artifact", &self.service.artifact),
        ];
        for (field, path) in checks {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        if self.paths.scenario.is_some() != self.paths.catalog.is_some() {
            return Err(Error::config("paths", "scenario and catalog must be given together"));
        }
        Ok(())
    }

    /// Build the world the run trains in.
    pub fn world(&self) -> Result<World> {
        let catalog: Arc<ActionCatalog> = match &self.paths.catalog {
            Some(p) => Arc::new(ActionCatalog::load(p)?),
            None => toyshop_catalog(),
        };
        let scenario = match &self.paths.scenario {
            Some(p) => Arc::new(Scenario::load(p, catalog)?),
            None => toyshop_scenario(),
        };
        let rules = match &self.paths.rules {
            Some(p) => Arc::new(RuleSet::load(p)?),
            None if self.paths.scenario.is_some() => Arc::new(RuleSet::empty()),
            None => toyshop_rules(),
        };
        World::new(scenario, rules, self.encoder)
    }
}

/// Dotted key path of the table entry that contains byte offset `pos`.
fn field_at(text: &str, pos: usize) -> String {
    let mut table = String::new();
    let mut key = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_owned();
            key = None;
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = Some(k.trim().to_owned());
        }
        offset += line.len();
        if offset > pos {
            break;
        }
    }
    match (table.is_empty(), key) {
        (true, Some(k)) => k,
        (false, Some(k)) => format!("{table}.{k}"),
        (false, None) => table,
        (true, None) => "<root>".to_owned(),
    }
}
