use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::Serialize;
use talktrack::compliance::RuleSet;
use talktrack::config::RunConfig;
use talktrack::dialogue::{ActionCatalog, EncoderConfig};
use talktrack::experience::{aggregate, ingest_dir};
use talktrack::orchestrator::{ab_compare, evaluate_artifact, write_json};
use talktrack::policy::PolicyArtifact;
use talktrack::scenario::{Scenario, ScenarioSpec};
use talktrack::world::{toyshop_catalog, toyshop_rules, World};
use talktrack::{Error, ErrorKind};
use talktrack_service::{FeedbackService, ServiceOptions};

#[derive(Parser)]
#[command(name = "talktrack", version, about = "Train, evaluate and compare sales talk-track policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// World files for commands that take a scenario on the command line. The
/// bundled catalog and rules are used unless given.
#[derive(clap::Args)]
struct WorldArgs {
    /// Scenario JSON file.
    #[arg(short, long)]
    scenario: PathBuf,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
}

impl WorldArgs {
    fn world(&self, encoder: EncoderConfig) -> talktrack::Result<World> {
        let catalog = match &self.catalog {
            Some(p) => Arc::new(ActionCatalog::load(p)?),
            None => toyshop_catalog(),
        };
        let rules = match (&self.rules, &self.catalog) {
            (Some(p), _) => Arc::new(RuleSet::load(p)?),
            (None, None) => toyshop_rules(),
            (None, Some(_)) => Arc::new(RuleSet::empty()),
        };
        World::new(Arc::new(Scenario::load(&self.scenario, catalog)?), rules, encoder)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the stage described by a TOML config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Greedy evaluation of a trained artifact.
    Eval {
        #[arg(short, long)]
        artifact: PathBuf,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(short = 'n', long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare the conversion rates of two artifacts.
    Ab {
        #[arg(short = 'a', long = "a")]
        artifact_a: PathBuf,
        #[arg(short = 'b', long = "b")]
        artifact_b: PathBuf,
        #[command(flatten)]
        world: WorldArgs,
        /// Episodes per arm.
        #[arg(short = 'n', long, default_value_t = 500)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Validate a directory of conversation logs.
    Ingest {
        dir: PathBuf,
        /// Fail on malformed lines instead of skipping them.
        #[arg(long)]
        strict: bool,
    },
    /// Summarise logs into per-state, per-action statistics.
    Aggregate {
        logs: PathBuf,
        /// Scenario whose dynamics are replaced by the logged statistics.
        #[arg(short, long)]
        template: Option<PathBuf>,
        /// Where to write the table (or the rebuilt scenario with --template).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Serve the labeling queue and chat sandbox.
    Serve {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> talktrack::Result<()> {
    if let Some(path) = output {
        write_json(path, value)?;
    }
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_artifact(path: &Path, world: &WorldArgs) -> talktrack::Result<(PolicyArtifact, World)> {
    let artifact = PolicyArtifact::load(path)?;
    let world = world.world(artifact.encoder)?;
    Ok((artifact, world))
}

fn run(cli: Cli) -> talktrack::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = talktrack::orchestrator::train(&cfg)?;
            emit(&outcome.summary, None)
        }
        Command::Eval {
            artifact,
            world,
            episodes,
            seed,
            output,
        } => {
            let (artifact, world) = load_artifact(&artifact, &world)?;
            emit(&evaluate_artifact(&artifact, &world, episodes, seed)?, output.as_deref())
        }
        Command::Ab {
            artifact_a,
            artifact_b,
            world,
            episodes,
            seed,
            output,
        } => {
            let (a, world_a) = load_artifact(&artifact_a, &world)?;
            let b = PolicyArtifact::load(&artifact_b)?;
            a.check_compatible(&world_a)?;
            b.check_compatible(&world_a)?;
            emit(&ab_compare(&a, &b, &world_a, episodes, seed)?, output.as_deref())
        }
        Command::Ingest { dir, strict } => {
            let report = ingest_dir(&dir)?;
            #[derive(Serialize)]
            struct Summary {
                episodes: usize,
                malformed_lines: usize,
                errors: Vec<String>,
            }
            let summary = Summary {
                episodes: report.episodes.len(),
                malformed_lines: report.errors.len(),
                errors: report.errors.iter().map(ToString::to_string).collect(),
            };
            emit(&summary, None)?;
            if strict {
                report.into_strict()?;
            }
            Ok(())
        }
        Command::Aggregate { logs, template, output } => {
            let episodes = ingest_dir(&logs)?.into_strict()?;
            if episodes.is_empty() {
                return Err(Error::NoTrainingData(format!("no episodes in {}", logs.display())));
            }
            match template {
                Some(t) => {
                    let spec = ScenarioSpec::load(&t)?;
                    let table = aggregate(&episodes, Some(spec.max_turns));
                    emit(&table.apply_to(&spec)?, output.as_deref())
                }
                None => emit(&aggregate(&episodes, None), output.as_deref()),
            }
        }
        Command::Serve { config, port, host } => {
            let cfg = RunConfig::load(&config)?;
            let world = cfg.world()?;
            let path = cfg
                .service
                .artifact
                .clone()
                .ok_or_else(|| Error::config("service.artifact", "required to serve"))?;
            let opts = ServiceOptions {
                preferences: cfg.service.preferences.clone(),
                sessions: cfg.service.sessions.clone(),
                lease: Duration::from_secs(cfg.service.lease_secs),
                generate_tasks: cfg.service.generate_tasks,
                artifact_path: Some(path.clone()),
                seed: cfg.seed,
            };
            let service = Arc::new(FeedbackService::new(world, PolicyArtifact::load(&path)?, opts)?);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
            runtime
                .block_on(talktrack_service::serve(service, SocketAddr::new(host, port)))
                .map_err(|e| Error::io(format!("{host}:{port}"), e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config | ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
