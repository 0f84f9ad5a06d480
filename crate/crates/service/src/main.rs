use std::collections::BTreeMap;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use copa_core::analytics::{self, AnalysisOptions, BinScheme, Normalization, SessionRecord};
use copa_core::audit::{self, AuditConfig, Pooling};
use copa_core::backends::{ChatBackendConfig, EmbeddingConfig};
use copa_core::catalog::parse_expert;
use copa_core::dialogue::PolicyRuleTable;
use copa_core::engine::{EvidenceMode, NullJournal};
use copa_core::ingest::{canonicalize, ingest_log, parse_jsonl, score_task};
use copa_core::model::{EvidenceTrace, LoggedAction, ModelState, SessionId, TaskId};
use copa_core::replay;
use copa_core::synth::{self, Profile};
use copa_service::api::{self, AppState, ADMIN_TOKEN_ENV};
use copa_service::config::ServiceConfig;
use copa_service::store::Persistent;

#[derive(Parser)]
#[command(name = "copa", version, about = "Adaptive scaffolding engine with traceable talk moves")]
struct Cli {
    /// Service configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Load an offline action log (JSON Lines) into the store.
    Ingest {
        file: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Print the mastery timeline of an action log, or the score of one program.
    Score {
        #[arg(long)]
        task: TaskId,
        /// Action log (JSON Lines), a program snapshot, or an expert reference.
        file: PathBuf,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Run a recorded log end to end with a scripted dialogue backend.
    Replay {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Directory for traces.jsonl and sessions.jsonl; stdout gets the traces otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, value_enum)]
        profile: SynthProfile,
        #[arg(long, default_value_t = 30)]
        dyads: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Trace count for the rq4 profiles.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Also write the replay log that reproduces the sessions.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Rules(Rules),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthProfile {
    Improving,
    Flat,
    Rq4Grounded,
    Rq4Scrambled,
}

#[derive(Args)]
struct RqArgs {
    /// Session records: a .jsonl or .json file, a directory of them, or - for stdin.
    #[arg(long)]
    sessions: String,
    #[arg(long)]
    scheme: Option<BinScheme>,
    /// One observation per bin instead of one per dyad and bin.
    #[arg(long)]
    pooled: bool,
    #[arg(long, value_enum, default_value = "within-bin")]
    normalization: NormArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    WithinBin,
    SessionTotal,
}

#[derive(Subcommand)]
enum Analyze {
    /// Policy frequency against mastery.
    Rq1(RqArgs),
    /// Probe success and post-turn mastery change.
    Rq2(RqArgs),
    /// Reliance on the agent against mastery.
    Rq3(RqArgs),
    /// Interpretability audit of trace links.
    Rq4 {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value_t = 100)]
        n1: usize,
        #[arg(long, default_value_t = 1000)]
        n2: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value = "hash")]
        embeddings: EmbedArg,
        #[arg(long, value_enum, default_value = "per-trace")]
        pooling: PoolArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    Hash,
    /// Uses the `embeddings` section of --config.
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    PerTrace,
    PerSession,
}

#[derive(Subcommand)]
enum Rules {
    /// Validate a rule table file.
    Check { file: PathBuf },
    /// Send a rule table to a running service.
    Reload {
        file: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    match cli.command {
        Command::Serve { listen, data_dir } => serve(config, listen, data_dir),
        Command::Ingest { file, data_dir } => ingest(config, &file, data_dir),
        Command::Score { task, file } => score(&config, &task, &file),
        Command::Analyze(a) => analyze(&config, a),
        Command::Replay { script, log, out } => run_replay(config, &script, &log, out.as_deref()),
        Command::Synth { profile, dyads, seed, count, log, out } => {
            run_synth(profile, dyads, seed, count, log.as_deref(), out.as_deref())
        }
        Command::Rules(r) => rules(r),
    }
}

fn serve(mut config: ServiceConfig, listen: Option<std::net::SocketAddr>, data_dir: Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(l) = listen {
        config.listen = l;
    }
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    let persist = Arc::new(Persistent::open(&config)?);
    let state = Arc::new(AppState {
        engine: persist.engine.clone(),
        persist: Some(persist.clone()),
        embedder: config.embeddings.build()?,
        admin_token: std::env::var(ADMIN_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
    });
    let app = api::router(state, config.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(config.listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    persist.engine.quiesce();
    persist.snapshot()?;
    Ok(())
}

fn ingest(mut config: ServiceConfig, file: &Path, data_dir: Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(d) = data_dir {
        config.data_dir = d;
    }
    let text = std::fs::read_to_string(file).with_context(|| file.display().to_string())?;
    let actions = parse_jsonl(&text).map_err(|(line, msg)| anyhow::anyhow!("{} line {line}: {msg}", file.display()))?;
    let mut by_session: BTreeMap<SessionId, Vec<LoggedAction>> = BTreeMap::new();
    for a in actions {
        by_session.entry(a.session.clone()).or_default().push(a);
    }
    config.engine.evidence_mode = EvidenceMode::Inline;
    let persist = Persistent::open(&config)?;
    let engine = &persist.engine;
    for (session, mut actions) in by_session {
        actions.sort_by_key(|a| a.timestamp);
        let first = &actions[0];
        let last_ts = actions.last().map_or(0, |a| a.timestamp);
        match engine.is_open(&session) {
            Ok(true) => {}
            Ok(false) => {
                println!("{session}: already closed, skipped");
                continue;
            }
            Err(_) => {
                engine.open_session_as(Some(session.clone()), &first.dyad, &first.task, first.timestamp)?;
            }
        }
        let receipt = engine.append_actions(&session, actions)?;
        engine.close_session(&session, last_ts)?;
        println!("{session}: {} accepted, {} duplicates", receipt.accepted, receipt.duplicates);
    }
    persist.snapshot()?;
    Ok(())
}

fn score(config: &ServiceConfig, task: &TaskId, file: &Path) -> anyhow::Result<()> {
    let catalog = config.catalog()?;
    let rubric = catalog.rubric(task)?;
    let text = std::fs::read_to_string(file).with_context(|| file.display().to_string())?;
    let value: Option<serde_json::Value> = serde_json::from_str(&text).ok();
    let single = match value {
        Some(v) if v.get("blocks").is_some() => {
            let state: ModelState = serde_json::from_value(v)?;
            state.validate()?;
            Some(canonicalize(&state))
        }
        Some(v) if v.get("timestamp").is_none() => Some(parse_expert(&text, task)?),
        _ => None,
    };
    if let Some(model) = single {
        let s = score_task(&model, task, rubric, 0)?;
        println!("{}", serde_json::to_string(&s)?);
        println!("mastery {:.3}", s.value);
        return Ok(());
    }
    let actions = parse_jsonl(&text).map_err(|(line, msg)| anyhow::anyhow!("{} line {line}: {msg}", file.display()))?;
    let log = ingest_log(&actions, &catalog.table, Some(rubric))?;
    let mut out = std::io::stdout().lock();
    for s in &log.timeline {
        writeln!(out, "{}", serde_json::to_string(s)?)?;
    }
    writeln!(out, "mastery {:.3}", log.timeline.last().map_or(0.0, |s| s.value))?;
    Ok(())
}

fn read_sessions(spec: &str) -> anyhow::Result<Vec<SessionRecord>> {
    Ok(if spec == "-" {
        analytics::read_sessions_jsonl(BufReader::new(std::io::stdin().lock()))?
    } else {
        analytics::load_sessions(Path::new(spec))?
    })
}

fn emit(json: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{json}\n")).with_context(|| p.display().to_string())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn rq_options(a: &RqArgs, default: BinScheme) -> AnalysisOptions {
    AnalysisOptions {
        scheme: a.scheme.unwrap_or(default),
        pooled: a.pooled,
        normalization: match a.normalization {
            NormArg::WithinBin => Normalization::WithinBin,
            NormArg::SessionTotal => Normalization::SessionTotal,
        },
    }
}

fn analyze(config: &ServiceConfig, a: Analyze) -> anyhow::Result<()> {
    match a {
        Analyze::Rq1(a) => {
            let r = analytics::rq1_policy_adaptation(&read_sessions(&a.sessions)?, rq_options(&a, BinScheme::Quintile))?;
            for p in &r.policies {
                eprintln!("{:<10} {}", p.policy, p.correlation);
            }
            emit(&serde_json::to_string_pretty(&r)?, a.out.as_deref())
        }
        Analyze::Rq2(a) => {
            let r = analytics::rq2_probe_success(&read_sessions(&a.sessions)?, rq_options(&a, BinScheme::Decile))?;
            eprintln!("probe success  {}", r.success);
            emit(&serde_json::to_string_pretty(&r)?, a.out.as_deref())
        }
        Analyze::Rq3(a) => {
            let r = analytics::rq3_reliance(&read_sessions(&a.sessions)?, rq_options(&a, BinScheme::Decile))?;
            eprintln!("reliance  {}", r.correlation);
            emit(&serde_json::to_string_pretty(&r)?, a.out.as_deref())
        }
        Analyze::Rq4 { traces, n1, n2, seed, embeddings, pooling, out } => {
            let text = std::fs::read_to_string(&traces).with_context(|| traces.display().to_string())?;
            let traces: Vec<EvidenceTrace> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("trace line {}", i + 1)))
                .collect::<anyhow::Result<_>>()?;
            let embedder = match embeddings {
                EmbedArg::Hash => EmbeddingConfig::default().build()?,
                EmbedArg::Remote => match &config.embeddings {
                    c @ EmbeddingConfig::RemoteHttp { .. } => c.build()?,
                    _ => bail!("--embeddings remote needs a RemoteHttp embeddings section in --config"),
                },
            };
            let cfg = AuditConfig {
                n1,
                n2,
                seed,
                pooling: match pooling {
                    PoolArg::PerTrace => Pooling::PerTrace,
                    PoolArg::PerSession => Pooling::PerSession,
                },
                ..AuditConfig::default()
            };
            let report = audit::audit(&traces, embedder.as_ref(), &cfg)?;
            eprint!("{}", report.to_table());
            emit(&serde_json::to_string_pretty(&report)?, out.as_deref())
        }
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| path.display().to_string())?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn run_replay(mut config: ServiceConfig, script: &Path, log: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let entries = replay::parse_log(&std::fs::read_to_string(log).with_context(|| log.display().to_string())?)?;
    config.engine.evidence_mode = EvidenceMode::Inline;
    config.backends.dialogue = Some(ChatBackendConfig::ScriptedReplay { script: script.to_path_buf(), model: None });
    let engine = config.engine(Arc::new(NullJournal))?;
    let run = replay::replay(&engine, &entries)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_jsonl(&dir.join("traces.jsonl"), &run.traces)?;
            write_jsonl(&dir.join("sessions.jsonl"), &run.sessions)?;
            eprintln!("{} traces, {} sessions written to {}", run.traces.len(), run.sessions.len(), dir.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for t in &run.traces {
                serde_json::to_writer(&mut stdout, t)?;
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn run_synth(
    profile: SynthProfile,
    dyads: usize,
    seed: u64,
    count: usize,
    log: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    match profile {
        SynthProfile::Rq4Grounded | SynthProfile::Rq4Scrambled => {
            if log.is_some() {
                bail!("--log applies to the improving and flat profiles");
            }
            for t in synth::rq4_traces(count, seed, matches!(profile, SynthProfile::Rq4Scrambled)) {
                serde_json::to_writer(&mut buf, &t)?;
                buf.push(b'\n');
            }
        }
        SynthProfile::Improving | SynthProfile::Flat => {
            let p = if matches!(profile, SynthProfile::Improving) { Profile::Improving } else { Profile::Flat };
            let corpus = synth::generate(p, dyads, seed)?;
            for s in &corpus.sessions {
                serde_json::to_writer(&mut buf, s)?;
                buf.push(b'\n');
            }
            if let Some(path) = log {
                let f = std::fs::File::create(path).with_context(|| path.display().to_string())?;
                replay::write_log(&corpus.log, std::io::BufWriter::new(f))?;
            }
        }
    }
    match out {
        Some(p) => std::fs::write(p, buf).with_context(|| p.display().to_string())?,
        None => std::io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

fn rules(r: Rules) -> anyhow::Result<()> {
    match r {
        Rules::Check { file } => {
            let t = PolicyRuleTable::from_file(&file)?;
            println!("{}: {} rules, valid", file.display(), t.rules.len());
        }
        Rules::Reload { file, url } => {
            let text = std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            PolicyRuleTable::from_json(&text)?;
            let mut req = ureq::put(&format!("{}/admin/rule-table", url.trim_end_matches('/')))
                .header("content-type", "application/json");
            if let Ok(token) = std::env::var(ADMIN_TOKEN_ENV) {
                req = req.header("authorization", &format!("Bearer {token}"));
            }
            let mut resp = req.config().http_status_as_error(false).build().send(text.as_str())?;
            let mut body = String::new();
            resp.body_mut().as_reader().read_to_string(&mut body)?;
            if !resp.status().is_success() {
                bail!("reload failed with {}: {body}", resp.status());
            }
            println!("{body}");
        }
    }
    Ok(())
}
