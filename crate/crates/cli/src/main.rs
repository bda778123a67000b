//! `fpga-reconfig`: drives the analyze → search → decide → approve →
//! reconfigure cycle from the command line.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration as StdDuration;

use anyhow::{anyhow, bail, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use fpga_reconfig::analytics::{
    build_histogram, improvement_coefficient, load_log, render_log, select_representative,
    summarize_window, top_k_apps, RequestRecord, Window,
};
use fpga_reconfig::backend::{
    serve_command, CommandBackend, CostModelConfig, MeasurementBackend, ReconfigLatency, SimClock,
    SimulatedBackend,
};
use fpga_reconfig::decision::{
    Answer, ApprovalChannel, AutoApprove, FileDropChannel, PromptChannel, ReconfigProposal,
};
use fpga_reconfig::executor::{FpgaController, FpgaState, ReconfigMode, SimulatedDevice};
use fpga_reconfig::loop_analysis::AppCodeProfile;
use fpga_reconfig::orchestrator::{
    replay_scenario, run_cycle, ApprovalMode, BackendConfig, Catalog, CycleContext, CycleReport,
    CycleStatus, OrchestratorConfig, ReplayOverrides, Scenario,
};
use fpga_reconfig::pattern_search::run_search;
use serde_json::json;
use tracing::{info, warn};

const EXIT_USAGE: u8 = 1;
const EXIT_CYCLE: u8 = 2;
const EXIT_GOLDEN: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fpga-reconfig",
    version,
    about = "Load-driven FPGA offload reconfiguration"
)]
struct Cli {
    /// Orchestrator config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Answer OK to every proposal.
    #[arg(long, global = true)]
    auto_approve: bool,
    /// Decide but never ask, reconfigure or write the catalog.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Seed for synthetic traffic and measurement noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the improvement-ratio threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Cycle instant (RFC 3339); defaults to the current time.
    #[arg(long, global = true)]
    now: Option<DateTime<Utc>>,
    /// Directory for report documents; overrides the configured one.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load analysis only: summaries, top apps, histograms.
    Analyze,
    /// Pattern search for one app on its representative data.
    Search { app: String },
    /// One full cycle.
    RunCycle,
    /// Repeated cycles at a fixed interval.
    Watch {
        /// Seconds between cycles.
        #[arg(long)]
        interval: u64,
        #[arg(long)]
        max_cycles: Option<u64>,
    },
    /// Replays a scenario and diffs it against its expected values.
    Replay {
        scenario: PathBuf,
        /// Also writes the generated request log here.
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Answers OK to a pending proposal and carries it out.
    Approve { proposal_id: String },
    /// Answers NG to a pending proposal.
    Reject { proposal_id: String },
    /// Command-adapter server over a cost model.
    #[command(hide = true)]
    SimBackend {
        #[arg(long)]
        cost_model: PathBuf,
        op: String,
    },
}

/// Failure with its exit code.
struct Failure(u8, anyhow::Error);

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure(EXIT_USAGE, e.into())
}

fn cycle(e: impl Into<anyhow::Error>) -> Failure {
    Failure(EXIT_CYCLE, e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::SimBackend { cost_model, op } => sim_backend(cost_model, op),
        Command::Replay { scenario, log_out } => replay(&cli, scenario, log_out.as_deref()),
        Command::Analyze => analyze(&cli),
        Command::Search { app } => search(&cli, app),
        Command::RunCycle => {
            let report = cycle_once(&cli, None)?;
            exit_for(&report)
        }
        Command::Watch {
            interval,
            max_cycles,
        } => watch(&cli, *interval, *max_cycles),
        Command::Approve { proposal_id } => answer(&cli, proposal_id, Answer::Ok),
        Command::Reject { proposal_id } => answer(&cli, proposal_id, Answer::Ng),
    }
}

fn sim_backend(cost_model: &Path, op: &str) -> Result<(), Failure> {
    let config = CostModelConfig::load(cost_model).map_err(usage)?;
    let mut request = String::new();
    io::stdin().read_to_string(&mut request).map_err(usage)?;
    let value = serve_command(&config, op, &request).map_err(cycle)?;
    println!("{value}");
    Ok(())
}

fn write_doc(dir: Option<&Path>, name: &str, text: &str) -> Result<(), Failure> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(cycle)?;
        let path = dir.join(name);
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(cycle)?;
        info!(path = %path.display(), "report written");
    }
    Ok(())
}

fn replay(cli: &Cli, path: &Path, log_out: Option<&Path>) -> Result<(), Failure> {
    let scenario = Scenario::load(path).map_err(usage)?;
    if let Some(out) = log_out {
        let records = scenario
            .generate_log(cli.seed.unwrap_or(scenario.seed))
            .map_err(usage)?;
        std::fs::write(out, render_log(&records))
            .with_context(|| format!("writing {}", out.display()))
            .map_err(cycle)?;
    }
    let overrides = ReplayOverrides {
        seed: cli.seed,
        threshold: cli.threshold,
    };
    let outcome = replay_scenario(&scenario, overrides).map_err(cycle)?;
    for d in &outcome.diffs {
        let tag = if d.ok { "PASS" } else { "FAIL" };
        println!(
            "{tag} {}: expected {}, actual {}",
            d.quantity, d.expected, d.actual
        );
    }
    println!(
        "{} {} (seed {}, status {})",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.scenario,
        outcome.seed,
        status_name(outcome.report.status)
    );
    let name = format!("replay-{}-seed{}.json", outcome.scenario, outcome.seed);
    write_doc(cli.output.as_deref(), &name, &outcome.report.to_json())?;
    if outcome.pass {
        Ok(())
    } else {
        let failing: Vec<_> = outcome
            .diffs
            .iter()
            .filter(|d| !d.ok)
            .map(|d| d.quantity.as_str())
            .collect();
        Err(Failure(
            EXIT_GOLDEN,
            anyhow!("golden diff failed: {}", failing.join(", ")),
        ))
    }
}

fn status_name(s: CycleStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn exit_for(report: &CycleReport) -> Result<(), Failure> {
    match report.status {
        CycleStatus::RolledBack | CycleStatus::ReconfigFailed => Err(cycle(anyhow!(
            "reconfiguration {}: {}",
            status_name(report.status),
            report
                .event
                .as_ref()
                .and_then(|e| e.detail.clone())
                .unwrap_or_default()
        ))),
        _ => Ok(()),
    }
}

/// Everything a cycle needs, loaded from the config file.
struct Env {
    config: OrchestratorConfig,
    records: Vec<RequestRecord>,
    malformed: usize,
    profiles: BTreeMap<String, AppCodeProfile>,
    backend: Box<dyn MeasurementBackend>,
    latency: ReconfigLatency,
    clock: SimClock,
    catalog: Option<Catalog>,
    now: DateTime<Utc>,
}

fn load_profiles(paths: &[PathBuf]) -> anyhow::Result<BTreeMap<String, AppCodeProfile>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = BTreeMap::new();
    for f in files {
        let profile = AppCodeProfile::load(&f)?;
        if out.insert(profile.app_id.clone(), profile).is_some() {
            bail!("duplicate profile for one app in {}", f.display());
        }
    }
    Ok(out)
}

impl Env {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| usage(anyhow!("--config is required")))?;
        let mut config = OrchestratorConfig::load(path).map_err(usage)?;
        if let Some(out) = &cli.output {
            config.paths.output = Some(out.clone());
        }
        let now = cli.now.unwrap_or_else(Utc::now);
        let (records, malformed) = match &config.paths.log {
            Some(log) if log.exists() => {
                let parsed = load_log(log, config.fatal_malformed).map_err(cycle)?;
                for (line, reason) in &parsed.malformed {
                    warn!(line, %reason, "skipping malformed log line");
                }
                (parsed.records, parsed.malformed.len())
            }
            Some(log) => return Err(cycle(anyhow!("log {} is not readable", log.display()))),
            None => (Vec::new(), 0),
        };
        let profiles = load_profiles(&config.paths.profiles).map_err(usage)?;
        let clock = SimClock::starting_at(now.timestamp() as f64);
        let (backend, latency): (Box<dyn MeasurementBackend>, _) = match &config.backend {
            BackendConfig::Simulated => {
                let cm_path =
                    config.paths.cost_model.as_deref().ok_or_else(|| {
                        usage(anyhow!("simulated backend needs paths.cost_model"))
                    })?;
                let mut cm = CostModelConfig::load(cm_path).map_err(usage)?;
                if let Some(seed) = cli.seed {
                    cm.seed = seed;
                }
                let latency = cm.reconfig;
                (
                    Box::new(SimulatedBackend::with_clock(cm, clock.clone()).map_err(usage)?),
                    latency,
                )
            }
            BackendConfig::Command(spec) => (
                Box::new(CommandBackend::new(spec.clone(), clock.clone())),
                ReconfigLatency::default(),
            ),
        };
        // A dry run must leave no trace, so a missing catalog stays missing.
        let catalog = match &config.paths.catalog {
            Some(dir) if !cli.dry_run || dir.exists() => Some(Catalog::open(dir).map_err(cycle)?),
            _ => None,
        };
        Ok(Self {
            config,
            records,
            malformed,
            profiles,
            backend,
            latency,
            clock,
            catalog,
            now,
        })
    }

    fn controller(&self) -> Result<FpgaController<SimulatedDevice>, Failure> {
        let loaded = match &self.catalog {
            Some(cat) => cat.loaded_pattern().map_err(cycle)?,
            None => None,
        };
        let pattern =
            loaded.or_else(|| self.config.current_pattern.as_ref().map(|p| p.to_pattern()));
        let state = match pattern {
            Some(p) => {
                let artifact = self.backend.compile(&p).map_err(cycle)?;
                FpgaState::running(p, artifact)
            }
            None => FpgaState::empty(),
        };
        let latency = match self.config.reconfig_mode {
            ReconfigMode::Static => self.latency.static_seconds,
            ReconfigMode::Dynamic => self.latency.dynamic_seconds,
        };
        Ok(FpgaController::new(
            state,
            SimulatedDevice::new(self.clock.clone(), latency),
            self.config.reconfig_mode,
            self.config.downtime_policy,
        ))
    }

    fn approval(&self, cli: &Cli) -> Box<dyn ApprovalChannel> {
        if cli.auto_approve {
            return Box::new(AutoApprove);
        }
        match self.config.approval {
            ApprovalMode::Prompt => Box::new(PromptChannel::new(io::stdin().lock(), io::stderr())),
            ApprovalMode::File => {
                let dir = self
                    .config
                    .paths
                    .answers
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("answers"));
                Box::new(FileDropChannel::new(
                    dir,
                    StdDuration::from_secs(self.config.approval_timeout_secs),
                ))
            }
        }
    }

    fn output(&self) -> Option<&Path> {
        self.config.paths.output.as_deref()
    }
}

fn stamp(now: DateTime<Utc>) -> String {
    now.format("%Y%m%dT%H%M%SZ").to_string()
}

fn print_json(value: &serde_json::Value) -> String {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    print!("{text}");
    let _ = io::stdout().flush();
    text
}

fn analyze(cli: &Cli) -> Result<(), Failure> {
    let env = Env::load(cli)?;
    let cfg = &env.config;
    let long = Window::ending_at(env.now, cfg.long_window()).map_err(usage)?;
    let short = Window::ending_at(env.now, cfg.short_window()).map_err(usage)?;
    let coefficients = env
        .profiles
        .iter()
        .map(|(id, p)| improvement_coefficient(p).map(|c| (id.clone(), c)))
        .collect::<Result<BTreeMap<_, _>, _>>()
        .map_err(cycle)?;
    let summaries =
        summarize_window(&env.records, &long, &coefficients, cfg.strict_apps).map_err(cycle)?;
    let top = top_k_apps(&summaries, cfg.top_k);
    let mut histograms = BTreeMap::new();
    let mut representatives = BTreeMap::new();
    for s in &top {
        let hist =
            build_histogram(&env.records, &s.app_id, &short, cfg.bucket_width).map_err(cycle)?;
        if !hist.is_empty() {
            let rep =
                select_representative(&env.records, &s.app_id, &short, &hist).map_err(cycle)?;
            representatives.insert(s.app_id.clone(), rep);
        }
        histograms.insert(s.app_id.clone(), hist);
    }
    let doc = json!({
        "analyzed_at": env.now,
        "long_window": long,
        "short_window": short,
        "malformed_lines": env.malformed,
        "summaries": summaries,
        "top_apps": top.iter().map(|s| &s.app_id).collect::<Vec<_>>(),
        "histograms": histograms,
        "representatives": representatives,
    });
    let text = print_json(&doc);
    write_doc(
        env.output(),
        &format!("analyze-{}.json", stamp(env.now)),
        &text,
    )
}

fn search(cli: &Cli, app: &str) -> Result<(), Failure> {
    let env = Env::load(cli)?;
    let cfg = &env.config;
    let profile = env
        .profiles
        .get(app)
        .ok_or_else(|| usage(anyhow!("no code profile for {app}")))?;
    let short = Window::ending_at(env.now, cfg.short_window()).map_err(usage)?;
    let hist = build_histogram(&env.records, app, &short, cfg.bucket_width).map_err(cycle)?;
    let rep = select_representative(&env.records, app, &short, &hist)
        .with_context(|| format!("{app} has no requests in the short window"))
        .map_err(cycle)?;
    let result =
        run_search(profile, &rep, env.backend.as_ref(), &cfg.search_params()).map_err(cycle)?;
    if let (Some(cat), false) = (&env.catalog, cli.dry_run) {
        cat.store_search(&result, env.now).map_err(cycle)?;
    }
    let text = print_json(&serde_json::to_value(&result).map_err(cycle)?);
    write_doc(
        env.output(),
        &format!("search-{app}-{}.json", stamp(env.now)),
        &text,
    )
}

fn cycle_once(cli: &Cli, approval: Option<&dyn ApprovalChannel>) -> Result<CycleReport, Failure> {
    let env = Env::load(cli)?;
    let controller = env.controller()?;
    let default_channel = env.approval(cli);
    let ctx = CycleContext {
        config: &env.config,
        records: &env.records,
        malformed_lines: env.malformed,
        profiles: &env.profiles,
        backend: env.backend.as_ref(),
        controller: &controller,
        approval: approval.unwrap_or(default_channel.as_ref()),
        catalog: env.catalog.as_ref(),
        now: env.now,
        dry_run: cli.dry_run,
        threshold: cli.threshold,
    };
    let report = run_cycle(&ctx).map_err(cycle)?;
    let text = report.to_json();
    print!("{text}");
    if !cli.dry_run {
        if let Some(dir) = env.output() {
            report.write_to(dir).map_err(cycle)?;
        }
    }
    eprintln!(
        "cycle {}: {}",
        stamp(report.cycle_at),
        status_name(report.status)
    );
    Ok(report)
}

fn watch(cli: &Cli, interval: u64, max_cycles: Option<u64>) -> Result<(), Failure> {
    if interval == 0 {
        return Err(usage(anyhow!("--interval must be > 0")));
    }
    let mut n = 0;
    loop {
        // A failed cycle is reported and the next one still runs.
        match cycle_once(cli, None) {
            Ok(report) => {
                if let Err(Failure(_, e)) = exit_for(&report) {
                    warn!("{e:#}");
                }
            }
            Err(Failure(EXIT_USAGE, e)) => return Err(usage(e)),
            Err(Failure(_, e)) => warn!("cycle failed: {e:#}"),
        }
        n += 1;
        if max_cycles.is_some_and(|m| n >= m) {
            return Ok(());
        }
        std::thread::sleep(StdDuration::from_secs(interval));
    }
}

/// Answers a pending proposal with a fixed value.
struct Fixed(Answer);

impl ApprovalChannel for Fixed {
    fn ask(&self, _: &ReconfigProposal) -> fpga_reconfig::Result<Answer> {
        Ok(self.0)
    }
}

fn answer(cli: &Cli, proposal_id: &str, answer: Answer) -> Result<(), Failure> {
    if cli.dry_run {
        return Err(usage(anyhow!(
            "approve/reject cannot be combined with --dry-run"
        )));
    }
    let env = Env::load(cli)?;
    let cat = env
        .catalog
        .as_ref()
        .ok_or_else(|| usage(anyhow!("approve/reject need paths.catalog")))?;
    let pending = cat.pending_proposal().map_err(cycle)?;
    match pending {
        Some(p) if p.proposal.proposal_id == proposal_id => {}
        Some(p) => {
            return Err(usage(anyhow!(
                "{proposal_id} is not pending (pending: {})",
                p.proposal.proposal_id
            )))
        }
        None => return Err(usage(anyhow!("no pending proposal"))),
    }
    drop(env);
    let report = cycle_once(cli, Some(&Fixed(answer)))?;
    exit_for(&report)
}
