//! One analyze → search → decide → approve → reconfigure cycle.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::info;

use super::catalog::{pattern_key, Catalog, ProposalRecord};
use super::config::OrchestratorConfig;
use crate::analytics::{
    build_histogram, improvement_coefficient, select_representative, summarize_window, top_k_apps,
    AppLoadSummary, RequestRecord, SizeHistogram, Window,
};
use crate::backend::{DataRef, MeasurementBackend};
use crate::decision::{
    await_approval, decide, Approval, ApprovalChannel, ImprovementEffect, ProposalKey,
    ReconfigProposal, Verdict,
};
use crate::error::{Error, Result};
use crate::executor::{FpgaController, FpgaDevice, Outcome, ReconfigEvent};
use crate::loop_analysis::AppCodeProfile;
use crate::pattern_search::{run_searches, OffloadPattern, SearchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Analyze,
    Search,
    Effects,
    Decide,
    Approve,
    Reconfigure,
    Persist,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{step} step failed: {source}")]
pub struct CycleError {
    pub step: Step,
    #[source]
    pub source: Error,
}

fn at(step: Step) -> impl Fn(Error) -> CycleError {
    move |source| CycleError { step, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    /// Gate held, nothing to propose, or no traffic at all.
    NoAction,
    /// An identical proposal was rejected recently.
    Suppressed,
    /// `--dry-run`: the gate passed but nothing was asked or changed.
    WouldPropose,
    Pending,
    Rejected,
    Reconfigured,
    RolledBack,
    ReconfigFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle_at: DateTime<Utc>,
    pub status: CycleStatus,
    pub long_window: Window,
    pub short_window: Window,
    pub malformed_lines: usize,
    pub summaries: Vec<AppLoadSummary>,
    pub top_apps: Vec<String>,
    pub histograms: BTreeMap<String, SizeHistogram>,
    pub representatives: BTreeMap<String, DataRef>,
    pub searches: Vec<SearchResult>,
    pub current_effect: Option<ImprovementEffect>,
    pub candidate_effects: Vec<ImprovementEffect>,
    pub proposal: Option<ReconfigProposal>,
    pub target_pattern: Option<OffloadPattern>,
    pub event: Option<ReconfigEvent>,
    pub loaded_before: Option<String>,
    pub loaded_after: Option<String>,
    /// Model-clock seconds the cycle consumed (compiles and downtime).
    pub model_seconds: f64,
    pub diagnostics: Vec<String>,
}

impl CycleReport {
    pub fn summary(&self, app_id: &str) -> Option<&AppLoadSummary> {
        self.summaries.iter().find(|s| s.app_id == app_id)
    }

    pub fn candidate(&self, app_id: &str) -> Option<&ImprovementEffect> {
        self.candidate_effects.iter().find(|c| c.app_id == app_id)
    }

    /// Stable JSON rendering.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!(
            "cycle-{}.json",
            self.cycle_at.format("%Y%m%dT%H%M%SZ")
        ));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub struct CycleContext<'a, D> {
    pub config: &'a OrchestratorConfig,
    pub records: &'a [RequestRecord],
    pub malformed_lines: usize,
    pub profiles: &'a BTreeMap<String, AppCodeProfile>,
    pub backend: &'a dyn MeasurementBackend,
    pub controller: &'a FpgaController<D>,
    pub approval: &'a dyn ApprovalChannel,
    /// Persistence target; ignored on dry runs.
    pub catalog: Option<&'a Catalog>,
    pub now: DateTime<Utc>,
    pub dry_run: bool,
    /// Overrides the configured threshold.
    pub threshold: Option<f64>,
}

impl<D: FpgaDevice> CycleContext<'_, D> {
    fn persist(&self) -> Option<&Catalog> {
        if self.dry_run {
            None
        } else {
            self.catalog
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

fn repeated(n: usize, mut f: impl FnMut() -> Result<f64>) -> Result<f64> {
    Ok(median(
        (0..n.max(1)).map(|_| f()).collect::<Result<Vec<_>>>()?,
    ))
}

/// Runs steps 1 to 6. A proposal still awaiting an answer from an earlier
/// cycle is resolved first, and no new proposal is made while it is pending.
pub fn run_cycle<D: FpgaDevice>(ctx: &CycleContext<'_, D>) -> Result<CycleReport, CycleError> {
    let cfg = ctx.config;
    cfg.validate().map_err(at(Step::Analyze))?;
    let clock_start = ctx.backend.clock().now();
    let long = Window::ending_at(ctx.now, cfg.long_window()).map_err(at(Step::Analyze))?;
    let short = Window::ending_at(ctx.now, cfg.short_window()).map_err(at(Step::Analyze))?;
    let loaded = ctx.controller.snapshot().loaded_pattern;
    let mut report = CycleReport {
        cycle_at: ctx.now,
        status: CycleStatus::NoAction,
        long_window: long,
        short_window: short,
        malformed_lines: ctx.malformed_lines,
        summaries: Vec::new(),
        top_apps: Vec::new(),
        histograms: BTreeMap::new(),
        representatives: BTreeMap::new(),
        searches: Vec::new(),
        current_effect: None,
        candidate_effects: Vec::new(),
        proposal: None,
        target_pattern: None,
        event: None,
        loaded_before: loaded.as_ref().map(|p| p.pattern_id.clone()),
        loaded_after: None,
        model_seconds: 0.0,
        diagnostics: Vec::new(),
    };
    if ctx.malformed_lines > 0 {
        report.diagnostics.push(format!(
            "{} malformed log lines skipped",
            ctx.malformed_lines
        ));
    }

    if let Some(cat) = ctx.catalog {
        if let Some(pending) = cat.pending_proposal().map_err(at(Step::Approve))? {
            resume_pending(ctx, pending, &mut report)?;
            return Ok(finish(ctx, report, clock_start));
        }
    }

    // Step 1: load analysis and representative data.
    let coefficients = ctx
        .profiles
        .iter()
        .map(|(id, p)| improvement_coefficient(p).map(|c| (id.clone(), c)))
        .collect::<Result<BTreeMap<_, _>>>()
        .map_err(at(Step::Analyze))?;
    report.summaries = summarize_window(ctx.records, &long, &coefficients, cfg.strict_apps)
        .map_err(at(Step::Analyze))?;
    if report.summaries.is_empty() {
        report.status = CycleStatus::NoAction;
        report.diagnostics.push("no traffic".into());
        return Ok(finish(ctx, report, clock_start));
    }
    let top = top_k_apps(&report.summaries, cfg.top_k);
    report.top_apps = top.iter().map(|s| s.app_id.clone()).collect();

    let mut rep_apps = report.top_apps.clone();
    if let Some(p) = &loaded {
        if !rep_apps.contains(&p.app_id) {
            rep_apps.push(p.app_id.clone());
        }
    }
    for app in &rep_apps {
        let hist = build_histogram(ctx.records, app, &short, cfg.bucket_width)
            .map_err(at(Step::Analyze))?;
        if !hist.is_empty() {
            let rep = select_representative(ctx.records, app, &short, &hist)
                .map_err(at(Step::Analyze))?;
            if let Some(cat) = ctx.persist() {
                cat.record_test_case(app, &rep, ctx.now)
                    .map_err(at(Step::Persist))?;
            }
            report.representatives.insert(app.clone(), rep);
        } else {
            report.diagnostics.push(format!(
                "{app}: no requests in the short window; no representative data"
            ));
        }
        report.histograms.insert(app.clone(), hist);
    }

    // Step 2: pattern search for each top app.
    let mut jobs = Vec::new();
    for app in &report.top_apps {
        let profile = ctx
            .profiles
            .get(app)
            .ok_or_else(|| Error::UnknownApp(format!("{app} (no code profile)")))
            .map_err(at(Step::Search))?;
        match report.representatives.get(app) {
            Some(rep) => jobs.push((profile, rep.clone())),
            None => report
                .diagnostics
                .push(format!("{app}: skipped search without representative data")),
        }
    }
    for result in run_searches(&jobs, ctx.backend, &cfg.search_params()) {
        let result = result.map_err(at(Step::Search))?;
        if let Some(cat) = ctx.persist() {
            cat.store_search(&result, ctx.now)
                .map_err(at(Step::Persist))?;
        }
        report.searches.push(result);
    }

    // Step 3: effects of the current pattern and of each candidate.
    let hours = long.hours();
    let counts: BTreeMap<String, u64> = report
        .summaries
        .iter()
        .map(|s| (s.app_id.clone(), s.request_count))
        .collect();
    let freq = |app: &str| counts.get(app).map_or(0.0, |&n| n as f64 / hours);
    let current = match &loaded {
        Some(p) => match report.representatives.get(&p.app_id) {
            Some(rep) => {
                let artifact = ctx.backend.compile(p).map_err(at(Step::Effects))?;
                let offloaded = repeated(cfg.repeats, || ctx.backend.measure(&artifact, rep))
                    .map_err(at(Step::Effects))?;
                let baseline = repeated(cfg.repeats, || ctx.backend.measure_cpu(&p.app_id, rep))
                    .map_err(at(Step::Effects))?;
                ImprovementEffect::new(
                    &p.app_id,
                    &p.pattern_id,
                    baseline,
                    offloaded,
                    freq(&p.app_id),
                )
            }
            None => ImprovementEffect::none(&p.app_id, &p.pattern_id),
        },
        None => ImprovementEffect::none("-", "none"),
    };
    for s in &report.searches {
        let rep = &s.representative_data_ref;
        let baseline = repeated(cfg.repeats, || ctx.backend.measure_cpu(&s.app_id, rep))
            .map_err(at(Step::Effects))?;
        let offloaded = s.best.measured_time.unwrap_or(baseline);
        report.candidate_effects.push(ImprovementEffect::new(
            &s.app_id,
            &s.best.pattern_id,
            baseline,
            offloaded,
            freq(&s.app_id),
        ));
    }
    report.current_effect = Some(current.clone());

    // Step 4: threshold gate.
    let threshold = ctx.threshold.unwrap_or(cfg.threshold);
    let proposal_id = format!("prop-{}", ctx.now.format("%Y%m%dT%H%M%SZ"));
    let mut proposal = decide(
        proposal_id,
        &current,
        &report.candidate_effects,
        threshold,
        cfg.effect_floor,
    )
    .map_err(at(Step::Decide))?;
    let target = proposal.best_new.as_ref().and_then(|b| {
        report
            .searches
            .iter()
            .find(|s| s.app_id == b.app_id && s.best.pattern_id == b.pattern_id)
            .map(|s| s.best.clone())
    });
    if proposal.verdict == Verdict::Propose {
        if let (Some(t), Some(l)) = (&target, &loaded) {
            if t.same_loops(l) {
                proposal.verdict = Verdict::NoAction;
                proposal.diagnostic = Some("best candidate is already loaded".into());
            }
        }
    }
    report.target_pattern = target.clone();
    report.proposal = Some(proposal.clone());
    if proposal.verdict == Verdict::NoAction {
        report.status = CycleStatus::NoAction;
        return Ok(finish(ctx, report, clock_start));
    }
    let target = target.expect("a propose verdict always has a searched target");

    // Step 5: approval, honouring cool-downs from earlier NG answers.
    let key = ProposalKey {
        from: loaded.as_ref().map(pattern_key),
        to: pattern_key(&target),
    };
    if let Some(cat) = ctx.catalog {
        if cat
            .cooldowns()
            .map_err(at(Step::Approve))?
            .is_suppressed(&key, ctx.now)
        {
            report.status = CycleStatus::Suppressed;
            report.diagnostics.push(format!(
                "proposal {} -> {} is cooling down after NG",
                key.from.as_deref().unwrap_or("-"),
                key.to
            ));
            return Ok(finish(ctx, report, clock_start));
        }
    }
    if ctx.dry_run {
        report.status = CycleStatus::WouldPropose;
        return Ok(finish(ctx, report, clock_start));
    }
    let record = ProposalRecord {
        recorded_at: ctx.now,
        proposal,
        from_pattern: loaded.clone(),
        target: Some(target),
        cooldown_until: None,
    };
    approve_and_apply(ctx, record, &mut report)?;
    Ok(finish(ctx, report, clock_start))
}

fn resume_pending<D: FpgaDevice>(
    ctx: &CycleContext<'_, D>,
    pending: ProposalRecord,
    report: &mut CycleReport,
) -> Result<(), CycleError> {
    report.diagnostics.push(format!(
        "resuming pending proposal {}",
        pending.proposal.proposal_id
    ));
    report.proposal = Some(pending.proposal.clone());
    report.target_pattern = pending.target.clone();
    if ctx.dry_run {
        report.status = CycleStatus::Pending;
        return Ok(());
    }
    let mut record = pending;
    record.recorded_at = ctx.now;
    approve_and_apply(ctx, record, report)
}

fn approve_and_apply<D: FpgaDevice>(
    ctx: &CycleContext<'_, D>,
    mut record: ProposalRecord,
    report: &mut CycleReport,
) -> Result<(), CycleError> {
    record.proposal = await_approval(&record.proposal, ctx.approval).map_err(at(Step::Approve))?;
    if record.proposal.approval == Approval::Rejected {
        record.cooldown_until = Some(ctx.now + ctx.config.cooldown());
    }
    if let Some(cat) = ctx.catalog {
        cat.record_proposal(&record).map_err(at(Step::Persist))?;
    }
    report.proposal = Some(record.proposal.clone());
    report.status = match record.proposal.approval {
        Approval::Pending => CycleStatus::Pending,
        Approval::Rejected => CycleStatus::Rejected,
        Approval::Approved => {
            let target = record
                .target
                .as_ref()
                .ok_or_else(|| Error::Config("approved proposal has no target pattern".into()))
                .map_err(at(Step::Reconfigure))?;
            let expected = record.from_pattern.as_ref().map(|p| p.pattern_id.as_str());
            let event = ctx
                .controller
                .execute_static_reconfig(target, ctx.backend, expected)
                .map_err(at(Step::Reconfigure))?;
            if let Some(cat) = ctx.catalog {
                cat.record_event(&event).map_err(at(Step::Persist))?;
                if event.outcome == Outcome::Success {
                    cat.store_loaded_pattern(target)
                        .map_err(at(Step::Persist))?;
                }
            }
            let status = match event.outcome {
                Outcome::Success => CycleStatus::Reconfigured,
                Outcome::RolledBack => CycleStatus::RolledBack,
                Outcome::Failed => CycleStatus::ReconfigFailed,
            };
            info!(outcome = ?event.outcome, downtime = event.downtime, "reconfiguration executed");
            report.event = Some(event);
            status
        }
    };
    Ok(())
}

fn finish<D: FpgaDevice>(
    ctx: &CycleContext<'_, D>,
    mut report: CycleReport,
    clock_start: f64,
) -> CycleReport {
    report.loaded_after = ctx.controller.snapshot().loaded_id().map(str::to_owned);
    report.model_seconds = ctx.backend.clock().now() - clock_start;
    report
}
