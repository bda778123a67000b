//! Self-contained replay scenarios with golden expectations.
//!
//! A scenario bundles the configuration, the cost model, the code profiles
//! and a traffic description. Replaying it generates the request log from
//! the seed, runs one cycle with automatic approval and compares selected
//! quantities of the report against the expected values.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::config::OrchestratorConfig;
use super::cycle::{run_cycle, CycleContext, CycleError, CycleReport, CycleStatus, Step};
use super::generator::{generate_synthetic_log, TrafficParams};
use crate::analytics::{RequestRecord, Window};
use crate::backend::{CostModelConfig, MeasurementBackend, SimClock, SimulatedBackend};
use crate::decision::AutoApprove;
use crate::error::{read_to_string, Error, Result};
use crate::executor::{FpgaController, FpgaState, ReconfigMode, SimulatedDevice};
use crate::loop_analysis::AppCodeProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub quantity: String,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub abs_tol: Option<f64>,
    #[serde(default)]
    pub rel_tol: Option<f64>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl Expectation {
    fn accepts(&self, actual: f64) -> bool {
        if let Some(v) = self.value {
            let tol = self
                .abs_tol
                .unwrap_or(0.0)
                .max(self.rel_tol.unwrap_or(0.0) * v.abs());
            if (actual - v).abs() > tol {
                return false;
            }
        }
        self.min.is_none_or(|m| actual >= m) && self.max.is_none_or(|m| actual <= m)
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.value {
            parts.push(format!("{v}"));
            if let Some(t) = self.abs_tol {
                parts.push(format!("±{t}"));
            }
            if let Some(t) = self.rel_tol {
                parts.push(format!("±{}%", t * 100.0));
            }
        }
        if let Some(m) = self.min {
            parts.push(format!(">= {m}"));
        }
        if let Some(m) = self.max {
            parts.push(format!("<= {m}"));
        }
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    #[serde(default)]
    pub values: Vec<Expectation>,
    #[serde(default)]
    pub top_apps: Option<Vec<String>>,
    /// App the proposal should target.
    #[serde(default)]
    pub proposal_to: Option<String>,
    #[serde(default)]
    pub status: Option<CycleStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub window_start: DateTime<Utc>,
    #[serde(default)]
    pub config: OrchestratorConfig,
    #[serde(default)]
    pub cost_model: CostModelConfig,
    #[serde(default)]
    pub profiles: Vec<AppCodeProfile>,
    #[serde(default)]
    pub traffic: TrafficParams,
    #[serde(default)]
    pub expected: Expected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayOverrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diff {
    pub quantity: String,
    pub expected: String,
    pub actual: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub scenario: String,
    pub seed: u64,
    pub report: CycleReport,
    pub diffs: Vec<Diff>,
    pub pass: bool,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::parse("<scenario>", e))?;
        s.config.validate()?;
        s.cost_model.validate()?;
        for p in &s.profiles {
            p.validate()?;
        }
        Ok(s)
    }

    /// The long window, ending at the cycle instant.
    pub fn window(&self) -> Result<Window> {
        Window::new(
            self.window_start,
            self.window_start + self.config.long_window(),
        )
    }

    pub fn generate_log(&self, seed: u64) -> Result<Vec<RequestRecord>> {
        Ok(generate_synthetic_log(&self.traffic, &self.window()?, seed))
    }

    pub fn profile_map(&self) -> BTreeMap<String, AppCodeProfile> {
        self.profiles
            .iter()
            .map(|p| (p.app_id.clone(), p.clone()))
            .collect()
    }
}

/// Named scalar read from a cycle report.
pub fn quantity(report: &CycleReport, name: &str) -> Option<f64> {
    let (head, app) = match name.split_once('.') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    match (head, app) {
        ("corrected_total", Some(a)) => report.summary(a).map(|s| s.corrected_time_total),
        ("raw_total", Some(a)) => report.summary(a).map(|s| s.raw_time_total),
        ("request_count", Some(a)) => {
            Some(report.summary(a).map_or(0.0, |s| s.request_count as f64))
        }
        ("coefficient", Some(a)) => report.summary(a).map(|s| s.improvement_coefficient),
        ("candidate_effect", Some(a)) => report.candidate(a).map(|c| c.effect),
        ("best_time", Some(a)) => report
            .searches
            .iter()
            .find(|s| s.app_id == a)
            .and_then(|s| s.best.measured_time),
        ("current_effect", None) => report.current_effect.as_ref().map(|c| c.effect),
        ("ratio", None) => report.proposal.as_ref().map(|p| p.ratio),
        ("downtime", None) => report.event.as_ref().map(|e| e.downtime),
        ("model_seconds", None) => Some(report.model_seconds),
        _ => None,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |v| format!("{v}"))
}

/// Compares a report against the scenario's expectations.
pub fn compare(expected: &Expected, report: &CycleReport) -> Vec<Diff> {
    let mut diffs = Vec::new();
    for e in &expected.values {
        let actual = quantity(report, &e.quantity);
        diffs.push(Diff {
            quantity: e.quantity.clone(),
            expected: e.describe(),
            actual: fmt_opt(actual),
            ok: actual.is_some_and(|a| e.accepts(a)),
        });
    }
    if let Some(top) = &expected.top_apps {
        diffs.push(Diff {
            quantity: "top_apps".into(),
            expected: top.join(","),
            actual: report.top_apps.join(","),
            ok: *top == report.top_apps,
        });
    }
    if let Some(to) = &expected.proposal_to {
        let actual = report
            .proposal
            .as_ref()
            .and_then(|p| p.best_new.as_ref())
            .map(|b| b.app_id.clone());
        diffs.push(Diff {
            quantity: "proposal_to".into(),
            expected: to.clone(),
            actual: actual.clone().unwrap_or_else(|| "none".into()),
            ok: actual.as_deref() == Some(to.as_str()),
        });
    }
    if let Some(status) = expected.status {
        let name =
            |s: CycleStatus| serde_json::to_value(s).map(|v| v.as_str().unwrap_or("?").to_string());
        diffs.push(Diff {
            quantity: "status".into(),
            expected: name(status).unwrap_or_default(),
            actual: name(report.status).unwrap_or_default(),
            ok: status == report.status,
        });
    }
    diffs
}

/// Runs the scenario's cycle in isolation: simulated backend and device,
/// automatic approval, nothing persisted.
pub fn replay_scenario(
    scenario: &Scenario,
    overrides: ReplayOverrides,
) -> Result<ReplayOutcome, CycleError> {
    let seed = overrides.seed.unwrap_or(scenario.seed);
    let setup = |e| CycleError {
        step: Step::Analyze,
        source: e,
    };
    let window = scenario.window().map_err(setup)?;
    let records = generate_synthetic_log(&scenario.traffic, &window, seed);
    let now = window.end;

    let clock = SimClock::starting_at(now.timestamp() as f64);
    let mut cost_model = scenario.cost_model.clone();
    if overrides.seed.is_some() {
        cost_model.seed = seed;
    }
    let backend = SimulatedBackend::with_clock(cost_model, clock.clone()).map_err(setup)?;
    let latency = match scenario.config.reconfig_mode {
        ReconfigMode::Static => backend.config().reconfig.static_seconds,
        ReconfigMode::Dynamic => backend.config().reconfig.dynamic_seconds,
    };
    let state = match &scenario.config.current_pattern {
        Some(p) => {
            let pattern = p.to_pattern();
            let artifact = backend.compile(&pattern).map_err(setup)?;
            FpgaState::running(pattern, artifact)
        }
        None => FpgaState::empty(),
    };
    let controller = FpgaController::new(
        state,
        SimulatedDevice::new(clock, latency),
        scenario.config.reconfig_mode,
        scenario.config.downtime_policy,
    );
    let profiles = scenario.profile_map();
    let ctx = CycleContext {
        config: &scenario.config,
        records: &records,
        malformed_lines: 0,
        profiles: &profiles,
        backend: &backend,
        controller: &controller,
        approval: &AutoApprove,
        catalog: None,
        now,
        dry_run: false,
        threshold: overrides.threshold,
    };
    let report = run_cycle(&ctx)?;
    let diffs = compare(&scenario.expected, &report);
    let pass = diffs.iter().all(|d| d.ok);
    Ok(ReplayOutcome {
        scenario: scenario.name.clone(),
        seed,
        report,
        diffs,
        pass,
    })
}
