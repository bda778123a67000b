//! Offload-pattern search: rank loops by arithmetic intensity, narrow them
//! by resource efficiency, measure the single-loop patterns, then measure
//! one combination of the two fastest singles and keep the fastest overall.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::backend::{DataRef, MeasurementBackend};
use crate::error::{Error, Result};
use crate::loop_analysis::{compute_intensity, top_n_by_intensity, AppCodeProfile, LoopDescriptor};

/// A set of loops compiled together into one accelerator artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadPattern {
    pub pattern_id: String,
    pub app_id: String,
    /// Sorted, de-duplicated.
    pub loop_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resource_usage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_time: Option<f64>,
}

impl OffloadPattern {
    pub fn new(
        app_id: impl Into<String>,
        pattern_id: impl Into<String>,
        mut loop_ids: Vec<String>,
    ) -> Self {
        loop_ids.sort();
        loop_ids.dedup();
        Self {
            pattern_id: pattern_id.into(),
            app_id: app_id.into(),
            loop_ids,
            resource_usage: None,
            measured_time: None,
        }
    }

    pub fn with_usage(mut self, usage: f64) -> Self {
        self.resource_usage = Some(usage);
        self
    }

    /// Checks the pattern against the profile it claims to belong to.
    pub fn validate(&self, profile: &AppCodeProfile) -> Result<()> {
        if self.app_id != profile.app_id {
            return Err(Error::InvalidPattern(format!(
                "pattern {} belongs to {}, not {}",
                self.pattern_id, self.app_id, profile.app_id
            )));
        }
        if self.loop_ids.is_empty() {
            return Err(Error::InvalidPattern(format!(
                "pattern {} has no loops",
                self.pattern_id
            )));
        }
        if let Some(missing) = self.loop_ids.iter().find(|id| profile.get(id).is_none()) {
            return Err(Error::UnknownLoop(missing.clone()));
        }
        if let Some(u) = self.resource_usage {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::InvalidPattern(format!(
                    "pattern {} usage {u} outside [0, 1]",
                    self.pattern_id
                )));
            }
        }
        if let Some(t) = self.measured_time {
            if !(t > 0.0) {
                return Err(Error::InvalidPattern(format!(
                    "pattern {} measured time {t} must be > 0",
                    self.pattern_id
                )));
            }
        }
        Ok(())
    }

    /// Same app and loop set, ignoring identifiers and measurements.
    pub fn same_loops(&self, other: &OffloadPattern) -> bool {
        self.app_id == other.app_id && self.loop_ids == other.loop_ids
    }

    fn time(&self) -> f64 {
        self.measured_time.unwrap_or(f64::INFINITY)
    }
}

fn faster(a: &OffloadPattern, b: &OffloadPattern) -> Ordering {
    a.time()
        .total_cmp(&b.time())
        .then_with(|| a.pattern_id.cmp(&b.pattern_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub app_id: String,
    pub best: OffloadPattern,
    pub all_measured: Vec<OffloadPattern>,
    pub representative_data_ref: DataRef,
    /// Model-time seconds spent compiling during the search.
    pub compile_seconds: f64,
    /// Patterns that were dropped, with the reason.
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub n_intensity: usize,
    pub n_efficiency: usize,
    pub min_iterations: u64,
    /// Backend runs per measurement; the median is kept.
    pub repeats: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            n_intensity: 4,
            n_efficiency: 3,
            min_iterations: 0,
            repeats: 3,
        }
    }
}

pub fn resource_efficiency(intensity: f64, usage: f64) -> Result<f64> {
    if !(usage > 0.0) {
        return Err(Error::Domain(format!(
            "resource usage {usage} must be > 0 to rate efficiency"
        )));
    }
    Ok(intensity / usage)
}

/// Keeps the `n` candidates with the best intensity-per-capacity. Candidates
/// that do not fit on the device (usage above 1.0) never qualify.
pub fn narrow_by_efficiency(
    candidates: &[(LoopDescriptor, f64)],
    n: usize,
) -> Vec<(LoopDescriptor, f64)> {
    let mut scored: Vec<(f64, &LoopDescriptor, f64)> = candidates
        .iter()
        .filter(|(_, usage)| *usage > 0.0 && *usage <= 1.0)
        .filter_map(|(l, usage)| {
            let eff = compute_intensity(l)
                .and_then(|i| resource_efficiency(i, *usage))
                .ok()?;
            Some((eff, l, *usage))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.loop_id.cmp(&b.1.loop_id))
    });
    scored
        .into_iter()
        .take(n)
        .map(|(_, l, u)| (l.clone(), u))
        .collect()
}

/// The single-loop patterns to measure first; the combination pattern is
/// derived from their measurements via [`MeasurementPlan::combination`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPlan {
    pub app_id: String,
    pub singles: Vec<OffloadPattern>,
}

pub fn build_measurement_plan(
    app_id: &str,
    top: &[(LoopDescriptor, f64)],
) -> Result<MeasurementPlan> {
    if top.is_empty() {
        return Err(Error::NoCandidates);
    }
    let singles = top
        .iter()
        .enumerate()
        .map(|(i, (l, usage))| {
            OffloadPattern::new(
                app_id,
                format!("{app_id}#{}", i + 1),
                vec![l.loop_id.clone()],
            )
            .with_usage(*usage)
        })
        .collect();
    Ok(MeasurementPlan {
        app_id: app_id.to_string(),
        singles,
    })
}

impl MeasurementPlan {
    /// Combines the two fastest measured singles. `None` when fewer than two
    /// singles were measured or their summed usage exceeds the device.
    pub fn combination(&self, measured: &[OffloadPattern]) -> Option<OffloadPattern> {
        let mut timed: Vec<&OffloadPattern> = measured
            .iter()
            .filter(|p| p.measured_time.is_some() && p.loop_ids.len() == 1)
            .collect();
        if timed.len() < 2 {
            return None;
        }
        timed.sort_by(|a, b| faster(a, b));
        let (a, b) = (timed[0], timed[1]);
        let usage = a.resource_usage.unwrap_or(0.0) + b.resource_usage.unwrap_or(0.0);
        if usage > 1.0 {
            debug!(app = %self.app_id, usage, "combination exceeds device capacity; skipped");
            return None;
        }
        let loops = a.loop_ids.iter().chain(&b.loop_ids).cloned().collect();
        Some(
            OffloadPattern::new(
                &self.app_id,
                format!("{}#{}", self.app_id, self.singles.len() + 1),
                loops,
            )
            .with_usage(usage),
        )
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

/// Compiles `pattern` and returns it with the median of `repeats` runs.
fn measure_pattern(
    backend: &dyn MeasurementBackend,
    pattern: &OffloadPattern,
    data: &DataRef,
    repeats: usize,
) -> Result<(OffloadPattern, f64)> {
    let artifact = backend.compile(pattern)?;
    let runs = (0..repeats.max(1))
        .map(|_| backend.measure(&artifact, data))
        .collect::<Result<Vec<_>>>()?;
    let t = median(runs);
    if !(t > 0.0) {
        return Err(Error::Measurement(format!(
            "pattern {} measured non-positive time {t}",
            pattern.pattern_id
        )));
    }
    let mut measured = pattern.clone();
    measured.measured_time = Some(t);
    Ok((measured, artifact.compile_seconds))
}

pub fn run_search(
    profile: &AppCodeProfile,
    data: &DataRef,
    backend: &dyn MeasurementBackend,
    params: &SearchParams,
) -> Result<SearchResult> {
    let app = profile.app_id.as_str();
    let mut diagnostics = Vec::new();

    let ranked = top_n_by_intensity(profile, params.n_intensity.max(1), params.min_iterations);
    let mut sized = Vec::with_capacity(ranked.len());
    for l in ranked {
        let probe =
            OffloadPattern::new(app, format!("{app}:{}", l.loop_id), vec![l.loop_id.clone()]);
        match backend.resource_report(&probe) {
            Ok(usage) => sized.push((l, usage)),
            Err(e) => {
                diagnostics.push(format!("loop {}: resource estimate failed: {e}", l.loop_id))
            }
        }
    }
    for (l, u) in &sized {
        if *u > 1.0 {
            diagnostics.push(format!(
                "loop {}: usage {u:.3} exceeds device capacity",
                l.loop_id
            ));
        }
    }

    let narrowed = narrow_by_efficiency(&sized, params.n_efficiency);
    let plan = build_measurement_plan(app, &narrowed)?;

    let mut measured = Vec::new();
    let mut compile_seconds = 0.0;
    let mut record =
        |p: &OffloadPattern, diagnostics: &mut Vec<String>, measured: &mut Vec<OffloadPattern>| {
            match measure_pattern(backend, p, data, params.repeats) {
                Ok((m, secs)) => {
                    compile_seconds += secs;
                    measured.push(m);
                }
                Err(e) => {
                    warn!(pattern = %p.pattern_id, error = %e, "pattern excluded from search");
                    diagnostics.push(format!("pattern {} ({:?}): {e}", p.pattern_id, p.loop_ids));
                }
            }
        };
    for single in &plan.singles {
        record(single, &mut diagnostics, &mut measured);
    }
    if let Some(combo) = plan.combination(&measured) {
        record(&combo, &mut diagnostics, &mut measured);
    }

    let best = measured
        .iter()
        .min_by(|a, b| faster(a, b))
        .cloned()
        .ok_or(Error::NoMeasurablePattern)?;
    Ok(SearchResult {
        app_id: app.to_string(),
        best,
        all_measured: measured,
        representative_data_ref: data.clone(),
        compile_seconds,
        diagnostics,
    })
}

/// Searches several apps. Runs them in parallel when the backend declares
/// itself concurrency-safe, one after another otherwise. Results keep the
/// input order.
pub fn run_searches(
    jobs: &[(&AppCodeProfile, DataRef)],
    backend: &dyn MeasurementBackend,
    params: &SearchParams,
) -> Vec<Result<SearchResult>> {
    if !backend.capabilities().concurrency_safe || jobs.len() < 2 {
        return jobs
            .iter()
            .map(|(p, d)| run_search(p, d, backend, params))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(p, d)| s.spawn(move || run_search(p, d, backend, params)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("search thread panicked"))
            .collect()
    })
}
