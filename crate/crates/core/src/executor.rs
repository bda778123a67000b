//! Static reconfiguration as a compile → stop → start transition.
//!
//! The new artifact is compiled while the old pattern keeps serving, so the
//! downtime window only spans stop → start. A failed start restarts the old
//! artifact.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::backend::{Artifact, DataRef, MeasurementBackend, SimClock};
use crate::error::{Error, Result};
use crate::pattern_search::OffloadPattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpgaStatus {
    Running,
    Stopped,
    Reconfiguring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconfigMode {
    #[default]
    Static,
    Dynamic,
}

/// What happens to requests that arrive while the device is down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DowntimePolicy {
    #[default]
    Queue,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpgaState {
    pub loaded_pattern: Option<OffloadPattern>,
    pub artifact: Option<Artifact>,
    pub status: FpgaStatus,
    pub capacity: f64,
}

impl FpgaState {
    pub fn empty() -> Self {
        Self {
            loaded_pattern: None,
            artifact: None,
            status: FpgaStatus::Stopped,
            capacity: 1.0,
        }
    }

    /// A device already running `artifact`, built from `pattern`.
    pub fn running(pattern: OffloadPattern, artifact: Artifact) -> Self {
        Self {
            loaded_pattern: Some(pattern),
            artifact: Some(artifact),
            status: FpgaStatus::Running,
            capacity: 1.0,
        }
    }

    pub fn loaded_id(&self) -> Option<&str> {
        self.loaded_pattern.as_ref().map(|p| p.pattern_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    RolledBack,
    Failed,
}

/// One executed (or attempted) transition. Instants are model-clock seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconfigEvent {
    pub from_pattern: Option<String>,
    pub to_pattern: String,
    pub mode: ReconfigMode,
    pub compile_started: f64,
    pub compile_done: Option<f64>,
    pub stopped_at: Option<f64>,
    pub started_at: Option<f64>,
    pub downtime: f64,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub fn downtime_of(event: &ReconfigEvent) -> f64 {
    match (event.stopped_at, event.started_at) {
        (Some(stop), Some(start)) => (start - stop).max(0.0),
        _ => 0.0,
    }
}

/// Production-side control of the device.
pub trait FpgaDevice: Send + Sync {
    fn stop(&self) -> Result<()>;
    fn start(&self, artifact: &Artifact) -> Result<()>;
}

/// Device whose stop → start gap is a fixed latency on the model clock.
#[derive(Debug)]
pub struct SimulatedDevice {
    clock: SimClock,
    latency: f64,
    failing_starts: AtomicUsize,
}

impl SimulatedDevice {
    pub fn new(clock: SimClock, latency: f64) -> Self {
        Self {
            clock,
            latency,
            failing_starts: AtomicUsize::new(0),
        }
    }

    /// Makes the next `n` start attempts fail.
    pub fn fail_next_starts(&self, n: usize) {
        self.failing_starts.store(n, Ordering::SeqCst);
    }
}

impl FpgaDevice for SimulatedDevice {
    fn stop(&self) -> Result<()> {
        Ok(())
    }

    fn start(&self, artifact: &Artifact) -> Result<()> {
        self.clock.advance(self.latency);
        let injected = self
            .failing_starts
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected {
            return Err(Error::Device(format!(
                "start of {} failed (injected)",
                artifact.pattern_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Fpga(String),
    Cpu,
    Queued,
}

/// Owns the production FPGA state. Transitions are serialized by an
/// exclusive lock; readers get consistent snapshots.
pub struct FpgaController<D> {
    state: RwLock<FpgaState>,
    transition: Mutex<()>,
    device: D,
    mode: ReconfigMode,
    policy: DowntimePolicy,
}

impl<D: FpgaDevice> FpgaController<D> {
    pub fn new(state: FpgaState, device: D, mode: ReconfigMode, policy: DowntimePolicy) -> Self {
        Self {
            state: RwLock::new(state),
            transition: Mutex::new(()),
            device,
            mode,
            policy,
        }
    }

    pub fn snapshot(&self) -> FpgaState {
        self.state.read().unwrap().clone()
    }

    pub fn device(&self) -> &D {
        &self.device
    }

    pub fn route(&self, app_id: &str) -> Result<Route> {
        let s = self.state.read().unwrap();
        match s.status {
            FpgaStatus::Running => Ok(match &s.loaded_pattern {
                Some(p) if p.app_id == app_id => Route::Fpga(p.pattern_id.clone()),
                _ => Route::Cpu,
            }),
            _ if s
                .loaded_pattern
                .as_ref()
                .is_some_and(|p| p.app_id != app_id) =>
            {
                Ok(Route::Cpu)
            }
            _ => match self.policy {
                DowntimePolicy::Queue => Ok(Route::Queued),
                DowntimePolicy::Fail => Err(Error::Device("FPGA is reconfiguring".into())),
            },
        }
    }

    /// Serves one request: on the loaded artifact when it belongs to the
    /// app, on the CPU otherwise.
    pub fn serve(
        &self,
        app_id: &str,
        data: &DataRef,
        backend: &dyn MeasurementBackend,
    ) -> Result<(Route, f64)> {
        let route = self.route(app_id)?;
        let t = match &route {
            Route::Fpga(_) => {
                let artifact = self
                    .state
                    .read()
                    .unwrap()
                    .artifact
                    .clone()
                    .ok_or_else(|| Error::Device("running without an artifact".into()))?;
                backend.measure(&artifact, data)?
            }
            Route::Cpu => backend.measure_cpu(app_id, data)?,
            Route::Queued => 0.0,
        };
        Ok((route, t))
    }

    /// Compile, stop, start. `expected_from` guards against acting on a state
    /// another transition already changed.
    pub fn execute_static_reconfig(
        &self,
        new_pattern: &OffloadPattern,
        backend: &dyn MeasurementBackend,
        expected_from: Option<&str>,
    ) -> Result<ReconfigEvent> {
        let _guard = self.transition.lock().unwrap();
        let (from, old_artifact, capacity) = {
            let s = self.state.read().unwrap();
            (
                s.loaded_id().map(str::to_owned),
                s.artifact.clone(),
                s.capacity,
            )
        };
        if from.as_deref() != expected_from {
            return Err(Error::StaleState {
                expected: expected_from.map(str::to_owned),
                found: from,
            });
        }
        let clock = backend.clock();
        let mut event = ReconfigEvent {
            from_pattern: from,
            to_pattern: new_pattern.pattern_id.clone(),
            mode: self.mode,
            compile_started: clock.now(),
            compile_done: None,
            stopped_at: None,
            started_at: None,
            downtime: 0.0,
            outcome: Outcome::Failed,
            detail: None,
        };

        if let Some(u) = new_pattern.resource_usage {
            if u > capacity {
                event.detail = Some(format!("usage {u:.3} exceeds capacity {capacity}"));
                return Ok(event);
            }
        }
        let artifact = match backend.compile(new_pattern) {
            Ok(a) => a,
            Err(e) => {
                warn!(pattern = %new_pattern.pattern_id, error = %e, "compile failed; nothing stopped");
                event.detail = Some(e.to_string());
                return Ok(event);
            }
        };
        event.compile_done = Some(clock.now());

        self.state.write().unwrap().status = FpgaStatus::Reconfiguring;
        if let Err(e) = self.device.stop() {
            self.state.write().unwrap().status = FpgaStatus::Running;
            event.detail = Some(e.to_string());
            return Ok(event);
        }
        event.stopped_at = Some(clock.now());

        match self.device.start(&artifact) {
            Ok(()) => {
                event.started_at = Some(clock.now());
                event.outcome = Outcome::Success;
                let mut s = self.state.write().unwrap();
                s.loaded_pattern = Some(new_pattern.clone());
                s.artifact = Some(artifact);
                s.status = FpgaStatus::Running;
            }
            Err(e) => {
                event.detail = Some(e.to_string());
                let restarted = old_artifact
                    .as_ref()
                    .map(|old| self.device.start(old))
                    .transpose();
                let mut s = self.state.write().unwrap();
                match restarted {
                    Ok(Some(())) => {
                        event.started_at = Some(clock.now());
                        event.outcome = Outcome::RolledBack;
                        s.status = FpgaStatus::Running;
                    }
                    Ok(None) => s.status = FpgaStatus::Stopped,
                    Err(e2) => {
                        event.detail = Some(format!("{e}; rollback failed: {e2}"));
                        s.status = FpgaStatus::Stopped;
                    }
                }
            }
        }
        event.downtime = downtime_of(&event);
        info!(
            to = %event.to_pattern,
            outcome = ?event.outcome,
            downtime = event.downtime,
            "reconfiguration finished"
        );
        Ok(event)
    }
}

/// Appends one event as a JSON line.
pub fn append_audit(path: &Path, event: &ReconfigEvent) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(event)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
