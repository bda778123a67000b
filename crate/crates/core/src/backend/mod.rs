//! Compile / measure / resource-report abstraction over an FPGA toolchain.
//!
//! Two implementations ship: [`SimulatedBackend`], a deterministic cost model
//! driven by configuration, and [`CommandBackend`], which spawns an external
//! executable per operation. Compile durations advance a [`SimClock`] and
//! never consume wall time.

mod command;
mod simulator;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pattern_search::OffloadPattern;

pub use command::{CommandBackend, CommandSpec, PatternDoc};
pub use simulator::{
    serve_command, AppCostModel, CostModelConfig, PatternTiming, ReconfigLatency, SimulatedBackend,
    SizeClass,
};

/// Six hours of model time per FPGA compile unless configured otherwise.
pub const DEFAULT_COMPILE_SECONDS: f64 = 6.0 * 3600.0;

/// Reference to a concrete request payload used as a test case.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataRef {
    pub data_ref: String,
    pub size_bytes: u64,
}

impl DataRef {
    pub fn new(data_ref: impl Into<String>, size_bytes: u64) -> Self {
        Self {
            data_ref: data_ref.into(),
            size_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactHandle(pub u64);

/// Output of a compile step: an opaque handle plus what it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub handle: ArtifactHandle,
    pub app_id: String,
    pub pattern_id: String,
    pub loop_ids: Vec<String>,
    /// Model-time seconds the compile took.
    pub compile_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub concurrency_safe: bool,
    pub compile_duration_model: f64,
}

/// Shared model-time clock, in seconds. Clones observe the same time.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<Mutex<f64>>);

impl SimClock {
    pub fn starting_at(t: f64) -> Self {
        Self(Arc::new(Mutex::new(t)))
    }

    pub fn now(&self) -> f64 {
        *self.0.lock().unwrap()
    }

    /// Advances by `secs` and returns the new time.
    pub fn advance(&self, secs: f64) -> f64 {
        let mut t = self.0.lock().unwrap();
        *t += secs.max(0.0);
        *t
    }
}

pub trait MeasurementBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn clock(&self) -> &SimClock;

    /// Estimated fraction of device capacity. Returned uncapped: values
    /// above 1.0 mean the pattern does not fit.
    fn resource_report(&self, pattern: &OffloadPattern) -> Result<f64>;

    fn compile(&self, pattern: &OffloadPattern) -> Result<Artifact>;

    fn measure(&self, artifact: &Artifact, data: &DataRef) -> Result<f64>;

    /// Time of the app on `data` with nothing offloaded.
    fn measure_cpu(&self, app_id: &str, data: &DataRef) -> Result<f64>;
}

impl<B: MeasurementBackend + ?Sized> MeasurementBackend for Arc<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn clock(&self) -> &SimClock {
        (**self).clock()
    }
    fn resource_report(&self, pattern: &OffloadPattern) -> Result<f64> {
        (**self).resource_report(pattern)
    }
    fn compile(&self, pattern: &OffloadPattern) -> Result<Artifact> {
        (**self).compile(pattern)
    }
    fn measure(&self, artifact: &Artifact, data: &DataRef) -> Result<f64> {
        (**self).measure(artifact, data)
    }
    fn measure_cpu(&self, app_id: &str, data: &DataRef) -> Result<f64> {
        (**self).measure_cpu(app_id, data)
    }
}

/// Wraps a backend and counts calls per operation.
#[derive(Debug, Default)]
pub struct CountingBackend<B> {
    pub inner: B,
    compiles: AtomicUsize,
    measures: AtomicUsize,
    cpu_measures: AtomicUsize,
    reports: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            compiles: AtomicUsize::new(0),
            measures: AtomicUsize::new(0),
            cpu_measures: AtomicUsize::new(0),
            reports: AtomicUsize::new(0),
        }
    }

    pub fn compiles(&self) -> usize {
        self.compiles.load(Ordering::SeqCst)
    }

    pub fn measures(&self) -> usize {
        self.measures.load(Ordering::SeqCst)
    }

    pub fn cpu_measures(&self) -> usize {
        self.cpu_measures.load(Ordering::SeqCst)
    }

    pub fn resource_reports(&self) -> usize {
        self.reports.load(Ordering::SeqCst)
    }
}

impl<B: MeasurementBackend> MeasurementBackend for CountingBackend<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn clock(&self) -> &SimClock {
        self.inner.clock()
    }
    fn resource_report(&self, pattern: &OffloadPattern) -> Result<f64> {
        self.reports.fetch_add(1, Ordering::SeqCst);
        self.inner.resource_report(pattern)
    }
    fn compile(&self, pattern: &OffloadPattern) -> Result<Artifact> {
        self.compiles.fetch_add(1, Ordering::SeqCst);
        self.inner.compile(pattern)
    }
    fn measure(&self, artifact: &Artifact, data: &DataRef) -> Result<f64> {
        self.measures.fetch_add(1, Ordering::SeqCst);
        self.inner.measure(artifact, data)
    }
    fn measure_cpu(&self, app_id: &str, data: &DataRef) -> Result<f64> {
        self.cpu_measures.fetch_add(1, Ordering::SeqCst);
        self.inner.measure_cpu(app_id, data)
    }
}
