use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Artifact, ArtifactHandle, Capabilities, DataRef, MeasurementBackend, SimClock};
use crate::error::{Error, Result};
use crate::pattern_search::OffloadPattern;

/// What the external command receives on standard input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDoc {
    pub app_id: String,
    pub pattern_id: String,
    /// Empty for a CPU-only measurement.
    pub loop_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

/// Spawns `program args... <subcommand>` per operation. Subcommands are
/// `compile`, `measure` and `resources`; the pattern is written to stdin as
/// JSON and a single decimal number is read back from stdout. A nonzero
/// exit status is a failure.
#[derive(Debug)]
pub struct CommandBackend {
    spec: CommandSpec,
    clock: SimClock,
    compile_hint: f64,
    artifacts: Mutex<HashMap<ArtifactHandle, PatternDoc>>,
    next_handle: Mutex<u64>,
}

impl CommandBackend {
    pub fn new(spec: CommandSpec, clock: SimClock) -> Self {
        Self {
            spec,
            clock,
            compile_hint: super::DEFAULT_COMPILE_SECONDS,
            artifacts: Mutex::new(HashMap::new()),
            next_handle: Mutex::new(1),
        }
    }

    fn invoke(&self, subcommand: &str, doc: &PatternDoc) -> Result<f64> {
        let mut child = Command::new(&self.spec.program)
            .args(&self.spec.args)
            .arg(subcommand)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Command(format!("spawn {}: {e}", self.spec.program.display())))?;
        let body = serde_json::to_string(doc)?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(body.as_bytes())
            .map_err(|e| Error::Command(format!("write stdin: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Command(format!("wait: {e}")))?;
        if !out.status.success() {
            return Err(Error::Command(format!(
                "`{subcommand}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        stdout.trim().parse::<f64>().map_err(|_| {
            Error::Command(format!(
                "`{subcommand}` printed {:?}, expected a number",
                stdout.trim()
            ))
        })
    }

    fn doc(pattern: &OffloadPattern, data: Option<&DataRef>) -> PatternDoc {
        PatternDoc {
            app_id: pattern.app_id.clone(),
            pattern_id: pattern.pattern_id.clone(),
            loop_ids: pattern.loop_ids.clone(),
            data: data.cloned(),
        }
    }
}

impl MeasurementBackend for CommandBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrency_safe: false,
            compile_duration_model: self.compile_hint,
        }
    }

    fn clock(&self) -> &SimClock {
        &self.clock
    }

    fn resource_report(&self, pattern: &OffloadPattern) -> Result<f64> {
        self.invoke("resources", &Self::doc(pattern, None))
    }

    fn compile(&self, pattern: &OffloadPattern) -> Result<Artifact> {
        let doc = Self::doc(pattern, None);
        let secs = self
            .invoke("compile", &doc)
            .map_err(|e| Error::CompileRejected {
                pattern: pattern.pattern_id.clone(),
                reason: e.to_string(),
            })?;
        let handle = {
            let mut next = self.next_handle.lock().unwrap();
            let h = ArtifactHandle(*next);
            *next += 1;
            h
        };
        self.artifacts.lock().unwrap().insert(handle, doc);
        self.clock.advance(secs);
        Ok(Artifact {
            handle,
            app_id: pattern.app_id.clone(),
            pattern_id: pattern.pattern_id.clone(),
            loop_ids: pattern.loop_ids.clone(),
            compile_seconds: secs,
        })
    }

    fn measure(&self, artifact: &Artifact, data: &DataRef) -> Result<f64> {
        let mut doc = self
            .artifacts
            .lock()
            .unwrap()
            .get(&artifact.handle)
            .cloned()
            .ok_or(Error::UnknownArtifact(artifact.handle.0))?;
        doc.data = Some(data.clone());
        self.invoke("measure", &doc)
            .map_err(|e| Error::Measurement(e.to_string()))
    }

    fn measure_cpu(&self, app_id: &str, data: &DataRef) -> Result<f64> {
        let doc = PatternDoc {
            app_id: app_id.to_string(),
            pattern_id: format!("{app_id}#cpu"),
            loop_ids: Vec::new(),
            data: Some(data.clone()),
        };
        self.invoke("measure", &doc)
            .map_err(|e| Error::Measurement(e.to_string()))
    }
}
