use std::path::{Path, PathBuf};

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::backend::CommandSpec;
use crate::error::{read_to_string, Error, Result};
use crate::executor::{DowntimePolicy, ReconfigMode};
use crate::pattern_search::{OffloadPattern, SearchParams};

/// Where the verification measurements come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Simulated,
    Command(CommandSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalMode {
    #[default]
    Prompt,
    File,
}

/// The pattern running on the production FPGA before any reconfiguration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialPattern {
    pub app_id: String,
    pub loop_ids: Vec<String>,
    #[serde(default)]
    pub pattern_id: Option<String>,
}

impl InitialPattern {
    pub fn to_pattern(&self) -> OffloadPattern {
        let id = self
            .pattern_id
            .clone()
            .unwrap_or_else(|| format!("{}#launch", self.app_id));
        OffloadPattern::new(&self.app_id, id, self.loop_ids.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Paths {
    pub log: Option<PathBuf>,
    /// Profile documents, or directories of `*.toml` profiles.
    pub profiles: Vec<PathBuf>,
    pub cost_model: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub answers: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub long_window_secs: u64,
    pub short_window_secs: u64,
    pub top_k: usize,
    pub threshold: f64,
    /// Minimum candidate effect (s/h) when the current pattern saves nothing.
    pub effect_floor: f64,
    pub n_intensity: usize,
    pub n_efficiency: usize,
    pub min_iterations: u64,
    pub repeats: usize,
    pub bucket_width: u64,
    pub reconfig_mode: ReconfigMode,
    pub downtime_policy: DowntimePolicy,
    /// Cool-down after an NG answer, in long windows.
    pub cooldown_windows: u32,
    pub strict_apps: bool,
    pub fatal_malformed: bool,
    pub approval: ApprovalMode,
    pub approval_timeout_secs: u64,
    pub current_pattern: Option<InitialPattern>,
    pub backend: BackendConfig,
    pub paths: Paths,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            long_window_secs: 3600,
            short_window_secs: 3600,
            top_k: 2,
            threshold: 2.0,
            effect_floor: 0.0,
            n_intensity: 4,
            n_efficiency: 3,
            min_iterations: 0,
            repeats: 3,
            bucket_width: 4096,
            reconfig_mode: ReconfigMode::Static,
            downtime_policy: DowntimePolicy::Queue,
            cooldown_windows: 7,
            strict_apps: false,
            fatal_malformed: false,
            approval: ApprovalMode::Prompt,
            approval_timeout_secs: 0,
            current_pattern: None,
            backend: BackendConfig::Simulated,
            paths: Paths::default(),
        }
    }
}

impl OrchestratorConfig {
    /// Loads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut cfg: OrchestratorConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.log,
            &mut paths.cost_model,
            &mut paths.catalog,
            &mut paths.output,
            &mut paths.answers,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        paths.profiles.iter_mut().for_each(fix);
        if let BackendConfig::Command(spec) = &mut self.backend {
            if spec.program.components().count() > 1 {
                fix(&mut spec.program);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.long_window_secs == 0 || self.short_window_secs == 0 {
            return bad("window durations must be > 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be > 0");
        }
        if self.bucket_width == 0 {
            return bad("bucket_width must be > 0");
        }
        if self.n_intensity == 0 || self.n_efficiency == 0 || self.repeats == 0 {
            return bad("n_intensity, n_efficiency and repeats must be >= 1");
        }
        Ok(())
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            n_intensity: self.n_intensity,
            n_efficiency: self.n_efficiency,
            min_iterations: self.min_iterations,
            repeats: self.repeats,
        }
    }

    pub fn long_window(&self) -> Duration {
        Duration::seconds(self.long_window_secs as i64)
    }

    pub fn short_window(&self) -> Duration {
        Duration::seconds(self.short_window_secs as i64)
    }

    pub fn cooldown(&self) -> Duration {
        self.long_window() * self.cooldown_windows as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_toml() {
        let cfg: OrchestratorConfig = toml::from_str("threshold = 3.0\n").unwrap();
        assert_eq!(cfg.threshold, 3.0);
        assert_eq!(cfg.top_k, 2);
        assert_eq!(cfg.long_window_secs, 3600);
        assert_eq!(cfg.search_params(), SearchParams::default());
        assert_eq!(cfg.cooldown(), Duration::hours(7));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "top_k = 0",
            "threshold = 0.0",
            "long_window_secs = 0",
            "bucket_width = 0",
        ] {
            let cfg: OrchestratorConfig = toml::from_str(text).unwrap();
            assert!(cfg.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[paths]
log = "requests.jsonl"
profiles = ["profiles"]
catalog = "/abs/catalog"

[backend]
kind = "command"
program = "bin/toolchain"
args = ["--fast"]

[current_pattern]
app_id = "tdFIR"
loop_ids = ["L4", "L2"]
"#,
        )
        .unwrap();
        let cfg = OrchestratorConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.log.unwrap(), dir.path().join("requests.jsonl"));
        assert_eq!(cfg.paths.profiles[0], dir.path().join("profiles"));
        assert_eq!(cfg.paths.catalog.unwrap(), PathBuf::from("/abs/catalog"));
        let BackendConfig::Command(spec) = cfg.backend else {
            panic!()
        };
        assert_eq!(spec.program, dir.path().join("bin/toolchain"));
        let p = cfg.current_pattern.unwrap().to_pattern();
        assert_eq!(p.pattern_id, "tdFIR#launch");
        assert_eq!(p.loop_ids, ["L2", "L4"]);
    }
}
