use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Artifact, ArtifactHandle, Capabilities, DataRef, MeasurementBackend, PatternDoc, SimClock,
    DEFAULT_COMPILE_SECONDS,
};
use crate::error::{read_to_string, Error, Result};
use crate::pattern_search::OffloadPattern;

fn default_compile_seconds() -> f64 {
    DEFAULT_COMPILE_SECONDS
}

/// Named byte range `[min_bytes, max_bytes)`; open-ended when `max_bytes` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub name: String,
    #[serde(default)]
    pub min_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_bytes: Option<u64>,
}

impl SizeClass {
    fn contains(&self, size: u64) -> bool {
        size >= self.min_bytes && self.max_bytes.is_none_or(|max| size < max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTiming {
    pub loops: Vec<String>,
    /// Size-class name to seconds per request.
    pub times: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AppCostModel {
    #[serde(default)]
    pub size_classes: Vec<SizeClass>,
    #[serde(default)]
    pub cpu_time: BTreeMap<String, f64>,
    #[serde(default)]
    pub fpga_time: Vec<PatternTiming>,
    #[serde(default)]
    pub usage_by_loop: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
}

impl AppCostModel {
    fn class_of(&self, app: &str, size: u64) -> Result<&str> {
        self.size_classes
            .iter()
            .find(|c| c.contains(size))
            .map(|c| c.name.as_str())
            .ok_or_else(|| Error::UnknownSizeBucket(format!("{size} bytes (app {app})")))
    }
}

/// Device-level reconfiguration latency, seconds of downtime per mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconfigLatency {
    #[serde(default = "ReconfigLatency::default_static")]
    pub static_seconds: f64,
    #[serde(default = "ReconfigLatency::default_dynamic")]
    pub dynamic_seconds: f64,
}

impl ReconfigLatency {
    fn default_static() -> f64 {
        1.0
    }
    fn default_dynamic() -> f64 {
        0.005
    }
}

impl Default for ReconfigLatency {
    fn default() -> Self {
        Self {
            static_seconds: Self::default_static(),
            dynamic_seconds: Self::default_dynamic(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelConfig {
    #[serde(default = "default_compile_seconds")]
    pub compile_seconds: f64,
    /// Relative jitter bound; each measurement is scaled by `1 + noise * u`, `u ∈ [-1, 1]`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reconfig: ReconfigLatency,
    #[serde(default)]
    pub apps: BTreeMap<String, AppCostModel>,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        Self {
            compile_seconds: DEFAULT_COMPILE_SECONDS,
            noise: 0.0,
            seed: 0,
            reconfig: ReconfigLatency::default(),
            apps: BTreeMap::new(),
        }
    }
}

impl CostModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let cfg: CostModelConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        if !(self.compile_seconds >= 0.0) {
            return bad("compile_seconds must be >= 0".into());
        }
        for (app, m) in &self.apps {
            if let Some(n) = m.noise {
                if !(0.0..1.0).contains(&n) {
                    return bad(format!("{app}: noise must be in [0, 1), got {n}"));
                }
            }
            for (lp, u) in &m.usage_by_loop {
                // Above 1.0 is allowed: such a loop simply never fits.
                if !(*u > 0.0 && u.is_finite()) {
                    return bad(format!(
                        "{app}: usage of {lp} must be a positive number, got {u}"
                    ));
                }
            }
            let all_times = m
                .cpu_time
                .values()
                .chain(m.fpga_time.iter().flat_map(|p| p.times.values()));
            for t in all_times {
                if !(*t > 0.0) {
                    return bad(format!("{app}: all times must be > 0, got {t}"));
                }
            }
            for p in &m.fpga_time {
                if p.loops.is_empty() {
                    return bad(format!("{app}: fpga_time entry with no loops"));
                }
                for class in p.times.keys() {
                    if !m.size_classes.iter().any(|c| &c.name == class) {
                        return bad(format!(
                            "{app}: fpga_time refers to unknown size class {class}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

type LoopSet = BTreeSet<String>;

/// 64-bit FNV-1a, used only to derive stable per-stream seeds.
struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Noise stream identity: app, loop set, size class.
type StreamKey = (String, Vec<String>, String);

/// Deterministic cost-model backend. Concurrency-safe.
#[derive(Debug)]
pub struct SimulatedBackend {
    config: CostModelConfig,
    timings: HashMap<(String, LoopSet), BTreeMap<String, f64>>,
    clock: SimClock,
    /// One noise stream per (app, loop set, size class), so measurement
    /// order across patterns does not perturb the values.
    streams: Mutex<HashMap<StreamKey, ChaCha8Rng>>,
    artifacts: Mutex<HashMap<ArtifactHandle, (String, LoopSet)>>,
    next_handle: Mutex<u64>,
}

impl SimulatedBackend {
    pub fn new(config: CostModelConfig) -> Result<Self> {
        Self::with_clock(config, SimClock::default())
    }

    pub fn with_clock(config: CostModelConfig, clock: SimClock) -> Result<Self> {
        config.validate()?;
        let mut timings = HashMap::new();
        for (app, m) in &config.apps {
            for p in &m.fpga_time {
                let set: LoopSet = p.loops.iter().cloned().collect();
                timings.insert((app.clone(), set), p.times.clone());
            }
        }
        Ok(Self {
            config,
            timings,
            clock,
            streams: Mutex::new(HashMap::new()),
            artifacts: Mutex::new(HashMap::new()),
            next_handle: Mutex::new(1),
        })
    }

    pub fn config(&self) -> &CostModelConfig {
        &self.config
    }

    fn app(&self, app: &str) -> Result<&AppCostModel> {
        self.config
            .apps
            .get(app)
            .ok_or_else(|| Error::UnknownApp(app.to_string()))
    }

    fn usage_of(&self, app: &str, loops: &[String]) -> Result<f64> {
        let m = self.app(app)?;
        loops.iter().try_fold(0.0, |acc, lp| {
            m.usage_by_loop
                .get(lp)
                .map(|u| acc + u)
                .ok_or_else(|| Error::UnknownLoop(lp.clone()))
        })
    }

    fn compile_seconds(&self, app: &str) -> f64 {
        self.config
            .apps
            .get(app)
            .and_then(|m| m.compile_seconds)
            .unwrap_or(self.config.compile_seconds)
    }

    fn jitter(&self, app: &str, loops: &[String], class: &str, t: f64) -> f64 {
        let noise = self
            .config
            .apps
            .get(app)
            .and_then(|m| m.noise)
            .unwrap_or(self.config.noise);
        if noise == 0.0 {
            return t;
        }
        let mut sorted = loops.to_vec();
        sorted.sort();
        let key = (app.to_string(), sorted, class.to_string());
        let mut streams = self.streams.lock().unwrap();
        let rng = streams.entry(key).or_insert_with_key(|(a, l, c)| {
            let mut h = Fnv1a::default();
            h.write(a.as_bytes());
            for id in l {
                h.write(&[0]);
                h.write(id.as_bytes());
            }
            h.write(&[1]);
            h.write(c.as_bytes());
            ChaCha8Rng::seed_from_u64(self.config.seed ^ h.0)
        });
        let u: f64 = rng.random_range(-1.0..=1.0);
        t * (1.0 + noise * u)
    }

    fn noisy_time(&self, app: &str, loops: &[String], size: u64) -> Result<f64> {
        let t = self.modeled_time(app, loops, size)?;
        let class = self.app(app)?.class_of(app, size)?;
        Ok(self.jitter(app, loops, class, t))
    }

    /// Modeled time of `loops` (empty = CPU only) on data of `size` bytes.
    pub fn modeled_time(&self, app: &str, loops: &[String], size: u64) -> Result<f64> {
        let m = self.app(app)?;
        let class = m.class_of(app, size)?;
        if loops.is_empty() {
            return m.cpu_time.get(class).copied().ok_or_else(|| {
                Error::UnknownSizeBucket(format!("{class} (cpu time of app {app})"))
            });
        }
        let set: LoopSet = loops.iter().cloned().collect();
        let key = (app.to_string(), set);
        let Some(times) = self.timings.get(&key) else {
            return Err(Error::Measurement(format!(
                "no timing configured for loops {:?} of app {app}",
                key.1
            )));
        };
        times.get(class).copied().ok_or_else(|| {
            Error::UnknownSizeBucket(format!("{class} (loops {:?} of app {app})", key.1))
        })
    }
}

impl MeasurementBackend for SimulatedBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrency_safe: true,
            compile_duration_model: self.config.compile_seconds,
        }
    }

    fn clock(&self) -> &SimClock {
        &self.clock
    }

    fn resource_report(&self, pattern: &OffloadPattern) -> Result<f64> {
        self.usage_of(&pattern.app_id, &pattern.loop_ids)
    }

    fn compile(&self, pattern: &OffloadPattern) -> Result<Artifact> {
        let usage = self.resource_report(pattern)?;
        if usage > 1.0 {
            return Err(Error::CompileRejected {
                pattern: pattern.pattern_id.clone(),
                reason: format!("resource usage {usage:.3} exceeds device capacity"),
            });
        }
        let handle = {
            let mut next = self.next_handle.lock().unwrap();
            let h = ArtifactHandle(*next);
            *next += 1;
            h
        };
        self.artifacts.lock().unwrap().insert(
            handle,
            (
                pattern.app_id.clone(),
                pattern.loop_ids.iter().cloned().collect(),
            ),
        );
        let secs = self.compile_seconds(&pattern.app_id);
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
        let (app, loops) = self
            .artifacts
            .lock()
            .unwrap()
            .get(&artifact.handle)
            .cloned()
            .ok_or(Error::UnknownArtifact(artifact.handle.0))?;
        let loops: Vec<String> = loops.into_iter().collect();
        self.noisy_time(&app, &loops, data.size_bytes)
    }

    fn measure_cpu(&self, app_id: &str, data: &DataRef) -> Result<f64> {
        self.noisy_time(app_id, &[], data.size_bytes)
    }
}

/// Answers one command-adapter request (`compile`, `measure`, `resources`)
/// from the cost model, producing the single number the adapter expects on
/// standard output.
pub fn serve_command(config: &CostModelConfig, subcommand: &str, request: &str) -> Result<String> {
    let doc: PatternDoc = serde_json::from_str(request)?;
    let sim = SimulatedBackend::new(config.clone())?;
    let value = match subcommand {
        "resources" => sim.usage_of(&doc.app_id, &doc.loop_ids)?,
        "compile" => {
            let usage = sim.usage_of(&doc.app_id, &doc.loop_ids)?;
            if usage > 1.0 {
                return Err(Error::CompileRejected {
                    pattern: doc.pattern_id,
                    reason: format!("resource usage {usage:.3} exceeds device capacity"),
                });
            }
            sim.compile_seconds(&doc.app_id)
        }
        "measure" => {
            let data = doc
                .data
                .ok_or_else(|| Error::Command("measure request without data".into()))?;
            sim.noisy_time(&doc.app_id, &doc.loop_ids, data.size_bytes)?
        }
        other => return Err(Error::Command(format!("unknown subcommand {other}"))),
    };
    Ok(format!("{value}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModelConfig {
        let app = AppCostModel {
            size_classes: vec![
                SizeClass {
                    name: "small".into(),
                    min_bytes: 0,
                    max_bytes: Some(1000),
                },
                SizeClass {
                    name: "large".into(),
                    min_bytes: 1000,
                    max_bytes: None,
                },
            ],
            cpu_time: BTreeMap::from([("small".into(), 0.1), ("large".into(), 0.266)]),
            fpga_time: vec![
                PatternTiming {
                    loops: vec!["L1".into(), "L3".into()],
                    times: BTreeMap::from([("large".into(), 0.129)]),
                },
                PatternTiming {
                    loops: vec!["L1".into()],
                    times: BTreeMap::from([("large".into(), 0.2)]),
                },
            ],
            usage_by_loop: BTreeMap::from([
                ("L1".into(), 0.2),
                ("L3".into(), 0.3),
                ("L4".into(), 0.7),
                ("L5".into(), 0.6),
            ]),
            ..Default::default()
        };
        CostModelConfig {
            apps: BTreeMap::from([("tdFIR".into(), app)]),
            ..Default::default()
        }
    }

    fn pattern(loops: &[&str]) -> OffloadPattern {
        OffloadPattern::new("tdFIR", "p", loops.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn resource_report_is_additive_and_uncapped() {
        let sim = SimulatedBackend::new(model()).unwrap();
        assert!((sim.resource_report(&pattern(&["L1", "L3"])).unwrap() - 0.5).abs() < 1e-12);
        assert!((sim.resource_report(&pattern(&["L4"])).unwrap() - 0.7).abs() < 1e-12);
        assert!((sim.resource_report(&pattern(&["L4", "L5"])).unwrap() - 1.3).abs() < 1e-12);
        assert!(matches!(
            sim.resource_report(&pattern(&["L9"])),
            Err(Error::UnknownLoop(_))
        ));
    }

    #[test]
    fn compile_advances_model_clock_only() {
        let sim = SimulatedBackend::new(model()).unwrap();
        let wall = std::time::Instant::now();
        let a = sim.compile(&pattern(&["L1"])).unwrap();
        let b = sim.compile(&pattern(&["L1"])).unwrap();
        assert_ne!(a.handle, b.handle);
        assert_eq!(a.compile_seconds, 21_600.0);
        assert_eq!(b.compile_seconds, 21_600.0);
        assert_eq!(sim.clock().now(), 43_200.0);
        assert!(wall.elapsed().as_secs_f64() < 1.0);
    }

    #[test]
    fn compile_rejects_overflowing_pattern() {
        let sim = SimulatedBackend::new(model()).unwrap();
        let err = sim.compile(&pattern(&["L4", "L5"])).unwrap_err();
        assert!(matches!(err, Error::CompileRejected { .. }));
        assert_eq!(sim.clock().now(), 0.0);
    }

    #[test]
    fn measure_looks_up_pattern_and_size() {
        let sim = SimulatedBackend::new(model()).unwrap();
        let art = sim.compile(&pattern(&["L3", "L1"])).unwrap();
        let large = DataRef::new("d", 5000);
        assert_eq!(sim.measure(&art, &large).unwrap(), 0.129);
        assert_eq!(sim.measure(&art, &large).unwrap(), 0.129);
        assert_eq!(sim.measure_cpu("tdFIR", &large).unwrap(), 0.266);
        let err = sim.measure(&art, &DataRef::new("s", 10)).unwrap_err();
        assert!(err.to_string().contains("small"), "{err}");
    }

    #[test]
    fn measure_requires_known_handle() {
        let sim = SimulatedBackend::new(model()).unwrap();
        let other = SimulatedBackend::new(model()).unwrap();
        let art = other.compile(&pattern(&["L1"])).unwrap();
        let _ = sim.compile(&pattern(&["L3", "L1"])).unwrap();
        let mut forged = art.clone();
        forged.handle = ArtifactHandle(99);
        assert!(matches!(
            sim.measure(&forged, &DataRef::new("d", 5000)),
            Err(Error::UnknownArtifact(99))
        ));
    }

    #[test]
    fn seeded_noise_is_reproducible_and_bounded() {
        let mut cfg = model();
        cfg.noise = 0.05;
        cfg.seed = 42;
        let run = || {
            let sim = SimulatedBackend::new(cfg.clone()).unwrap();
            let art = sim.compile(&pattern(&["L1"])).unwrap();
            (0..200)
                .map(|_| sim.measure(&art, &DataRef::new("d", 5000)).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|t| (t / 0.2 - 1.0).abs() <= 0.05 + 1e-12));
        assert!(a.iter().any(|t| *t != 0.2));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = model();
        cfg.apps
            .get_mut("tdFIR")
            .unwrap()
            .usage_by_loop
            .insert("L9".into(), 0.0);
        assert!(SimulatedBackend::new(cfg).is_err());
        let mut cfg = model();
        cfg.apps
            .get_mut("tdFIR")
            .unwrap()
            .cpu_time
            .insert("small".into(), 0.0);
        assert!(cfg.validate().is_err());
        let mut cfg = model();
        cfg.noise = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serve_command_contract() {
        let cfg = model();
        let req = |loops: &[&str], size: Option<u64>| {
            serde_json::to_string(&PatternDoc {
                app_id: "tdFIR".into(),
                pattern_id: "p".into(),
                loop_ids: loops.iter().map(|s| s.to_string()).collect(),
                data: size.map(|s| DataRef::new("d", s)),
            })
            .unwrap()
        };
        assert_eq!(
            serve_command(&cfg, "resources", &req(&["L1", "L3"], None)).unwrap(),
            "0.5"
        );
        assert_eq!(
            serve_command(&cfg, "compile", &req(&["L1"], None)).unwrap(),
            "21600"
        );
        assert_eq!(
            serve_command(&cfg, "measure", &req(&["L1", "L3"], Some(5000))).unwrap(),
            "0.129"
        );
        assert_eq!(
            serve_command(&cfg, "measure", &req(&[], Some(5000))).unwrap(),
            "0.266"
        );
        assert!(serve_command(&cfg, "compile", &req(&["L4", "L5"], None)).is_err());
        assert!(serve_command(&cfg, "frobnicate", &req(&["L1"], None)).is_err());
    }
}
