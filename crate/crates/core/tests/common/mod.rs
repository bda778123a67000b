#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use fpga_reconfig::analytics::RequestRecord;
use fpga_reconfig::backend::{MeasurementBackend, SimClock, SimulatedBackend};
use fpga_reconfig::decision::ApprovalChannel;
use fpga_reconfig::executor::{FpgaController, FpgaState, ReconfigMode, SimulatedDevice};
use fpga_reconfig::loop_analysis::AppCodeProfile;
use fpga_reconfig::orchestrator::{
    run_cycle, Catalog, CycleContext, CycleError, CycleReport, Scenario,
};

pub fn fig4() -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/fig4.scenario");
    Scenario::load(&path).unwrap()
}

/// Backend, device and controller wired to one model clock, as a replay does.
pub struct Rig {
    pub scenario: Scenario,
    pub records: Vec<RequestRecord>,
    pub profiles: BTreeMap<String, AppCodeProfile>,
    pub backend: SimulatedBackend,
    pub controller: FpgaController<SimulatedDevice>,
}

impl Rig {
    pub fn new(scenario: Scenario) -> Self {
        let records = scenario.generate_log(scenario.seed).unwrap();
        let now = scenario.window().unwrap().end;
        let clock = SimClock::starting_at(now.timestamp() as f64);
        let backend =
            SimulatedBackend::with_clock(scenario.cost_model.clone(), clock.clone()).unwrap();
        let latency = match scenario.config.reconfig_mode {
            ReconfigMode::Static => scenario.cost_model.reconfig.static_seconds,
            ReconfigMode::Dynamic => scenario.cost_model.reconfig.dynamic_seconds,
        };
        let state = match &scenario.config.current_pattern {
            Some(p) => {
                let pattern = p.to_pattern();
                let artifact = backend.compile(&pattern).unwrap();
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
        Self {
            scenario,
            records,
            profiles,
            backend,
            controller,
        }
    }

    pub fn cycle(
        &self,
        approval: &dyn ApprovalChannel,
        catalog: Option<&Catalog>,
        dry_run: bool,
    ) -> Result<CycleReport, CycleError> {
        let ctx = CycleContext {
            config: &self.scenario.config,
            records: &self.records,
            malformed_lines: 0,
            profiles: &self.profiles,
            backend: &self.backend,
            controller: &self.controller,
            approval,
            catalog,
            now: self.scenario.window().unwrap().end,
            dry_run,
            threshold: None,
        };
        run_cycle(&ctx)
    }
}

/// Every file under `dir` with its contents, for before/after comparisons.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return out;
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
