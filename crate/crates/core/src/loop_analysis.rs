//! Loop-descriptor IR, arithmetic intensity and candidate ranking.
//!
//! Loops are described declaratively (operation count and bytes moved per
//! execution) instead of being parsed from source. Execution counts come
//! from a separate profile-counts file and act as an eligibility filter;
//! intensity decides the rank.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

fn default_iterations() -> u64 {
    1
}

/// One candidate loop of an application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopDescriptor {
    pub loop_id: String,
    /// Arithmetic operations per execution of the loop.
    pub op_count: u64,
    /// Bytes transferred per execution of the loop. Must be non-zero.
    pub bytes_moved: u64,
    /// Observed executions, as reported by a profiler.
    #[serde(default = "default_iterations")]
    pub iteration_count: u64,
}

impl LoopDescriptor {
    pub fn new(loop_id: impl Into<String>, op_count: u64, bytes_moved: u64) -> Self {
        Self {
            loop_id: loop_id.into(),
            op_count,
            bytes_moved,
            iteration_count: 1,
        }
    }

    /// Operations per byte. Panics never; a zero `bytes_moved` yields an error.
    pub fn intensity(&self) -> Result<f64> {
        compute_intensity(self)
    }

    /// Exact comparison of intensities by cross-multiplication.
    fn cmp_intensity(&self, other: &Self) -> Ordering {
        let lhs = self.op_count as u128 * other.bytes_moved as u128;
        let rhs = other.op_count as u128 * self.bytes_moved as u128;
        lhs.cmp(&rhs)
    }
}

pub fn compute_intensity(l: &LoopDescriptor) -> Result<f64> {
    if l.bytes_moved == 0 {
        return Err(Error::Domain(format!(
            "loop {} moves zero bytes; intensity undefined",
            l.loop_id
        )));
    }
    Ok(l.op_count as f64 / l.bytes_moved as f64)
}

/// Static description of an application's offloadable loops plus the
/// pre-launch timings its improvement coefficient is derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppCodeProfile {
    pub app_id: String,
    #[serde(default)]
    pub loops: Vec<LoopDescriptor>,
    /// Seconds per representative request with everything on the CPU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_launch_cpu_time: Option<f64>,
    /// Seconds per representative request with the launch-time offload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_launch_fpga_time: Option<f64>,
}

impl AppCodeProfile {
    pub fn new(app_id: impl Into<String>, loops: Vec<LoopDescriptor>) -> Self {
        Self {
            app_id: app_id.into(),
            loops,
            pre_launch_cpu_time: None,
            pre_launch_fpga_time: None,
        }
    }

    pub fn with_pre_launch_times(mut self, cpu: f64, fpga: Option<f64>) -> Self {
        self.pre_launch_cpu_time = Some(cpu);
        self.pre_launch_fpga_time = fpga;
        self
    }

    pub fn get(&self, loop_id: &str) -> Option<&LoopDescriptor> {
        self.loops.iter().find(|l| l.loop_id == loop_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.loops {
            if !seen.insert(l.loop_id.as_str()) {
                return Err(Error::InvalidProfile(format!(
                    "{}: duplicate loop id {}",
                    self.app_id, l.loop_id
                )));
            }
            if l.bytes_moved == 0 {
                return Err(Error::InvalidProfile(format!(
                    "{}: loop {} has bytes_moved = 0",
                    self.app_id, l.loop_id
                )));
            }
        }
        for (name, t) in [
            ("pre_launch_cpu_time", self.pre_launch_cpu_time),
            ("pre_launch_fpga_time", self.pre_launch_fpga_time),
        ] {
            if let Some(t) = t {
                if !(t > 0.0) {
                    return Err(Error::InvalidProfile(format!(
                        "{}: {name} must be > 0, got {t}",
                        self.app_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads one TOML profile document.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let profile: AppCodeProfile = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        profile.validate()?;
        Ok(profile)
    }
}

/// Applies profiler execution counts. Loops not mentioned keep their value.
pub fn ingest_profile_counts(
    profile: &AppCodeProfile,
    counts: &BTreeMap<String, u64>,
) -> Result<AppCodeProfile> {
    if let Some(unknown) = counts.keys().find(|id| profile.get(id).is_none()) {
        return Err(Error::UnknownLoop(unknown.clone()));
    }
    let mut out = profile.clone();
    for l in &mut out.loops {
        if let Some(&c) = counts.get(&l.loop_id) {
            l.iteration_count = c;
        }
    }
    Ok(out)
}

/// Parses a two-column `loop_id count` file. Blank lines and `#` comments
/// are ignored.
pub fn parse_profile_counts(text: &str) -> Result<BTreeMap<String, u64>> {
    let mut counts = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(id), Some(count), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::MalformedLine {
                line: idx + 1,
                reason: format!("expected `loop_id count`, got {raw:?}"),
            });
        };
        let count: u64 = count.parse().map_err(|_| Error::MalformedLine {
            line: idx + 1,
            reason: format!("count {count:?} is not a non-negative integer"),
        })?;
        counts.insert(id.to_string(), count);
    }
    Ok(counts)
}

pub fn load_profile_counts(path: &Path) -> Result<BTreeMap<String, u64>> {
    parse_profile_counts(&read_to_string(path)?)
}

/// Loops with at least `min_iterations` executions, highest intensity first,
/// ties broken by `loop_id`, truncated to `n`.
pub fn top_n_by_intensity(
    profile: &AppCodeProfile,
    n: usize,
    min_iterations: u64,
) -> Vec<LoopDescriptor> {
    let mut eligible: Vec<&LoopDescriptor> = profile
        .loops
        .iter()
        .filter(|l| l.iteration_count >= min_iterations && l.bytes_moved > 0)
        .collect();
    eligible.sort_by(|a, b| b.cmp_intensity(a).then_with(|| a.loop_id.cmp(&b.loop_id)));
    eligible.into_iter().take(n).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(specs: &[(&str, u64, u64)]) -> AppCodeProfile {
        AppCodeProfile::new(
            "app",
            specs
                .iter()
                .map(|&(id, ops, bytes)| LoopDescriptor::new(id, ops, bytes))
                .collect(),
        )
    }

    #[test]
    fn intensity_examples() {
        assert_eq!(
            compute_intensity(&LoopDescriptor::new("a", 1000, 500)).unwrap(),
            2.0
        );
        assert_eq!(
            compute_intensity(&LoopDescriptor::new("a", 0, 64)).unwrap(),
            0.0
        );
        assert_eq!(
            compute_intensity(&LoopDescriptor::new("a", 27, 9)).unwrap(),
            3.0
        );
        assert!(matches!(
            compute_intensity(&LoopDescriptor::new("a", 5, 0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn counts_partial_update_and_identity() {
        let p = profile(&[("L1", 1, 1), ("L2", 1, 1)]);
        let counts = BTreeMap::from([("L1".to_string(), 10)]);
        let q = ingest_profile_counts(&p, &counts).unwrap();
        assert_eq!(q.get("L1").unwrap().iteration_count, 10);
        assert_eq!(q.get("L2").unwrap().iteration_count, 1);

        assert_eq!(ingest_profile_counts(&p, &BTreeMap::new()).unwrap(), p);
    }

    #[test]
    fn counts_unknown_loop_rejected() {
        let p = profile(&[("L1", 1, 1)]);
        let counts = BTreeMap::from([("L9".to_string(), 5)]);
        let err = ingest_profile_counts(&p, &counts).unwrap_err();
        assert_eq!(err.to_string(), "unknown loop L9");
    }

    #[test]
    fn counts_file_parsing() {
        let c = parse_profile_counts("# gcov\nL1 10\n\nL2\t 3  # trailing\n").unwrap();
        assert_eq!(c, BTreeMap::from([("L1".into(), 10), ("L2".into(), 3)]));
        assert!(parse_profile_counts("L1 ten").is_err());
        assert!(parse_profile_counts("L1 1 2").is_err());
    }

    #[test]
    fn top_n_tie_break_and_underfull() {
        let p = profile(&[("b", 10, 2), ("a", 5, 1), ("c", 1, 1)]);
        let ids: Vec<_> = top_n_by_intensity(&p, 2, 0)
            .into_iter()
            .map(|l| l.loop_id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(top_n_by_intensity(&p, 4, 0).len(), 3);
    }

    #[test]
    fn top_n_respects_min_iterations() {
        let mut p = profile(&[("hot", 1, 1), ("cold", 100, 1)]);
        p.loops[1].iteration_count = 0;
        let ids: Vec<_> = top_n_by_intensity(&p, 4, 1)
            .into_iter()
            .map(|l| l.loop_id)
            .collect();
        assert_eq!(ids, ["hot"]);
    }

    #[test]
    fn profile_validation() {
        let dup = profile(&[("L1", 1, 1), ("L1", 2, 2)]);
        assert!(dup.validate().is_err());
        let zero = profile(&[("L1", 1, 0)]);
        assert!(zero.validate().is_err());
        let bad_time = profile(&[("L1", 1, 1)]).with_pre_launch_times(1.0, Some(0.0));
        assert!(bad_time.validate().is_err());
    }

    #[test]
    fn profile_toml_roundtrip() {
        let text = r#"
app_id = "tdFIR"
pre_launch_cpu_time = 0.31
pre_launch_fpga_time = 0.15

[[loops]]
loop_id = "L1"
op_count = 4000
bytes_moved = 1000

[[loops]]
loop_id = "L2"
op_count = 9000
bytes_moved = 1000
iteration_count = 7
"#;
        let p: AppCodeProfile = toml::from_str(text).unwrap();
        assert_eq!(p.loops[0].iteration_count, 1);
        assert_eq!(p.loops[1].iteration_count, 7);
        let back: AppCodeProfile = toml::from_str(&toml::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    fn arb_profile() -> impl Strategy<Value = AppCodeProfile> {
        prop::collection::vec((0u64..50, 1u64..20, 0u64..5), 0..20).prop_map(|specs| {
            AppCodeProfile::new(
                "app",
                specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (ops, bytes, iters))| LoopDescriptor {
                        loop_id: format!("L{i:02}"),
                        op_count: ops,
                        bytes_moved: bytes,
                        iteration_count: iters,
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn intensity_scales(ops in 0u64..1_000_000, bytes in 1u64..1_000_000) {
            let base = compute_intensity(&LoopDescriptor::new("x", ops, bytes)).unwrap();
            let dbl_ops = compute_intensity(&LoopDescriptor::new("x", ops * 2, bytes)).unwrap();
            let dbl_bytes = compute_intensity(&LoopDescriptor::new("x", ops, bytes * 2)).unwrap();
            prop_assert!((dbl_ops - 2.0 * base).abs() <= 1e-12 * base.max(1.0));
            prop_assert!((dbl_bytes - base / 2.0).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn top_n_matches_full_sort(p in arb_profile(), n in 1usize..8, min_it in 0u64..4) {
            let mut oracle: Vec<_> = p.loops.iter()
                .filter(|l| l.iteration_count >= min_it)
                .map(|l| (l.op_count as f64 / l.bytes_moved as f64, l.loop_id.clone()))
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<_> = oracle.into_iter().take(n).map(|(_, id)| id).collect();
            let got: Vec<_> = top_n_by_intensity(&p, n, min_it).into_iter().map(|l| l.loop_id).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn top_n_idempotent(p in arb_profile(), n in 1usize..8, min_it in 0u64..4) {
            let once = top_n_by_intensity(&p, n, min_it);
            let again = top_n_by_intensity(&AppCodeProfile::new("app", once.clone()), n, min_it);
            prop_assert_eq!(once, again);
        }
    }
}
