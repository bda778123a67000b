//! Deterministic synthetic request logs.
//!
//! Request counts are exact (`rate × window hours`), sizes follow the
//! configured mix through a largest-remainder split, and the order of sizes
//! is a seeded shuffle. Requests are spread evenly over the window.

use std::collections::BTreeMap;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{Executor, RequestRecord, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMix {
    pub name: String,
    pub weight: u64,
    pub data_size: u64,
    /// Processing time logged for each request of this size.
    pub time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppTraffic {
    pub rate_per_hour: f64,
    pub executor: Executor,
    pub mix: Vec<SizeMix>,
    /// When set, per-request times are nudged by whole milliseconds so the
    /// app's raw total lands exactly on this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_raw_total_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficParams {
    #[serde(default)]
    pub apps: BTreeMap<String, AppTraffic>,
}

/// Splits `n` proportionally to `weights` with the largest-remainder rule;
/// equal remainders favour the earlier entry. All-zero weights yield zeros.
pub fn split_counts(n: u64, weights: &[u64]) -> Vec<u64> {
    let total: u128 = weights.iter().map(|&w| w as u128).sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let n = n as u128;
    let mut counts: Vec<u64> = weights
        .iter()
        .map(|&w| (n * w as u128 / total) as u64)
        .collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * weights[i] as u128 % total), i));
    for &i in order.iter().take((n as u64 - assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

pub fn generate_synthetic_log(
    params: &TrafficParams,
    window: &Window,
    seed: u64,
) -> Vec<RequestRecord> {
    let window_ms = (window.end - window.start).num_milliseconds().max(0) as u64;
    let mut out = Vec::new();
    for (app_idx, (app, traffic)) in params.apps.iter().enumerate() {
        let n = (traffic.rate_per_hour.max(0.0) * window.hours()).round() as u64;
        if n == 0 || traffic.mix.is_empty() {
            continue;
        }
        let weights: Vec<u64> = traffic.mix.iter().map(|m| m.weight).collect();
        let counts = split_counts(n, &weights);
        let sizes: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c as usize))
            .collect();
        if sizes.is_empty() {
            continue;
        }
        // Nudges are assigned before the shuffle so the multiset of times
        // does not depend on the seed.
        let n = sizes.len() as i64;
        let base: i64 = sizes.iter().map(|&i| traffic.mix[i].time_ms as i64).sum();
        let residual = traffic.target_raw_total_ms.map_or(0, |t| t as i64 - base);
        let (per, extra) = (residual.div_euclid(n), residual.rem_euclid(n));
        let mut requests: Vec<(usize, u64)> = sizes
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let nudge = per + i64::from((k as i64) < extra);
                (i, (traffic.mix[i].time_ms as i64 + nudge).max(1) as u64)
            })
            .collect();
        let app_seed = seed.wrapping_add((app_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        requests.shuffle(&mut ChaCha8Rng::seed_from_u64(app_seed));

        for (k, &(mix_idx, time_ms)) in requests.iter().enumerate() {
            let m = &traffic.mix[mix_idx];
            let offset = window_ms * k as u64 / n as u64;
            out.push(RequestRecord {
                timestamp: window.start + Duration::milliseconds(offset as i64),
                app_id: app.clone(),
                data_size: m.data_size,
                processing_time: time_ms as f64 / 1000.0,
                executor: traffic.executor,
                data_ref: format!("{app}/{}/{k:05}", m.name),
            });
        }
    }
    out.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.app_id.cmp(&b.app_id))
    });
    out
}

#[cfg(test)]
mod tests {
    use chrono::{TimeZone, Utc};

    use super::*;

    fn hour() -> Window {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        Window::new(t0, t0 + Duration::hours(1)).unwrap()
    }

    fn mix(weights: &[u64]) -> Vec<SizeMix> {
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| SizeMix {
                name: format!("s{i}"),
                weight: w,
                data_size: 1000 * (i as u64 + 1),
                time_ms: 100 * (i as u64 + 1),
            })
            .collect()
    }

    fn params(rate: f64, weights: &[u64], target: Option<u64>) -> TrafficParams {
        TrafficParams {
            apps: BTreeMap::from([(
                "tdFIR".to_string(),
                AppTraffic {
                    rate_per_hour: rate,
                    executor: Executor::Fpga,
                    mix: mix(weights),
                    target_raw_total_ms: target,
                },
            )]),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_counts(300, &[3, 5, 2]), [90, 150, 60]);
        assert_eq!(split_counts(10, &[3, 5, 2]), [3, 5, 2]);
        assert_eq!(split_counts(1, &[1, 1]), [1, 0]);
        assert_eq!(split_counts(7, &[0, 0]), [0, 0]);
        assert_eq!(split_counts(5, &[1, 1, 1]), [2, 2, 1]);
    }

    #[test]
    fn exact_counts_and_mix() {
        let log = generate_synthetic_log(&params(300.0, &[3, 5, 2], None), &hour(), 1);
        assert_eq!(log.len(), 300);
        let per_size = |s: u64| log.iter().filter(|r| r.data_size == s).count();
        assert_eq!(
            (per_size(1000), per_size(2000), per_size(3000)),
            (90, 150, 60)
        );
        assert!(log.iter().all(|r| hour().contains(r.timestamp)));
    }

    #[test]
    fn zero_rates_give_empty_log() {
        assert!(generate_synthetic_log(&params(0.0, &[3, 5, 2], None), &hour(), 1).is_empty());
        assert!(generate_synthetic_log(&TrafficParams::default(), &hour(), 1).is_empty());
    }

    #[test]
    fn target_total_is_hit_exactly() {
        for target in [38_500, 50_000, 30_001] {
            let log = generate_synthetic_log(&params(300.0, &[3, 5, 2], Some(target)), &hour(), 9);
            let total_ms: u64 = log
                .iter()
                .map(|r| (r.processing_time * 1000.0).round() as u64)
                .sum();
            assert_eq!(total_ms, target);
        }
    }

    #[test]
    fn seed_changes_order_not_aggregates() {
        let a = generate_synthetic_log(&params(300.0, &[3, 5, 2], None), &hour(), 1);
        let b = generate_synthetic_log(&params(300.0, &[3, 5, 2], None), &hour(), 2);
        assert_eq!(
            a,
            generate_synthetic_log(&params(300.0, &[3, 5, 2], None), &hour(), 1)
        );
        assert_ne!(a, b);
        let sum = |l: &[RequestRecord]| l.iter().map(|r| r.processing_time).sum::<f64>();
        assert!((sum(&a) - sum(&b)).abs() < 1e-9);
    }
}
