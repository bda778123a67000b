//! Production request-log analytics: improvement coefficients, corrected
//! load totals, top-K apps by load, data-size histograms and the choice of
//! a representative request.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::RwLock;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::DataRef;
use crate::error::{read_to_string, Error, Result};
use crate::loop_analysis::AppCodeProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Executor {
    Cpu,
    Fpga,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub timestamp: DateTime<Utc>,
    pub app_id: String,
    pub data_size: u64,
    /// Seconds, as executed.
    pub processing_time: f64,
    pub executor: Executor,
    pub data_ref: String,
}

impl RequestRecord {
    pub fn data(&self) -> DataRef {
        DataRef::new(self.data_ref.clone(), self.data_size)
    }
}

/// On-disk shape of one request-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub timestamp: DateTime<Utc>,
    pub app_id: String,
    pub data_size_bytes: u64,
    pub processing_time_ms: u64,
    pub executor: Executor,
    pub data_ref: String,
}

impl TryFrom<LogLine> for RequestRecord {
    type Error = String;

    fn try_from(l: LogLine) -> Result<Self, String> {
        if l.processing_time_ms == 0 {
            return Err("processing_time_ms must be > 0".into());
        }
        Ok(RequestRecord {
            timestamp: l.timestamp,
            app_id: l.app_id,
            data_size: l.data_size_bytes,
            processing_time: l.processing_time_ms as f64 / 1000.0,
            executor: l.executor,
            data_ref: l.data_ref,
        })
    }
}

impl From<&RequestRecord> for LogLine {
    fn from(r: &RequestRecord) -> Self {
        LogLine {
            timestamp: r.timestamp,
            app_id: r.app_id.clone(),
            data_size_bytes: r.data_size,
            processing_time_ms: (r.processing_time * 1000.0).round() as u64,
            executor: r.executor,
            data_ref: r.data_ref.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedLog {
    pub records: Vec<RequestRecord>,
    /// 1-based line numbers and reasons of skipped lines.
    pub malformed: Vec<(usize, String)>,
}

/// Parses a line-delimited JSON request log. Malformed lines are skipped
/// and reported unless `fatal_malformed` is set.
pub fn parse_log(text: &str, fatal_malformed: bool) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<LogLine>(line)
            .map_err(|e| e.to_string())
            .and_then(RequestRecord::try_from);
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) if fatal_malformed => {
                return Err(Error::MalformedLine {
                    line: idx + 1,
                    reason,
                })
            }
            Err(reason) => {
                warn!(line = idx + 1, %reason, "skipping malformed log line");
                out.malformed.push((idx + 1, reason));
            }
        }
    }
    Ok(out)
}

pub fn load_log(path: &Path, fatal_malformed: bool) -> Result<ParsedLog> {
    parse_log(&read_to_string(path)?, fatal_malformed)
}

pub fn render_log(records: &[RequestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&LogLine::from(r)).expect("log line serializes"));
        out.push('\n');
    }
    out
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Window {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if end <= start {
            return Err(Error::Config(format!("empty window [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn ending_at(end: DateTime<Utc>, length: Duration) -> Result<Self> {
        Self::new(end - length, end)
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && t < self.end
    }

    pub fn hours(&self) -> f64 {
        (self.end - self.start).num_milliseconds() as f64 / 3_600_000.0
    }
}

/// Append-only request log shared between one writer and many readers.
#[derive(Debug, Default)]
pub struct RequestLog {
    records: RwLock<Vec<RequestRecord>>,
}

impl RequestLog {
    pub fn new(records: Vec<RequestRecord>) -> Self {
        Self {
            records: RwLock::new(records),
        }
    }

    pub fn append(&self, record: RequestRecord) {
        self.records.write().unwrap().push(record);
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Immutable copy of the records inside `window`.
    pub fn snapshot(&self, window: &Window) -> Vec<RequestRecord> {
        self.records
            .read()
            .unwrap()
            .iter()
            .filter(|r| window.contains(r.timestamp))
            .cloned()
            .collect()
    }
}

/// CPU-only time over offloaded time from pre-launch tests; 1.0 for an app
/// that was never offloaded.
pub fn improvement_coefficient(profile: &AppCodeProfile) -> Result<f64> {
    match (profile.pre_launch_cpu_time, profile.pre_launch_fpga_time) {
        (_, None) => Ok(1.0),
        (_, Some(f)) if !(f > 0.0) => Err(Error::Domain(format!(
            "{}: offloaded pre-launch time is {f}",
            profile.app_id
        ))),
        (Some(c), Some(f)) => Ok(c / f),
        (None, Some(_)) => Err(Error::Domain(format!(
            "{}: offloaded pre-launch time given without a CPU-only time",
            profile.app_id
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppLoadSummary {
    pub app_id: String,
    pub request_count: u64,
    pub raw_time_total: f64,
    pub improvement_coefficient: f64,
    /// Σ processing_time × coefficient for fpga records, × 1 for cpu records.
    pub corrected_time_total: f64,
}

/// One summary per app with in-window traffic, ordered by `app_id`. With
/// `strict`, any app missing from `coefficients` is rejected; otherwise
/// unknown apps use a coefficient of 1.0.
pub fn summarize_window(
    records: &[RequestRecord],
    window: &Window,
    coefficients: &BTreeMap<String, f64>,
    strict: bool,
) -> Result<Vec<AppLoadSummary>> {
    // Times are summed in sorted order so the totals do not depend on how
    // the log happens to be ordered.
    let mut by_app: BTreeMap<&str, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| window.contains(r.timestamp)) {
        let coeff = match coefficients.get(&r.app_id) {
            Some(c) => *c,
            None if strict => return Err(Error::UnknownApp(r.app_id.clone())),
            None => 1.0,
        };
        let (c, raw, corrected) = by_app
            .entry(&r.app_id)
            .or_insert_with(|| (coeff, Vec::new(), Vec::new()));
        raw.push(r.processing_time);
        corrected.push(match r.executor {
            Executor::Fpga => r.processing_time * *c,
            Executor::Cpu => r.processing_time,
        });
    }
    let sorted_sum = |mut xs: Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs.into_iter().sum::<f64>()
    };
    Ok(by_app
        .into_iter()
        .map(|(app, (coeff, raw, corrected))| AppLoadSummary {
            app_id: app.to_string(),
            request_count: raw.len() as u64,
            raw_time_total: sorted_sum(raw),
            improvement_coefficient: coeff,
            corrected_time_total: sorted_sum(corrected),
        })
        .collect())
}

/// Highest corrected load first; ties by `app_id`.
pub fn top_k_apps(summaries: &[AppLoadSummary], k: usize) -> Vec<AppLoadSummary> {
    let mut sorted = summaries.to_vec();
    sorted.sort_by(|a, b| {
        b.corrected_time_total
            .total_cmp(&a.corrected_time_total)
            .then_with(|| a.app_id.cmp(&b.app_id))
    });
    sorted.truncate(k);
    sorted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub bucket_width: u64,
    /// Bucket index (`size / bucket_width`) to request count.
    pub counts: BTreeMap<u64, u64>,
    /// Most populated bucket, lowest index on ties; `None` when empty.
    pub mode_bucket: Option<u64>,
}

impl SizeHistogram {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn bucket_of(&self, size: u64) -> u64 {
        size / self.bucket_width
    }
}

pub fn build_histogram(
    records: &[RequestRecord],
    app_id: &str,
    window: &Window,
    bucket_width: u64,
) -> Result<SizeHistogram> {
    if bucket_width == 0 {
        return Err(Error::Config("bucket_width must be > 0".into()));
    }
    let mut counts = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.app_id == app_id && window.contains(r.timestamp))
    {
        *counts.entry(r.data_size / bucket_width).or_insert(0u64) += 1;
    }
    // BTreeMap iterates in ascending index, so a strict `>` keeps the lowest on ties.
    let mut mode: Option<(u64, u64)> = None;
    for (&idx, &n) in &counts {
        if mode.is_none_or(|(_, best)| n > best) {
            mode = Some((idx, n));
        }
    }
    Ok(SizeHistogram {
        bucket_width,
        counts,
        mode_bucket: mode.map(|(idx, _)| idx),
    })
}

/// The most recent in-window request of `app_id` whose size falls in the
/// histogram's mode bucket.
pub fn select_representative(
    records: &[RequestRecord],
    app_id: &str,
    window: &Window,
    histogram: &SizeHistogram,
) -> Result<DataRef> {
    let mode = histogram.mode_bucket.ok_or(Error::NoRequests)?;
    records
        .iter()
        .filter(|r| {
            r.app_id == app_id
                && window.contains(r.timestamp)
                && histogram.bucket_of(r.data_size) == mode
        })
        .max_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.data_ref.cmp(&b.data_ref))
        })
        .map(RequestRecord::data)
        .ok_or(Error::NoRequests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn rec(secs: i64, app: &str, size: u64, time: f64, ex: Executor) -> RequestRecord {
        RequestRecord {
            timestamp: t0() + Duration::seconds(secs),
            app_id: app.into(),
            data_size: size,
            processing_time: time,
            executor: ex,
            data_ref: format!("{app}-{secs}"),
        }
    }

    fn hour() -> Window {
        Window::new(t0(), t0() + Duration::hours(1)).unwrap()
    }

    #[test]
    fn coefficient_examples() {
        let p = AppCodeProfile::new("a", vec![]).with_pre_launch_times(10.0, Some(5.0));
        assert_eq!(improvement_coefficient(&p).unwrap(), 2.0);
        let cpu_only = AppCodeProfile::new("a", vec![]).with_pre_launch_times(10.0, None);
        assert_eq!(improvement_coefficient(&cpu_only).unwrap(), 1.0);
        assert_eq!(
            improvement_coefficient(&AppCodeProfile::new("a", vec![])).unwrap(),
            1.0
        );
        let zero = AppCodeProfile::new("a", vec![]).with_pre_launch_times(10.0, Some(0.0));
        assert!(matches!(
            improvement_coefficient(&zero),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn summaries_correct_only_fpga_records() {
        let log = vec![
            rec(1, "fir", 10, 0.1, Executor::Fpga),
            rec(2, "fir", 10, 0.2, Executor::Fpga),
            rec(3, "mri", 10, 27.4, Executor::Cpu),
            rec(4000, "mri", 10, 27.4, Executor::Cpu),
        ];
        let coeffs = BTreeMap::from([("fir".to_string(), 2.0), ("mri".to_string(), 3.0)]);
        let s = summarize_window(&log, &hour(), &coeffs, false).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].app_id, "fir");
        assert_eq!(s[0].request_count, 2);
        assert!((s[0].corrected_time_total - 0.6).abs() < 1e-12);
        assert!((s[1].corrected_time_total - 27.4).abs() < 1e-12);
        assert_eq!(s[1].request_count, 1);
    }

    #[test]
    fn empty_window_and_strict_mode() {
        assert!(summarize_window(&[], &hour(), &BTreeMap::new(), false)
            .unwrap()
            .is_empty());
        let log = vec![rec(1, "ghost", 1, 1.0, Executor::Cpu)];
        assert!(matches!(
            summarize_window(&log, &hour(), &BTreeMap::new(), true),
            Err(Error::UnknownApp(_))
        ));
        assert_eq!(
            summarize_window(&log, &hour(), &BTreeMap::new(), false)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn top_k_orders_by_corrected_total() {
        let s = |app: &str, t: f64| AppLoadSummary {
            app_id: app.into(),
            request_count: 1,
            raw_time_total: t,
            improvement_coefficient: 1.0,
            corrected_time_total: t,
        };
        let all = vec![
            s("tdFIR", 79.7),
            s("MRI-Q", 274.0),
            s("Himeno", 15.0),
            s("Abc", 15.0),
        ];
        let ids = |v: Vec<AppLoadSummary>| v.into_iter().map(|s| s.app_id).collect::<Vec<_>>();
        assert_eq!(ids(top_k_apps(&all, 2)), ["MRI-Q", "tdFIR"]);
        assert_eq!(ids(top_k_apps(&all, 1)), ["MRI-Q"]);
        assert_eq!(ids(top_k_apps(&all, 4))[2..], ["Abc", "Himeno"]);
        assert_eq!(top_k_apps(&all[..1], 3).len(), 1);
    }

    #[test]
    fn histogram_example_with_tie() {
        let log: Vec<_> = [100, 100, 220, 230, 500]
            .iter()
            .enumerate()
            .map(|(i, &s)| rec(i as i64, "a", s, 1.0, Executor::Cpu))
            .collect();
        let h = build_histogram(&log, "a", &hour(), 100).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(1, 2), (2, 2), (5, 1)]));
        assert_eq!(h.mode_bucket, Some(1));
        assert_eq!(h.total(), 5);
        assert!(build_histogram(&log, "a", &hour(), 0).is_err());
    }

    #[test]
    fn empty_histogram_has_no_representative() {
        let h = build_histogram(&[], "a", &hour(), 100).unwrap();
        assert!(h.is_empty());
        assert_eq!(h.mode_bucket, None);
        let err = select_representative(&[], "a", &hour(), &h).unwrap_err();
        assert_eq!(err.to_string(), "no requests to represent");
    }

    #[test]
    fn representative_is_most_recent_in_mode() {
        let log = vec![
            rec(10, "a", 150, 1.0, Executor::Cpu),
            rec(30, "a", 160, 1.0, Executor::Cpu),
            rec(20, "a", 170, 1.0, Executor::Cpu),
            rec(40, "a", 900, 1.0, Executor::Cpu),
        ];
        let h = build_histogram(&log, "a", &hour(), 100).unwrap();
        let d = select_representative(&log, "a", &hour(), &h).unwrap();
        assert_eq!(d, DataRef::new("a-30", 160));

        let single = vec![rec(5, "a", 7, 1.0, Executor::Cpu)];
        let h = build_histogram(&single, "a", &hour(), 100).unwrap();
        assert_eq!(h.mode_bucket, Some(0));
        assert_eq!(
            select_representative(&single, "a", &hour(), &h)
                .unwrap()
                .data_ref,
            "a-5"
        );
    }

    #[test]
    fn log_parsing_skips_malformed_lines() {
        let text = concat!(
            r#"{"timestamp":"2024-01-01T00:00:01Z","app_id":"a","data_size_bytes":10,"processing_time_ms":129,"executor":"fpga","data_ref":"x"}"#,
            "\n",
            "not json\n",
            "\n",
            r#"{"timestamp":"2024-01-01T00:00:02Z","app_id":"a","data_size_bytes":10,"processing_time_ms":0,"executor":"cpu","data_ref":"y"}"#,
            "\n",
            r#"{"timestamp":"2024-01-01T00:00:03Z","app_id":"a","data_size_bytes":10,"processing_time_ms":5,"executor":"gpu","data_ref":"z"}"#,
            "\n",
        );
        let parsed = parse_log(text, false).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].processing_time, 0.129);
        assert_eq!(parsed.records[0].executor, Executor::Fpga);
        assert_eq!(
            parsed.malformed.iter().map(|(l, _)| *l).collect::<Vec<_>>(),
            [2, 4, 5]
        );
        assert!(matches!(
            parse_log(text, true),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        assert_eq!(
            parse_log(&render_log(&parsed.records), true)
                .unwrap()
                .records,
            parsed.records
        );
    }

    #[test]
    fn request_log_snapshot_is_isolated() {
        let log = RequestLog::default();
        log.append(rec(1, "a", 1, 1.0, Executor::Cpu));
        let snap = log.snapshot(&hour());
        log.append(rec(2, "a", 1, 1.0, Executor::Cpu));
        log.append(rec(7200, "a", 1, 1.0, Executor::Cpu));
        assert_eq!(snap.len(), 1);
        assert_eq!(log.snapshot(&hour()).len(), 2);
        assert_eq!(log.len(), 3);
    }

    #[test]
    fn window_rejects_empty_interval() {
        assert!(Window::new(t0(), t0()).is_err());
        assert_eq!(hour().hours(), 1.0);
    }

    fn arb_log() -> impl Strategy<Value = Vec<RequestRecord>> {
        prop::collection::vec(
            (0i64..7200, 0usize..3, 0u64..2000, 1u64..5000, any::<bool>()),
            0..60,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(secs, app, size, ms, fpga)| {
                    rec(
                        secs,
                        ["a", "b", "c"][app],
                        size,
                        ms as f64 / 1000.0,
                        if fpga { Executor::Fpga } else { Executor::Cpu },
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn corrected_totals_are_additive_over_subwindows(log in arb_log(), split in 1i64..3599) {
            let coeffs = BTreeMap::from([("a".to_string(), 2.07), ("b".to_string(), 1.5)]);
            let whole = summarize_window(&log, &hour(), &coeffs, false).unwrap();
            let mid = t0() + Duration::seconds(split);
            let left = summarize_window(&log, &Window::new(t0(), mid).unwrap(), &coeffs, false).unwrap();
            let right = summarize_window(&log, &Window::new(mid, hour().end).unwrap(), &coeffs, false).unwrap();
            for s in &whole {
                let part = |v: &[AppLoadSummary]| v.iter().find(|x| x.app_id == s.app_id)
                    .map(|x| (x.request_count, x.corrected_time_total)).unwrap_or((0, 0.0));
                let (lc, lt) = part(&left);
                let (rc, rt) = part(&right);
                prop_assert_eq!(lc + rc, s.request_count);
                prop_assert!((lt + rt - s.corrected_time_total).abs() < 1e-9);
            }
        }

        #[test]
        fn cpu_only_logs_are_uncorrected(log in arb_log(), coeff in 1.0f64..10.0) {
            let cpu: Vec<_> = log.into_iter().map(|mut r| { r.executor = Executor::Cpu; r }).collect();
            let coeffs = BTreeMap::from([("a".to_string(), coeff), ("b".to_string(), coeff), ("c".to_string(), coeff)]);
            for s in summarize_window(&cpu, &hour(), &coeffs, true).unwrap() {
                prop_assert!((s.corrected_time_total - s.raw_time_total).abs() < 1e-12);
            }
        }

        #[test]
        fn representative_lies_in_mode_bucket(log in arb_log(), width in 1u64..500) {
            let h = build_histogram(&log, "a", &hour(), width).unwrap();
            prop_assert_eq!(h.total() as usize,
                log.iter().filter(|r| r.app_id == "a" && hour().contains(r.timestamp)).count());
            match select_representative(&log, "a", &hour(), &h) {
                Ok(d) => prop_assert_eq!(Some(d.size_bytes / width), h.mode_bucket),
                Err(_) => prop_assert!(h.is_empty()),
            }
        }
    }
}
