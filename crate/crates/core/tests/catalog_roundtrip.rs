use chrono::{TimeZone, Utc};
use fpga_reconfig::backend::DataRef;
use fpga_reconfig::decision::{decide, Approval, ImprovementEffect};
use fpga_reconfig::orchestrator::{Catalog, ProposalRecord};
use fpga_reconfig::pattern_search::{OffloadPattern, SearchResult};
use proptest::prelude::*;

fn pattern() -> impl Strategy<Value = (Vec<String>, Option<f64>, Option<f64>)> {
    (
        prop::collection::btree_set(0u8..12, 1..4),
        prop::option::of(0.0f64..1.0),
        prop::option::of(1e-6f64..1e4),
    )
        .prop_map(|(loops, u, t)| (loops.into_iter().map(|l| format!("L{l}")).collect(), u, t))
}

fn search_result() -> impl Strategy<Value = SearchResult> {
    (
        prop::collection::vec(pattern(), 1..6),
        any::<prop::sample::Index>(),
        0u64..1 << 30,
        0.0f64..1e6,
        prop::collection::vec("[a-z ]{0,12}", 0..3),
    )
        .prop_map(|(pats, best, size, compile, diagnostics)| {
            let all: Vec<OffloadPattern> = pats
                .into_iter()
                .enumerate()
                .map(|(i, (loops, u, t))| {
                    let mut p = OffloadPattern::new("app", format!("app#{}", i + 1), loops);
                    p.resource_usage = u;
                    p.measured_time = t;
                    p
                })
                .collect();
            SearchResult {
                app_id: "app".into(),
                best: all[best.index(all.len())].clone(),
                all_measured: all,
                representative_data_ref: DataRef::new("app/req/00001", size),
                compile_seconds: compile,
                diagnostics,
            }
        })
}

fn effect(app: &str, baseline: f64, offloaded: f64, freq: f64) -> ImprovementEffect {
    ImprovementEffect::new(app, format!("{app}#1"), baseline, offloaded, freq)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn search_results_round_trip(result in search_result(), secs in 0i64..1_000_000_000) {
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let at = Utc.timestamp_opt(secs, 0).unwrap();
        cat.store_search(&result, at).unwrap();
        let docs = cat.searches("app").unwrap();
        prop_assert_eq!(docs.len(), 1);
        prop_assert_eq!(docs[0].searched_at, at);
        prop_assert_eq!(docs[0].to_search_result().unwrap(), result.clone());
        prop_assert_eq!(cat.latest_chosen("app").unwrap(), Some(result.best));
    }

    #[test]
    fn proposals_round_trip(
        cur in (0.0f64..10.0, 0.0f64..10.0, 0.0f64..500.0),
        cand in (0.0f64..100.0, 0.0f64..100.0, 0.0f64..50.0),
        threshold in 0.1f64..10.0,
        approval in prop::sample::select(vec![Approval::Pending, Approval::Approved, Approval::Rejected]),
        cooldown in prop::option::of(0i64..100_000),
    ) {
        let current = effect("cur", cur.0, cur.1, cur.2);
        let candidate = effect("new", cand.0, cand.1, cand.2);
        let mut proposal = decide("prop-1", &current, &[candidate], threshold, 0.0).unwrap();
        proposal.approval = approval;
        let at = Utc.with_ymd_and_hms(2024, 1, 1, 1, 0, 0).unwrap();
        let record = ProposalRecord {
            recorded_at: at,
            proposal,
            from_pattern: Some(OffloadPattern::new("cur", "cur#1", vec!["L1".into()])),
            target: Some(OffloadPattern::new("new", "new#1", vec!["L2".into(), "L3".into()])),
            cooldown_until: cooldown.map(|s| at + chrono::Duration::seconds(s)),
        };
        let dir = tempfile::tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        cat.record_proposal(&record).unwrap();
        prop_assert_eq!(cat.proposal_history().unwrap(), vec![record.clone()]);
        let latest = cat.proposals().unwrap();
        prop_assert_eq!(latest.get("prop-1"), Some(&record));
    }
}
