//! On-disk pattern catalog, test-case catalog and proposal history.
//!
//! Layout under the catalog root:
//!
//! ```text
//! patterns/<app>/<stamp>.json   one search result per (app, search time)
//! testcases/<app>.jsonl         representative data picked per cycle
//! proposals.jsonl               every proposal state change, append-only
//! events.jsonl                  reconfiguration audit log
//! fpga_state.json               pattern currently loaded in production
//! ```

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::DataRef;
use crate::decision::{Approval, CooldownBook, ProposalKey, ReconfigProposal, Verdict};
use crate::error::{Error, Result};
use crate::executor::{append_audit, ReconfigEvent};
use crate::pattern_search::{OffloadPattern, SearchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogPattern {
    pub pattern_id: String,
    pub loop_ids: Vec<String>,
    pub usage: Option<f64>,
    pub measured_time: Option<f64>,
    pub chosen: bool,
}

/// Persisted form of a [`SearchResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDocument {
    pub app_id: String,
    pub searched_at: DateTime<Utc>,
    pub representative_data_ref: DataRef,
    pub compile_seconds: f64,
    pub patterns: Vec<CatalogPattern>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

impl SearchDocument {
    pub fn new(result: &SearchResult, searched_at: DateTime<Utc>) -> Self {
        Self {
            app_id: result.app_id.clone(),
            searched_at,
            representative_data_ref: result.representative_data_ref.clone(),
            compile_seconds: result.compile_seconds,
            patterns: result
                .all_measured
                .iter()
                .map(|p| CatalogPattern {
                    pattern_id: p.pattern_id.clone(),
                    loop_ids: p.loop_ids.clone(),
                    usage: p.resource_usage,
                    measured_time: p.measured_time,
                    chosen: p.pattern_id == result.best.pattern_id,
                })
                .collect(),
            diagnostics: result.diagnostics.clone(),
        }
    }

    pub fn to_search_result(&self) -> Result<SearchResult> {
        let all_measured: Vec<OffloadPattern> = self
            .patterns
            .iter()
            .map(|p| OffloadPattern {
                pattern_id: p.pattern_id.clone(),
                app_id: self.app_id.clone(),
                loop_ids: p.loop_ids.clone(),
                resource_usage: p.usage,
                measured_time: p.measured_time,
            })
            .collect();
        let best = self
            .patterns
            .iter()
            .zip(&all_measured)
            .find(|(c, _)| c.chosen)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "search document for {} has no chosen pattern",
                    self.app_id
                ))
            })?;
        Ok(SearchResult {
            app_id: self.app_id.clone(),
            best,
            all_measured,
            representative_data_ref: self.representative_data_ref.clone(),
            compile_seconds: self.compile_seconds,
            diagnostics: self.diagnostics.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub recorded_at: DateTime<Utc>,
    pub data: DataRef,
}

/// One state of a proposal. The latest record per `proposal_id` wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub recorded_at: DateTime<Utc>,
    pub proposal: ReconfigProposal,
    pub from_pattern: Option<OffloadPattern>,
    pub target: Option<OffloadPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_until: Option<DateTime<Utc>>,
}

impl ProposalRecord {
    pub fn key(&self) -> Option<ProposalKey> {
        self.target.as_ref().map(|t| ProposalKey {
            from: self.from_pattern.as_ref().map(pattern_key),
            to: pattern_key(t),
        })
    }

    pub fn is_pending(&self) -> bool {
        self.proposal.verdict == Verdict::Propose && self.proposal.approval == Approval::Pending
    }
}

/// `app[L1,L2]`: identity of a loop set independent of pattern ids.
pub fn pattern_key(p: &OffloadPattern) -> String {
    format!("{}[{}]", p.app_id, p.loop_ids.join(","))
}

#[derive(Debug, Clone)]
pub struct Catalog {
    root: PathBuf,
}

impl Catalog {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    fn proposals_path(&self) -> PathBuf {
        self.root.join("proposals.jsonl")
    }

    fn state_path(&self) -> PathBuf {
        self.root.join("fpga_state.json")
    }

    pub fn store_search(&self, result: &SearchResult, at: DateTime<Utc>) -> Result<PathBuf> {
        let dir = self.root.join("patterns").join(&result.app_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stamp = at.format("%Y%m%dT%H%M%SZ").to_string();
        let mut path = dir.join(format!("{stamp}.json"));
        let mut n = 1;
        while path.exists() {
            path = dir.join(format!("{stamp}-{n}.json"));
            n += 1;
        }
        write_json(&path, &SearchDocument::new(result, at))?;
        Ok(path)
    }

    pub fn searches(&self, app_id: &str) -> Result<Vec<SearchDocument>> {
        let dir = self.root.join("patterns").join(app_id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut docs: Vec<SearchDocument> =
            files.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
        docs.sort_by_key(|d| d.searched_at);
        Ok(docs)
    }

    /// Most recent chosen pattern for `app_id`.
    pub fn latest_chosen(&self, app_id: &str) -> Result<Option<OffloadPattern>> {
        Ok(match self.searches(app_id)?.last() {
            Some(doc) => Some(doc.to_search_result()?.best),
            None => None,
        })
    }

    pub fn record_test_case(&self, app_id: &str, data: &DataRef, at: DateTime<Utc>) -> Result<()> {
        let path = self.root.join("testcases").join(format!("{app_id}.jsonl"));
        append_json_line(
            &path,
            &TestCase {
                recorded_at: at,
                data: data.clone(),
            },
        )
    }

    pub fn test_cases(&self, app_id: &str) -> Result<Vec<TestCase>> {
        read_json_lines(&self.root.join("testcases").join(format!("{app_id}.jsonl")))
    }

    pub fn record_proposal(&self, record: &ProposalRecord) -> Result<()> {
        append_json_line(&self.proposals_path(), record)
    }

    pub fn proposal_history(&self) -> Result<Vec<ProposalRecord>> {
        read_json_lines(&self.proposals_path())
    }

    /// Latest state of every proposal, keyed by id.
    pub fn proposals(&self) -> Result<BTreeMap<String, ProposalRecord>> {
        let mut latest = BTreeMap::new();
        for r in self.proposal_history()? {
            latest.insert(r.proposal.proposal_id.clone(), r);
        }
        Ok(latest)
    }

    pub fn pending_proposal(&self) -> Result<Option<ProposalRecord>> {
        Ok(self
            .proposals()?
            .into_values()
            .find(ProposalRecord::is_pending))
    }

    /// Cool-downs implied by rejected proposals in the history.
    pub fn cooldowns(&self) -> Result<CooldownBook> {
        let mut book = CooldownBook::default();
        for r in self.proposals()?.into_values() {
            if let (Some(key), Some(until)) = (r.key(), r.cooldown_until) {
                if r.proposal.approval == Approval::Rejected {
                    book.entries.push(crate::decision::Cooldown {
                        key,
                        proposal_id: r.proposal.proposal_id.clone(),
                        until,
                    });
                }
            }
        }
        Ok(book)
    }

    pub fn record_event(&self, event: &ReconfigEvent) -> Result<()> {
        append_audit(&self.events_path(), event)
    }

    pub fn events(&self) -> Result<Vec<ReconfigEvent>> {
        read_json_lines(&self.events_path())
    }

    pub fn loaded_pattern(&self) -> Result<Option<OffloadPattern>> {
        let path = self.state_path();
        if !path.exists() {
            return Ok(None);
        }
        read_json(&path)
    }

    pub fn store_loaded_pattern(&self, pattern: &OffloadPattern) -> Result<()> {
        write_json(&self.state_path(), pattern)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = crate::error::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    crate::error::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e)))
        .collect()
}
