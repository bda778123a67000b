//! Load-weighted improvement effects, the threshold gate and the OK/NG
//! approval round-trip.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Seconds saved per hour by running `app_id` with `pattern_id` instead of
/// its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementEffect {
    pub app_id: String,
    pub pattern_id: String,
    pub baseline_time: f64,
    pub offloaded_time: f64,
    /// Requests per hour.
    pub frequency: f64,
    pub effect: f64,
}

impl ImprovementEffect {
    pub fn new(
        app_id: impl Into<String>,
        pattern_id: impl Into<String>,
        baseline_time: f64,
        offloaded_time: f64,
        frequency: f64,
    ) -> Self {
        Self {
            app_id: app_id.into(),
            pattern_id: pattern_id.into(),
            baseline_time,
            offloaded_time,
            frequency,
            effect: effect_of(baseline_time, offloaded_time, frequency),
        }
    }

    /// Effect of an app that has nothing to gain (no traffic or no pattern).
    pub fn none(app_id: impl Into<String>, pattern_id: impl Into<String>) -> Self {
        Self::new(app_id, pattern_id, 0.0, 0.0, 0.0)
    }
}

pub fn effect_of(baseline: f64, offloaded: f64, frequency: f64) -> f64 {
    (baseline - offloaded) * frequency
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Propose,
    NoAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approval {
    Pending,
    Approved,
    Rejected,
}

/// JSON has no infinity, so an unbounded ratio is written as `"inf"`.
mod ratio_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad ratio {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconfigProposal {
    pub proposal_id: String,
    pub current: ImprovementEffect,
    pub current_effect: f64,
    pub best_new: Option<ImprovementEffect>,
    /// `best_new.effect / current_effect`; infinite when the current effect is ≤ 0.
    #[serde(with = "ratio_serde")]
    pub ratio: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub approval: Approval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl ReconfigProposal {
    /// Human summary used in prompts and logs.
    pub fn describe(&self) -> String {
        let to = self
            .best_new
            .as_ref()
            .map(|b| b.pattern_id.as_str())
            .unwrap_or("-");
        let gain = self
            .best_new
            .as_ref()
            .map(|b| b.effect - self.current_effect)
            .unwrap_or(0.0);
        format!(
            "Reconfigure FPGA from {} to {}? expected gain {:.1} s/h, ratio {} [ok/ng]",
            self.current.pattern_id,
            to,
            gain,
            format_ratio(self.ratio)
        )
    }
}

pub fn format_ratio(r: f64) -> String {
    if r.is_infinite() {
        "inf".to_string()
    } else {
        format!("{r:.2}")
    }
}

/// Threshold gate over the best candidate. When the current effect is not
/// positive, the candidate only needs to beat `floor`.
pub fn decide(
    proposal_id: impl Into<String>,
    current: &ImprovementEffect,
    candidates: &[ImprovementEffect],
    threshold: f64,
    floor: f64,
) -> Result<ReconfigProposal> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "threshold must be > 0, got {threshold}"
        )));
    }
    let mut proposal = ReconfigProposal {
        proposal_id: proposal_id.into(),
        current: current.clone(),
        current_effect: current.effect,
        best_new: None,
        ratio: 0.0,
        threshold,
        verdict: Verdict::NoAction,
        approval: Approval::Pending,
        diagnostic: None,
    };
    let best = candidates.iter().min_by(|a, b| {
        b.effect
            .total_cmp(&a.effect)
            .then_with(|| a.app_id.cmp(&b.app_id))
            .then_with(|| a.pattern_id.cmp(&b.pattern_id))
    });
    let Some(best) = best else {
        proposal.diagnostic = Some("no candidate patterns".into());
        return Ok(proposal);
    };
    if current.effect > 0.0 {
        proposal.ratio = best.effect / current.effect;
        if proposal.ratio >= threshold {
            proposal.verdict = Verdict::Propose;
        }
    } else {
        proposal.ratio = f64::INFINITY;
        if best.effect > floor {
            proposal.verdict = Verdict::Propose;
        }
    }
    proposal.best_new = Some(best.clone());
    Ok(proposal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Ok,
    Ng,
}

impl Answer {
    pub fn parse(s: &str) -> Option<Answer> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ok" | "y" | "yes" => Some(Answer::Ok),
            "ng" | "n" | "no" => Some(Answer::Ng),
            _ => None,
        }
    }
}

/// Source of the user's OK/NG answer. `Err(Error::ApprovalTimeout)` means
/// no answer yet.
pub trait ApprovalChannel {
    fn ask(&self, proposal: &ReconfigProposal) -> Result<Answer>;
}

/// `--auto-approve`.
#[derive(Debug, Default, Clone, Copy)]
pub struct AutoApprove;

impl ApprovalChannel for AutoApprove {
    fn ask(&self, _: &ReconfigProposal) -> Result<Answer> {
        Ok(Answer::Ok)
    }
}

/// Interactive prompt over any reader/writer pair. End of input counts as
/// no answer.
pub struct PromptChannel<R, W> {
    io: Mutex<(R, W)>,
    attempts: usize,
}

impl<R: BufRead, W: Write> PromptChannel<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            io: Mutex::new((reader, writer)),
            attempts: 3,
        }
    }
}

impl<R: BufRead, W: Write> ApprovalChannel for PromptChannel<R, W> {
    fn ask(&self, proposal: &ReconfigProposal) -> Result<Answer> {
        let mut io = self.io.lock().unwrap();
        let (reader, writer) = &mut *io;
        let prompt_io = |e: std::io::Error| Error::io("<prompt>", e);
        for _ in 0..self.attempts {
            write!(writer, "{} ", proposal.describe()).map_err(prompt_io)?;
            writer.flush().map_err(prompt_io)?;
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(prompt_io)? == 0 {
                return Err(Error::ApprovalTimeout);
            }
            if let Some(a) = Answer::parse(&line) {
                return Ok(a);
            }
            writeln!(writer, "please answer ok or ng").map_err(prompt_io)?;
        }
        Err(Error::ApprovalTimeout)
    }
}

/// Polls `<dir>/<proposal_id>.answer` for `ok` or `ng`.
#[derive(Debug, Clone)]
pub struct FileDropChannel {
    pub dir: PathBuf,
    pub timeout: StdDuration,
    pub poll: StdDuration,
}

impl FileDropChannel {
    pub fn new(dir: impl Into<PathBuf>, timeout: StdDuration) -> Self {
        Self {
            dir: dir.into(),
            timeout,
            poll: StdDuration::from_millis(200),
        }
    }

    pub fn answer_path(&self, proposal_id: &str) -> PathBuf {
        self.dir.join(format!("{proposal_id}.answer"))
    }

    /// Writes an answer for a later `ask` to pick up.
    pub fn drop_answer(&self, proposal_id: &str, answer: Answer) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.answer_path(proposal_id);
        let text = match answer {
            Answer::Ok => "ok\n",
            Answer::Ng => "ng\n",
        };
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

impl ApprovalChannel for FileDropChannel {
    fn ask(&self, proposal: &ReconfigProposal) -> Result<Answer> {
        let path = self.answer_path(&proposal.proposal_id);
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Ok(text) = std::fs::read_to_string(&path) {
                if let Some(a) = Answer::parse(&text) {
                    return Ok(a);
                }
            }
            if Instant::now() >= deadline {
                return Err(Error::ApprovalTimeout);
            }
            std::thread::sleep(self.poll.min(deadline - Instant::now()));
        }
    }
}

/// Asks the channel about a `Propose` verdict. A timeout leaves the
/// proposal pending so it can be retried.
pub fn await_approval(
    proposal: &ReconfigProposal,
    channel: &dyn ApprovalChannel,
) -> Result<ReconfigProposal> {
    if proposal.verdict != Verdict::Propose {
        return Err(Error::Config(format!(
            "proposal {} has no reconfiguration to approve",
            proposal.proposal_id
        )));
    }
    let mut out = proposal.clone();
    out.approval = match channel.ask(proposal) {
        Ok(Answer::Ok) => Approval::Approved,
        Ok(Answer::Ng) => Approval::Rejected,
        Err(Error::ApprovalTimeout) => Approval::Pending,
        Err(e) => return Err(e),
    };
    Ok(out)
}

/// Identity of a proposal for cool-down purposes: which pattern it would
/// replace and what it would load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalKey {
    pub from: Option<String>,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cooldown {
    pub key: ProposalKey,
    pub proposal_id: String,
    pub until: DateTime<Utc>,
}

/// Rejected proposals, each suppressing identical re-proposals until its
/// cool-down expires.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CooldownBook {
    pub entries: Vec<Cooldown>,
}

impl CooldownBook {
    pub fn record_rejection(
        &mut self,
        key: ProposalKey,
        proposal_id: &str,
        now: DateTime<Utc>,
        length: Duration,
    ) {
        self.entries.push(Cooldown {
            key,
            proposal_id: proposal_id.to_string(),
            until: now + length,
        });
    }

    pub fn is_suppressed(&self, key: &ProposalKey, now: DateTime<Utc>) -> bool {
        self.entries.iter().any(|c| &c.key == key && now < c.until)
    }
}
