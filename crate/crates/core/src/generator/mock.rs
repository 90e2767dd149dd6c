//! Scripted backend. Responses are keyed by request digest, with
//! substring rules as a fallback; the table is read-only once built.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, GeneratorError, GeneratorRequest, Want};
use crate::action::{Kind, Mode};
use crate::records::{self, RecordLog};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub want: Option<Want>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_contains: Option<String>,
    /// One response per attempt; the last repeats.
    pub responses: Vec<String>,
}

impl MockRule {
    fn matches(&self, req: &GeneratorRequest) -> bool {
        self.want.is_none_or(|w| w == req.want)
            && self.kind.is_none_or(|k| k == req.kind)
            && self.mode.is_none_or(|m| m == req.mode)
            && self.prompt_contains.as_deref().is_none_or(|p| req.sanitized_prompt.to_lowercase().contains(&p.to_lowercase()))
            && self.context_contains.as_deref().is_none_or(|c| req.context.contains(c))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error(transparent)]
    Records(#[from] records::RecordError),
    #[error("mock fixture record {seq}: {reason}")]
    BadRecord { seq: u64, reason: String },
    #[error("mock fixture ends in {0} bytes that are not a complete record")]
    Truncated(u64),
}

#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    by_digest: BTreeMap<String, Vec<String>>,
    rules: Vec<MockRule>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn respond(mut self, req: &GeneratorRequest, responses: &[&str]) -> Self {
        self.by_digest.insert(req.digest(), responses.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Shorthand for a rule on want and prompt substring.
    pub fn on(self, want: Want, prompt_contains: &str, response: &str) -> Self {
        self.rule(MockRule { want: Some(want), prompt_contains: Some(prompt_contains.into()), responses: vec![response.into()], ..Default::default() })
    }

    /// Fixture file: one record per line, `response` records keyed by
    /// digest and `rule` records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let (records, report) = RecordLog::read(path)?;
        if report.torn_bytes > 0 {
            return Err(MockError::Truncated(report.torn_bytes));
        }
        let mut m = MockBackend::new();
        for r in records {
            let bad = |e: serde_json::Error| MockError::BadRecord { seq: r.seq, reason: e.to_string() };
            match r.event_type.as_str() {
                "response" => {
                    #[derive(Deserialize)]
                    struct Keyed {
                        digest: String,
                        responses: Vec<String>,
                    }
                    let k: Keyed = serde_json::from_value(r.payload.clone()).map_err(bad)?;
                    m.by_digest.insert(k.digest, k.responses);
                }
                "rule" => m.rules.push(serde_json::from_value(r.payload.clone()).map_err(bad)?),
                other => return Err(MockError::BadRecord { seq: r.seq, reason: format!("unknown record type {other:?}") }),
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MockError> {
        let mut entries = Vec::new();
        for (digest, responses) in &self.by_digest {
            entries.push((None, "response".to_owned(), json!({ "digest": digest, "responses": responses })));
        }
        for rule in &self.rules {
            entries.push((None, "rule".to_owned(), serde_json::to_value(rule).expect("rules serialize")));
        }
        records::rewrite(path, &entries, false)?;
        Ok(())
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &GeneratorRequest, _rendered: &str, attempt: u32) -> Result<String, GeneratorError> {
        let responses = self
            .by_digest
            .get(&req.digest())
            .or_else(|| self.rules.iter().find(|r| r.matches(req)).map(|r| &r.responses))
            .filter(|r| !r.is_empty())
            .ok_or_else(|| GeneratorError::Backend(format!("mock has no scripted response for {:?} request", req.want)))?;
        Ok(responses[(attempt as usize).min(responses.len() - 1)].clone())
    }
}
