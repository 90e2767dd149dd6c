//! REST actions: dispatch with an allowlisted host set, capped capture and
//! a reviewable summary.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use ureq::http;

use crate::action::{ActionBody, ActionSpec, RestAction};
use crate::policy::{self, BlastRadius, Decision};
use crate::txn::ExecutionOutcome;

#[derive(Clone, Debug)]
pub struct RestConfig {
    /// Per-service base URLs. Their hosts form the dispatch allowlist.
    pub base_urls: BTreeMap<String, String>,
    /// Extra host → service mappings, also used to name the service of an
    /// action that omits one.
    pub hosts: BTreeMap<String, String>,
    pub timeout: Duration,
    pub max_redirects: u32,
    pub body_cap: usize,
}

impl Default for RestConfig {
    fn default() -> Self {
        RestConfig {
            base_urls: BTreeMap::new(),
            hosts: BTreeMap::new(),
            timeout: Duration::from_secs(30),
            max_redirects: 3,
            body_cap: 1 << 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RestError {
    #[error("not a REST action")]
    WrongKind,
    #[error("policy denied: {0}")]
    Denied(String),
    #[error("host {host} is not on the network allowlist for service {service:?}")]
    HostNotAllowed { host: String, service: String },
    #[error("bad url {0:?}")]
    BadUrl(String),
    #[error("too many redirects (limit {0})")]
    TooManyRedirects(u32),
    #[error("transport error: {0}")]
    Transport(String),
}

pub struct RestHandler {
    config: RestConfig,
    agent: ureq::Agent,
}

impl RestHandler {
    pub fn new(config: RestConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .max_redirects(0)
            .timeout_global(Some(config.timeout))
            .proxy(None)
            .build()
            .into();
        RestHandler { config, agent }
    }

    pub fn config(&self) -> &RestConfig {
        &self.config
    }

    /// Service an action belongs to: its declared name, else the host table.
    pub fn service_of(&self, action: &ActionSpec) -> Option<String> {
        if !action.service.is_empty() {
            return Some(action.service.clone());
        }
        let ActionBody::Rest(rest) = &action.body else { return None };
        let host = host_of(&self.absolute_url(&action.service, &rest.url)).ok()?;
        self.config
            .hosts
            .get(&host)
            .cloned()
            .or_else(|| self.config.base_urls.iter().find(|(_, u)| host_of(u).ok().as_deref() == Some(&host)).map(|(s, _)| s.clone()))
    }

    /// Relative URLs are resolved against the service's base URL.
    pub fn absolute_url(&self, service: &str, url: &str) -> String {
        if url.starts_with('/') {
            if let Some(base) = self.config.base_urls.get(service) {
                return format!("{}{url}", base.trim_end_matches('/'));
            }
        }
        url.to_owned()
    }

    fn allowed_hosts(&self, service: &str) -> BTreeSet<String> {
        let mut hosts: BTreeSet<String> = self.config.base_urls.get(service).and_then(|u| host_of(u).ok()).into_iter().collect();
        hosts.extend(self.config.hosts.iter().filter(|(_, s)| *s == service).map(|(h, _)| h.clone()));
        hosts
    }

    /// Dispatches a rehydrated action. `auth` is an extra header injected at
    /// dispatch time. Non-2xx responses are outcomes, not errors.
    pub fn execute(&self, action: &ActionSpec, radius: &BlastRadius, auth: Option<(String, String)>) -> Result<ExecutionOutcome, RestError> {
        let ActionBody::Rest(rest) = &action.body else { return Err(RestError::WrongKind) };
        if let Decision::Deny(reason) = policy::check(action, radius) {
            return Err(RestError::Denied(reason.to_string()));
        }
        self.dispatch(&action.service, rest, auth)
    }

    fn dispatch(&self, service: &str, rest: &RestAction, auth: Option<(String, String)>) -> Result<ExecutionOutcome, RestError> {
        let allowed = self.allowed_hosts(service);
        let started = Instant::now();
        let mut url = self.absolute_url(service, &rest.url);
        let mut method = rest.method.as_str().to_owned();
        let mut body = rest.body.clone().into_bytes();
        let mut hops = 0;
        loop {
            let host = host_of(&url)?;
            if !allowed.contains(&host) {
                return Err(RestError::HostNotAllowed { host, service: service.into() });
            }
            let mut req = http::Request::builder().method(method.as_str()).uri(&url);
            for (k, v) in &rest.headers {
                req = req.header(k, v);
            }
            if let Some((k, v)) = &auth {
                req = req.header(k, v);
            }
            let req = req.body(body.clone()).map_err(|e| RestError::BadUrl(format!("{url}: {e}")))?;
            let mut resp = self.agent.run(req).map_err(|e| RestError::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            if (300..400).contains(&status) {
                if let Some(loc) = resp.headers().get("location").and_then(|l| l.to_str().ok()) {
                    hops += 1;
                    if hops > self.config.max_redirects {
                        return Err(RestError::TooManyRedirects(self.config.max_redirects));
                    }
                    url = join_location(&url, loc);
                    if status == 303 || ((status == 301 || status == 302) && method != "GET" && method != "HEAD") {
                        method = "GET".into();
                        body.clear();
                    }
                    continue;
                }
            }
            let mut captured = Vec::new();
            let mut total = 0usize;
            let mut reader = resp.body_mut().as_reader();
            let mut buf = [0u8; 8192];
            loop {
                match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => {
                        total += n;
                        let room = self.config.body_cap.saturating_sub(captured.len());
                        captured.extend_from_slice(&buf[..n.min(room)]);
                    }
                    Err(e) => return Err(RestError::Transport(e.to_string())),
                }
            }
            let digest = hex::encode(Sha256::digest(&captured));
            let truncated = if total > captured.len() { format!(" (truncated from {total})") } else { String::new() };
            let summary = format!(
                "{} {} -> HTTP {} {}; body {} bytes{truncated}, sha256 {}",
                method,
                host_path(&url),
                status,
                resp.status().canonical_reason().unwrap_or(""),
                captured.len(),
                &digest[..16]
            );
            return Ok(ExecutionOutcome {
                exit_status: if (200..300).contains(&status) { 0 } else { status as i32 },
                stdout: captured,
                stderr: Vec::new(),
                structured_summary: summary,
                duration_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
}

/// `host[:port]` of an absolute http(s) URL.
pub fn host_of(url: &str) -> Result<String, RestError> {
    let uri: http::Uri = url.parse().map_err(|_| RestError::BadUrl(url.into()))?;
    match (uri.scheme_str(), uri.authority()) {
        (Some("http" | "https"), Some(a)) => Ok(a.as_str().rsplit('@').next().unwrap_or_default().to_ascii_lowercase()),
        _ => Err(RestError::BadUrl(url.into())),
    }
}

fn host_path(url: &str) -> String {
    url.split_once("://").map(|(_, rest)| rest.to_owned()).unwrap_or_else(|| url.to_owned())
}

fn join_location(current: &str, location: &str) -> String {
    if location.contains("://") {
        return location.to_owned();
    }
    let (scheme, rest) = current.split_once("://").unwrap_or(("http", current));
    let authority = rest.split('/').next().unwrap_or_default();
    if location.starts_with('/') {
        format!("{scheme}://{authority}{location}")
    } else {
        let dir = rest.rsplit_once('/').map(|(d, _)| d).unwrap_or(rest);
        format!("{scheme}://{dir}/{location}")
    }
}
