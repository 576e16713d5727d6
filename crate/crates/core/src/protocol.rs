//! Wire protocol between the engine and model tools, plus the client that
//! drives tools over stdio, HTTP, or in-process builtins.
//!
//! Stdio tools read one canonical-JSON [`ToolRequest`] per line on stdin and
//! answer with one [`ToolResponse`] line on stdout. A tool process is kept
//! alive between requests and is killed on timeout. HTTP tools receive the
//! same request as `POST {base_url}/invoke` and must answer 200 with a
//! `ToolResponse` body.
//!
//! Failures never escape as errors from [`ToolClient::invoke`]: they become
//! error-status [`ExpertResult`]s whose message starts with one of
//! `timeout`, `protocol` or `tool_failed`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ExpertResult, ImageRef, ImageSource, ScalarMap, StructuredPrompt, TaskType};
use crate::fusion::FusionRuleId;
use crate::json::{canonical_json, from_json};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

pub const ERR_TIMEOUT: &str = "timeout";
pub const ERR_PROTOCOL: &str = "protocol";
pub const ERR_TOOL_FAILED: &str = "tool_failed";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("invalid tool {tool_id}: {reason}")]
    InvalidTool { tool_id: String, reason: String },
    #[error("invalid expert {expert_id}: {reason}")]
    InvalidExpert { expert_id: String, reason: String },
    #[error("duplicate expert id {0}")]
    DuplicateExpert(String),
    #[error("tool id {0} is registered with conflicting specs")]
    ConflictingTool(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("expert {expert_id} failed: {ok} of {required} required tool results succeeded")]
pub struct ExpertFailure {
    pub expert_id: String,
    pub ok: usize,
    pub required: usize,
    pub results: Vec<ExpertResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Stdio {
        command: String,
        #[serde(default)]
        args: Vec<String>,
    },
    Http {
        base_url: String,
    },
    /// In-process mock, addressed by name.
    Builtin(String),
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_weight() -> f64 {
    1.0
}

fn default_min_successes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub task_types: BTreeSet<TaskType>,
    pub transport: Transport,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Fusion weight.
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl ToolSpec {
    pub fn builtin(tool_id: impl Into<String>, tasks: &[TaskType], mock: impl Into<String>) -> Self {
        Self {
            tool_id: tool_id.into(),
            task_types: tasks.iter().copied().collect(),
            transport: Transport::Builtin(mock.into()),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            weight: 1.0,
        }
    }

    pub fn stdio(tool_id: impl Into<String>, tasks: &[TaskType], command: &str, args: &[&str]) -> Self {
        Self {
            tool_id: tool_id.into(),
            task_types: tasks.iter().copied().collect(),
            transport: Transport::Stdio {
                command: command.to_string(),
                args: args.iter().map(|s| s.to_string()).collect(),
            },
            timeout_ms: DEFAULT_TIMEOUT_MS,
            weight: 1.0,
        }
    }

    pub fn http(tool_id: impl Into<String>, tasks: &[TaskType], base_url: &str) -> Self {
        Self {
            tool_id: tool_id.into(),
            task_types: tasks.iter().copied().collect(),
            transport: Transport::Http {
                base_url: base_url.to_string(),
            },
            timeout_ms: DEFAULT_TIMEOUT_MS,
            weight: 1.0,
        }
    }

    pub fn with_timeout(mut self, timeout_ms: u64) -> Self {
        self.timeout_ms = timeout_ms;
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn supports(&self, task: TaskType) -> bool {
        self.task_types.contains(&task)
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |reason: &str| RegistryError::InvalidTool {
            tool_id: self.tool_id.clone(),
            reason: reason.to_string(),
        };
        if self.tool_id.trim().is_empty() {
            return Err(bad("empty tool id"));
        }
        if self.timeout_ms < 1 {
            return Err(bad("timeout_ms must be at least 1"));
        }
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(bad("weight must be positive"));
        }
        if self.task_types.is_empty() {
            return Err(bad("no task types"));
        }
        Ok(())
    }
}

/// A group of tools serving one task, fused by one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub expert_id: String,
    pub task: TaskType,
    pub tools: Vec<ToolSpec>,
    pub fusion_rule: FusionRuleId,
    #[serde(default = "default_min_successes")]
    pub min_successes: usize,
}

impl ExpertSpec {
    pub fn new(
        expert_id: impl Into<String>,
        task: TaskType,
        tools: Vec<ToolSpec>,
        fusion_rule: FusionRuleId,
    ) -> Self {
        Self {
            expert_id: expert_id.into(),
            task,
            tools,
            fusion_rule,
            min_successes: 1,
        }
    }

    pub fn with_min_successes(mut self, n: usize) -> Self {
        self.min_successes = n;
        self
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let bad = |reason: String| RegistryError::InvalidExpert {
            expert_id: self.expert_id.clone(),
            reason,
        };
        if self.tools.is_empty() {
            return Err(bad("no tools".into()));
        }
        if self.min_successes == 0 || self.min_successes > self.tools.len() {
            return Err(bad(format!(
                "min_successes {} must be within 1..={}",
                self.min_successes,
                self.tools.len()
            )));
        }
        if self.task == TaskType::ImageCaption {
            return Err(bad(format!("{} is planned, not served by an expert", self.task)));
        }
        if !self.fusion_rule.applies_to(self.task) {
            return Err(bad(format!(
                "fusion rule {} cannot fuse {} outputs",
                self.fusion_rule, self.task
            )));
        }
        let mut seen = BTreeSet::new();
        for tool in &self.tools {
            tool.validate()?;
            if !tool.supports(self.task) {
                return Err(bad(format!("tool {} does not support {}", tool.tool_id, self.task)));
            }
            if !seen.insert(tool.tool_id.as_str()) {
                return Err(bad(format!("tool {} listed twice", tool.tool_id)));
            }
        }
        Ok(())
    }

    pub fn tool(&self, tool_id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.tool_id == tool_id)
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.tools
            .iter()
            .map(|t| (t.tool_id.clone(), t.weight))
            .collect()
    }
}

/// Validated, read-only set of experts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    experts: Vec<ExpertSpec>,
}

impl Registry {
    pub fn new(experts: Vec<ExpertSpec>) -> Result<Self, RegistryError> {
        let mut ids = BTreeSet::new();
        let mut tools: HashMap<&str, &ToolSpec> = HashMap::new();
        for e in &experts {
            e.validate()?;
            if !ids.insert(e.expert_id.as_str()) {
                return Err(RegistryError::DuplicateExpert(e.expert_id.clone()));
            }
            for t in &e.tools {
                // The same tool may serve several experts, but only under one spec.
                if let Some(prev) = tools.insert(&t.tool_id, t) {
                    if prev != t {
                        return Err(RegistryError::ConflictingTool(t.tool_id.clone()));
                    }
                }
            }
        }
        Ok(Self { experts })
    }

    pub fn experts(&self) -> &[ExpertSpec] {
        &self.experts
    }

    pub fn expert(&self, expert_id: &str) -> Option<&ExpertSpec> {
        self.experts.iter().find(|e| e.expert_id == expert_id)
    }

    /// The expert serving `task`; with several, the smallest expert id wins.
    pub fn expert_for(&self, task: TaskType) -> Option<&ExpertSpec> {
        self.experts
            .iter()
            .filter(|e| e.task == task)
            .min_by(|a, b| a.expert_id.cmp(&b.expert_id))
    }

    pub fn has_task(&self, task: TaskType) -> bool {
        self.expert_for(task).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub request_id: String,
    pub task: TaskType,
    pub prompt: StructuredPrompt,
    pub image: ImageRef,
    #[serde(default)]
    pub params: ScalarMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub request_id: String,
    pub result: ExpertResult,
}

/// An in-process tool, addressed by name from [`Transport::Builtin`].
pub trait BuiltinTool: Send + Sync {
    fn call(&self, tool_id: &str, req: &ToolRequest) -> ExpertResult;
}

pub type BuiltinSet = BTreeMap<String, Arc<dyn BuiltinTool>>;

struct StdioSession {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl StdioSession {
    fn spawn(command: &str, args: &[String]) -> std::io::Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
        })
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for StdioSession {
    fn drop(&mut self) {
        self.kill();
    }
}

enum Outcome {
    Reply(String),
    Failed(String),
}

/// Invokes tools. Holds the builtin table and any live stdio processes.
pub struct ToolClient {
    builtins: BuiltinSet,
    sessions: Mutex<HashMap<String, Arc<Mutex<Option<StdioSession>>>>>,
    parallelism: Option<usize>,
    counter: AtomicUsize,
}

impl std::fmt::Debug for ToolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolClient")
            .field("builtins", &self.builtins.keys().collect::<Vec<_>>())
            .field("parallelism", &self.parallelism)
            .finish()
    }
}

impl Default for ToolClient {
    fn default() -> Self {
        Self::new(BuiltinSet::new())
    }
}

impl ToolClient {
    pub fn new(builtins: BuiltinSet) -> Self {
        Self {
            builtins,
            sessions: Mutex::new(HashMap::new()),
            parallelism: None,
            counter: AtomicUsize::new(0),
        }
    }

    /// Caps concurrent tool calls in [`invoke_all`](Self::invoke_all).
    /// Unset means one thread per tool.
    pub fn with_parallelism(mut self, limit: usize) -> Self {
        self.parallelism = Some(limit.max(1));
        self
    }

    pub fn has_builtin(&self, name: &str) -> bool {
        self.builtins.contains_key(name)
    }

    /// Fresh request id with the given prefix, unique for this client.
    pub fn next_request_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{prefix}-{n}")
    }

    /// Runs one tool. Always returns a result; failures are error-status.
    pub fn invoke(&self, tool: &ToolSpec, req: &ToolRequest) -> ExpertResult {
        let run = || match &tool.transport {
            Transport::Builtin(name) => match self.builtins.get(name) {
                Some(b) => {
                    let mut res = b.call(&tool.tool_id, req);
                    res.tool_id = tool.tool_id.clone();
                    res
                }
                None => ExpertResult::error(
                    &tool.tool_id,
                    req.task,
                    format!("{ERR_TOOL_FAILED}: unknown builtin {name:?}"),
                ),
            },
            Transport::Stdio { command, args } => {
                let start = Instant::now();
                let outcome = self.call_stdio(tool, command, args, req);
                finish(tool, req, outcome, start)
            }
            Transport::Http { base_url } => {
                let start = Instant::now();
                let outcome = call_http(tool, base_url, req);
                finish(tool, req, outcome, start)
            }
        };
        catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| {
            ExpertResult::error(&tool.tool_id, req.task, format!("{ERR_TOOL_FAILED}: panic"))
        })
    }

    /// Runs every tool of `expert`, returning results sorted by tool id.
    pub fn invoke_all(
        &self,
        expert: &ExpertSpec,
        req: &ToolRequest,
    ) -> Result<Vec<ExpertResult>, ExpertFailure> {
        let n = expert.tools.len();
        let workers = self.parallelism.unwrap_or(n).clamp(1, n.max(1));
        let slots: Vec<Mutex<Option<ExpertResult>>> = (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let tool = &expert.tools[i];
                    let mut tool_req = req.clone();
                    tool_req.request_id = format!("{}/{}", req.request_id, tool.tool_id);
                    tool_req.task = expert.task;
                    let res = self.invoke(tool, &tool_req);
                    *slots[i].lock().unwrap() = Some(res);
                });
            }
        });
        let mut results: Vec<ExpertResult> = slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect();
        results.sort_by(|a, b| a.tool_id.cmp(&b.tool_id));
        let ok = results.iter().filter(|r| r.is_ok()).count();
        if ok < expert.min_successes {
            return Err(ExpertFailure {
                expert_id: expert.expert_id.clone(),
                ok,
                required: expert.min_successes,
                results,
            });
        }
        Ok(results)
    }

    fn session(&self, tool_id: &str) -> Arc<Mutex<Option<StdioSession>>> {
        let mut sessions = self.sessions.lock().unwrap();
        sessions.entry(tool_id.to_string()).or_default().clone()
    }

    fn call_stdio(&self, tool: &ToolSpec, command: &str, args: &[String], req: &ToolRequest) -> Outcome {
        let line = match canonical_json(&wire_request(req, &tool.transport)) {
            Ok(l) => l,
            Err(e) => return Outcome::Failed(format!("{ERR_PROTOCOL}: {e}")),
        };
        let slot = self.session(&tool.tool_id);
        let mut guard = slot.lock().unwrap();
        if guard.is_none() {
            match StdioSession::spawn(command, args) {
                Ok(s) => *guard = Some(s),
                Err(e) => return Outcome::Failed(format!("{ERR_TOOL_FAILED}: spawn: {e}")),
            }
        }
        let session = guard.as_mut().expect("session present");
        let write = writeln!(session.stdin, "{line}").and_then(|_| session.stdin.flush());
        let deadline = Duration::from_millis(tool.timeout_ms);
        let outcome = match write {
            Err(_) => Outcome::Failed(exit_failure(&mut session.child)),
            Ok(()) => match session.lines.recv_timeout(deadline) {
                Ok(Ok(reply)) => Outcome::Reply(reply),
                Ok(Err(e)) => Outcome::Failed(format!("{ERR_PROTOCOL}: {e}")),
                Err(RecvTimeoutError::Timeout) => Outcome::Failed(ERR_TIMEOUT.to_string()),
                Err(RecvTimeoutError::Disconnected) => Outcome::Failed(exit_failure(&mut session.child)),
            },
        };
        // Anything but a clean reply leaves the stream in an unknown state.
        if !matches!(outcome, Outcome::Reply(_)) {
            *guard = None;
        }
        outcome
    }
}

fn exit_failure(child: &mut Child) -> String {
    match child.wait() {
        Ok(status) if !status.success() => format!("{ERR_TOOL_FAILED}: exit {status}"),
        Ok(_) => format!("{ERR_TOOL_FAILED}: process exited without replying"),
        Err(e) => format!("{ERR_TOOL_FAILED}: {e}"),
    }
}

fn call_http(tool: &ToolSpec, base_url: &str, req: &ToolRequest) -> Outcome {
    let body = match canonical_json(&wire_request(req, &tool.transport)) {
        Ok(b) => b,
        Err(e) => return Outcome::Failed(format!("{ERR_PROTOCOL}: {e}")),
    };
    let url = format!("{}/invoke", base_url.trim_end_matches('/'));
    let timeout = Duration::from_millis(tool.timeout_ms);
    let start = Instant::now();
    let resp = ureq::post(&url)
        .timeout(timeout)
        .set("content-type", "application/json")
        .send_string(&body);
    match resp {
        Ok(r) if r.status() == 200 => match r.into_string() {
            Ok(s) => Outcome::Reply(s),
            Err(_) if start.elapsed() >= timeout => Outcome::Failed(ERR_TIMEOUT.to_string()),
            Err(e) => Outcome::Failed(format!("{ERR_PROTOCOL}: {e}")),
        },
        Ok(r) => Outcome::Failed(format!("{ERR_TOOL_FAILED}: http {}", r.status())),
        Err(ureq::Error::Status(code, _)) => Outcome::Failed(format!("{ERR_TOOL_FAILED}: http {code}")),
        Err(ureq::Error::Transport(t)) => {
            let timed_out = start.elapsed() >= timeout
                || std::error::Error::source(&t)
                    .and_then(|e| e.downcast_ref::<std::io::Error>())
                    .is_some_and(|e| {
                        matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock)
                    });
            if timed_out {
                Outcome::Failed(ERR_TIMEOUT.to_string())
            } else {
                Outcome::Failed(format!("{ERR_TOOL_FAILED}: {t}"))
            }
        }
    }
}

/// Request as sent on the wire: local tools get absolute image paths,
/// remote tools get the PNG bytes inline.
fn wire_request(req: &ToolRequest, transport: &Transport) -> ToolRequest {
    let mut req = req.clone();
    let ImageSource::Path(p) = &req.image.source else {
        return req;
    };
    match transport {
        Transport::Stdio { .. } => {
            if let Ok(abs) = std::path::absolute(Path::new(p)) {
                req.image.source = ImageSource::Path(abs.to_string_lossy().into_owned());
            }
        }
        Transport::Http { .. } => {
            if let Ok(bytes) = std::fs::read(p) {
                req.image.source = ImageSource::PngBase64(BASE64.encode(bytes));
            }
        }
        Transport::Builtin(_) => {}
    }
    req
}

fn finish(tool: &ToolSpec, req: &ToolRequest, outcome: Outcome, start: Instant) -> ExpertResult {
    let latency = start.elapsed().as_millis() as u64;
    let reply = match outcome {
        Outcome::Reply(r) => r,
        Outcome::Failed(msg) => {
            return ExpertResult::error(&tool.tool_id, req.task, msg).with_latency(latency)
        }
    };
    match parse_response(&reply, req) {
        Ok(mut result) => {
            result.tool_id = tool.tool_id.clone();
            result.latency_ms = latency;
            result
        }
        Err(msg) => ExpertResult::error(&tool.tool_id, req.task, format!("{ERR_PROTOCOL}: {msg}"))
            .with_latency(latency),
    }
}

fn parse_response(reply: &str, req: &ToolRequest) -> Result<ExpertResult, String> {
    let resp: ToolResponse = from_json(reply.trim()).map_err(|e| e.to_string())?;
    if resp.request_id != req.request_id {
        return Err(format!(
            "response for {:?}, expected {:?}",
            resp.request_id, req.request_id
        ));
    }
    if resp.result.task != req.task {
        return Err(format!(
            "result task {} does not match request task {}",
            resp.result.task, req.task
        ));
    }
    Ok(resp.result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassDistribution, Payload, PlaneLabel};

    struct Const(PlaneLabel);

    impl BuiltinTool for Const {
        fn call(&self, tool_id: &str, req: &ToolRequest) -> ExpertResult {
            ExpertResult::ok(tool_id, req.task, Payload::Classification(ClassDistribution::certain(self.0)), 1.0)
                .unwrap()
        }
    }

    struct Boom;

    impl BuiltinTool for Boom {
        fn call(&self, _: &str, _: &ToolRequest) -> ExpertResult {
            panic!("model crashed")
        }
    }

    fn request() -> ToolRequest {
        ToolRequest {
            request_id: "r1".into(),
            task: TaskType::PlaneClassification,
            prompt: StructuredPrompt::new(TaskType::PlaneClassification, None, "classify", ScalarMap::new()).unwrap(),
            image: ImageRef::new("img1", ImageSource::Path("img1.png".into()), 8, 8).unwrap(),
            params: ScalarMap::new(),
        }
    }

    fn client() -> ToolClient {
        let mut b = BuiltinSet::new();
        b.insert("brain".into(), Arc::new(Const(PlaneLabel::Brain)) as Arc<dyn BuiltinTool>);
        b.insert("boom".into(), Arc::new(Boom) as Arc<dyn BuiltinTool>);
        ToolClient::new(b)
    }

    #[test]
    fn builtin_panic_is_contained() {
        let tool = ToolSpec::builtin("x", &[TaskType::PlaneClassification], "boom");
        let res = client().invoke(&tool, &request());
        assert_eq!(res.error_message(), Some("tool_failed: panic"));
    }

    #[test]
    fn unknown_builtin_is_tool_failed() {
        let tool = ToolSpec::builtin("x", &[TaskType::PlaneClassification], "nope");
        let res = client().invoke(&tool, &request());
        assert!(res.error_message().unwrap().starts_with(ERR_TOOL_FAILED));
    }

    #[test]
    fn expert_validation() {
        let t = ToolSpec::builtin("a", &[TaskType::PlaneClassification], "brain");
        let ok = ExpertSpec::new("e", TaskType::PlaneClassification, vec![t.clone()], FusionRuleId::WeightedVote);
        assert!(ok.validate().is_ok());
        assert!(ok.clone().with_min_successes(2).validate().is_err());
        let wrong_task = ExpertSpec::new("e", TaskType::HeadSegmentation, vec![t.clone()], FusionRuleId::PixelMajority);
        assert!(wrong_task.validate().is_err());
        let wrong_rule = ExpertSpec::new("e", TaskType::PlaneClassification, vec![t.clone()], FusionRuleId::ScalarMedian);
        assert!(wrong_rule.validate().is_err());
        let empty = ExpertSpec::new("e", TaskType::PlaneClassification, vec![], FusionRuleId::WeightedVote);
        assert!(empty.validate().is_err());
        assert!(t.clone().with_timeout(0).validate().is_err());
        assert!(t.with_weight(0.0).validate().is_err());
    }

    #[test]
    fn registry_rejects_duplicates_and_conflicts() {
        let t = ToolSpec::builtin("a", &[TaskType::PlaneClassification], "brain");
        let e = ExpertSpec::new("e", TaskType::PlaneClassification, vec![t.clone()], FusionRuleId::WeightedVote);
        assert!(matches!(
            Registry::new(vec![e.clone(), e.clone()]),
            Err(RegistryError::DuplicateExpert(_))
        ));
        let mut e2 = e.clone();
        e2.expert_id = "e2".into();
        e2.tools[0].weight = 2.0;
        assert!(matches!(Registry::new(vec![e, e2]), Err(RegistryError::ConflictingTool(_))));
    }

    #[test]
    fn expert_for_is_order_independent() {
        let t = ToolSpec::builtin("a", &[TaskType::PlaneClassification], "brain");
        let b = ExpertSpec::new("b", TaskType::PlaneClassification, vec![t.clone()], FusionRuleId::WeightedVote);
        let a = ExpertSpec::new("a", TaskType::PlaneClassification, vec![t], FusionRuleId::WeightedVote);
        let r1 = Registry::new(vec![a.clone(), b.clone()]).unwrap();
        let r2 = Registry::new(vec![b, a]).unwrap();
        assert_eq!(r1.expert_for(TaskType::PlaneClassification).unwrap().expert_id, "a");
        assert_eq!(r2.expert_for(TaskType::PlaneClassification).unwrap().expert_id, "a");
    }

    #[test]
    fn tool_spec_json_defaults() {
        let spec: ToolSpec =
            from_json(r#"{"tool_id":"a","task_types":["aop"],"transport":{"builtin":"m"}}"#).unwrap();
        assert_eq!(spec.timeout_ms, DEFAULT_TIMEOUT_MS);
        assert_eq!(spec.weight, 1.0);
        let http: Transport = from_json(r#"{"http":{"base_url":"http://x"}}"#).unwrap();
        assert_eq!(http, Transport::Http { base_url: "http://x".into() });
    }
}
