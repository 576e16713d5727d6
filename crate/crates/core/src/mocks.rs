//! Deterministic builtin tools standing in for neural models.
//!
//! A [`MockSpec`] is plain data (it appears in engine configs); a
//! [`MockTool`] wraps one and implements [`BuiltinTool`]. Only scripted mocks
//! carry state: a cursor into their sequence.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{BiometryValue, ClassDistribution, ExpertResult, Mask, Payload, PlaneLabel, Scalar, TaskType};
use crate::json::{canonical_json, from_json};
use crate::geometry::EllipseParams;
use crate::protocol::{BuiltinSet, BuiltinTool, ToolRequest, ToolResponse, ERR_PROTOCOL, ERR_TOOL_FAILED};

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.05
}

/// A filled primitive, rasterized by pixel-centre inclusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Ellipse {
        center: (f64, f64),
        semi_axes: (f64, f64),
        #[serde(default)]
        rotation: f64,
    },
    /// Pixels within `half_width` of the segment `from`–`to`.
    Segment {
        from: (f64, f64),
        to: (f64, f64),
        #[serde(default)]
        half_width: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                center,
                semi_axes,
                rotation,
            } => {
                let (s, c) = rotation.sin_cos();
                let (dx, dy) = (x - center.0, y - center.1);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / semi_axes.0).powi(2) + (v / semi_axes.1).powi(2) <= 1.0
            }
            Shape::Segment { from, to, half_width } => {
                let (vx, vy) = (to.0 - from.0, to.1 - from.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((x - from.0) * vx + (y - from.1) * vy) / len2).clamp(0.0, 1.0)
                };
                let (px, py) = (from.0 + t * vx, from.1 + t * vy);
                (x - px).hypot(y - py) <= half_width + 1e-9
            }
        }
    }

    pub fn rasterize(&self, width: u32, height: u32) -> Mask {
        Mask::from_fn(width, height, |x, y| self.contains(x as f64, y as f64)).expect("positive dims")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    Constant {
        payload: Payload,
    },
    /// Keyed by image id. A miss falls back to `default`, or is an
    /// error-status result without one.
    Lookup {
        table: BTreeMap<String, Payload>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<Payload>,
    },
    /// Consumed in order, one payload per call; errors once exhausted.
    Scripted {
        sequence: Vec<Payload>,
    },
    /// Filled ellipse sized to the request image.
    SyntheticEllipse {
        center: (f64, f64),
        semi_axes: (f64, f64),
        #[serde(default)]
        rotation: f64,
    },
    /// Named masks sized to the request image (e.g. symphysis and head).
    SyntheticMasks {
        masks: BTreeMap<String, Shape>,
    },
    /// `base` with a multiplicative perturbation in `[-scale, scale]`, drawn
    /// from a generator seeded by `seed` and the image id.
    Noisy {
        base: Payload,
        seed: u64,
        #[serde(default = "default_noise")]
        scale: f64,
    },
    /// Always an error-status result.
    Fail {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(flatten)]
    pub behavior: MockBehavior,
    #[serde(default = "one")]
    pub confidence: f64,
}

impl MockSpec {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn constant(payload: Payload) -> Self {
        Self::new(MockBehavior::Constant { payload })
    }
}

#[derive(Debug)]
pub struct MockTool {
    spec: MockSpec,
    cursor: Mutex<usize>,
}

impl MockTool {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            spec,
            cursor: Mutex::new(0),
        }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    fn produce(&self, req: &ToolRequest) -> Result<Payload, String> {
        let (w, h) = (req.image.width, req.image.height);
        match &self.spec.behavior {
            MockBehavior::Constant { payload } => Ok(payload.clone()),
            MockBehavior::Lookup { table, default } => table
                .get(&req.image.id)
                .or(default.as_ref())
                .cloned()
                .ok_or_else(|| format!("no lookup entry for image {}", req.image.id)),
            MockBehavior::Scripted { sequence } => {
                let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
                let p = sequence
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| format!("script exhausted after {} calls", sequence.len()))?;
                *cursor += 1;
                Ok(p)
            }
            MockBehavior::SyntheticEllipse {
                center,
                semi_axes,
                rotation,
            } => {
                if !(semi_axes.0 > 0.0 && semi_axes.1 > 0.0) {
                    return Err("semi-axes must be positive".into());
                }
                let e = EllipseParams {
                    center: *center,
                    semi_major: semi_axes.0,
                    semi_minor: semi_axes.1,
                    rotation: *rotation,
                };
                Ok(Payload::Mask(
                    Mask::from_fn(w, h, |x, y| e.level(x as f64, y as f64) <= 1.0).map_err(|e| e.to_string())?,
                ))
            }
            MockBehavior::SyntheticMasks { masks } => Ok(Payload::MaskSet(
                masks.iter().map(|(k, s)| (k.clone(), s.rasterize(w, h))).collect(),
            )),
            MockBehavior::Noisy { base, seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(req.image.id.as_bytes()));
                perturb(base, *scale, &mut rng)
            }
            MockBehavior::Fail { message } => Err(message.clone()),
        }
    }
}

/// FNV-1a, used only to derive a stable per-image seed.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn perturb(base: &Payload, scale: f64, rng: &mut ChaCha8Rng) -> Result<Payload, String> {
    let mut factor = || 1.0 + scale * rng.gen_range(-1.0..=1.0);
    match base {
        Payload::Classification(d) => {
            let weights: BTreeMap<PlaneLabel, f64> =
                d.probs().iter().map(|(l, p)| (*l, (p * factor()).max(0.0))).collect();
            ClassDistribution::normalized(weights)
                .map(Payload::Classification)
                .map_err(|e| e.to_string())
        }
        Payload::Biometry(b) => BiometryValue::new(b.measure, b.value * factor(), b.unit, b.method.clone(), b.confidence)
            .map(Payload::Biometry)
            .map_err(|e| e.to_string()),
        other => Err(format!("noisy mock cannot perturb a {} payload", other.kind())),
    }
}

fn mask_dims_ok(payload: &Payload, w: u32, h: u32) -> bool {
    let fits = |m: &Mask| m.width() == w && m.height() == h;
    match payload {
        Payload::Mask(m) => fits(m),
        Payload::MaskSet(ms) => ms.values().all(fits),
        _ => true,
    }
}

impl BuiltinTool for MockTool {
    fn call(&self, tool_id: &str, req: &ToolRequest) -> ExpertResult {
        let fail = |msg: String| ExpertResult::error(tool_id, req.task, format!("{ERR_TOOL_FAILED}: {msg}"));
        let payload = match self.produce(req) {
            Ok(p) => p,
            Err(msg) => return fail(msg),
        };
        if !payload.fits_tool_task(req.task) {
            return fail(format!("{} payload does not fit task {}", payload.kind(), req.task));
        }
        if !mask_dims_ok(&payload, req.image.width, req.image.height) {
            return fail(format!(
                "mask dimensions differ from image {}x{}",
                req.image.width, req.image.height
            ));
        }
        ExpertResult::ok(tool_id, req.task, payload, self.spec.confidence)
            .unwrap_or_else(|e| fail(e.to_string()))
    }
}

/// Runs a classification mock; non-classification payloads are errors.
pub fn mock_classifier(behavior: &MockBehavior, req: &ToolRequest) -> ExpertResult {
    let res = MockTool::new(MockSpec::new(behavior.clone())).call("mock_classifier", req);
    match &res.payload {
        Some(Payload::Classification(_)) | None => res,
        Some(p) => ExpertResult::error(
            "mock_classifier",
            req.task,
            format!("{ERR_TOOL_FAILED}: expected a class distribution, got {}", p.kind()),
        ),
    }
}

/// Runs a segmentation mock; non-mask payloads are errors.
pub fn mock_segmenter(behavior: &MockBehavior, req: &ToolRequest) -> ExpertResult {
    let res = MockTool::new(MockSpec::new(behavior.clone())).call("mock_segmenter", req);
    match &res.payload {
        Some(Payload::Mask(_)) | Some(Payload::MaskSet(_)) | None => res,
        Some(p) => ExpertResult::error(
            "mock_segmenter",
            req.task,
            format!("{ERR_TOOL_FAILED}: expected a mask, got {}", p.kind()),
        ),
    }
}

/// Named mocks available without configuration: `const_<plane>` for every
/// standard plane, brain sub-plane and `non_key`.
pub fn default_mocks() -> BTreeMap<String, MockSpec> {
    PlaneLabel::ALL
        .iter()
        .map(|&l| {
            (
                format!("const_{}", l.as_str()),
                MockSpec::constant(Payload::Classification(ClassDistribution::certain(l))),
            )
        })
        .collect()
}

/// Builtin table from the default mocks overlaid with `extra`.
pub fn builtin_set(extra: &BTreeMap<String, MockSpec>) -> BuiltinSet {
    let mut all = default_mocks();
    all.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    all.into_iter()
        .map(|(name, spec)| (name, Arc::new(MockTool::new(spec)) as Arc<dyn BuiltinTool>))
        .collect()
}

/// Request parameter naming the mock a stub tool should answer with.
pub const MOCK_PARAM: &str = "mock";

/// Tool-side stub: answers with the builtin named by the request's `mock`
/// parameter, or by `fallback` when the parameter is absent.
pub fn stub_response(tools: &BuiltinSet, fallback: Option<&str>, req: &ToolRequest) -> ToolResponse {
    let name = match req.params.get(MOCK_PARAM) {
        Some(Scalar::Text(s)) => Some(s.as_str()),
        _ => fallback,
    };
    let result = match name.and_then(|n| tools.get(n).map(|t| (n, t))) {
        Some((n, tool)) => tool.call(n, req),
        None => ExpertResult::error(
            name.unwrap_or("stub"),
            req.task,
            format!("{ERR_TOOL_FAILED}: unknown mock {:?}", name.unwrap_or("")),
        ),
    };
    ToolResponse {
        request_id: req.request_id.clone(),
        result,
    }
}

/// One request line in, one canonical response line out. Unparseable
/// requests get an error-status response echoing whatever request id and
/// task could be recovered.
pub fn stub_line(tools: &BuiltinSet, fallback: Option<&str>, line: &str) -> String {
    let resp = match from_json::<ToolRequest>(line.trim()) {
        Ok(req) => stub_response(tools, fallback, &req),
        Err(e) => {
            let v: Option<serde_json::Value> = serde_json::from_str(line.trim()).ok();
            let field = |k: &str| v.as_ref().and_then(|v| v.get(k)).and_then(|x| x.as_str()).map(str::to_string);
            let task = field("task").and_then(|t| t.parse().ok()).unwrap_or(TaskType::ImageCaption);
            ToolResponse {
                request_id: field("request_id").unwrap_or_default(),
                result: ExpertResult::error("stub", task, format!("{ERR_PROTOCOL}: {e}")),
            }
        }
    };
    canonical_json(&resp).expect("response serializes")
}

/// Serves newline-delimited requests until end of input.
pub fn serve_lines<R: BufRead, W: Write>(
    tools: &BuiltinSet,
    fallback: Option<&str>,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", stub_line(tools, fallback, &line))?;
        output.flush()?;
    }
    Ok(())
}
