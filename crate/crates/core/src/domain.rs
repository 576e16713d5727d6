//! Shared value types for the engine.
//!
//! Everything here is an immutable value with a canonical JSON form (see
//! [`crate::json`]). Constructors validate invariants; deserialization goes
//! through the same validation via `try_from` shims so an invalid document
//! never produces a value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a [`ClassDistribution`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid biometry value: {0}")]
    InvalidBiometry(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

pub type Result<T, E = DomainError> = std::result::Result<T, E>;

/// Clinical task categories a query can resolve to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "plane_classification")]
    PlaneClassification,
    #[serde(rename = "brain_subplane_classification")]
    BrainSubplaneClassification,
    #[serde(rename = "head_segmentation")]
    HeadSegmentation,
    #[serde(rename = "abdomen_segmentation")]
    AbdomenSegmentation,
    #[serde(rename = "stomach_segmentation")]
    StomachSegmentation,
    #[serde(rename = "aop")]
    AoP,
    #[serde(rename = "hc_measurement")]
    HCMeasurement,
    #[serde(rename = "ac_measurement")]
    ACMeasurement,
    #[serde(rename = "ga_estimation")]
    GAEstimation,
    #[serde(rename = "image_caption")]
    ImageCaption,
    #[serde(rename = "video_summary")]
    VideoSummary,
}

impl TaskType {
    pub const ALL: [TaskType; 11] = [
        TaskType::PlaneClassification,
        TaskType::BrainSubplaneClassification,
        TaskType::HeadSegmentation,
        TaskType::AbdomenSegmentation,
        TaskType::StomachSegmentation,
        TaskType::AoP,
        TaskType::HCMeasurement,
        TaskType::ACMeasurement,
        TaskType::GAEstimation,
        TaskType::ImageCaption,
        TaskType::VideoSummary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::PlaneClassification => "plane_classification",
            TaskType::BrainSubplaneClassification => "brain_subplane_classification",
            TaskType::HeadSegmentation => "head_segmentation",
            TaskType::AbdomenSegmentation => "abdomen_segmentation",
            TaskType::StomachSegmentation => "stomach_segmentation",
            TaskType::AoP => "aop",
            TaskType::HCMeasurement => "hc_measurement",
            TaskType::ACMeasurement => "ac_measurement",
            TaskType::GAEstimation => "ga_estimation",
            TaskType::ImageCaption => "image_caption",
            TaskType::VideoSummary => "video_summary",
        }
    }

    /// Composite tasks are planned by the coordinator; no single tool serves them.
    pub fn is_composite(self) -> bool {
        matches!(self, TaskType::ImageCaption | TaskType::VideoSummary)
    }

    /// Tasks whose tools answer with a class distribution. Besides the
    /// classification tasks this includes `video_summary`, whose expert is
    /// the per-frame keyframe scorer.
    pub fn emits_distribution(self) -> bool {
        self.is_classification() || self == TaskType::VideoSummary
    }

    pub fn is_classification(self) -> bool {
        matches!(
            self,
            TaskType::PlaneClassification | TaskType::BrainSubplaneClassification
        )
    }

    pub fn is_segmentation(self) -> bool {
        matches!(
            self,
            TaskType::HeadSegmentation
                | TaskType::AbdomenSegmentation
                | TaskType::StomachSegmentation
        )
    }

    /// The biometric measure a measurement task produces, if any.
    pub fn measure(self) -> Option<Measure> {
        match self {
            TaskType::HCMeasurement => Some(Measure::HC),
            TaskType::ACMeasurement => Some(Measure::AC),
            TaskType::AoP => Some(Measure::AoP),
            TaskType::GAEstimation => Some(Measure::GA),
            _ => None,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        TaskType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DomainError::Invalid(format!("unknown task type {s:?}")))
    }
}

/// Standard fetal planes, the three brain sub-planes, and the keyframe
/// scorer's `non_key` class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneLabel {
    Abdomen,
    Brain,
    Femur,
    Thorax,
    MaternalCervix,
    Other,
    TransThalamic,
    TransVentricular,
    TransCerebellar,
    /// Not a diagnostic view. Only produced by keyframe scorers.
    NonKey,
}

impl PlaneLabel {
    pub const ALL: [PlaneLabel; 10] = [
        PlaneLabel::Abdomen,
        PlaneLabel::Brain,
        PlaneLabel::Femur,
        PlaneLabel::Thorax,
        PlaneLabel::MaternalCervix,
        PlaneLabel::Other,
        PlaneLabel::TransThalamic,
        PlaneLabel::TransVentricular,
        PlaneLabel::TransCerebellar,
        PlaneLabel::NonKey,
    ];

    pub const STANDARD: [PlaneLabel; 6] = [
        PlaneLabel::Abdomen,
        PlaneLabel::Brain,
        PlaneLabel::Femur,
        PlaneLabel::Thorax,
        PlaneLabel::MaternalCervix,
        PlaneLabel::Other,
    ];

    pub const BRAIN_SUBPLANES: [PlaneLabel; 3] = [
        PlaneLabel::TransThalamic,
        PlaneLabel::TransVentricular,
        PlaneLabel::TransCerebellar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlaneLabel::Abdomen => "abdomen",
            PlaneLabel::Brain => "brain",
            PlaneLabel::Femur => "femur",
            PlaneLabel::Thorax => "thorax",
            PlaneLabel::MaternalCervix => "maternal_cervix",
            PlaneLabel::Other => "other",
            PlaneLabel::TransThalamic => "trans_thalamic",
            PlaneLabel::TransVentricular => "trans_ventricular",
            PlaneLabel::TransCerebellar => "trans_cerebellar",
            PlaneLabel::NonKey => "non_key",
        }
    }

    pub fn is_brain_subplane(self) -> bool {
        Self::BRAIN_SUBPLANES.contains(&self)
    }

    /// The standard plane this label belongs to (sub-planes map to `Brain`).
    pub fn parent(self) -> PlaneLabel {
        if self.is_brain_subplane() {
            PlaneLabel::Brain
        } else {
            self
        }
    }

    /// Sub-planes are only valid under a `Brain` parent.
    pub fn check_subplane_of(self, parent: PlaneLabel) -> Result<()> {
        if self.is_brain_subplane() && parent != PlaneLabel::Brain {
            return Err(DomainError::Invalid(format!(
                "sub-plane {self} requires parent plane brain, got {parent}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PlaneLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlaneLabel {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        PlaneLabel::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| DomainError::Invalid(format!("unknown plane label {s:?}")))
    }
}

/// Where the pixels of an image live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Path on the local filesystem. Sent to tools as an absolute path.
    Path(String),
    /// Base64-encoded PNG bytes.
    PngBase64(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImageRefRaw")]
pub struct ImageRef {
    pub id: String,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_hint: Option<PlaneLabel>,
}

#[derive(Deserialize)]
struct ImageRefRaw {
    id: String,
    source: ImageSource,
    width: u32,
    height: u32,
    #[serde(default)]
    pixel_spacing_mm: Option<f64>,
    #[serde(default)]
    plane_hint: Option<PlaneLabel>,
}

impl TryFrom<ImageRefRaw> for ImageRef {
    type Error = DomainError;

    fn try_from(r: ImageRefRaw) -> Result<Self> {
        let mut img = ImageRef::new(r.id, r.source, r.width, r.height)?;
        if let Some(s) = r.pixel_spacing_mm {
            img = img.with_spacing(s)?;
        }
        img.plane_hint = r.plane_hint;
        Ok(img)
    }
}

impl ImageRef {
    pub fn new(id: impl Into<String>, source: ImageSource, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DomainError::Dimension(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            id: id.into(),
            source,
            width,
            height,
            pixel_spacing_mm: None,
            plane_hint: None,
        })
    }

    pub fn with_spacing(mut self, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(DomainError::Invalid(format!(
                "pixel spacing must be positive, got {spacing_mm}"
            )));
        }
        self.pixel_spacing_mm = Some(spacing_mm);
        Ok(self)
    }

    /// Accepts a per-axis spacing and rejects anything anisotropic.
    pub fn with_spacing_xy(self, sx: f64, sy: f64) -> Result<Self> {
        if sx != sy {
            return Err(DomainError::Invalid(format!(
                "anisotropic pixel spacing ({sx}, {sy}) is not supported"
            )));
        }
        self.with_spacing(sx)
    }

    pub fn with_plane_hint(mut self, plane: PlaneLabel) -> Self {
        self.plane_hint = Some(plane);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmp_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exam_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

impl PatientMetadata {
    pub fn validate(&self) -> Result<()> {
        if let (Some(lmp), Some(exam)) = (self.lmp_date, self.exam_date) {
            if exam < lmp {
                return Err(DomainError::Invalid(format!(
                    "exam date {exam} precedes LMP {lmp}"
                )));
            }
        }
        Ok(())
    }

    /// Gestational age in weeks implied by LMP and exam date.
    pub fn lmp_gestational_age(&self) -> Option<f64> {
        let days = (self.exam_date? - self.lmp_date?).num_days();
        Some(days as f64 / 7.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VideoStreamRaw")]
pub struct VideoStream {
    pub id: String,
    pub frames: Vec<ImageRef>,
    pub fps: f64,
    #[serde(default)]
    pub metadata: PatientMetadata,
}

#[derive(Deserialize)]
struct VideoStreamRaw {
    id: String,
    frames: Vec<ImageRef>,
    fps: f64,
    #[serde(default)]
    metadata: PatientMetadata,
}

impl TryFrom<VideoStreamRaw> for VideoStream {
    type Error = DomainError;

    fn try_from(r: VideoStreamRaw) -> Result<Self> {
        VideoStream::new(r.id, r.frames, r.fps, r.metadata)
    }
}

impl VideoStream {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<ImageRef>,
        fps: f64,
        metadata: PatientMetadata,
    ) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(DomainError::Dimension("video has no frames".into()));
        };
        if let Some(bad) = frames
            .iter()
            .find(|f| f.width != first.width || f.height != first.height)
        {
            return Err(DomainError::Dimension(format!(
                "frame {} is {}x{}, expected {}x{}",
                bad.id, bad.width, bad.height, first.width, first.height
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DomainError::Invalid(format!("fps must be positive, got {fps}")));
        }
        metadata.validate()?;
        Ok(Self {
            id: id.into(),
            frames,
            fps,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInput {
    Image(ImageRef),
    Video(VideoStream),
}

/// A user query: free text plus exactly one image or video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(flatten)]
    pub input: QueryInput,
}

impl Query {
    pub fn image(text: impl Into<String>, image: ImageRef) -> Self {
        Self {
            text: text.into(),
            input: QueryInput::Image(image),
        }
    }

    pub fn video(text: impl Into<String>, video: VideoStream) -> Self {
        Self {
            text: text.into(),
            input: QueryInput::Video(video),
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self.input, QueryInput::Video(_))
    }
}

/// Scalar parameter value carried in prompts and requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_string())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Text(s)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

pub type ScalarMap = BTreeMap<String, Scalar>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StructuredPromptRaw")]
pub struct StructuredPrompt {
    pub task: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PlaneLabel>,
    pub instructions: String,
    #[serde(default)]
    pub params: ScalarMap,
}

#[derive(Deserialize)]
struct StructuredPromptRaw {
    task: TaskType,
    #[serde(default)]
    plane: Option<PlaneLabel>,
    instructions: String,
    #[serde(default)]
    params: ScalarMap,
}

impl TryFrom<StructuredPromptRaw> for StructuredPrompt {
    type Error = DomainError;

    fn try_from(r: StructuredPromptRaw) -> Result<Self> {
        StructuredPrompt::new(r.task, r.plane, r.instructions, r.params)
    }
}

impl StructuredPrompt {
    pub fn new(
        task: TaskType,
        plane: Option<PlaneLabel>,
        instructions: impl Into<String>,
        params: ScalarMap,
    ) -> Result<Self> {
        let instructions = instructions.into();
        if instructions.trim().is_empty() {
            return Err(DomainError::Invalid("prompt instructions are empty".into()));
        }
        Ok(Self {
            task,
            plane,
            instructions,
            params,
        })
    }
}

/// Run-length encoded binary mask over a row-major raster.
///
/// Runs are `(start, length)` pairs over the flattened index `y * width + x`,
/// sorted, non-overlapping and maximal (no two runs touch).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRaw")]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<(u64, u64)>,
}

#[derive(Deserialize)]
struct MaskRaw {
    width: u32,
    height: u32,
    runs: Vec<(u64, u64)>,
}

impl TryFrom<MaskRaw> for Mask {
    type Error = DomainError;

    fn try_from(r: MaskRaw) -> Result<Self> {
        Mask::from_runs(r.width, r.height, r.runs)
    }
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            runs: Vec::new(),
        })
    }

    /// Validates and wraps a run list.
    pub fn from_runs(width: u32, height: u32, runs: Vec<(u64, u64)>) -> Result<Self> {
        check_dims(width, height)?;
        let total = width as u64 * height as u64;
        let mut prev_end: Option<u64> = None;
        for &(start, len) in &runs {
            if len == 0 {
                return Err(DomainError::InvalidMask(format!("zero-length run at {start}")));
            }
            let end = start
                .checked_add(len)
                .ok_or_else(|| DomainError::InvalidMask("run overflows".into()))?;
            if end > total {
                return Err(DomainError::InvalidMask(format!(
                    "run ({start}, {len}) exceeds raster of {total} pixels"
                )));
            }
            if let Some(pe) = prev_end {
                if start < pe {
                    return Err(DomainError::InvalidMask(format!(
                        "run at {start} overlaps or is out of order"
                    )));
                }
                if start == pe {
                    return Err(DomainError::InvalidMask(format!(
                        "run at {start} is adjacent to the previous run"
                    )));
                }
            }
            prev_end = Some(end);
        }
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Encodes a row-major boolean raster of `width * height` pixels.
    pub fn from_raster(width: u32, height: u32, raster: &[bool]) -> Result<Self> {
        check_dims(width, height)?;
        if raster.len() as u64 != width as u64 * height as u64 {
            return Err(DomainError::Dimension(format!(
                "raster has {} pixels, expected {}x{}",
                raster.len(),
                width,
                height
            )));
        }
        let mut runs = Vec::new();
        let mut current: Option<(u64, u64)> = None;
        for (i, &on) in raster.iter().enumerate() {
            match (on, current.as_mut()) {
                (true, Some(run)) => run.1 += 1,
                (true, None) => current = Some((i as u64, 1)),
                (false, Some(_)) => runs.push(current.take().unwrap()),
                (false, None) => {}
            }
        }
        runs.extend(current);
        Ok(Self {
            width,
            height,
            runs,
        })
    }

    /// Encodes a row-major grid (outer vec = rows).
    pub fn from_grid(grid: &[Vec<bool>]) -> Result<Self> {
        let height = grid.len();
        let width = grid.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(DomainError::Dimension("grid must be at least 1x1".into()));
        }
        if grid.iter().any(|row| row.len() != width) {
            return Err(DomainError::Dimension("grid rows differ in length".into()));
        }
        let flat: Vec<bool> = grid.iter().flatten().copied().collect();
        Self::from_raster(width as u32, height as u32, &flat)
    }

    /// Builds a mask from a per-pixel predicate `f(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut raster = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                raster.push(f(x, y));
            }
        }
        Self::from_raster(width, height, &raster)
    }

    pub fn to_raster(&self) -> Vec<bool> {
        let mut raster = vec![false; self.pixel_count()];
        for &(start, len) in &self.runs {
            raster[start as usize..(start + len) as usize].fill(true);
        }
        raster
    }

    pub fn to_grid(&self) -> Vec<Vec<bool>> {
        self.to_raster()
            .chunks(self.width as usize)
            .map(<[bool]>::to_vec)
            .collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[(u64, u64)] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y as u64 * self.width as u64 + x as u64;
        let pos = self.runs.partition_point(|r| r.0 <= idx);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            idx < s + l
        }
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as u64;
        self.runs
            .iter()
            .flat_map(move |&(s, l)| (s..s + l).map(move |i| ((i % w) as u32, (i / w) as u32)))
    }

    /// Size of the intersection with another mask of equal dimensions.
    pub fn intersection_area(&self, other: &Mask) -> u64 {
        let (mut i, mut j, mut total) = (0, 0, 0);
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, al) = self.runs[i];
            let (b0, bl) = other.runs[j];
            let (a1, b1) = (a0 + al, b0 + bl);
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if hi > lo {
                total += hi - lo;
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }
}

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(DomainError::Dimension(format!(
            "mask must be at least 1x1, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Free-function forms of the mask codec.
pub fn mask_from_raster(grid: &[Vec<bool>]) -> Result<Mask> {
    Mask::from_grid(grid)
}

pub fn mask_to_raster(mask: &Mask) -> Vec<Vec<bool>> {
    mask.to_grid()
}

pub fn mask_area(mask: &Mask) -> u64 {
    mask.area()
}

/// Probability distribution over plane labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<PlaneLabel, f64>", into = "BTreeMap<PlaneLabel, f64>")]
pub struct ClassDistribution {
    probs: BTreeMap<PlaneLabel, f64>,
}

impl TryFrom<BTreeMap<PlaneLabel, f64>> for ClassDistribution {
    type Error = DomainError;

    fn try_from(probs: BTreeMap<PlaneLabel, f64>) -> Result<Self> {
        ClassDistribution::new(probs)
    }
}

impl From<ClassDistribution> for BTreeMap<PlaneLabel, f64> {
    fn from(d: ClassDistribution) -> Self {
        d.probs
    }
}

impl ClassDistribution {
    pub fn new(probs: BTreeMap<PlaneLabel, f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DomainError::InvalidDistribution("no classes".into()));
        }
        for (label, &p) in &probs {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(DomainError::InvalidDistribution(format!(
                    "probability for {label} is {p}, outside [0, 1]"
                )));
            }
        }
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(DomainError::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (PlaneLabel, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().collect())
    }

    /// All mass on one label.
    pub fn certain(label: PlaneLabel) -> Self {
        Self {
            probs: BTreeMap::from([(label, 1.0)]),
        }
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn normalized(weights: BTreeMap<PlaneLabel, f64>) -> Result<Self> {
        let total: f64 = weights.values().sum();
        if !(total.is_finite() && total > 0.0) || weights.values().any(|&w| w < 0.0) {
            return Err(DomainError::InvalidDistribution(
                "weights must be non-negative with positive total".into(),
            ));
        }
        Self::new(weights.into_iter().map(|(k, v)| (k, v / total)).collect())
    }

    pub fn probs(&self) -> &BTreeMap<PlaneLabel, f64> {
        &self.probs
    }

    pub fn prob(&self, label: PlaneLabel) -> f64 {
        self.probs.get(&label).copied().unwrap_or(0.0)
    }

    /// Highest-probability label; ties go to the lexicographically smaller
    /// label name.
    pub fn argmax(&self) -> (PlaneLabel, f64) {
        let mut best: Option<(PlaneLabel, f64)> = None;
        for (&label, &p) in &self.probs {
            best = match best {
                None => Some((label, p)),
                Some((bl, bp)) => {
                    if p > bp || (p == bp && label.as_str() < bl.as_str()) {
                        Some((label, p))
                    } else {
                        Some((bl, bp))
                    }
                }
            };
        }
        best.expect("distribution is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "hc")]
    HC,
    #[serde(rename = "ac")]
    AC,
    #[serde(rename = "aop")]
    AoP,
    #[serde(rename = "ga")]
    GA,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::HC => "hc",
            Measure::AC => "ac",
            Measure::AoP => "aop",
            Measure::GA => "ga",
        }
    }

    pub fn natural_unit(self) -> Unit {
        match self {
            Measure::HC | Measure::AC => Unit::Mm,
            Measure::AoP => Unit::Degrees,
            Measure::GA => Unit::Weeks,
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Mm,
    Degrees,
    Weeks,
    /// Uncalibrated length; used when no pixel spacing is known.
    Pixels,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Mm => "mm",
            Unit::Degrees => "degrees",
            Unit::Weeks => "weeks",
            Unit::Pixels => "pixels",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BiometryValueRaw")]
pub struct BiometryValue {
    pub measure: Measure,
    pub value: f64,
    pub unit: Unit,
    pub method: String,
    pub confidence: f64,
}

#[derive(Deserialize)]
struct BiometryValueRaw {
    measure: Measure,
    value: f64,
    unit: Unit,
    method: String,
    confidence: f64,
}

impl TryFrom<BiometryValueRaw> for BiometryValue {
    type Error = DomainError;

    fn try_from(r: BiometryValueRaw) -> Result<Self> {
        BiometryValue::new(r.measure, r.value, r.unit, r.method, r.confidence)
    }
}

impl BiometryValue {
    pub fn new(
        measure: Measure,
        value: f64,
        unit: Unit,
        method: impl Into<String>,
        confidence: f64,
    ) -> Result<Self> {
        let unit_ok = unit == measure.natural_unit()
            || (unit == Unit::Pixels && matches!(measure, Measure::HC | Measure::AC));
        if !unit_ok {
            return Err(DomainError::InvalidBiometry(format!(
                "unit {unit} does not match measure {measure}"
            )));
        }
        if !value.is_finite() {
            return Err(DomainError::InvalidBiometry(format!("{measure} value is not finite")));
        }
        match measure {
            Measure::AoP if !(value > 0.0 && value < 180.0) => {
                return Err(DomainError::InvalidBiometry(format!(
                    "AoP {value} outside (0, 180) degrees"
                )))
            }
            Measure::HC | Measure::AC | Measure::GA if value <= 0.0 => {
                return Err(DomainError::InvalidBiometry(format!(
                    "{measure} must be positive, got {value}"
                )))
            }
            _ => {}
        }
        check_unit_interval("confidence", confidence).map_err(|e| match e {
            DomainError::Invalid(m) => DomainError::InvalidBiometry(m),
            other => other,
        })?;
        Ok(Self {
            measure,
            value,
            unit,
            method: method.into(),
            confidence,
        })
    }

    /// Natural-unit value, i.e. not an uncalibrated pixel length.
    pub fn is_calibrated(&self) -> bool {
        self.unit != Unit::Pixels
    }
}

pub(crate) fn check_unit_interval(what: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        return Err(DomainError::Invalid(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

/// What a tool (or a fusion rule) produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Classification(ClassDistribution),
    Mask(Mask),
    /// Several named single-structure masks (e.g. `symphysis` and `head`).
    MaskSet(BTreeMap<String, Mask>),
    Biometry(BiometryValue),
    /// Free text; only used by the external intent backend.
    Text(String),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Classification(_) => "classification",
            Payload::Mask(_) => "mask",
            Payload::MaskSet(_) => "mask_set",
            Payload::Biometry(_) => "biometry",
            Payload::Text(_) => "text",
        }
    }

    /// Whether a tool may return this payload for `task`.
    pub fn fits_tool_task(&self, task: TaskType) -> bool {
        match self {
            Payload::Classification(_) => task.emits_distribution(),
            Payload::Mask(_) => {
                task.is_segmentation()
                    || matches!(task, TaskType::HCMeasurement | TaskType::ACMeasurement)
            }
            Payload::MaskSet(_) => task == TaskType::AoP,
            Payload::Biometry(b) => task.measure() == Some(b.measure),
            Payload::Text(_) => task == TaskType::ImageCaption,
        }
    }

    /// Whether a fused result for `task` may carry this payload.
    pub fn fits_fused_task(&self, task: TaskType) -> bool {
        match self {
            Payload::Classification(_) => task.emits_distribution(),
            Payload::Mask(_) => task.is_segmentation(),
            Payload::Biometry(b) => task.measure() == Some(b.measure),
            Payload::MaskSet(_) | Payload::Text(_) => false,
        }
    }

    pub fn as_biometry(&self) -> Option<&BiometryValue> {
        match self {
            Payload::Biometry(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_mask(&self) -> Option<&Mask> {
        match self {
            Payload::Mask(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_distribution(&self) -> Option<&ClassDistribution> {
        match self {
            Payload::Classification(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Error(String),
}

impl ResultStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ResultStatus::Ok)
    }
}

/// One tool's answer for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExpertResultRaw")]
pub struct ExpertResult {
    pub tool_id: String,
    pub task: TaskType,
    /// Absent only on error-status results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
    pub confidence: f64,
    pub latency_ms: u64,
    pub status: ResultStatus,
}

#[derive(Deserialize)]
struct ExpertResultRaw {
    tool_id: String,
    task: TaskType,
    #[serde(default)]
    payload: Option<Payload>,
    confidence: f64,
    latency_ms: u64,
    status: ResultStatus,
}

impl TryFrom<ExpertResultRaw> for ExpertResult {
    type Error = DomainError;

    fn try_from(r: ExpertResultRaw) -> Result<Self> {
        let res = ExpertResult {
            tool_id: r.tool_id,
            task: r.task,
            payload: r.payload,
            confidence: r.confidence,
            latency_ms: r.latency_ms,
            status: r.status,
        };
        res.validate()?;
        Ok(res)
    }
}

impl ExpertResult {
    pub fn ok(
        tool_id: impl Into<String>,
        task: TaskType,
        payload: Payload,
        confidence: f64,
    ) -> Result<Self> {
        let res = Self {
            tool_id: tool_id.into(),
            task,
            payload: Some(payload),
            confidence,
            latency_ms: 0,
            status: ResultStatus::Ok,
        };
        res.validate()?;
        Ok(res)
    }

    pub fn error(tool_id: impl Into<String>, task: TaskType, message: impl Into<String>) -> Self {
        Self {
            tool_id: tool_id.into(),
            task,
            payload: None,
            confidence: 0.0,
            latency_ms: 0,
            status: ResultStatus::Error(message.into()),
        }
    }

    pub fn with_latency(mut self, latency_ms: u64) -> Self {
        self.latency_ms = latency_ms;
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status.is_ok()
    }

    pub fn error_message(&self) -> Option<&str> {
        match &self.status {
            ResultStatus::Error(m) => Some(m),
            ResultStatus::Ok => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_interval("confidence", self.confidence)?;
        match (&self.status, &self.payload) {
            (ResultStatus::Ok, None) => Err(DomainError::Invalid(format!(
                "ok result from {} has no payload",
                self.tool_id
            ))),
            (ResultStatus::Ok, Some(p)) if !p.fits_tool_task(self.task) => {
                Err(DomainError::Invalid(format!(
                    "{} payload does not fit task {}",
                    p.kind(),
                    self.task
                )))
            }
            _ => Ok(()),
        }
    }
}

/// The output of an expert's fusion rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FusedResultRaw")]
pub struct FusedResult {
    pub task: TaskType,
    pub payload: Payload,
    pub contributors: Vec<String>,
    pub fusion_rule: String,
    /// Fused label for classification results (argmax with tie-break).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PlaneLabel>,
}

#[derive(Deserialize)]
struct FusedResultRaw {
    task: TaskType,
    payload: Payload,
    contributors: Vec<String>,
    fusion_rule: String,
    #[serde(default)]
    label: Option<PlaneLabel>,
}

impl TryFrom<FusedResultRaw> for FusedResult {
    type Error = DomainError;

    fn try_from(r: FusedResultRaw) -> Result<Self> {
        let mut fused = FusedResult::new(r.task, r.payload, r.contributors, r.fusion_rule)?;
        fused.label = r.label;
        Ok(fused)
    }
}

impl FusedResult {
    pub fn new(
        task: TaskType,
        payload: Payload,
        contributors: Vec<String>,
        fusion_rule: impl Into<String>,
    ) -> Result<Self> {
        if contributors.is_empty() {
            return Err(DomainError::Invalid("fused result has no contributors".into()));
        }
        if !payload.fits_fused_task(task) {
            return Err(DomainError::Invalid(format!(
                "{} payload does not fit fused task {task}",
                payload.kind()
            )));
        }
        Ok(Self {
            task,
            payload,
            contributors,
            fusion_rule: fusion_rule.into(),
            label: None,
        })
    }

    pub fn with_label(mut self, label: PlaneLabel) -> Self {
        self.label = Some(label);
        self
    }
}
