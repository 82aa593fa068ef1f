//! Causal deletion and insertion evaluation.
//!
//! Pixels are removed (to gray) or restored (onto a blurred copy) in saliency
//! order and one of seven effects on a detection is tracked at each fraction,
//! either on the detection's own anchor or on the full post-processed output.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{iou, BoxCoords, Detection, DetectorError, DetectorModel};
use crate::image::Image;

pub const GRAY_FILL: f32 = 0.5;
pub const INSERTION_BLUR_SIGMA: f32 = 5.0;
pub const FRACTION_STEPS: usize = 100;
/// Realistic-setting match requires IoU strictly above this.
pub const MATCH_IOU: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("saliency grid has {got} values for a {height}x{width} image")]
    SaliencySize { height: usize, width: usize, got: usize },
    #[error("pixel order is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("curves do not share a fraction grid and code")]
    GridMismatch,
    #[error("no curves to aggregate")]
    NoCurves,
    #[error("invalid metric code {0:?}")]
    BadCode(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Deletion,
    Insertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    ClassMaxProb,
    BoxIoU,
    BoxMoveDist,
    XTop,
    YTop,
    Width,
    Height,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    SingleBox,
    Realistic,
}

impl Cause {
    pub const ALL: [Cause; 2] = [Cause::Deletion, Cause::Insertion];

    pub fn letter(self) -> char {
        match self {
            Cause::Deletion => 'D',
            Cause::Insertion => 'I',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.letter() == c.to_ascii_uppercase())
    }

    /// Deletion curves are better when lower.
    pub fn lower_is_better(self) -> bool {
        self == Cause::Deletion
    }
}

impl Effect {
    pub const ALL: [Effect; 7] = [
        Effect::ClassMaxProb,
        Effect::BoxIoU,
        Effect::BoxMoveDist,
        Effect::XTop,
        Effect::YTop,
        Effect::Width,
        Effect::Height,
    ];

    pub fn letter(self) -> char {
        match self {
            Effect::ClassMaxProb => 'C',
            Effect::BoxIoU => 'B',
            Effect::BoxMoveDist => 'M',
            Effect::XTop => 'X',
            Effect::YTop => 'Y',
            Effect::Width => 'W',
            Effect::Height => 'H',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.letter() == c.to_ascii_uppercase())
    }
}

impl Setting {
    pub const ALL: [Setting; 2] = [Setting::SingleBox, Setting::Realistic];

    pub fn letter(self) -> char {
        match self {
            Setting::SingleBox => 'S',
            Setting::Realistic => 'R',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.letter() == c.to_ascii_uppercase())
    }
}

impl FromStr for Cause {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "d" | "deletion" => Ok(Cause::Deletion),
            "i" | "insertion" => Ok(Cause::Insertion),
            _ => Err(EvalError::BadCode(s.to_string())),
        }
    }
}

impl FromStr for Effect {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Effect::from_letter(c).ok_or_else(|| EvalError::BadCode(s.to_string())),
            _ => Err(EvalError::BadCode(s.to_string())),
        }
    }
}

impl FromStr for Setting {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "single" | "single_box" | "singlebox" => Ok(Setting::SingleBox),
            "r" | "realistic" => Ok(Setting::Realistic),
            _ => Err(EvalError::BadCode(s.to_string())),
        }
    }
}

/// Three-letter metric code such as `DCS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetricCode {
    pub cause: Cause,
    pub effect: Effect,
    pub setting: Setting,
}

impl MetricCode {
    pub fn new(cause: Cause, effect: Effect, setting: Setting) -> Self {
        Self { cause, effect, setting }
    }

    /// All 28 codes, cause-major then effect then setting.
    pub fn all() -> Vec<MetricCode> {
        let mut out = Vec::with_capacity(28);
        for cause in Cause::ALL {
            for effect in Effect::ALL {
                for setting in Setting::ALL {
                    out.push(Self { cause, effect, setting });
                }
            }
        }
        out
    }
}

impl fmt::Display for MetricCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.cause.letter(), self.effect.letter(), self.setting.letter())
    }
}

impl FromStr for MetricCode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let chars: Vec<char> = s.chars().collect();
        let bad = || EvalError::BadCode(s.to_string());
        if chars.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            cause: Cause::from_letter(chars[0]).ok_or_else(bad)?,
            effect: Effect::from_letter(chars[1]).ok_or_else(bad)?,
            setting: Setting::from_letter(chars[2]).ok_or_else(bad)?,
        })
    }
}

impl Serialize for MetricCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `FRACTION_STEPS + 1` uniform fractions from 0 to 1.
pub fn fraction_grid() -> Vec<f64> {
    (0..=FRACTION_STEPS).map(|k| k as f64 / FRACTION_STEPS as f64).collect()
}

/// `floor(f * total)`, tolerant of fractions that land just below an integer.
pub fn pixels_at(f: f64, total: usize) -> usize {
    ((f * total as f64 + 1e-9).floor().max(0.0) as usize).min(total)
}

/// Pixel indices by descending saliency; ties by ascending index.
pub fn saliency_order(grid: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone)]
pub struct ManipulationPlan {
    pub cause: Cause,
    pub pixel_order: Vec<usize>,
    pub fractions: Vec<f64>,
    pub deletion_fill: f32,
    original: Image,
    insertion_base: Image,
}

impl ManipulationPlan {
    pub fn from_saliency(image: &Image, grid: &[f32], cause: Cause) -> Result<Self, EvalError> {
        if grid.len() != image.pixel_count() {
            return Err(EvalError::SaliencySize { height: image.height(), width: image.width(), got: grid.len() });
        }
        Self::from_order(image, saliency_order(grid), cause)
    }

    pub fn from_order(image: &Image, pixel_order: Vec<usize>, cause: Cause) -> Result<Self, EvalError> {
        let n = image.pixel_count();
        let mut seen = vec![false; n];
        if pixel_order.len() != n || pixel_order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(EvalError::NotAPermutation(n));
        }
        let insertion_base = match cause {
            Cause::Insertion => image.gaussian_blur(INSERTION_BLUR_SIGMA),
            Cause::Deletion => image.clone(),
        };
        Ok(Self {
            cause,
            pixel_order,
            fractions: fraction_grid(),
            deletion_fill: GRAY_FILL,
            original: image.clone(),
            insertion_base,
        })
    }

    pub fn original(&self) -> &Image {
        &self.original
    }

    pub fn insertion_base(&self) -> &Image {
        &self.insertion_base
    }

    /// Number of pixels manipulated at fraction `f`.
    pub fn pixel_count_at(&self, f: f64) -> usize {
        pixels_at(f, self.pixel_order.len())
    }

    pub fn manipulate(&self, f: f64) -> Result<Image, EvalError> {
        if !(0.0..=1.0).contains(&f) {
            return Err(EvalError::BadFraction(f));
        }
        let count = self.pixel_count_at(f);
        let selected = &self.pixel_order[..count];
        Ok(match self.cause {
            Cause::Deletion => {
                let mut out = self.original.clone();
                for &p in selected {
                    out.set_pixel(p, [self.deletion_fill; 3]);
                }
                out
            }
            Cause::Insertion => {
                let mut out = self.insertion_base.clone();
                for &p in selected {
                    out.set_pixel(p, self.original.pixel(p));
                }
                out
            }
        })
    }
}

/// Tracks one effect on a reference detection.
#[derive(Debug, Clone)]
pub struct EffectTracker {
    pub effect: Effect,
    pub setting: Setting,
    pub reference: Detection,
}

impl EffectTracker {
    pub fn new(effect: Effect, setting: Setting, reference: Detection) -> Self {
        Self { effect, setting, reference }
    }

    pub fn measure(&self, model: &DetectorModel, image: &Image) -> Result<f64, EvalError> {
        match self.setting {
            Setting::SingleBox => track_single_box(model, image, &self.reference, self.effect),
            Setting::Realistic => track_realistic(model, image, &self.reference, self.effect),
        }
    }
}

/// Effect of `current` relative to `reference`, in pixels of an
/// `height x width` image for geometric effects.
pub fn effect_value(
    effect: Effect,
    reference: &BoxCoords,
    current: &BoxCoords,
    prob: f64,
    height: usize,
    width: usize,
) -> f64 {
    let (w, h) = (width as f64, height as f64);
    let px = |b: &BoxCoords| [b.x_min as f64 * w, b.y_min as f64 * h, b.x_max as f64 * w, b.y_max as f64 * h];
    let (r, c) = (px(reference), px(current));
    match effect {
        Effect::ClassMaxProb => prob,
        Effect::BoxIoU => iou(reference, current),
        Effect::BoxMoveDist => ((c[0] - r[0]).hypot(c[1] - r[1])) + ((c[2] - r[2]).hypot(c[3] - r[3])),
        Effect::XTop => (c[0] - r[0]).abs(),
        Effect::YTop => (c[1] - r[1]).abs(),
        Effect::Width => ((c[2] - c[0]) - (r[2] - r[0])).abs(),
        Effect::Height => ((c[3] - c[1]) - (r[3] - r[1])).abs(),
    }
}

/// Reads the reference anchor's pre-NMS outputs.
pub fn track_single_box(
    model: &DetectorModel,
    image: &Image,
    reference: &Detection,
    effect: Effect,
) -> Result<f64, EvalError> {
    let raw = model.raw_outputs(image)?;
    let prob = raw.probs_of(reference.anchor_index)[reference.class_id] as f64;
    let current = raw.boxes[reference.anchor_index];
    Ok(effect_value(effect, &reference.bbox, &current, prob, image.height(), image.width()))
}

/// Value assigned when the reference is lost in the realistic setting.
pub fn unmatched_value(effect: Effect, height: usize, width: usize) -> f64 {
    match effect {
        Effect::ClassMaxProb | Effect::BoxIoU => 0.0,
        _ => (height as f64).hypot(width as f64),
    }
}

/// Current detection of the same class with IoU above [`MATCH_IOU`]; the
/// highest-IoU one when several qualify.
pub fn match_detection<'a>(reference: &Detection, current: &'a [Detection]) -> Option<&'a Detection> {
    current
        .iter()
        .filter(|d| d.class_id == reference.class_id)
        .map(|d| (d, iou(&reference.bbox, &d.bbox)))
        .filter(|&(_, v)| v > MATCH_IOU)
        .fold(None, |best: Option<(&Detection, f64)>, (d, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((d, v)),
        })
        .map(|(d, _)| d)
}

pub fn track_realistic(
    model: &DetectorModel,
    image: &Image,
    reference: &Detection,
    effect: Effect,
) -> Result<f64, EvalError> {
    let detections = model.detect(image)?;
    Ok(match match_detection(reference, &detections) {
        Some(d) => effect_value(effect, &reference.bbox, &d.bbox, d.score as f64, image.height(), image.width()),
        None => unmatched_value(effect, image.height(), image.width()),
    })
}

/// Trapezoid area under `(x, y)` points.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub code: MetricCode,
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl EvalCurve {
    pub fn new(code: MetricCode, points: Vec<(f64, f64)>) -> Self {
        let auc = trapezoid_auc(&points);
        Self { code, points, auc }
    }

    /// `fraction,value` rows under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,value\n");
        for (f, v) in &self.points {
            out.push_str(&format!("{f},{v}\n"));
        }
        out
    }
}

/// Evaluates `tracker` at every fraction of `plan`, in parallel.
pub fn curve(model: &DetectorModel, plan: &ManipulationPlan, tracker: &EffectTracker) -> Result<EvalCurve, EvalError> {
    let values: Vec<f64> =
        plan.fractions.par_iter().map(|&f| tracker.measure(model, &plan.manipulate(f)?)).collect::<Result<_, _>>()?;
    let points = plan.fractions.iter().copied().zip(values).collect();
    Ok(EvalCurve::new(MetricCode::new(plan.cause, tracker.effect, tracker.setting), points))
}

/// Convenience wrapper building the plan from a saliency grid.
pub fn saliency_curve(
    model: &DetectorModel,
    image: &Image,
    grid: &[f32],
    reference: &Detection,
    code: MetricCode,
) -> Result<EvalCurve, EvalError> {
    let plan = ManipulationPlan::from_saliency(image, grid, code.cause)?;
    curve(model, &plan, &EffectTracker::new(code.effect, code.setting, reference.clone()))
}

/// Pointwise mean curve and its AUC.
pub fn aauc(curves: &[EvalCurve]) -> Result<(EvalCurve, f64), EvalError> {
    let first = curves.first().ok_or(EvalError::NoCurves)?;
    for c in curves {
        let same_grid =
            c.points.len() == first.points.len() && c.points.iter().zip(&first.points).all(|(a, b)| a.0 == b.0);
        if c.code != first.code || !same_grid {
            return Err(EvalError::GridMismatch);
        }
    }
    let n = curves.len() as f64;
    let points = (0..first.points.len())
        .map(|i| (first.points[i].0, curves.iter().map(|c| c.points[i].1).sum::<f64>() / n))
        .collect();
    let mean = EvalCurve::new(first.code, points);
    let value = mean.auc;
    Ok((mean, value))
}

/// AAUC over the pooled curves of all four coordinate explanations.
pub fn box_decision_aauc(per_coordinate: &[Vec<EvalCurve>]) -> Result<f64, EvalError> {
    let pooled: Vec<EvalCurve> = per_coordinate.iter().flatten().cloned().collect();
    Ok(aauc(&pooled)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub code: MetricCode,
    pub auc: f64,
    pub method: String,
    pub detector_config: serde_json::Value,
    pub target: serde_json::Value,
}
