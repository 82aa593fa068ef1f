//! Operations shared by the command line and the HTTP service.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dext_core::detector::{Detection, DetectorConfig, DetectorModel};
use dext_core::eval::{self, Cause, Effect, EvalCurve, MetricCode, Setting};
use dext_core::formats;
use dext_core::image::Image;
use dext_core::movis::{self, CanonicalShape, MovisMethod, MovisParams};
use dext_core::saliency::{self, DecisionKind, DecisionTarget, Method, MethodParams, SaliencyMap};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AppError, AppResult};

/// Weight seed of the bundled toy detector.
pub const DEFAULT_MODEL_SEED: u64 = 1;

pub fn load_model(weights: Option<&Path>) -> AppResult<DetectorModel> {
    let config = DetectorConfig::default();
    match weights {
        Some(path) => {
            let bytes =
                std::fs::read(path).map_err(|e| AppError::Invalid(format!("--weights {}: {e}", path.display())))?;
            Ok(formats::read_weights(config, &bytes)?)
        }
        None => Ok(DetectorModel::seeded(config, DEFAULT_MODEL_SEED)?),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IngestInfo {
    pub original_height: usize,
    pub original_width: usize,
    pub height: usize,
    pub width: usize,
    pub resized: bool,
}

/// Decodes a PNG and resizes it to the model input.
pub fn ingest_png(bytes: &[u8], input_size: usize) -> AppResult<(Image, IngestInfo)> {
    let original = Image::from_png(bytes)?;
    let (oh, ow) = (original.height(), original.width());
    let resized = oh != input_size || ow != input_size;
    let image = original.resize(input_size, input_size);
    let info = IngestInfo { original_height: oh, original_width: ow, height: input_size, width: input_size, resized };
    Ok((image, info))
}

macro_rules! string_enum {
    ($ty:ty, $what:literal) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(|_| serde::de::Error::custom(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

/// The explained output of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Class,
    XMin,
    YMin,
    XMax,
    YMax,
}

impl Decision {
    pub const ALL: [Decision; 5] = [Self::Class, Self::XMin, Self::YMin, Self::XMax, Self::YMax];

    pub fn kind(self, detection: &Detection) -> DecisionKind {
        match self {
            Self::Class => DecisionKind::ClassLogit(detection.class_id),
            Self::XMin => DecisionKind::XMin,
            Self::YMin => DecisionKind::YMin,
            Self::XMax => DecisionKind::XMax,
            Self::YMax => DecisionKind::YMax,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Class => "class",
            Self::XMin => "x_min",
            Self::YMin => "y_min",
            Self::XMax => "x_max",
            Self::YMax => "y_max",
        })
    }
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "class" => Ok(Self::Class),
            "x_min" | "xmin" => Ok(Self::XMin),
            "y_min" | "ymin" => Ok(Self::YMin),
            "x_max" | "xmax" => Ok(Self::XMax),
            "y_max" | "ymax" => Ok(Self::YMax),
            _ => Err(format!("unknown decision {s:?} (class, x_min, y_min, x_max, y_max)")),
        }
    }
}

string_enum!(Decision, "decision");

/// Explanation method name, case-insensitive on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MethodName(pub Method);

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.name())
    }
}

impl FromStr for MethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::parse(s).map(MethodName).ok_or_else(|| format!("unknown method {s:?} (gradient, gbp, ig, sgbp, sig)"))
    }
}

string_enum!(MethodName, "method");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MovisName(pub MovisMethod);

impl fmt::Display for MovisName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.name())
    }
}

impl FromStr for MovisName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MovisMethod::parse(s).map(MovisName).ok_or_else(|| {
            format!("unknown visualization {s:?} (principal_components, contours, density_clusters, convex_polygon)")
        })
    }
}

string_enum!(MovisName, "visualization");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CauseName(pub Cause);

impl fmt::Display for CauseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            Cause::Deletion => "deletion",
            Cause::Insertion => "insertion",
        })
    }
}

impl FromStr for CauseName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(CauseName).map_err(|_| format!("unknown cause {s:?} (deletion, insertion)"))
    }
}

string_enum!(CauseName, "cause");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EffectName(pub Effect);

impl fmt::Display for EffectName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.letter())
    }
}

impl FromStr for EffectName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(EffectName).map_err(|_| format!("unknown effect {s:?} (C, B, M, X, Y, W, H)"))
    }
}

string_enum!(EffectName, "effect");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SettingName(pub Setting);

impl fmt::Display for SettingName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.letter())
    }
}

impl FromStr for SettingName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(SettingName).map_err(|_| format!("unknown setting {s:?} (S, R)"))
    }
}

string_enum!(SettingName, "setting");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSpec {
    pub detection: usize,
    pub decision: Decision,
    pub method: MethodName,
    #[serde(default)]
    pub params: MethodParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    #[serde(flatten)]
    pub explain: ExplainSpec,
    pub cause: CauseName,
    pub effect: EffectName,
    pub setting: SettingName,
}

impl EvalSpec {
    pub fn code(&self) -> MetricCode {
        MetricCode::new(self.cause.0, self.effect.0, self.setting.0)
    }
}

pub fn detection_at(detections: &[Detection], index: usize) -> AppResult<&Detection> {
    detections
        .get(index)
        .ok_or_else(|| AppError::NotFound(format!("detection {index} (image has {})", detections.len())))
}

/// Saliency map of one decision of one detection.
pub fn explain(
    model: &DetectorModel,
    image: &Image,
    detections: &[Detection],
    spec: &ExplainSpec,
) -> AppResult<SaliencyMap> {
    spec.params.validate()?;
    let det = detection_at(detections, spec.detection)?;
    let target = DecisionTarget { anchor_index: det.anchor_index, kind: spec.decision.kind(det) };
    Ok(saliency::explain(spec.method.0, model, image, &target, &spec.params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub code: MetricCode,
    pub auc: f64,
    pub points: Vec<(f64, f64)>,
    /// The curve in its CSV export form.
    pub csv: String,
}

impl From<EvalCurve> for EvalResult {
    fn from(c: EvalCurve) -> Self {
        let csv = c.to_csv();
        Self { code: c.code, auc: c.auc, points: c.points, csv }
    }
}

pub fn evaluate(
    model: &DetectorModel,
    image: &Image,
    detections: &[Detection],
    spec: &EvalSpec,
) -> AppResult<EvalResult> {
    let map = explain(model, image, detections, &spec.explain)?;
    let det = detection_at(detections, spec.explain.detection)?;
    Ok(eval::saliency_curve(model, image, &map.grid, det, spec.code())?.into())
}

/// Overlay PNG and shapes for every detection of an image.
pub fn visualize(
    model: &DetectorModel,
    image: &Image,
    detections: &[Detection],
    movis_method: MovisMethod,
    decision: Decision,
    method: Method,
    params: &MethodParams,
) -> AppResult<(Vec<u8>, Vec<CanonicalShape>)> {
    let mut shapes = Vec::with_capacity(detections.len());
    for index in 0..detections.len() {
        let spec = ExplainSpec { detection: index, decision, method: MethodName(method), params: *params };
        let map = explain(model, image, detections, &spec)?;
        shapes.push(movis::canonical_shape(movis_method, &map, index, &MovisParams::default())?);
    }
    let overlay = movis::merge_visualization(image, detections, &shapes, movis::DEFAULT_OVERLAY_SCALE)?;
    Ok((overlay.to_png()?, shapes))
}

/// Image after manipulating `fraction` of its pixels in saliency order.
pub fn manipulate(image: &Image, map: &SaliencyMap, cause: Cause, fraction: f64) -> AppResult<Image> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AppError::Invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let plan = eval::ManipulationPlan::from_saliency(image, &map.grid, cause)?;
    Ok(plan.manipulate(fraction)?)
}
