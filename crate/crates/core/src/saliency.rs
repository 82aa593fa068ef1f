//! Gradient explanations for single detector decisions.
//!
//! Every explanation starts from one scalar output neuron: a class logit or
//! one decoded box coordinate of a given anchor. Raw attributions are reduced
//! over channels by summing absolute values; the emitted grid is min-max
//! normalized to `[0, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{iou, BoxCoords, DetectorError, DetectorModel};
use crate::image::Image;
use crate::tensor::{Affine, GradientRule, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("target {0:?} is not an output of this model")]
    TargetUnreachable(DecisionTarget),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which output of an anchor is explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    ClassLogit(usize),
    XMin,
    YMin,
    XMax,
    YMax,
}

impl DecisionKind {
    pub const COORDINATES: [DecisionKind; 4] = [Self::XMin, Self::YMin, Self::XMax, Self::YMax];

    /// The class decision followed by the four coordinates.
    pub fn all_for_class(class_id: usize) -> [DecisionKind; 5] {
        [Self::ClassLogit(class_id), Self::XMin, Self::YMin, Self::XMax, Self::YMax]
    }

    pub fn coordinate_index(&self) -> Option<usize> {
        match self {
            Self::ClassLogit(_) => None,
            Self::XMin => Some(0),
            Self::YMin => Some(1),
            Self::XMax => Some(2),
            Self::YMax => Some(3),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ClassLogit(_) => "class",
            Self::XMin => "x_min",
            Self::YMin => "y_min",
            Self::XMax => "x_max",
            Self::YMax => "y_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecisionTarget {
    pub anchor_index: usize,
    pub kind: DecisionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    /// Plain gradient (standard ReLU backward).
    Gradient,
    Gbp,
    Ig,
    Sgbp,
    Sig,
}

impl Method {
    pub const EXPLAINERS: [Method; 4] = [Method::Gbp, Method::Ig, Method::Sgbp, Method::Sig];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gradient => "GRADIENT",
            Self::Gbp => "GBP",
            Self::Ig => "IG",
            Self::Sgbp => "SGBP",
            Self::Sig => "SIG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gradient" => Some(Self::Gradient),
            "gbp" => Some(Self::Gbp),
            "ig" => Some(Self::Ig),
            "sgbp" => Some(Self::Sgbp),
            "sig" => Some(Self::Sig),
            _ => None,
        }
    }

    /// Base method of a SmoothGrad variant.
    pub fn smoothed_base(&self) -> Option<Method> {
        match self {
            Self::Sgbp => Some(Self::Gbp),
            Self::Sig => Some(Self::Ig),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Black,
    Gray(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    pub ig_steps: usize,
    pub ig_baseline: Baseline,
    pub sg_samples: usize,
    /// Noise standard deviation as a fraction of the image's value range.
    pub sg_noise: f32,
    pub seed: u64,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self { ig_steps: 64, ig_baseline: Baseline::Black, sg_samples: 15, sg_noise: 0.15, seed: 0 }
    }
}

impl MethodParams {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if self.ig_steps == 0 {
            return Err(SaliencyError::InvalidParams("ig_steps must be >= 1".into()));
        }
        if self.sg_samples == 0 {
            return Err(SaliencyError::InvalidParams("sg_samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sg_noise) {
            return Err(SaliencyError::InvalidParams("sg_noise must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, normalized to `[0, 1]`.
    pub grid: Vec<f32>,
    pub target: DecisionTarget,
    pub method: Method,
    /// Range of the channel-reduced map before normalization.
    pub raw_range: (f32, f32),
}

impl SaliencyMap {
    pub fn from_raw(raw: Vec<f32>, height: usize, width: usize, target: DecisionTarget, method: Method) -> Self {
        let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let grid = if hi > lo {
            let span = hi as f64 - lo as f64;
            raw.iter().map(|&v| ((v as f64 - lo as f64) / span) as f32).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self { height, width, grid, target, method, raw_range: (lo, hi) }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.grid[row * self.width + col]
    }

    pub fn is_constant(&self) -> bool {
        self.grid.iter().all(|&v| v == self.grid[0])
    }
}

/// A model whose scalar outputs can be explained.
pub trait ExplainableModel: Sync {
    /// `[C, H, W]` of the expected input.
    fn input_shape(&self) -> [usize; 3];

    /// Records a forward pass and returns the output tensor and element that
    /// holds the target scalar.
    fn record<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        input: Var,
        target: &DecisionTarget,
    ) -> Result<(Var, usize), SaliencyError>;

    fn evaluate(&self, input: &Tensor, target: &DecisionTarget) -> Result<f32, SaliencyError> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let (out, idx) = self.record(&mut tape, x, target)?;
        Ok(tape.value(out).data()[idx])
    }
}

impl ExplainableModel for DetectorModel {
    fn input_shape(&self) -> [usize; 3] {
        [3, self.input_size(), self.input_size()]
    }

    fn record<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        input: Var,
        target: &DecisionTarget,
    ) -> Result<(Var, usize), SaliencyError> {
        if target.anchor_index >= self.anchors().len() {
            return Err(SaliencyError::TargetUnreachable(*target));
        }
        if let DecisionKind::ClassLogit(k) = target.kind {
            if k >= self.num_classes() {
                return Err(SaliencyError::TargetUnreachable(*target));
            }
        }
        self.check_input(
            tape.value(input).shape().get(1).copied().unwrap_or(0),
            tape.value(input).shape().get(2).copied().unwrap_or(0),
        )?;
        let heads = DetectorModel::record(self, tape, input)?;
        Ok(match target.kind {
            DecisionKind::ClassLogit(k) => (heads.logits, target.anchor_index * self.num_classes() + k),
            kind => (heads.boxes, target.anchor_index * 4 + kind.coordinate_index().expect("coordinate")),
        })
    }
}

/// `y = W x + b` over the flattened input; outputs are addressed by
/// `ClassLogit(i)`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub shape: [usize; 3],
    pub layer: Affine,
}

impl LinearModel {
    pub fn new(shape: [usize; 3], layer: Affine) -> Result<Self, SaliencyError> {
        if layer.in_features() != shape.iter().product::<usize>() {
            return Err(SaliencyError::InvalidParams("linear layer width does not match input".into()));
        }
        Ok(Self { shape, layer })
    }
}

impl ExplainableModel for LinearModel {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn record<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        input: Var,
        target: &DecisionTarget,
    ) -> Result<(Var, usize), SaliencyError> {
        let DecisionKind::ClassLogit(k) = target.kind else {
            return Err(SaliencyError::TargetUnreachable(*target));
        };
        if k >= self.layer.out_features() {
            return Err(SaliencyError::TargetUnreachable(*target));
        }
        let y = tape.affine(input, &self.layer)?;
        Ok((y, k))
    }
}

fn check_image<M: ExplainableModel + ?Sized>(model: &M, image: &Image) -> Result<(), SaliencyError> {
    let [c, h, w] = model.input_shape();
    if c != 3 || h != image.height() || w != image.width() {
        return Err(TensorError::ShapeMismatch(format!(
            "model expects {c}x{h}x{w}, image is 3x{}x{}",
            image.height(),
            image.width()
        ))
        .into());
    }
    Ok(())
}

/// Per-channel gradient of the target scalar with respect to `input`.
pub fn input_gradient<M: ExplainableModel + ?Sized>(
    model: &M,
    input: &Tensor,
    target: &DecisionTarget,
    rule: GradientRule,
) -> Result<Tensor, SaliencyError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let (out, idx) = model.record(&mut tape, x, target)?;
    Ok(tape.backward(out, idx, rule, x)?)
}

/// Sum of absolute values over channels of a `[C, H, W]` tensor.
pub fn reduce_channels(t: &Tensor) -> Vec<f32> {
    let s = t.shape();
    let plane = s[1] * s[2];
    let d = t.data();
    (0..plane).map(|i| (0..s[0]).map(|c| d[c * plane + i].abs() as f64).sum::<f64>() as f32).collect()
}

pub fn explain_gradient<M: ExplainableModel + ?Sized>(
    model: &M,
    image: &Image,
    target: &DecisionTarget,
    rule: GradientRule,
) -> Result<SaliencyMap, SaliencyError> {
    check_image(model, image)?;
    let g = input_gradient(model, &image.to_tensor(), target, rule)?;
    let method = match rule {
        GradientRule::Standard => Method::Gradient,
        GradientRule::Guided => Method::Gbp,
    };
    Ok(SaliencyMap::from_raw(reduce_channels(&g), image.height(), image.width(), *target, method))
}

fn baseline_tensor(image: &Image, baseline: Baseline) -> Tensor {
    let v = match baseline {
        Baseline::Black => 0.0,
        Baseline::Gray(v) => v,
    };
    Tensor::new(vec![3, image.height(), image.width()], vec![v; image.data().len()]).expect("image shape")
}

/// Signed integrated-gradients attributions, `[3, H, W]`.
///
/// Right Riemann sum over `steps` points `α = k / steps`, `k = 1..=steps`.
pub fn integrated_gradients<M: ExplainableModel + ?Sized>(
    model: &M,
    input: &Tensor,
    baseline: &Tensor,
    target: &DecisionTarget,
    steps: usize,
) -> Result<Tensor, SaliencyError> {
    if steps == 0 {
        return Err(SaliencyError::InvalidParams("ig_steps must be >= 1".into()));
    }
    if input.shape() != baseline.shape() {
        return Err(TensorError::ShapeMismatch("baseline shape differs from input".into()).into());
    }
    let diff: Vec<f64> = input.data().iter().zip(baseline.data()).map(|(&x, &b)| x as f64 - b as f64).collect();
    let mut acc = vec![0.0f64; input.len()];
    let mut point = baseline.clone();
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        for ((p, &b), &d) in point.data_mut().iter_mut().zip(baseline.data()).zip(&diff) {
            *p = (b as f64 + alpha * d) as f32;
        }
        let g = input_gradient(model, &point, target, GradientRule::Standard)?;
        for (a, &gv) in acc.iter_mut().zip(g.data()) {
            *a += gv as f64;
        }
    }
    let data = acc.iter().zip(&diff).map(|(&a, &d)| (d * a / steps as f64) as f32).collect();
    Ok(Tensor::new(input.shape().to_vec(), data)?)
}

pub fn explain_ig<M: ExplainableModel + ?Sized>(
    model: &M,
    image: &Image,
    target: &DecisionTarget,
    params: &MethodParams,
) -> Result<SaliencyMap, SaliencyError> {
    params.validate()?;
    check_image(model, image)?;
    let raw = raw_map(model, &image.to_tensor(), image, target, Method::Ig, params)?;
    Ok(SaliencyMap::from_raw(raw, image.height(), image.width(), *target, Method::Ig))
}

fn raw_map<M: ExplainableModel + ?Sized>(
    model: &M,
    input: &Tensor,
    image: &Image,
    target: &DecisionTarget,
    method: Method,
    params: &MethodParams,
) -> Result<Vec<f32>, SaliencyError> {
    let attr = match method {
        Method::Gradient => input_gradient(model, input, target, GradientRule::Standard)?,
        Method::Gbp => input_gradient(model, input, target, GradientRule::Guided)?,
        Method::Ig => {
            let base = baseline_tensor(image, params.ig_baseline);
            integrated_gradients(model, input, &base, target, params.ig_steps)?
        }
        Method::Sgbp | Method::Sig => return Err(SaliencyError::InvalidParams("smoothing cannot be nested".into())),
    };
    Ok(reduce_channels(&attr))
}

/// Mean of the base method's raw maps over `sg_samples` noisy copies of the
/// image, before normalization. Noise std is `sg_noise` times the image's
/// value range (or 1 for constant images).
pub fn smoothgrad_raw<M: ExplainableModel + ?Sized>(
    base: Method,
    model: &M,
    image: &Image,
    target: &DecisionTarget,
    params: &MethodParams,
) -> Result<Vec<f32>, SaliencyError> {
    params.validate()?;
    check_image(model, image)?;
    let (lo, hi) = image.value_range();
    let range = if hi > lo { hi - lo } else { 1.0 };
    let std = params.sg_noise as f64 * range as f64;
    let normal = Normal::new(0.0, std).map_err(|e| SaliencyError::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let clean = image.to_tensor();
    let mut acc = vec![0.0f32; image.pixel_count()];
    for _ in 0..params.sg_samples {
        let mut noisy = clean.clone();
        if std > 0.0 {
            for v in noisy.data_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)) as f32;
            }
        }
        let raw = raw_map(model, &noisy, image, target, base, params)?;
        acc.iter_mut().zip(raw).for_each(|(a, r)| *a += r);
    }
    let n = params.sg_samples as f32;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn explain_smoothgrad<M: ExplainableModel + ?Sized>(
    base: Method,
    model: &M,
    image: &Image,
    target: &DecisionTarget,
    params: &MethodParams,
) -> Result<SaliencyMap, SaliencyError> {
    let method = match base {
        Method::Gbp => Method::Sgbp,
        Method::Ig => Method::Sig,
        other => return Err(SaliencyError::InvalidParams(format!("no smoothed variant of {}", other.name()))),
    };
    let raw = smoothgrad_raw(base, model, image, target, params)?;
    Ok(SaliencyMap::from_raw(raw, image.height(), image.width(), *target, method))
}

/// Dispatches to the explainer for `method`.
pub fn explain<M: ExplainableModel + ?Sized>(
    method: Method,
    model: &M,
    image: &Image,
    target: &DecisionTarget,
    params: &MethodParams,
) -> Result<SaliencyMap, SaliencyError> {
    match method {
        Method::Gradient => explain_gradient(model, image, target, GradientRule::Standard),
        Method::Gbp => explain_gradient(model, image, target, GradientRule::Guided),
        Method::Ig => explain_ig(model, image, target, params),
        Method::Sgbp | Method::Sig => {
            explain_smoothgrad(method.smoothed_base().expect("smoothed"), model, image, target, params)
        }
    }
}

/// Result of matching a ground-truth box to the detector's pre-NMS outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthMatch {
    pub target: DecisionTarget,
    pub iou: f64,
    /// Set when no decoded box overlaps the ground truth; the target then
    /// points at the anchor whose box center is nearest.
    pub no_overlap: bool,
}

/// Picks the anchor whose decoded box best overlaps `gt_box`, for explaining
/// missed or misclassified objects. The class target defaults to `gt_class`.
pub fn target_from_groundtruth(
    model: &DetectorModel,
    image: &Image,
    gt_box: &BoxCoords,
    gt_class: usize,
) -> Result<GroundTruthMatch, SaliencyError> {
    if gt_class >= model.num_classes() {
        return Err(SaliencyError::InvalidParams(format!("class {gt_class} out of range")));
    }
    if !(gt_box.x_min <= gt_box.x_max && gt_box.y_min <= gt_box.y_max) {
        return Err(SaliencyError::InvalidParams("ground-truth box corners out of order".into()));
    }
    let raw = model.raw_outputs(image)?;
    let mut best = (0usize, 0.0f64);
    for (a, b) in raw.boxes.iter().enumerate() {
        let v = iou(b, gt_box);
        if v > best.1 {
            best = (a, v);
        }
    }
    let kind = DecisionKind::ClassLogit(gt_class);
    if best.1 > 0.0 {
        return Ok(GroundTruthMatch {
            target: DecisionTarget { anchor_index: best.0, kind },
            iou: best.1,
            no_overlap: false,
        });
    }
    let (gx, gy) = gt_box.center();
    let nearest = raw
        .boxes
        .iter()
        .enumerate()
        .map(|(a, b)| {
            let (cx, cy) = b.center();
            (a, (cx - gx).powi(2) + (cy - gy).powi(2))
        })
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
        .map(|(a, _)| a)
        .unwrap_or(0);
    Ok(GroundTruthMatch { target: DecisionTarget { anchor_index: nearest, kind }, iou: 0.0, no_overlap: true })
}
