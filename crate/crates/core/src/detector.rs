//! A small single-stage anchor detector.
//!
//! Three stride-2 `3x3` conv + ReLU blocks reduce a `32x32` RGB input to a
//! `4x4` feature map. Two `1x1` heads predict, for each of the three anchors
//! at every cell, `K` class logits and four center-size offsets. Class `0` is
//! background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::tensor::{Conv2d, Tape, Tensor, TensorError, Var};

/// Offsets for `tw`/`th` are clamped here before exponentiation.
pub const MAX_LOG_SCALE: f32 = 10.0;

/// Widens the seeded class-logit spread so random weights yield confident
/// detections on typical scenes.
const CLASS_HEAD_GAIN: f32 = 2.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("input is {got_h}x{got_w}, model expects {expected}x{expected}")]
    InputSizeMismatch { expected: usize, got_h: usize, got_w: usize },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Corner-form box in normalized image coordinates. Serialized as
/// `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoxCoords {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BoxCoords {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        let w = (self.x_max as f64 - self.x_min as f64).max(0.0);
        let h = (self.y_max as f64 - self.y_min as f64).max(0.0);
        w * h
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min as f64 + self.x_max as f64) / 2.0, (self.y_min as f64 + self.y_max as f64) / 2.0)
    }
}

impl From<[f32; 4]> for BoxCoords {
    fn from(a: [f32; 4]) -> Self {
        Self::from_array(a)
    }
}

impl From<BoxCoords> for [f32; 4] {
    fn from(b: BoxCoords) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let iw = (a.x_max.min(b.x_max) as f64 - a.x_min.max(b.x_min) as f64).max(0.0);
    let ih = (a.y_max.min(b.y_max) as f64 - a.y_min.max(b.y_min) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Anchor in center-size form, normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl Anchor {
    pub fn corners(&self) -> BoxCoords {
        decode_offsets(*self, [0.0; 4])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    anchors: Vec<Anchor>,
}

impl AnchorGrid {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self, DetectorError> {
        for a in &anchors {
            let ok = a.w > 0.0 && a.h > 0.0 && (0.0..=1.0).contains(&a.cx) && (0.0..=1.0).contains(&a.cy);
            if !ok {
                return Err(DetectorError::InvalidConfig(format!("invalid anchor {a:?}")));
            }
        }
        Ok(Self { anchors })
    }

    /// Anchors ordered by (row, col, aspect ratio).
    pub fn regular(cells: usize, scale: f32, aspect_ratios: &[f32]) -> Result<Self, DetectorError> {
        let mut anchors = Vec::with_capacity(cells * cells * aspect_ratios.len());
        for row in 0..cells {
            for col in 0..cells {
                for &ar in aspect_ratios {
                    anchors.push(Anchor {
                        cx: (col as f32 + 0.5) / cells as f32,
                        cy: (row as f32 + 0.5) / cells as f32,
                        w: scale * ar.sqrt(),
                        h: scale / ar.sqrt(),
                    });
                }
            }
        }
        Self::new(anchors)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn decode_unclipped(anchor: Anchor, offsets: [f32; 4]) -> [f64; 4] {
    let [tx, ty, tw, th] = offsets.map(|v| v as f64);
    let (cx, cy, w, h) = (anchor.cx as f64, anchor.cy as f64, anchor.w as f64, anchor.h as f64);
    let lim = MAX_LOG_SCALE as f64;
    let ccx = cx + tx * w;
    let ccy = cy + ty * h;
    let bw = w * tw.clamp(-lim, lim).exp();
    let bh = h * th.clamp(-lim, lim).exp();
    [ccx - bw / 2.0, ccy - bh / 2.0, ccx + bw / 2.0, ccy + bh / 2.0]
}

/// Center-size decode `(cx + tx·w, cy + ty·h, w·e^tw, h·e^th)` to clipped corners.
pub fn decode_offsets(anchor: Anchor, offsets: [f32; 4]) -> BoxCoords {
    let raw = decode_unclipped(anchor, offsets);
    let c = raw.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 });
    BoxCoords::from_array(c)
}

/// `jac[coord][offset]` of the clipped decode. Clipped coordinates and clamped
/// log-scales contribute zero.
pub fn decode_jacobian(anchor: Anchor, offsets: [f32; 4]) -> [[f64; 4]; 4] {
    let raw = decode_unclipped(anchor, offsets);
    let lim = MAX_LOG_SCALE as f64;
    let (w, h) = (anchor.w as f64, anchor.h as f64);
    let tw = offsets[2] as f64;
    let th = offsets[3] as f64;
    let dbw = if tw.abs() < lim { w * tw.exp() } else { 0.0 };
    let dbh = if th.abs() < lim { h * th.exp() } else { 0.0 };
    let mut jac =
        [[w, 0.0, -dbw / 2.0, 0.0], [0.0, h, 0.0, -dbh / 2.0], [w, 0.0, dbw / 2.0, 0.0], [0.0, h, 0.0, dbh / 2.0]];
    for (row, v) in jac.iter_mut().zip(raw) {
        if !(0.0..=1.0).contains(&v) {
            *row = [0.0; 4];
        }
    }
    jac
}

/// One decoded detection together with the anchor that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
    pub class_id: usize,
    pub score: f32,
    pub anchor_index: usize,
    pub logits: Vec<f32>,
}

/// Greedy per-class non-maximum suppression. Output is ordered by descending
/// score, then ascending anchor index.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

fn sort_detections(d: &mut [Detection]) {
    d.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor_index.cmp(&b.anchor_index)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub backbone_channels: Vec<usize>,
    pub num_classes: usize,
    pub aspect_ratios: Vec<f32>,
    pub anchor_scale: f32,
    pub score_threshold: f32,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            backbone_channels: vec![8, 16, 16],
            num_classes: 5,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            anchor_scale: 0.35,
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn feature_cells(&self) -> usize {
        self.input_size >> self.backbone_channels.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.feature_cells().pow(2) * self.anchors_per_cell()
    }

    fn validate(&self) -> Result<(), DetectorError> {
        if self.num_classes < 2 {
            return Err(DetectorError::InvalidConfig("need at least 2 classes including background".into()));
        }
        if self.backbone_channels.is_empty() || self.feature_cells() == 0 {
            return Err(DetectorError::InvalidConfig("backbone leaves no feature cells".into()));
        }
        if self.feature_cells() << self.backbone_channels.len() != self.input_size {
            return Err(DetectorError::InvalidConfig("input size must be divisible by the backbone stride".into()));
        }
        if self.aspect_ratios.is_empty() {
            return Err(DetectorError::InvalidConfig("no aspect ratios".into()));
        }
        Ok(())
    }
}

/// All trainable parameters, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorLayers {
    pub backbone: Vec<Conv2d>,
    pub class_head: Conv2d,
    pub box_head: Conv2d,
}

impl DetectorLayers {
    pub fn iter(&self) -> impl Iterator<Item = &Conv2d> {
        self.backbone.iter().chain([&self.class_head, &self.box_head])
    }
}

/// Immutable detector; safe to share across threads.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    config: DetectorConfig,
    layers: DetectorLayers,
    anchors: AnchorGrid,
    class_gather: Vec<usize>,
    box_gather: Vec<usize>,
}

/// One recorded forward pass.
pub struct ForwardPass<'m> {
    pub tape: Tape<'m>,
    pub input: Var,
    /// `[A, K]`
    pub logits: Var,
    /// `[A, K]`
    pub probs: Var,
    /// `[A, 4]` clipped normalized corners.
    pub boxes: Var,
    /// Inputs of every ReLU, in forward order.
    pub pre_activations: Vec<Var>,
}

/// Head variables recorded by [`DetectorModel::record`].
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// `[A, K]`
    pub logits: Var,
    /// `[A, 4]`
    pub boxes: Var,
    pub pre_activations: Vec<Var>,
}

/// Pre-NMS outputs of every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub num_classes: usize,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub boxes: Vec<BoxCoords>,
}

impl RawOutputs {
    pub fn anchor_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn logits_of(&self, anchor: usize) -> &[f32] {
        &self.logits[anchor * self.num_classes..(anchor + 1) * self.num_classes]
    }

    pub fn probs_of(&self, anchor: usize) -> &[f32] {
        &self.probs[anchor * self.num_classes..(anchor + 1) * self.num_classes]
    }

    /// Argmax class and its probability at `anchor`. Ties go to the lower id.
    pub fn top_class(&self, anchor: usize) -> (usize, f32) {
        let mut best = (0, f32::NEG_INFINITY);
        for (k, &p) in self.probs_of(anchor).iter().enumerate() {
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }
}

impl DetectorModel {
    pub fn from_layers(config: DetectorConfig, layers: DetectorLayers) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut cin = 3;
        if layers.backbone.len() != config.backbone_channels.len() {
            return Err(DetectorError::InvalidConfig("backbone depth does not match config".into()));
        }
        for (conv, &cout) in layers.backbone.iter().zip(&config.backbone_channels) {
            if conv.in_channels() != cin || conv.out_channels() != cout || conv.stride != 2 {
                return Err(DetectorError::InvalidConfig(format!(
                    "backbone layer {cin}->{cout} stride 2 expected, got {}->{} stride {}",
                    conv.in_channels(),
                    conv.out_channels(),
                    conv.stride
                )));
            }
            if conv.kernel() != 2 * conv.padding + 1 {
                return Err(DetectorError::InvalidConfig("backbone kernels must be 'same' padded".into()));
            }
            cin = cout;
        }
        let per_cell = config.anchors_per_cell();
        let k = config.num_classes;
        for (head, width) in [(&layers.class_head, per_cell * k), (&layers.box_head, per_cell * 4)] {
            if head.in_channels() != cin || head.out_channels() != width || head.kernel() != 1 || head.stride != 1 {
                return Err(DetectorError::InvalidConfig(format!("head must be a 1x1 conv {cin}->{width}")));
            }
        }
        let cells = config.feature_cells();
        let anchors = AnchorGrid::regular(cells, config.anchor_scale, &config.aspect_ratios)?;
        let class_gather = head_gather(cells, per_cell, k);
        let box_gather = head_gather(cells, per_cell, 4);
        Ok(Self { config, layers, anchors, class_gather, box_gather })
    }

    /// Deterministic pseudo-random weights.
    pub fn seeded(config: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::new();
        let mut cin = 3;
        for &cout in &config.backbone_channels {
            backbone.push(random_conv(&mut rng, cin, cout, 3, 2, 1, 0.05)?);
            cin = cout;
        }
        let per_cell = config.anchors_per_cell();
        let mut class_head = random_conv(&mut rng, cin, per_cell * config.num_classes, 1, 1, 0, 0.5)?;
        class_head.weight.data_mut().iter_mut().for_each(|w| *w *= CLASS_HEAD_GAIN);
        let box_head = random_conv(&mut rng, cin, per_cell * 4, 1, 1, 0, 0.05)?;
        Self::from_layers(config, DetectorLayers { backbone, class_head, box_head })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn layers(&self) -> &DetectorLayers {
        &self.layers
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<(), DetectorError> {
        let s = self.config.input_size;
        if height != s || width != s {
            return Err(DetectorError::InputSizeMismatch { expected: s, got_h: height, got_w: width });
        }
        Ok(())
    }

    /// Appends the network to `tape`, reading from `input`.
    pub fn record<'m>(&'m self, tape: &mut Tape<'m>, input: Var) -> Result<HeadOutputs, DetectorError> {
        let mut h = input;
        let mut pre_activations = Vec::with_capacity(self.layers.backbone.len());
        for conv in &self.layers.backbone {
            let z = tape.conv2d(h, conv)?;
            pre_activations.push(z);
            h = tape.relu(z)?;
        }
        let a = self.anchors.len();
        let k = self.config.num_classes;
        let cls = tape.conv2d(h, &self.layers.class_head)?;
        let logits = tape.gather(cls, self.class_gather.clone(), vec![a, k])?;
        let off = tape.conv2d(h, &self.layers.box_head)?;
        let offsets = tape.gather(off, self.box_gather.clone(), vec![a, 4])?;
        let boxes = tape.decode_boxes(offsets, &self.anchors)?;
        Ok(HeadOutputs { logits, boxes, pre_activations })
    }

    /// Records the forward pass of a `[3, S, S]` input.
    pub fn forward(&self, input: Tensor) -> Result<ForwardPass<'_>, DetectorError> {
        let s = input.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::ShapeMismatch(format!("expected [3, H, W] input, got {s:?}")).into());
        }
        self.check_input(s[1], s[2])?;
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let heads = self.record(&mut tape, x)?;
        let probs = tape.softmax(heads.logits)?;
        Ok(ForwardPass {
            tape,
            input: x,
            logits: heads.logits,
            probs,
            boxes: heads.boxes,
            pre_activations: heads.pre_activations,
        })
    }

    pub fn raw_outputs_tensor(&self, input: Tensor) -> Result<RawOutputs, DetectorError> {
        let pass = self.forward(input)?;
        let boxes =
            pass.tape.value(pass.boxes).data().chunks(4).map(|c| BoxCoords::new(c[0], c[1], c[2], c[3])).collect();
        Ok(RawOutputs {
            num_classes: self.config.num_classes,
            logits: pass.tape.value(pass.logits).data().to_vec(),
            probs: pass.tape.value(pass.probs).data().to_vec(),
            boxes,
        })
    }

    pub fn raw_outputs(&self, image: &Image) -> Result<RawOutputs, DetectorError> {
        self.raw_outputs_tensor(image.to_tensor())
    }

    /// Score-thresholded candidates with non-empty boxes, before NMS.
    pub fn candidates(&self, raw: &RawOutputs) -> Vec<Detection> {
        (0..raw.anchor_count())
            .filter_map(|a| {
                let (class_id, score) = raw.top_class(a);
                let keep = class_id != 0 && score >= self.config.score_threshold && raw.boxes[a].area() > 0.0;
                keep.then(|| Detection {
                    bbox: raw.boxes[a],
                    class_id,
                    score,
                    anchor_index: a,
                    logits: raw.logits_of(a).to_vec(),
                })
            })
            .collect()
    }

    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>, DetectorError> {
        self.check_input(image.height(), image.width())?;
        let raw = self.raw_outputs(image)?;
        Ok(nms(&self.candidates(&raw), self.config.nms_iou))
    }
}

/// Maps a `[P*D, cells, cells]` head output to `[cells*cells*P, D]` rows.
fn head_gather(cells: usize, per_cell: usize, width: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(cells * cells * per_cell * width);
    for row in 0..cells {
        for col in 0..cells {
            for p in 0..per_cell {
                for d in 0..width {
                    idx.push(((p * width + d) * cells + row) * cells + col);
                }
            }
        }
    }
    idx
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias_scale: f32,
) -> Result<Conv2d, DetectorError> {
    let fan_in = (cin * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let w = (0..cout * cin * k * k).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..cout).map(|_| rng.random_range(-bias_scale..=bias_scale)).collect();
    Ok(Conv2d::new(Tensor::new(vec![cout, cin, k, k], w)?, b, stride, padding)?)
}
