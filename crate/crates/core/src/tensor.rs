//! Dense tensors and a single-use reverse-mode tape.
//!
//! A [`Tape`] records every forward operator in execution order. Backward
//! passes walk the record in reverse and propagate a one-hot seed placed on a
//! single output element. The ReLU backward step is selected per pass by
//! [`GradientRule`]: `Standard` is the exact derivative, `Guided` additionally
//! drops negative incoming gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::detector::AnchorGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("seed is not an element recorded on this tape")]
    SeedNotOnTape,
}

/// Row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Backward behaviour of ReLU nodes for one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GradientRule {
    #[default]
    Standard,
    Guided,
}

/// 2-D convolution over a `[C, H, W]` input with square kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self, TensorError> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(TensorError::ShapeMismatch(format!("conv weight must be [out, in, k, k], got {s:?}")));
        }
        if bias.len() != s[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv bias has {} entries for {} output channels",
                bias.len(),
                s[0]
            )));
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch("conv stride must be positive".into()));
        }
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
        if shape.len() != 3 || shape[0] != self.in_channels() {
            return Err(TensorError::ShapeMismatch(format!(
                "conv expects [{}, H, W], got {shape:?}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self
            .output_hw(shape[1], shape[2])
            .ok_or_else(|| TensorError::ShapeMismatch(format!("input {shape:?} smaller than kernel")))?;
        Ok((shape[1], shape[2], oh, ow))
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        let (h, w, oh, ow) = self.check_input(input.shape())?;
        let (cin, cout, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let x = input.data();
        let wt = self.weight.data();
        let mut out = vec![0.0f32; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o] as f64;
                    for c in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[(c * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * cin + c) * k + ky) * k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out)
    }

    fn backward(&self, in_shape: &[usize], grad_out: &[f32]) -> Vec<f32> {
        let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (oh, ow) = self.output_hw(h, w).expect("shape validated in forward");
        let (cout, k) = (self.out_channels(), self.kernel());
        let wt = self.weight.data();
        let mut acc = vec![0.0f64; cin * h * w];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[(o * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let g = g as f64;
                    for c in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc[(c * h + iy as usize) * w + ix as usize] +=
                                    g * wt[((o * cin + c) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                }
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Fully connected layer `y = W x + b` over the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self, TensorError> {
        let s = weight.shape();
        if s.len() != 2 || bias.len() != s[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "affine weight {s:?} incompatible with {} biases",
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        if input.len() != self.in_features() {
            return Err(TensorError::ShapeMismatch(format!(
                "affine expects {} inputs, got {}",
                self.in_features(),
                input.len()
            )));
        }
        let n = self.in_features();
        let wt = self.weight.data();
        let out = (0..self.out_features())
            .map(|o| {
                let row = &wt[o * n..(o + 1) * n];
                let dot: f64 = row.iter().zip(input.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot + self.bias[o] as f64) as f32
            })
            .collect();
        Ok(Tensor::from_vec(out))
    }

    fn backward(&self, grad_out: &[f32]) -> Vec<f32> {
        let n = self.in_features();
        let wt = self.weight.data();
        let mut acc = vec![0.0f64; n];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&wt[o * n..(o + 1) * n]) {
                *a += g as f64 * wv as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    node: usize,
}

#[derive(Debug)]
enum Op<'p> {
    Leaf,
    Conv { input: usize, layer: &'p Conv2d },
    Affine { input: usize, layer: &'p Affine },
    Relu { input: usize },
    Softmax { input: usize },
    Sum { input: usize },
    Gather { input: usize, indices: Vec<usize> },
    DecodeBoxes { input: usize, anchors: &'p AnchorGrid },
}

#[derive(Debug)]
struct Node<'p> {
    op: Op<'p>,
    value: Tensor,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of one forward pass. Parameters are borrowed, so a
/// tape never outlives the model that produced it.
#[derive(Debug)]
pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<'p>, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var { tape: self.id, node: self.nodes.len() - 1 }
    }

    fn index(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id || var.node >= self.nodes.len() {
            return Err(TensorError::SeedNotOnTape);
        }
        Ok(var.node)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let i = self.index(var).expect("variable belongs to another tape");
        &self.nodes[i].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, input: Var, layer: &'p Conv2d) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let value = layer.forward(&self.nodes[i].value)?;
        Ok(self.push(Op::Conv { input: i, layer }, value))
    }

    pub fn affine(&mut self, input: Var, layer: &'p Affine) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let value = layer.forward(&self.nodes[i].value)?;
        Ok(self.push(Op::Affine { input: i, layer }, value))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu { input: i }, value))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        let cols =
            *x.shape().last().ok_or_else(|| TensorError::ShapeMismatch("softmax needs at least one axis".into()))?;
        if cols == 0 {
            return Err(TensorError::ShapeMismatch("softmax over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            out.extend(softmax_row(row));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { input: i }, value))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let total: f64 = self.nodes[i].value.data().iter().map(|&v| v as f64).sum();
        Ok(self.push(Op::Sum { input: i }, Tensor::scalar(total as f32)))
    }

    /// Output element `j` is input element `indices[j]`. Covers reshapes,
    /// permutations and element selection.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        if let Some(&bad) = indices.iter().find(|&&j| j >= x.len()) {
            return Err(TensorError::ShapeMismatch(format!(
                "gather index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let data = indices.iter().map(|&j| x.data()[j]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { input: i, indices }, value))
    }

    /// Converts `[A, 4]` anchor offsets into clipped corner boxes.
    pub fn decode_boxes(&mut self, input: Var, anchors: &'p AnchorGrid) -> Result<Var, TensorError> {
        let i = self.index(input)?;
        let x = &self.nodes[i].value;
        if x.shape() != [anchors.len(), 4] {
            return Err(TensorError::ShapeMismatch(format!(
                "decode expects [{}, 4] offsets, got {:?}",
                anchors.len(),
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(x.len());
        for (a, off) in anchors.anchors().iter().zip(x.data().chunks(4)) {
            let b = crate::detector::decode_offsets(*a, [off[0], off[1], off[2], off[3]]);
            out.extend(b.to_array());
        }
        let value = Tensor::new(vec![anchors.len(), 4], out)?;
        Ok(self.push(Op::DecodeBoxes { input: i, anchors }, value))
    }

    /// Gradient of element `index` of `seed` with respect to `wrt`.
    pub fn backward(&self, seed: Var, index: usize, rule: GradientRule, wrt: Var) -> Result<Tensor, TensorError> {
        let s = self.index(seed)?;
        let target = self.index(wrt)?;
        if index >= self.nodes[s].value.len() {
            return Err(TensorError::SeedNotOnTape);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut seed_grad = vec![0.0f32; self.nodes[s].value.len()];
        seed_grad[index] = 1.0;
        grads[s] = Some(seed_grad);

        for n in (0..=s).rev() {
            if n == target {
                break;
            }
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Leaf => {
                    grads[n] = Some(g);
                }
                Op::Conv { input, layer } => {
                    let gi = layer.backward(self.nodes[*input].value.shape(), &g);
                    accumulate(&mut grads[*input], gi);
                }
                Op::Affine { input, layer } => {
                    accumulate(&mut grads[*input], layer.backward(&g));
                }
                Op::Relu { input } => {
                    let x = self.nodes[*input].value.data();
                    let gi = x.iter().zip(&g).map(|(&xv, &gv)| relu_backward(xv, gv, rule)).collect();
                    accumulate(&mut grads[*input], gi);
                }
                Op::Softmax { input } => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("validated in forward");
                    let mut gi = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        gi.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (yv as f64 * (gv as f64 - dot)) as f32));
                    }
                    accumulate(&mut grads[*input], gi);
                }
                Op::Sum { input } => {
                    let len = self.nodes[*input].value.len();
                    accumulate(&mut grads[*input], vec![g[0]; len]);
                }
                Op::Gather { input, indices } => {
                    let mut gi = vec![0.0f32; self.nodes[*input].value.len()];
                    for (&j, &gv) in indices.iter().zip(&g) {
                        gi[j] += gv;
                    }
                    accumulate(&mut grads[*input], gi);
                }
                Op::DecodeBoxes { input, anchors } => {
                    let off = self.nodes[*input].value.data();
                    let mut gi = vec![0.0f32; off.len()];
                    for (a, anchor) in anchors.anchors().iter().enumerate() {
                        let o = &off[a * 4..a * 4 + 4];
                        let jac = crate::detector::decode_jacobian(*anchor, [o[0], o[1], o[2], o[3]]);
                        for (coord, row) in jac.iter().enumerate() {
                            let gv = g[a * 4 + coord] as f64;
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, d) in row.iter().enumerate() {
                                gi[a * 4 + t] += (gv * d) as f32;
                            }
                        }
                    }
                    accumulate(&mut grads[*input], gi);
                }
            }
        }

        let data = grads[target].take().unwrap_or_else(|| vec![0.0; self.nodes[target].value.len()]);
        Tensor::new(self.nodes[target].value.shape().to_vec(), data)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Subgradient at exactly zero is zero under both rules.
pub fn relu_backward(forward_input: f32, incoming: f32, rule: GradientRule) -> f32 {
    let open = forward_input > 0.0;
    match rule {
        GradientRule::Standard if open => incoming,
        GradientRule::Guided if open && incoming > 0.0 => incoming,
        _ => 0.0,
    }
}

pub fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine(out: usize, inp: usize, w: Vec<f32>, b: Vec<f32>) -> Affine {
        Affine::new(Tensor::new(vec![out, inp], w).unwrap(), b).unwrap()
    }

    #[test]
    fn relu_forward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.relu(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let p = tape.leaf(Tensor::from_vec(vec![3.5]));
        let y = tape.relu(p).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);
    }

    #[test]
    fn guided_single_relu() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s, 0, GradientRule::Guided, x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn standard_and_guided_agree_when_everything_is_positive() {
        let l1 = affine(2, 2, vec![1.0, 0.5, 0.25, 1.0], vec![0.1, 0.1]);
        let l2 = affine(1, 2, vec![2.0, 3.0], vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let h = tape.affine(x, &l1).unwrap();
        let h = tape.relu(h).unwrap();
        let y = tape.affine(h, &l2).unwrap();
        let gs = tape.backward(y, 0, GradientRule::Standard, x).unwrap();
        let gg = tape.backward(y, 0, GradientRule::Guided, x).unwrap();
        assert_eq!(gs, gg);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        for rule in [GradientRule::Standard, GradientRule::Guided] {
            assert_eq!(relu_backward(0.0, 1.0, rule), 0.0);
        }
    }

    #[test]
    fn identity_1x1_conv() {
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let conv = Conv2d::new(Tensor::new(vec![3, 3, 1, 1], w).unwrap(), vec![0.0; 3], 1, 0).unwrap();
        let input = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f32 * 0.3 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = tape.conv2d(x, &conv).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_weight_affine_is_bias() {
        let l = affine(2, 3, vec![0.0; 6], vec![0.7, -0.2]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![5.0, -3.0, 1.0]));
        let y = tape.affine(x, &l).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.2]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let l = affine(1, 3, vec![1.0; 3], vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.affine(x, &l), Err(TensorError::ShapeMismatch(_))));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let conv = Conv2d::new(Tensor::zeros(vec![1, 2, 3, 3]), vec![0.0], 1, 0).unwrap();
        let img = tape.leaf(Tensor::zeros(vec![3, 4, 4]));
        assert!(matches!(tape.conv2d(img, &conv), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn seed_from_another_tape_is_rejected() {
        let mut a = Tape::new();
        let xa = a.leaf(Tensor::from_vec(vec![1.0]));
        let mut b = Tape::new();
        let xb = b.leaf(Tensor::from_vec(vec![1.0]));
        let yb = b.sum(xb).unwrap();
        assert_eq!(a.backward(yb, 0, GradientRule::Standard, xa), Err(TensorError::SeedNotOnTape));
        assert_eq!(b.backward(yb, 1, GradientRule::Standard, xb), Err(TensorError::SeedNotOnTape));
    }

    struct Net {
        conv: Conv2d,
        fc: Affine,
    }

    fn random_net(rng: &mut ChaCha8Rng) -> Net {
        let w: Vec<f32> = (0..4 * 2 * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b: Vec<f32> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
        let conv = Conv2d::new(Tensor::new(vec![4, 2, 3, 3], w).unwrap(), b, 2, 1).unwrap();
        let w: Vec<f32> = (0..3 * 16).map(|_| rng.random_range(-0.5..0.5)).collect();
        let fc = affine(3, 16, w, vec![0.0, 0.1, -0.1]);
        Net { conv, fc }
    }

    /// conv -> relu -> affine -> softmax, seed on one probability.
    fn run(net: &Net, input: &Tensor) -> (Vec<f32>, Vec<f32>, Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let c = tape.conv2d(x, &net.conv).unwrap();
        let pre = tape.value(c).data().to_vec();
        let r = tape.relu(c).unwrap();
        let f = tape.affine(r, &net.fc).unwrap();
        let p = tape.softmax(f).unwrap();
        let out = tape.value(p).data().to_vec();
        let g = tape.backward(p, 1, GradientRule::Standard, x).unwrap();
        (pre, out, g)
    }

    #[test]
    fn finite_differences_on_small_conv_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..20 {
            let net = random_net(&mut rng);
            let input = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let (pre, _, grad) = run(&net, &input);
            if pre.iter().any(|v| v.abs() < 1e-2) {
                continue;
            }
            let h = 1e-3f32;
            for i in 0..input.len() {
                let mut plus = input.clone();
                plus.data_mut()[i] += h;
                let mut minus = input.clone();
                minus.data_mut()[i] -= h;
                let (pp, fp, _) = run(&net, &plus);
                let (pm, fm, _) = run(&net, &minus);
                let same = |a: &[f32]| a.iter().zip(&pre).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
                if !same(&pp) || !same(&pm) {
                    continue;
                }
                let numeric = (fp[1] as f64 - fm[1] as f64) / (2.0 * h as f64);
                let analytic = grad.data()[i] as f64;
                let scale = numeric.abs().max(analytic.abs()).max(1e-2);
                assert!((numeric - analytic).abs() / scale < 1e-2, "{numeric} vs {analytic}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = random_net(&mut rng);
        let input = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let c = tape.conv2d(x, &net.conv).unwrap();
        let r = tape.relu(c).unwrap();
        let f = tape.affine(r, &net.fc).unwrap();
        for rule in [GradientRule::Standard, GradientRule::Guided] {
            let a = tape.backward(f, 2, rule, x).unwrap();
            let b = tape.backward(f, 2, rule, x).unwrap();
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let g = tape.gather(x, vec![2, 0, 2], vec![3]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 3.0]);
        let s = tape.sum(g).unwrap();
        let grad = tape.backward(s, 0, GradientRule::Standard, x).unwrap();
        assert_eq!(grad.data(), &[1.0, 0.0, 2.0]);
    }
}
