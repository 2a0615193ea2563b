//! Reference Feature Merger with reverse-mode derivatives.
//!
//! Everything runs in `f64` on a small tape ([`Graph`]) so the analytic
//! gradients can be checked against central finite differences. Token
//! matrices are row-major `(H·W) × C`, which is the same memory layout as a
//! row-major `H × W × C` [`FeatureMap`].

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergerError {
    #[error("shape mismatch at {stage}: {detail}")]
    Shape { stage: &'static str, detail: String },
    #[error("invalid merger config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

fn shape_err(stage: &'static str, detail: impl Into<String>) -> MergerError {
    MergerError::Shape {
        stage,
        detail: detail.into(),
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| 0.0).map_in_place(|_| rng.random_range(-scale..scale))
    }

    fn map_in_place(mut self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.data.iter_mut().for_each(|x| *x = f(*x));
        self
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sparse linear map between token sets: `out[i] = Σ w · in[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix {
    pub rows_in: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    /// Tap `(dy, dx)` of a zero-padded 3×3 neighborhood on an `h × w` raster.
    pub fn shift(h: usize, w: usize, dy: i64, dx: i64) -> Self {
        let mut entries = Vec::with_capacity(h * w);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y + dy, x + dx);
                if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                    entries.push(vec![((sy * w as i64 + sx) as usize, 1.0)]);
                } else {
                    entries.push(Vec::new());
                }
            }
        }
        Self {
            rows_in: h * w,
            entries,
        }
    }

    /// Bilinear ×2 upsampling with half-pixel centers, edge-clamped.
    pub fn upsample2(h: usize, w: usize) -> Self {
        let axis = |n: usize, o: usize| -> [(usize, f64); 2] {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let l = src - i0 as f64;
            [(i0, 1.0 - l), (i1, l)]
        };
        let mut entries = Vec::with_capacity(4 * h * w);
        for oy in 0..2 * h {
            let ys = axis(h, oy);
            for ox in 0..2 * w {
                let xs = axis(w, ox);
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(y, wy) in &ys {
                    for &(x, wx) in &xs {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            row.push((y * w + x, wgt));
                        }
                    }
                }
                entries.push(row);
            }
        }
        Self {
            rows_in: h * w,
            entries,
        }
    }

    fn apply(&self, m: &Mat) -> Mat {
        let mut out = Mat::zeros(self.entries.len(), m.cols);
        for (i, row) in self.entries.iter().enumerate() {
            let o = out.row_mut(i);
            for &(j, wgt) in row {
                for (a, b) in o.iter_mut().zip(m.row(j)) {
                    *a += wgt * b;
                }
            }
        }
        out
    }
}

/// Deliberate backward-pass defects, used to show the gradient check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Softmax backward drops the row-dot correction term.
    SoftmaxBackward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Norm(Var, Vec<f64>),
    Softmax(Var),
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MixRows(Var, std::sync::Arc<RowMix>),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + 1·bᵀ` for a `1 × cols` row `b`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        assert_eq!(bias.len(), v.cols, "add_row width");
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Column-wise gain by a `1 × cols` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let gain = self.value(b).data.clone();
        let mut v = self.value(a).clone();
        assert_eq!(gain.len(), v.cols, "mul_row width");
        for r in 0..v.rows {
            for (x, g) in v.row_mut(r).iter_mut().zip(&gain) {
                *x *= g;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).clone().map_in_place(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Per-row standardization (layer norm without affine).
    pub fn norm(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let n = v.cols as f64;
        let mut inv_std = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(v, Op::Norm(a, inv_std))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).clone().map_in_place(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols, "slice_cols range");
        let v = Mat::from_fn(src.rows, len, |r, c| src.get(r, start + c));
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols rows");
            for r in 0..rows {
                v.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mix_rows(&mut self, a: Var, mix: std::sync::Arc<RowMix>) -> Var {
        assert_eq!(mix.rows_in, self.value(a).rows, "mix_rows input rows");
        let v = mix.apply(self.value(a));
        self.push(v, Op::MixRows(a, mix))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(v, Op::Sum(a))
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.matmul(&bv.transpose()));
                    acc(&mut grads, *b, av.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * g.cols + c] *= bv.data[c];
                            gb.data[c] += g.get(r, c) * av.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.clone().map_in_place(|x| x * s)),
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Norm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                            *out = istd / n * (n * gr[c] - sum_g - yr[c] * sum_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let mut ga = Mat::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        let (gr, sr) = (g.row(r), s.row(r));
                        let dot: f64 = match self.fault {
                            Some(Fault::SoftmaxBackward) => 0.0,
                            None => gr.iter().zip(sr).map(|(a, b)| a * b).sum(),
                        };
                        for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                            *out = sr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (o, xv) in ga.data.iter_mut().zip(&x.data) {
                        *o *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let gp = Mat::from_fn(g.rows, cols, |r, c| g.get(r, offset + c));
                        acc(&mut grads, *p, gp);
                        offset += cols;
                    }
                }
                Op::MixRows(a, mix) => {
                    let mut ga = Mat::zeros(mix.rows_in, g.cols);
                    for (i, row) in mix.entries.iter().enumerate() {
                        for &(j, wgt) in row {
                            let gi = g.row(i).to_vec();
                            for (o, x) in ga.row_mut(j).iter_mut().zip(gi) {
                                *o += wgt * x;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::from_vec(r, c, vec![g.data[0]; r * c]));
                }
            }
        }
        grads
    }
}

/// Dense `H × W × C` raster, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self, MergerError> {
        if channels == 0 {
            return Err(shape_err("feature map", "channels must be > 0"));
        }
        if values.len() != height * width * channels {
            return Err(shape_err(
                "feature map",
                format!("{} values for {height}x{width}x{channels}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MergerError::NonFinite("feature map".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_tokens(height: usize, width: usize, m: Mat) -> Result<Self, MergerError> {
        if m.rows != height * width {
            return Err(shape_err(
                "feature map",
                format!("{} tokens for {height}x{width}", m.rows),
            ));
        }
        Self::new(height, width, m.cols, m.data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    /// One row per pixel.
    pub fn tokens(&self) -> Mat {
        Mat::from_vec(self.height * self.width, self.channels, self.values.clone())
    }

    fn random(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let values = (0..height * width * channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            height,
            width,
            channels,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    Pe2d,
    Pe3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbedding {
    pub kind: PosKind,
    pub map: FeatureMap,
}

/// Fixed sinusoidal 2D embedding: the first half of the channels encode the
/// row, the second half the column.
pub fn sinusoidal_pe2d(height: usize, width: usize, channels: usize) -> PosEmbedding {
    let half = channels / 2;
    let mut values = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let (pos, i, n) = if c < half {
                    (y, c, half)
                } else {
                    (x, c - half, channels - half)
                };
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / n.max(1) as f64);
                let a = pos as f64 * freq;
                values.push(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    PosEmbedding {
        kind: PosKind::Pe2d,
        map: FeatureMap {
            height,
            width,
            channels,
            values,
        },
    }
}

/// Which backbone feature a merger input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSel {
    Encoder,
    Decoder(usize),
}

impl fmt::Display for LayerSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSel::Encoder => write!(f, "encoder"),
            LayerSel::Decoder(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for LayerSel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LayerSel::Encoder => s.serialize_str("encoder"),
            LayerSel::Decoder(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "encoder" => Ok(LayerSel::Encoder),
            serde_json::Value::Number(n) if n.is_u64() => {
                Ok(LayerSel::Decoder(n.as_u64().unwrap() as usize))
            }
            other => Err(serde::de::Error::custom(format!(
                "expected \"encoder\" or a layer index, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergerConfig {
    pub selected_layers: Vec<LayerSel>,
    pub c_in: usize,
    pub c_mid: usize,
    /// Width of the decoder features before their 1×1 projection.
    pub c_dec: usize,
    /// Width of the 2D appearance features fused at the output resolution.
    pub c_f2d: usize,
    pub c_out: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for MergerConfig {
    fn default() -> Self {
        Self {
            selected_layers: vec![
                LayerSel::Encoder,
                LayerSel::Decoder(4),
                LayerSel::Decoder(7),
                LayerSel::Decoder(11),
            ],
            c_in: 1024,
            c_mid: 768,
            c_dec: 768,
            c_f2d: 256,
            c_out: 256,
            heads: 8,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

impl MergerConfig {
    /// Small widths for exhaustive derivative checks.
    pub fn desk() -> Self {
        Self {
            c_in: 8,
            c_mid: 8,
            c_dec: 8,
            c_f2d: 4,
            c_out: 4,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn decoder_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected_layers.iter().filter_map(|l| match l {
            LayerSel::Decoder(i) => Some(*i),
            LayerSel::Encoder => None,
        })
    }

    pub fn validate(&self) -> Result<(), MergerError> {
        let bad = |m: String| Err(MergerError::InvalidConfig(m));
        if self.selected_layers.first() != Some(&LayerSel::Encoder) {
            return bad("selected_layers must start with the encoder".into());
        }
        if self.selected_layers[1..].contains(&LayerSel::Encoder) {
            return bad("encoder may only appear first".into());
        }
        let decs: Vec<usize> = self.decoder_layers().collect();
        let mut uniq = decs.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != decs.len() {
            return bad("decoder layers must be distinct".into());
        }
        for (name, v) in [
            ("c_in", self.c_in),
            ("c_mid", self.c_mid),
            ("c_dec", self.c_dec),
            ("c_f2d", self.c_f2d),
            ("c_out", self.c_out),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !self.c_mid.is_multiple_of(self.heads) {
            return bad(format!(
                "c_mid {} not divisible by heads {}",
                self.c_mid, self.heads
            ));
        }
        Ok(())
    }

    /// Name and shape of every learnable tensor, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (c, f) = (self.c_mid, self.c_mid * self.ffn_mult);
        let mut out = vec![
            ("proj.w".to_string(), self.c_in, c),
            ("proj.b".to_string(), 1, c),
            ("pe3d.w1".to_string(), 6, c),
            ("pe3d.b1".to_string(), 1, c),
            ("pe3d.w2".to_string(), c, c),
            ("pe3d.b2".to_string(), 1, c),
        ];
        let ln = |out: &mut Vec<(String, usize, usize)>, p: &str| {
            out.push((format!("{p}.g"), 1, c));
            out.push((format!("{p}.b"), 1, c));
        };
        let attn = |out: &mut Vec<(String, usize, usize)>, p: &str| {
            for (n, r, cc) in [
                ("wq", c, c),
                ("bq", 1, c),
                ("wk", c, c),
                ("wv", c, c),
                ("bv", 1, c),
                ("wo", c, c),
                ("bo", 1, c),
            ] {
                out.push((format!("{p}.{n}"), r, cc));
            }
        };
        ln(&mut out, "enc.sa.ln");
        attn(&mut out, "enc.sa");
        for i in self.decoder_layers() {
            let p = format!("dec{i}");
            out.push((format!("{p}.proj.w"), self.c_dec, c));
            out.push((format!("{p}.proj.b"), 1, c));
            ln(&mut out, &format!("{p}.sa.ln"));
            attn(&mut out, &format!("{p}.sa"));
            ln(&mut out, &format!("{p}.ca.ln"));
            ln(&mut out, &format!("{p}.ca.lnkv"));
            attn(&mut out, &format!("{p}.ca"));
            ln(&mut out, &format!("{p}.ffn.ln"));
            out.push((format!("{p}.ffn.w1"), c, f));
            out.push((format!("{p}.ffn.b1"), 1, f));
            out.push((format!("{p}.ffn.w2"), f, c));
            out.push((format!("{p}.ffn.b2"), 1, c));
        }
        out.push(("up.conv.w".into(), 9 * c, c));
        out.push(("up.conv.b".into(), 1, c));
        out.push(("out.conv.w".into(), 9 * (c + self.c_f2d), self.c_out));
        out.push(("out.conv.b".into(), 1, self.c_out));
        out
    }
}

/// Named learnable tensors in [`MergerConfig::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergerParams {
    tensors: Vec<(String, Mat)>,
}

impl MergerParams {
    pub fn zeros(cfg: &MergerConfig) -> Self {
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(n, r, c)| (n, Mat::zeros(r, c)))
            .collect();
        Self { tensors }
    }

    /// Fan-in scaled uniform weights; norm gains near one; small nonzero
    /// biases so every term is exercised.
    pub fn random(cfg: &MergerConfig, rng: &mut impl Rng) -> Self {
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(n, r, c)| {
                let m = if n.ends_with(".g") {
                    Mat::random(r, c, 0.2, rng).map_in_place(|x| 1.0 + x)
                } else if r == 1 {
                    Mat::random(r, c, 0.1, rng)
                } else {
                    Mat::random(r, c, (3.0 / r as f64).sqrt(), rng)
                };
                (n, m)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_named(
        cfg: &MergerConfig,
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self, MergerError> {
        let p = Self { tensors };
        p.check(cfg)?;
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn check(&self, cfg: &MergerConfig) -> Result<(), MergerError> {
        let want = cfg.param_shapes();
        if want.len() != self.tensors.len() {
            return Err(shape_err(
                "params",
                format!(
                    "{} tensors, config needs {}",
                    self.tensors.len(),
                    want.len()
                ),
            ));
        }
        for ((wn, wr, wc), (n, m)) in want.iter().zip(&self.tensors) {
            if wn != n {
                return Err(MergerError::MissingParam(wn.clone()));
            }
            if m.shape() != (*wr, *wc) {
                return Err(shape_err(
                    "params",
                    format!("{n} is {:?}, expected ({wr}, {wc})", m.shape()),
                ));
            }
            if !m.is_finite() {
                return Err(MergerError::NonFinite(n.clone()));
            }
        }
        Ok(())
    }
}

/// Projection weights of one attention block. The key bias is omitted:
/// softmax is invariant to it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Clone, Copy)]
struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

fn attention_var(g: &mut Graph, q: Var, k: Var, v: Var, p: AttnVars, heads: usize) -> Var {
    let qp = g.matmul(q, p.wq);
    let qp = g.add_row(qp, p.bq);
    let kp = g.matmul(k, p.wk);
    let vp = g.matmul(v, p.wv);
    let vp = g.add_row(vp, p.bv);
    let c = g.value(qp).cols;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * d, d);
        let kh = g.slice_cols(kp, h * d, d);
        let vh = g.slice_cols(vp, h * d, d);
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh));
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    let o = g.matmul(o, p.wo);
    g.add_row(o, p.bo)
}

/// Multi-head scaled dot-product attention of query tokens over key/value
/// tokens.
pub fn attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    params: &AttentionParams,
    heads: usize,
) -> Result<Mat, MergerError> {
    let c = params.wq.rows;
    let stage = "attention";
    if heads == 0 || !params.wq.cols.is_multiple_of(heads) {
        return Err(shape_err(
            stage,
            format!("width {} not divisible by {heads} heads", params.wq.cols),
        ));
    }
    if k.rows != v.rows {
        return Err(shape_err(
            stage,
            format!("{} keys but {} values", k.rows, v.rows),
        ));
    }
    if k.rows == 0 {
        return Err(shape_err(stage, "no key/value tokens"));
    }
    for (name, m) in [("query", q), ("key", k), ("value", v)] {
        if m.cols != c {
            return Err(shape_err(stage, format!("{name} width {} != {c}", m.cols)));
        }
    }
    let inner = params.wq.cols;
    let expect = [
        ("wk", &params.wk, (c, inner)),
        ("wv", &params.wv, (c, inner)),
        ("bq", &params.bq, (1, inner)),
        ("bv", &params.bv, (1, inner)),
        ("wo", &params.wo, (inner, params.wo.cols)),
        ("bo", &params.bo, (1, params.wo.cols)),
    ];
    for (name, m, shape) in expect {
        if m.shape() != shape {
            return Err(shape_err(
                stage,
                format!("{name} is {:?}, expected {shape:?}", m.shape()),
            ));
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let p = AttnVars {
        wq: g.leaf(params.wq.clone()),
        bq: g.leaf(params.bq.clone()),
        wk: g.leaf(params.wk.clone()),
        wv: g.leaf(params.wv.clone()),
        bv: g.leaf(params.bv.clone()),
        wo: g.leaf(params.wo.clone()),
        bo: g.leaf(params.bo.clone()),
    };
    let out = attention_var(&mut g, qv, kv, vv, p, heads);
    Ok(g.value(out).clone())
}

/// All non-parameter inputs of one merger evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MergerInputs {
    pub encoder: FeatureMap,
    /// One map per decoder layer, in `selected_layers` order.
    pub decoders: Vec<FeatureMap>,
    pub point_map: FeatureMap,
    pub ray_map: FeatureMap,
    pub pe2d: FeatureMap,
    /// Appearance features at twice the input resolution.
    pub f2d: FeatureMap,
}

impl MergerInputs {
    pub fn random(cfg: &MergerConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let (h, w) = (height, width);
        Self {
            encoder: FeatureMap::random(h, w, cfg.c_in, rng),
            decoders: cfg
                .decoder_layers()
                .map(|_| FeatureMap::random(h, w, cfg.c_dec, rng))
                .collect(),
            point_map: FeatureMap::random(h, w, 3, rng),
            ray_map: FeatureMap::random(h, w, 3, rng),
            pe2d: FeatureMap::random(h, w, cfg.c_mid, rng),
            f2d: FeatureMap::random(2 * h, 2 * w, cfg.c_f2d, rng),
        }
    }

    pub fn zeros(cfg: &MergerConfig, height: usize, width: usize) -> Self {
        let (h, w) = (height, width);
        Self {
            encoder: FeatureMap::zeros(h, w, cfg.c_in),
            decoders: cfg
                .decoder_layers()
                .map(|_| FeatureMap::zeros(h, w, cfg.c_dec))
                .collect(),
            point_map: FeatureMap::zeros(h, w, 3),
            ray_map: FeatureMap::zeros(h, w, 3),
            pe2d: FeatureMap::zeros(h, w, cfg.c_mid),
            f2d: FeatureMap::zeros(2 * h, 2 * w, cfg.c_f2d),
        }
    }

    fn check(&self, cfg: &MergerConfig) -> Result<(), MergerError> {
        let (h, w) = (self.encoder.height, self.encoder.width);
        if h == 0 || w == 0 {
            return Err(shape_err("projection", "empty encoder raster"));
        }
        let check =
            |stage: &'static str, name: &str, m: &FeatureMap, hh: usize, ww: usize, c: usize| {
                if (m.height, m.width, m.channels) != (hh, ww, c) {
                    Err(shape_err(
                        stage,
                        format!(
                            "{name} is {}x{}x{}, expected {hh}x{ww}x{c}",
                            m.height, m.width, m.channels
                        ),
                    ))
                } else {
                    Ok(())
                }
            };
        check("projection", "encoder", &self.encoder, h, w, cfg.c_in)?;
        check("pe3d", "point map", &self.point_map, h, w, 3)?;
        check("pe3d", "ray map", &self.ray_map, h, w, 3)?;
        check("self-attention", "pe2d", &self.pe2d, h, w, cfg.c_mid)?;
        let n_dec = cfg.decoder_layers().count();
        if self.decoders.len() != n_dec {
            return Err(shape_err(
                "decoder",
                format!(
                    "{} decoder maps for {n_dec} selected layers",
                    self.decoders.len()
                ),
            ));
        }
        for (i, d) in self.decoders.iter().enumerate() {
            check("decoder", &format!("decoder map {i}"), d, h, w, cfg.c_dec)?;
        }
        check("fusion", "f2d", &self.f2d, 2 * h, 2 * w, cfg.c_f2d)
    }

    fn named(&self) -> Vec<(String, Mat)> {
        let mut out = vec![("input.encoder".to_string(), self.encoder.tokens())];
        for (i, d) in self.decoders.iter().enumerate() {
            out.push((format!("input.decoder{i}"), d.tokens()));
        }
        out.push(("input.point_map".into(), self.point_map.tokens()));
        out.push(("input.ray_map".into(), self.ray_map.tokens()));
        out.push(("input.pe2d".into(), self.pe2d.tokens()));
        out.push(("input.f2d".into(), self.f2d.tokens()));
        out
    }
}

fn pe3d_var(g: &mut Graph, p: &dyn Fn(&str) -> Var, point: Var, ray: Var) -> Var {
    let x = g.concat_cols(&[point, ray]);
    let h = g.matmul(x, p("pe3d.w1"));
    let h = g.add_row(h, p("pe3d.b1"));
    let h = g.gelu(h);
    let o = g.matmul(h, p("pe3d.w2"));
    g.add_row(o, p("pe3d.b2"))
}

/// Per-pixel PE3D from point and ray maps.
pub fn build_pe3d(
    point_map: &FeatureMap,
    ray_map: &FeatureMap,
    cfg: &MergerConfig,
    params: &MergerParams,
) -> Result<PosEmbedding, MergerError> {
    params.check(cfg)?;
    let (h, w) = (point_map.height, point_map.width);
    if point_map.channels != 3 || ray_map.channels != 3 || (ray_map.height, ray_map.width) != (h, w)
    {
        return Err(shape_err(
            "pe3d",
            format!(
                "point map {}x{}x{} and ray map {}x{}x{} must both be HxWx3",
                h, w, point_map.channels, ray_map.height, ray_map.width, ray_map.channels
            ),
        ));
    }
    let mut g = Graph::new();
    let vars: HashMap<&str, Var> = params.iter().map(|(n, m)| (n, g.leaf(m.clone()))).collect();
    let pv = g.leaf(point_map.tokens());
    let rv = g.leaf(ray_map.tokens());
    let out = pe3d_var(&mut g, &|n| vars[n], pv, rv);
    Ok(PosEmbedding {
        kind: PosKind::Pe3d,
        map: FeatureMap::from_tokens(h, w, g.value(out).clone())?,
    })
}

fn layer_norm(g: &mut Graph, p: &dyn Fn(&str) -> Var, x: Var, prefix: &str) -> Var {
    let n = g.norm(x);
    let n = g.mul_row(n, p(&format!("{prefix}.g")));
    g.add_row(n, p(&format!("{prefix}.b")))
}

fn attn_vars(p: &dyn Fn(&str) -> Var, prefix: &str) -> AttnVars {
    let f = |n: &str| p(&format!("{prefix}.{n}"));
    AttnVars {
        wq: f("wq"),
        bq: f("bq"),
        wk: f("wk"),
        wv: f("wv"),
        bv: f("bv"),
        wo: f("wo"),
        bo: f("bo"),
    }
}

fn conv3x3(g: &mut Graph, x: Var, h: usize, w: usize, weight: Var, bias: Var) -> Var {
    let mut taps = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            taps.push(g.mix_rows(x, std::sync::Arc::new(RowMix::shift(h, w, dy, dx))));
        }
    }
    let cols = g.concat_cols(&taps);
    let y = g.matmul(cols, weight);
    g.add_row(y, bias)
}

/// Builds the full merger on `g` from named leaves; returns the output tokens
/// `(2H·2W) × c_out`.
fn forward(
    g: &mut Graph,
    cfg: &MergerConfig,
    h: usize,
    w: usize,
    leaves: &HashMap<String, Var>,
) -> Var {
    let p = |n: &str| -> Var { *leaves.get(n).unwrap_or_else(|| panic!("leaf {n}")) };
    let heads = cfg.heads;

    // (a) projection, (b) + PE3D
    let enc = g.matmul(p("input.encoder"), p("proj.w"));
    let enc = g.add_row(enc, p("proj.b"));
    let pe3d = pe3d_var(g, &p, p("input.point_map"), p("input.ray_map"));
    let mut x = g.add(enc, pe3d);

    // (c) self-attention with PE2D on queries and keys
    let n = layer_norm(g, &p, x, "enc.sa.ln");
    let qk = g.add(n, p("input.pe2d"));
    let sa = attention_var(g, qk, qk, n, attn_vars(&p, "enc.sa"), heads);
    x = g.add(x, sa);

    // (d) decoder refinement
    for (idx, layer) in cfg.decoder_layers().enumerate() {
        let pre = format!("dec{layer}");
        let fi = g.matmul(
            p(&format!("input.decoder{idx}")),
            p(&format!("{pre}.proj.w")),
        );
        let fi = g.add_row(fi, p(&format!("{pre}.proj.b")));

        let n = layer_norm(g, &p, x, &format!("{pre}.sa.ln"));
        let n = g.add(n, pe3d);
        let sa = attention_var(g, n, n, n, attn_vars(&p, &format!("{pre}.sa")), heads);
        x = g.add(x, sa);

        let q = layer_norm(g, &p, x, &format!("{pre}.ca.ln"));
        let kv = layer_norm(g, &p, fi, &format!("{pre}.ca.lnkv"));
        let kv = g.add(kv, pe3d);
        let ca = attention_var(g, q, kv, kv, attn_vars(&p, &format!("{pre}.ca")), heads);
        x = g.add(x, ca);

        let n = layer_norm(g, &p, x, &format!("{pre}.ffn.ln"));
        let f = g.matmul(n, p(&format!("{pre}.ffn.w1")));
        let f = g.add_row(f, p(&format!("{pre}.ffn.b1")));
        let f = g.gelu(f);
        let f = g.matmul(f, p(&format!("{pre}.ffn.w2")));
        let f = g.add_row(f, p(&format!("{pre}.ffn.b2")));
        x = g.add(x, f);
    }

    // (e) upsample + conv, (f) concat F_2D, (g) conv to c_out
    let up = g.mix_rows(x, std::sync::Arc::new(RowMix::upsample2(h, w)));
    let up = conv3x3(g, up, 2 * h, 2 * w, p("up.conv.w"), p("up.conv.b"));
    let cat = g.concat_cols(&[up, p("input.f2d")]);
    conv3x3(g, cat, 2 * h, 2 * w, p("out.conv.w"), p("out.conv.b"))
}

fn leaves_on(g: &mut Graph, named: &[(String, Mat)]) -> HashMap<String, Var> {
    named
        .iter()
        .map(|(n, m)| (n.clone(), g.leaf(m.clone())))
        .collect()
}

/// F_merged at twice the input resolution with `c_out` channels.
pub fn merge_features(
    inputs: &MergerInputs,
    cfg: &MergerConfig,
    params: &MergerParams,
) -> Result<FeatureMap, MergerError> {
    cfg.validate()?;
    params.check(cfg)?;
    inputs.check(cfg)?;
    let (h, w) = (inputs.encoder.height, inputs.encoder.width);
    let mut named: Vec<(String, Mat)> = params
        .iter()
        .map(|(n, m)| (n.to_string(), m.clone()))
        .collect();
    named.extend(inputs.named());
    let mut g = Graph::new();
    let leaves = leaves_on(&mut g, &named);
    let out = forward(&mut g, cfg, h, w, &leaves);
    let out = g.value(out).clone();
    if !out.is_finite() {
        return Err(MergerError::NonFinite("merged features".into()));
    }
    FeatureMap::from_tokens(2 * h, 2 * w, out)
}

/// A complete seeded evaluation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MergerInstance {
    pub cfg: MergerConfig,
    pub inputs: MergerInputs,
    pub params: MergerParams,
}

impl MergerInstance {
    pub fn random(
        cfg: &MergerConfig,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self, MergerError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MergerParams::random(cfg, &mut rng);
        let inputs = MergerInputs::random(cfg, height, width, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            inputs,
            params,
        })
    }

    pub fn zeros(cfg: &MergerConfig, height: usize, width: usize) -> Result<Self, MergerError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            inputs: MergerInputs::zeros(cfg, height, width),
            params: MergerParams::zeros(cfg),
        })
    }

    fn named(&self) -> Vec<(String, Mat)> {
        let mut named: Vec<(String, Mat)> = self
            .params
            .iter()
            .map(|(n, m)| (n.to_string(), m.clone()))
            .collect();
        named.extend(self.inputs.named());
        named
    }

    fn loss_of(&self, named: &[(String, Mat)]) -> f64 {
        let mut g = Graph::new();
        let leaves = leaves_on(&mut g, named);
        let out = forward(
            &mut g,
            &self.cfg,
            self.inputs.encoder.height,
            self.inputs.encoder.width,
            &leaves,
        );
        g.value(out).sum()
    }

    /// Analytic gradients of `sum(F_merged)` for every parameter and input.
    pub fn gradients(&self, fault: Option<Fault>) -> Result<Vec<(String, Mat)>, MergerError> {
        self.cfg.validate()?;
        self.params.check(&self.cfg)?;
        self.inputs.check(&self.cfg)?;
        let named = self.named();
        let mut g = Graph::with_fault(fault);
        let leaves: Vec<Var> = named.iter().map(|(_, m)| g.leaf(m.clone())).collect();
        let map: HashMap<String, Var> = named
            .iter()
            .map(|(n, _)| n.clone())
            .zip(leaves.iter().copied())
            .collect();
        let out = forward(
            &mut g,
            &self.cfg,
            self.inputs.encoder.height,
            self.inputs.encoder.width,
            &map,
        );
        let loss = g.sum(out);
        let mut grads = g.backward(loss);
        Ok(named
            .into_iter()
            .zip(leaves)
            .map(|((n, m), v)| {
                (
                    n,
                    grads[v.0]
                        .take()
                        .unwrap_or_else(|| Mat::zeros(m.rows, m.cols)),
                )
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub max_abs_diff: f64,
    /// `max|a − n| / max(max|a|, max|n|)`, zero when both are zero.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    /// Largest `|Σ row − 1|` over softmax rows of the forward pass.
    pub softmax_max_row_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.softmax_max_row_error <= 1e-6
    }
}

/// Central-difference check of every scalar of every parameter and input
/// tensor of `inst`.
pub fn grad_check_instance(
    inst: &MergerInstance,
    fault: Option<Fault>,
) -> Result<GradCheckReport, MergerError> {
    let analytic = inst.gradients(fault)?;
    let base = inst.named();
    let coords: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(t, (_, m))| (0..m.data.len()).map(move |i| (t, i)))
        .collect();
    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(t, i)| {
            let mut named = base.clone();
            let x = named[t].1.data[i];
            named[t].1.data[i] = x + FD_STEP;
            let plus = inst.loss_of(&named);
            named[t].1.data[i] = x - FD_STEP;
            let minus = inst.loss_of(&named);
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect();

    let mut tensors = Vec::with_capacity(base.len());
    let mut offset = 0;
    for (name, grad) in &analytic {
        let n = grad.data.len();
        let num = &numeric[offset..offset + n];
        offset += n;
        let max_a = grad.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_n = num.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = grad
            .data
            .iter()
            .zip(num)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let denom = max_a.max(max_n);
        tensors.push(TensorCheck {
            name: name.clone(),
            len: n,
            max_abs_analytic: max_a,
            max_abs_numeric: max_n,
            max_abs_diff: diff,
            rel_err: if denom == 0.0 { 0.0 } else { diff / denom },
        });
    }
    let max_rel_err = tensors.iter().fold(0.0f64, |m, t| m.max(t.rel_err));
    Ok(GradCheckReport {
        step: FD_STEP,
        tolerance: GRAD_CHECK_TOLERANCE,
        tensors,
        max_rel_err,
        softmax_max_row_error: softmax_row_error(inst),
    })
}

fn softmax_row_error(inst: &MergerInstance) -> f64 {
    let named = inst.named();
    let mut g = Graph::new();
    let leaves = leaves_on(&mut g, &named);
    forward(
        &mut g,
        &inst.cfg,
        inst.inputs.encoder.height,
        inst.inputs.encoder.width,
        &leaves,
    );
    g.nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Softmax(_)))
        .flat_map(|n| {
            (0..n.value.rows).map(move |r| (n.value.row(r).iter().sum::<f64>() - 1.0).abs())
        })
        .fold(0.0, f64::max)
}

/// Grad check of a seeded random instance on a 4×4 raster.
pub fn grad_check(cfg: &MergerConfig, seed: u64) -> Result<GradCheckReport, MergerError> {
    grad_check_instance(&MergerInstance::random(cfg, 4, 4, seed)?, None)
}
