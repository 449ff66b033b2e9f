//! A small convolutional ranking network over feature tensors.
//!
//! Layout (defaults): two padded 3×3 convolutions (19→32→64) with ReLU, a
//! flatten to 64·7·7, dense 120 and dense 84 with ReLU, then a scalar head.
//! The 84-wide activation is the embedding used by the continuity loss.
//!
//! All parameters live in one flat `Vec<f64>`; gradients use the same
//! layout, which keeps the optimizer and the model file trivial.

mod adam;
mod io;

pub use adam::AdamState;
pub use io::{load, save, FORMAT_VERSION, MAGIC};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellgraph::CellGraph;
use crate::encoder::{EncodeError, Encoder, NormScaler, CHANNELS, PLANE, SIDE, TENSOR_LEN};

/// Rows per forward pass when scoring many cells.
const SCORE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward state mismatch: {0}")]
    StateMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("model file version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Layer widths of the predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorArch {
    /// Output channels of each 3×3 convolution.
    pub conv_channels: Vec<usize>,
    /// Widths of the hidden dense layers; the last one is the embedding.
    pub hidden: Vec<usize>,
}

impl Default for PredictorArch {
    fn default() -> Self {
        PredictorArch { conv_channels: vec![32, 64], hidden: vec![120, 84] }
    }
}

impl PredictorArch {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.hidden.is_empty() {
            return Err(NetError::InvalidArch("at least one hidden dense layer is required".into()));
        }
        if self.conv_channels.iter().chain(&self.hidden).any(|&w| w == 0) {
            return Err(NetError::InvalidArch("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.hidden.last().expect("validated arch")
    }

    fn flat_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(CHANNELS) * PLANE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution with padding 1; weight shape `[out, in · 9]`.
    Conv,
    /// Fully connected; weight shape `[out, in]`.
    Dense,
}

/// Where one layer's weights and bias sit in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    fn weight<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let data = &params[self.weight_offset..self.weight_offset + self.rows * self.cols];
        ArrayView2::from_shape((self.rows, self.cols), data).expect("layout")
    }

    fn weight_mut<'a>(&self, params: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let data = &mut params[self.weight_offset..self.weight_offset + self.rows * self.cols];
        ArrayViewMut2::from_shape((self.rows, self.cols), data).expect("layout")
    }

    fn bias<'a>(&self, params: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.bias_offset..self.bias_offset + self.rows])
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        self.cols
    }
}

fn layout(arch: &PredictorArch) -> (Vec<LayerSlot>, usize) {
    let mut slots = Vec::new();
    let mut offset = 0;
    let mut push = |kind, rows, cols| {
        let slot = LayerSlot { kind, rows, cols, weight_offset: offset, bias_offset: offset + rows * cols };
        offset += rows * cols + rows;
        slots.push(slot);
    };
    let mut channels = CHANNELS;
    for &out in &arch.conv_channels {
        push(LayerKind::Conv, out, channels * 9);
        channels = out;
    }
    let mut width = arch.flat_dim();
    for &out in &arch.hidden {
        push(LayerKind::Dense, out, width);
        width = out;
    }
    push(LayerKind::Dense, 1, width);
    (slots, offset)
}

/// Scores and embeddings for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub scores: Vec<f64>,
    /// `[batch, embedding_dim]`.
    pub embeddings: Array2<f64>,
}

/// Activations kept by [`PredictorModel::forward_train`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    batch: usize,
    param_count: usize,
    cols: Vec<Array2<f64>>,
    conv_out: Vec<Array2<f64>>,
    flat: Array2<f64>,
    dense_out: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Ranking predictor: weights, encoding pipeline and feature scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    arch: PredictorArch,
    encoder: Encoder,
    scaler: NormScaler,
    seed: u64,
    slots: Vec<LayerSlot>,
    params: Vec<f64>,
}

impl PredictorModel {
    /// Model with fan-in scaled uniform initialization: every weight and
    /// bias of a unit with fan-in `k` is drawn from `U(-1/√k, 1/√k)`.
    pub fn new(arch: PredictorArch, encoder: Encoder, scaler: NormScaler, seed: u64) -> Result<Self, NetError> {
        let mut model = Self::zeroed(arch, encoder, scaler, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &model.slots {
            let bound = 1.0 / (slot.fan_in() as f64).sqrt();
            let end = slot.bias_offset + slot.rows;
            for p in &mut model.params[slot.weight_offset..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(arch: PredictorArch, encoder: Encoder, scaler: NormScaler, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let (slots, count) = layout(&arch);
        Ok(PredictorModel { arch, encoder, scaler, seed, slots, params: vec![0.0; count] })
    }

    pub(crate) fn from_parts(
        arch: PredictorArch,
        encoder: Encoder,
        scaler: NormScaler,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self, NetError> {
        let mut model = Self::zeroed(arch, encoder, scaler, seed)?;
        if params.len() != model.params.len() {
            return Err(NetError::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> &PredictorArch {
        &self.arch
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn scaler(&self) -> &NormScaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: NormScaler) {
        self.scaler = scaler;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Weight matrix and bias of layer `idx`.
    pub fn layer_params(&self, idx: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let slot = &self.slots[idx];
        (slot.weight(&self.params), slot.bias(&self.params))
    }

    /// Scores and embeddings for a `[batch, 19·7·7]` input.
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<Output, NetError> {
        self.forward_impl(batch, false).map(|(out, _)| out)
    }

    /// Like [`forward`](Self::forward) but keeps the activations needed by
    /// [`backward`](Self::backward).
    pub fn forward_train(&self, batch: ArrayView2<'_, f64>) -> Result<(Output, ForwardCache), NetError> {
        self.forward_impl(batch, true).map(|(out, cache)| (out, cache.expect("cache requested")))
    }

    fn forward_impl(&self, x: ArrayView2<'_, f64>, keep: bool) -> Result<(Output, Option<ForwardCache>), NetError> {
        if x.ncols() != TENSOR_LEN {
            return Err(NetError::ShapeMismatch(format!("expected {TENSOR_LEN} input columns, got {}", x.ncols())));
        }
        let b = x.nrows();
        if b == 0 {
            return Err(NetError::ShapeMismatch("empty batch".into()));
        }

        // Activations of conv layers are `[channels, batch · 49]`.
        let mut act = Array2::<f64>::zeros((CHANNELS, b * PLANE));
        for (s, row) in x.outer_iter().enumerate() {
            for c in 0..CHANNELS {
                act.slice_mut(s![c, s * PLANE..(s + 1) * PLANE]).assign(&row.slice(s![c * PLANE..(c + 1) * PLANE]));
            }
        }
        let n_conv = self.arch.conv_channels.len();
        let mut cols = Vec::new();
        let mut conv_out = Vec::new();
        for slot in &self.slots[..n_conv] {
            let col = im2col(&act, b);
            let mut y = Array2::<f64>::zeros((slot.rows, b * PLANE));
            general_mat_mul(1.0, &slot.weight(&self.params), &col, 0.0, &mut y);
            y += &slot.bias(&self.params).insert_axis(Axis(1));
            y.mapv_inplace(relu);
            if keep {
                cols.push(col);
                conv_out.push(y.clone());
            }
            act = y;
        }

        let channels = act.nrows();
        let mut h = Array2::<f64>::zeros((b, channels * PLANE));
        for c in 0..channels {
            for s in 0..b {
                h.slice_mut(s![s, c * PLANE..(c + 1) * PLANE]).assign(&act.slice(s![c, s * PLANE..(s + 1) * PLANE]));
            }
        }
        let flat = h.clone();
        let mut dense_out = Vec::new();
        let dense = &self.slots[n_conv..];
        for slot in &dense[..dense.len() - 1] {
            let mut z = Array2::<f64>::zeros((b, slot.rows));
            general_mat_mul(1.0, &h, &slot.weight(&self.params).t(), 0.0, &mut z);
            z += &slot.bias(&self.params);
            z.mapv_inplace(relu);
            if keep {
                dense_out.push(z.clone());
            }
            h = z;
        }
        let head = dense.last().expect("head layer");
        let mut score = Array2::<f64>::zeros((b, 1));
        general_mat_mul(1.0, &h, &head.weight(&self.params).t(), 0.0, &mut score);
        score += &head.bias(&self.params);

        let out = Output { scores: score.column(0).to_vec(), embeddings: h };
        let cache = keep.then(|| ForwardCache {
            batch: b,
            param_count: self.params.len(),
            cols,
            conv_out,
            flat,
            dense_out,
        });
        Ok((out, cache))
    }

    /// Gradient of `Σ d_scores·ε + Σ d_embeddings·η` with respect to every
    /// parameter, in the flat parameter layout.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_scores: &[f64],
        d_embeddings: Option<ArrayView2<'_, f64>>,
    ) -> Result<Vec<f64>, NetError> {
        let b = cache.batch;
        if cache.param_count != self.params.len() {
            return Err(NetError::StateMismatch("cache was produced by a different architecture".into()));
        }
        if d_scores.len() != b {
            return Err(NetError::StateMismatch(format!("{} score gradients for a batch of {b}", d_scores.len())));
        }
        let emb_dim = self.arch.embedding_dim();
        if let Some(d) = &d_embeddings {
            if d.dim() != (b, emb_dim) {
                return Err(NetError::StateMismatch(format!(
                    "embedding gradient shape {:?}, expected {:?}",
                    d.dim(),
                    (b, emb_dim)
                )));
            }
        }

        let mut grads = vec![0.0; self.params.len()];
        let n_conv = self.arch.conv_channels.len();
        let dense = &self.slots[n_conv..];
        let head = dense.last().expect("head layer");

        let d_score = ArrayView2::from_shape((b, 1), d_scores).expect("shape");
        let emb = cache.dense_out.last().expect("embedding layer");
        general_mat_mul(1.0, &d_score.t(), emb, 0.0, &mut head.weight_mut(&mut grads));
        grads[head.bias_offset] = d_scores.iter().sum();
        let mut d_h = Array2::<f64>::zeros((b, emb_dim));
        general_mat_mul(1.0, &d_score, &head.weight(&self.params), 0.0, &mut d_h);
        if let Some(d) = d_embeddings {
            d_h += &d;
        }

        for (l, slot) in dense[..dense.len() - 1].iter().enumerate().rev() {
            d_h.zip_mut_with(&cache.dense_out[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            let input = if l == 0 { &cache.flat } else { &cache.dense_out[l - 1] };
            general_mat_mul(1.0, &d_h.t(), input, 0.0, &mut slot.weight_mut(&mut grads));
            let db = d_h.sum_axis(Axis(0));
            grads[slot.bias_offset..slot.bias_offset + slot.rows].copy_from_slice(db.as_slice().expect("contiguous"));
            let mut d_in = Array2::<f64>::zeros((b, slot.cols));
            general_mat_mul(1.0, &d_h, &slot.weight(&self.params), 0.0, &mut d_in);
            d_h = d_in;
        }

        if n_conv == 0 {
            return Ok(grads);
        }
        let channels = self.arch.conv_channels[n_conv - 1];
        let mut d_act = Array2::<f64>::zeros((channels, b * PLANE));
        for c in 0..channels {
            for s in 0..b {
                d_act
                    .slice_mut(s![c, s * PLANE..(s + 1) * PLANE])
                    .assign(&d_h.slice(s![s, c * PLANE..(c + 1) * PLANE]));
            }
        }
        for (l, slot) in self.slots[..n_conv].iter().enumerate().rev() {
            d_act.zip_mut_with(&cache.conv_out[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            general_mat_mul(1.0, &d_act, &cache.cols[l].t(), 0.0, &mut slot.weight_mut(&mut grads));
            let db = d_act.sum_axis(Axis(1));
            grads[slot.bias_offset..slot.bias_offset + slot.rows].copy_from_slice(db.as_slice().expect("contiguous"));
            if l > 0 {
                let mut d_col = Array2::<f64>::zeros((slot.cols, b * PLANE));
                general_mat_mul(1.0, &slot.weight(&self.params).t(), &d_act, 0.0, &mut d_col);
                d_act = col2im(&d_col, slot.cols / 9, b);
            }
        }
        Ok(grads)
    }

    /// Normalized tensors of `cells` stacked into a `[len, 19·7·7]` batch.
    pub fn encode_batch(&self, cells: &[CellGraph]) -> Result<Array2<f64>, NetError> {
        let mut batch = Array2::<f64>::zeros((cells.len(), TENSOR_LEN));
        for (row, g) in batch.outer_iter_mut().zip(cells) {
            let t = self.encoder.encode(g, &self.scaler)?;
            ArrayView1::from(t.as_slice()).assign_to(row);
        }
        Ok(batch)
    }

    /// Scores of `cells`, computed in fixed-size chunks so the result does
    /// not depend on the number of worker threads.
    pub fn score_cells(&self, cells: &[CellGraph]) -> Result<Vec<f64>, NetError> {
        let chunks: Result<Vec<Vec<f64>>, NetError> = cells
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| Ok(self.forward(self.encode_batch(chunk)?.view())?.scores))
            .collect();
        Ok(chunks?.concat())
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `[c, b·49]` activations to `[c·9, b·49]` patch columns (3×3, padding 1).
fn im2col(input: &Array2<f64>, batch: usize) -> Array2<f64> {
    let channels = input.nrows();
    let width = batch * PLANE;
    let src = input.as_slice().expect("standard layout");
    let mut col = Array2::<f64>::zeros((channels * 9, width));
    let dst = col.as_slice_mut().expect("standard layout");
    for c in 0..channels {
        for k in 0..9 {
            let (dy, dx) = (k / 3, k % 3);
            let row = &mut dst[(c * 9 + k) * width..(c * 9 + k + 1) * width];
            let plane_src = &src[c * width..(c + 1) * width];
            for s in 0..batch {
                for y in 0..SIDE {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                    for x in 0..SIDE {
                        let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                        row[s * PLANE + y * SIDE + x] = plane_src[s * PLANE + sy * SIDE + sx];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &Array2<f64>, channels: usize, batch: usize) -> Array2<f64> {
    let width = batch * PLANE;
    let src = col.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((channels, width));
    let dst = out.as_slice_mut().expect("standard layout");
    for c in 0..channels {
        let plane_dst = &mut dst[c * width..(c + 1) * width];
        for k in 0..9 {
            let (dy, dx) = (k / 3, k % 3);
            let row = &src[(c * 9 + k) * width..(c * 9 + k + 1) * width];
            for s in 0..batch {
                for y in 0..SIDE {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                    for x in 0..SIDE {
                        let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < SIDE) else { continue };
                        plane_dst[s * PLANE + sy * SIDE + sx] += row[s * PLANE + y * SIDE + x];
                    }
                }
            }
        }
    }
    out
}
