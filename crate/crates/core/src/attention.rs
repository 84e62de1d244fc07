//! Additive attention and the four mechanisms built on it: temporal attention,
//! spatio-temporal (ST) spatial attention, temporo-spatial (TS) attention and
//! the language-conditioned fusion of the ST and TS branches.
//!
//! Every function here records onto a caller-owned [`Graph`]; parameters are
//! bound into the graph once per forward pass via `bind`.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, Parameters};
use crate::tensor::Tensor;

/// Masked scores get this added before the softmax, which drives their weight to exactly 0.
pub const MASK_PENALTY: f64 = -1e9;

thread_local! {
    static SCORE_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Number of (query, feature) attention scores evaluated on this thread since the last reset.
pub fn score_evaluations() -> usize {
    SCORE_EVALS.with(Cell::get)
}

pub fn reset_score_evaluations() {
    SCORE_EVALS.with(|c| c.set(0));
}

fn count_scores(k: usize) {
    SCORE_EVALS.with(|c| c.set(c.get() + k));
}

/// Projections of an additive attention head: `w^T tanh(W_h h + W_x x + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// attention_dim x hidden_dim
    pub w_h: Tensor,
    /// attention_dim x feature_dim
    pub w_x: Tensor,
    pub b: Tensor,
    pub w: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_h: Var,
    pub w_x: Var,
    pub b: Var,
    pub w: Var,
    w_x_t: Var,
}

impl AttentionParams {
    pub fn new(w_h: Tensor, w_x: Tensor, b: Tensor, w: Tensor) -> Result<Self> {
        let a = w_h.shape().first().copied().unwrap_or(0);
        if w_h.rank() != 2 || w_x.rank() != 2 || w_x.shape()[0] != a {
            return Err(Error::dim("attention params", w_h.shape(), w_x.shape()));
        }
        if b.shape() != [a] || w.shape() != [a] {
            return Err(Error::dim("attention params", b.shape(), w.shape()));
        }
        Ok(AttentionParams { w_h, w_x, b, w })
    }

    pub fn zeros(attention_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        AttentionParams {
            w_h: Tensor::zeros(&[attention_dim, hidden_dim]),
            w_x: Tensor::zeros(&[attention_dim, feature_dim]),
            b: Tensor::zeros(&[attention_dim]),
            w: Tensor::zeros(&[attention_dim]),
        }
    }

    pub fn init<R: Rng>(attention_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_h: init_uniform(&[attention_dim, hidden_dim], hidden_dim, rng),
            w_x: init_uniform(&[attention_dim, feature_dim], feature_dim, rng),
            b: Tensor::zeros(&[attention_dim]),
            w: init_uniform(&[attention_dim], attention_dim, rng),
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.w.numel()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<AttentionVars> {
        let w_h = g.param(self.w_h.clone())?;
        let w_x = g.param(self.w_x.clone())?;
        let b = g.param(self.b.clone())?;
        let w = g.param(self.w.clone())?;
        AttentionVars::from_vars(g, w_h, w_x, b, w)
    }
}

impl AttentionVars {
    pub fn from_vars(g: &mut Graph, w_h: Var, w_x: Var, b: Var, w: Var) -> Result<Self> {
        let w_x_t = g.transpose(w_x)?;
        Ok(AttentionVars { w_h, w_x, b, w, w_x_t })
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_h, self.w_x, self.b, self.w]
    }
}

impl Parameters for AttentionParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_h", &self.w_h), ("w_x", &self.w_x), ("b", &self.b), ("w", &self.w)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_h, &mut self.w_x, &mut self.b, &mut self.w]
    }
}

fn check_operand(g: &Graph, op: &'static str, v: Var, expected: usize) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 1 || s[0] != expected {
        return Err(Error::dim(op, s, &[expected]));
    }
    Ok(())
}

/// `w^T tanh(W_h h + W_x x + b)` for a single feature vector `x`.
pub fn attention_score(g: &mut Graph, p: &AttentionVars, h: Var, x: Var) -> Result<Var> {
    let hidden = g.shape(p.w_h)[1];
    let feat = g.shape(p.w_x)[1];
    check_operand(g, "attention_score (hidden state)", h, hidden)?;
    check_operand(g, "attention_score (feature)", x, feat)?;
    let hh = g.matmul(p.w_h, h)?;
    let xx = g.matmul(p.w_x, x)?;
    let s = g.add(hh, xx)?;
    let s = g.add(s, p.b)?;
    let t = g.tanh(s)?;
    count_scores(1);
    g.dot(p.w, t)
}

/// Scores of every row of `xs` (`[k, feature_dim]`) against the query `h`.
pub fn attention_scores(g: &mut Graph, p: &AttentionVars, h: Var, xs: Var) -> Result<Var> {
    let hidden = g.shape(p.w_h)[1];
    let feat = g.shape(p.w_x)[1];
    check_operand(g, "attention_scores (hidden state)", h, hidden)?;
    let xs_shape = g.shape(xs).to_vec();
    if xs_shape.len() != 2 || xs_shape[1] != feat {
        return Err(Error::dim("attention_scores (features)", &xs_shape, &[feat]));
    }
    let hh = g.matmul(p.w_h, h)?;
    let hb = g.add(hh, p.b)?;
    let xx = g.matmul(xs, p.w_x_t)?;
    let s = g.add(xx, hb)?;
    let t = g.tanh(s)?;
    count_scores(xs_shape[0]);
    g.matmul(t, p.w)
}

/// Adds the mask penalty to masked entries of a score vector.
pub fn apply_mask(g: &mut Graph, scores: Var, mask: Option<&[bool]>) -> Result<Var> {
    let Some(mask) = mask else { return Ok(scores) };
    if g.shape(scores) != [mask.len()] {
        return Err(Error::dim("mask", g.shape(scores), &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("every position is masked"));
    }
    let pen = Tensor::vector(mask.iter().map(|&m| if m { 0.0 } else { MASK_PENALTY }).collect());
    let pen = g.constant(pen)?;
    g.add(scores, pen)
}

/// Softmax attention over `T` frame vectors (`[T, d]`) and the attended vector `sum_t e_t x_t`.
pub fn temporal_attention(
    g: &mut Graph,
    p: &AttentionVars,
    h: Var,
    frames: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    if g.shape(frames).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("temporal_attention needs at least one frame"));
    }
    let scores = attention_scores(g, p, h, frames)?;
    let scores = apply_mask(g, scores, mask)?;
    let weights = g.softmax(scores, 0, 1.0)?;
    let attended = g.weighted_sum_axis(frames, weights, 0)?;
    Ok((weights, attended))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Grid { rows: usize, cols: usize },
    DetectionBoxes,
}

/// Per-frame, per-region features `x_tj` stored as a `[T, n, d]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    values: Tensor,
    layout: Layout,
}

impl VideoFeatures {
    pub fn new(values: Tensor, layout: Layout) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::dim("video features", values.shape(), &[3]));
        }
        let (t, n, d) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        if t == 0 || n == 0 || d == 0 {
            return Err(Error::Empty("video features need T, n, d >= 1"));
        }
        if let Layout::Grid { rows, cols } = layout {
            if rows * cols != n {
                return Err(Error::Layout(format!("grid {rows}x{cols} does not hold {n} regions")));
            }
        }
        if !values.is_finite() {
            return Err(Error::Numeric("video features".into()));
        }
        Ok(VideoFeatures { values, layout })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Feature vector of region `j` in frame `t`.
    pub fn region(&self, t: usize, j: usize) -> &[f64] {
        let (n, d) = (self.regions(), self.dim());
        &self.values.data()[(t * n + j) * d..(t * n + j + 1) * d]
    }

    /// Zero-pads along time to `frames`.
    pub fn padded(&self, frames: usize) -> Self {
        let mut data = self.values.data().to_vec();
        data.resize(frames.max(self.frames()) * self.regions() * self.dim(), 0.0);
        let values = Tensor::new(vec![frames.max(self.frames()), self.regions(), self.dim()], data).unwrap();
        VideoFeatures { values, layout: self.layout }
    }
}

/// Mean over the valid frames of a `[T, n, d]` video: `[n, d]`.
fn masked_time_mean(g: &mut Graph, video: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        None => g.mean_axis(video, 0),
        Some(m) => {
            let valid = m.iter().filter(|&&b| b).count();
            if valid == 0 {
                return Err(Error::Empty("every frame is masked"));
            }
            let w = Tensor::vector(m.iter().map(|&b| if b { 1.0 / valid as f64 } else { 0.0 }).collect());
            let w = g.constant(w)?;
            g.weighted_sum_axis(video, w, 0)
        }
    }
}

/// The three-step ST spatial attention for grid features (`video` is `[T, n, d]`):
/// average every grid cell over time, attend over the `n` averaged cells, and
/// reuse that one spatial distribution to pool every frame.
///
/// Returns the spatial weights `[n]` and the pooled frames `[T, d]`. Exactly
/// `n` attention scores are evaluated whatever `T` is.
pub fn st_spatial_attention(
    g: &mut Graph,
    p: &AttentionVars,
    h: Var,
    video: Var,
    layout: Layout,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    if !matches!(layout, Layout::Grid { .. }) {
        return Err(Error::Layout(
            "ST spatial attention needs grid-organised features; use per_frame_spatial_attention for detection boxes".into(),
        ));
    }
    let shape = g.shape(video).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("st_spatial_attention", &shape, &[3]));
    }
    if shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Empty("st_spatial_attention needs T, n >= 1"));
    }
    let cell_means = masked_time_mean(g, video, mask)?;
    let scores = attention_scores(g, p, h, cell_means)?;
    let weights = g.softmax(scores, 0, 1.0)?;
    let pooled = g.weighted_sum_axis(video, weights, 1)?;
    Ok((weights, pooled))
}

/// Independent spatial attention in every frame, for region features without a
/// consistent grid (detection boxes). Returns weights `[T, n]` and pooled frames `[T, d]`.
pub fn per_frame_spatial_attention(g: &mut Graph, p: &AttentionVars, h: Var, video: Var) -> Result<(Var, Var)> {
    let shape = g.shape(video).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("per_frame_spatial_attention", &shape, &[3]));
    }
    let (t, n, d) = (shape[0], shape[1], shape[2]);
    if t == 0 || n == 0 {
        return Err(Error::Empty("per_frame_spatial_attention needs T, n >= 1"));
    }
    let flat = g.reshape(video, &[t, n * d])?;
    let mut weights = Vec::with_capacity(t);
    let mut pooled = Vec::with_capacity(t);
    for frame in 0..t {
        let row = g.row(flat, frame)?;
        let regions = g.reshape(row, &[n, d])?;
        let scores = attention_scores(g, p, h, regions)?;
        let w = g.softmax(scores, 0, 1.0)?;
        pooled.push(g.weighted_sum_axis(regions, w, 0)?);
        weights.push(w);
    }
    Ok((g.stack(&weights)?, g.stack(&pooled)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSummary {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct TsOutput {
    pub frame_weights: Var,
    pub spatial_weights: Var,
    pub attended: Var,
}

/// TS attention: a low-temperature softmax over per-frame summaries softly
/// selects one frame, then spatial attention runs over that frame's regions.
pub fn ts_attention(
    g: &mut Graph,
    temporal: &AttentionVars,
    spatial: &AttentionVars,
    h: Var,
    video: Var,
    summary: FrameSummary,
    temperature: f64,
    mask: Option<&[bool]>,
) -> Result<TsOutput> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("TS temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(video).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("ts_attention", &shape, &[3]));
    }
    if shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Empty("ts_attention needs T, n >= 1"));
    }
    let summaries = match summary {
        FrameSummary::Mean => g.mean_axis(video, 1)?,
        FrameSummary::Max => g.max_axis(video, 1)?,
    };
    let frame_scores = attention_scores(g, temporal, h, summaries)?;
    let frame_scores = apply_mask(g, frame_scores, mask)?;
    let frame_weights = g.softmax(frame_scores, 0, temperature)?;
    let selected = g.weighted_sum_axis(video, frame_weights, 0)?;
    let region_scores = attention_scores(g, spatial, h, selected)?;
    let spatial_weights = g.softmax(region_scores, 0, 1.0)?;
    let attended = g.weighted_sum_axis(selected, spatial_weights, 0)?;
    Ok(TsOutput {
        frame_weights,
        spatial_weights,
        attended,
    })
}

/// Parameters of the ST/TS fusion scores `beta = w^T tanh(W x + W_h h)`; `W_h` is shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w_st: Tensor,
    pub w_ts: Tensor,
    pub w_h: Tensor,
    pub v_st: Tensor,
    pub v_ts: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w_st: Var,
    pub w_ts: Var,
    pub w_h: Var,
    pub v_st: Var,
    pub v_ts: Var,
}

impl FusionVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_st, self.w_ts, self.w_h, self.v_st, self.v_ts]
    }
}

impl FusionParams {
    pub fn zeros(fusion_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        FusionParams {
            w_st: Tensor::zeros(&[fusion_dim, feature_dim]),
            w_ts: Tensor::zeros(&[fusion_dim, feature_dim]),
            w_h: Tensor::zeros(&[fusion_dim, hidden_dim]),
            v_st: Tensor::zeros(&[fusion_dim]),
            v_ts: Tensor::zeros(&[fusion_dim]),
        }
    }

    pub fn init<R: Rng>(fusion_dim: usize, hidden_dim: usize, feature_dim: usize, rng: &mut R) -> Self {
        FusionParams {
            w_st: init_uniform(&[fusion_dim, feature_dim], feature_dim, rng),
            w_ts: init_uniform(&[fusion_dim, feature_dim], feature_dim, rng),
            w_h: init_uniform(&[fusion_dim, hidden_dim], hidden_dim, rng),
            v_st: init_uniform(&[fusion_dim], fusion_dim, rng),
            v_ts: init_uniform(&[fusion_dim], fusion_dim, rng),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<FusionVars> {
        Ok(FusionVars {
            w_st: g.param(self.w_st.clone())?,
            w_ts: g.param(self.w_ts.clone())?,
            w_h: g.param(self.w_h.clone())?,
            v_st: g.param(self.v_st.clone())?,
            v_ts: g.param(self.v_ts.clone())?,
        })
    }
}

impl Parameters for FusionParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_st", &self.w_st),
            ("w_ts", &self.w_ts),
            ("w_h", &self.w_h),
            ("v_st", &self.v_st),
            ("v_ts", &self.v_ts),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_st, &mut self.w_ts, &mut self.w_h, &mut self.v_st, &mut self.v_ts]
    }
}

/// Fuses the ST and TS features with a language-conditioned 2-way softmax and a
/// final `tanh`. Returns the fused feature and the branch weights `[2]`.
pub fn stats_fusion(g: &mut Graph, fp: &FusionVars, h: Var, x_st: Var, x_ts: Var) -> Result<(Var, Var)> {
    if g.shape(x_st) != g.shape(x_ts) {
        return Err(Error::dim("stats_fusion (branch features)", g.shape(x_st), g.shape(x_ts)));
    }
    let hh = g.matmul(fp.w_h, h)?;
    let a = g.matmul(fp.w_st, x_st)?;
    let a = g.add(a, hh)?;
    let a = g.tanh(a)?;
    let beta_st = g.dot(fp.v_st, a)?;
    let b = g.matmul(fp.w_ts, x_ts)?;
    let b = g.add(b, hh)?;
    let b = g.tanh(b)?;
    let beta_ts = g.dot(fp.v_ts, b)?;

    let beta_st = g.reshape(beta_st, &[1])?;
    let beta_ts = g.reshape(beta_ts, &[1])?;
    let betas = g.concat(&[beta_st, beta_ts])?;
    let branch_weights = g.softmax(betas, 0, 1.0)?;
    let both = g.stack(&[x_st, x_ts])?;
    let mixed = g.weighted_sum_axis(both, branch_weights, 0)?;
    Ok((g.tanh(mixed)?, branch_weights))
}
