//! Ranked temporal attention: an LSTM encoder trained with a pairwise softplus
//! ordering loss so that its final state behaves like a rank-pooling direction,
//! plus the convex rank-SVM solver that computes that direction exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, LstmVars};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPoolingConfig {
    /// Ordering margin; must be positive.
    pub margin: f64,
    /// Weight of the ranked loss in the total training loss.
    pub loss_weight: f64,
    /// Append the temporal mean to the encoder output.
    pub combine_mean: bool,
}

impl Default for RankedPoolingConfig {
    fn default() -> Self {
        RankedPoolingConfig {
            margin: 1.0,
            loss_weight: 0.1,
            combine_mean: true,
        }
    }
}

impl RankedPoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Parameter(format!("ranking margin must be positive, got {}", self.margin)));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(Error::Parameter(format!(
                "ranked loss weight must be nonnegative, got {}",
                self.loss_weight
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RankedEncoding {
    /// Final LSTM hidden state.
    pub encoding: Var,
    /// `encoding`, or `[encoding ; temporal mean]` when the mean is combined.
    pub code: Var,
}

fn valid_rows(t: usize, mask: Option<&[bool]>) -> Vec<usize> {
    match mask {
        None => (0..t).collect(),
        Some(m) => (0..t).filter(|&i| m[i]).collect(),
    }
}

/// Runs the encoder over the (valid) frames of `frames` (`[T, d]`) in temporal
/// order from a zero state.
pub fn ranked_encode(
    g: &mut Graph,
    p: &LstmVars,
    cfg: &RankedPoolingConfig,
    frames: Var,
    mask: Option<&[bool]>,
) -> Result<RankedEncoding> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("ranked_encode", &shape, &[2]));
    }
    let rows = valid_rows(shape[0], mask);
    if rows.is_empty() {
        return Err(Error::Empty("ranked_encode needs at least one frame"));
    }
    let (mut h, mut c) = p.zero_state(g)?;
    for &t in &rows {
        let x = g.row(frames, t)?;
        (h, c) = lstm_step(g, p, h, c, x)?;
    }
    let code = if cfg.combine_mean {
        let mean = masked_mean_rows(g, frames, &rows)?;
        g.concat(&[h, mean])?
    } else {
        h
    };
    Ok(RankedEncoding { encoding: h, code })
}

/// Mean of the listed rows of a `[T, d]` matrix.
pub(crate) fn masked_mean_rows(g: &mut Graph, frames: Var, rows: &[usize]) -> Result<Var> {
    let t = g.shape(frames)[0];
    if rows.len() == t {
        return g.mean_axis(frames, 0);
    }
    let mut w = vec![0.0; t];
    for &r in rows {
        w[r] = 1.0 / rows.len() as f64;
    }
    let w = g.constant(Tensor::vector(w))?;
    g.weighted_sum_axis(frames, w, 0)
}

/// `sum_{t=2..T} softplus(<x_st, x_{t-1}> + margin - <x_st, x_t>)` over the valid frames.
/// Zero when fewer than two frames remain.
pub fn ranked_loss(g: &mut Graph, x_st: Var, frames: Var, margin: f64, mask: Option<&[bool]>) -> Result<Var> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 2 || g.shape(x_st) != [shape[1]] {
        return Err(Error::dim("ranked_loss", g.shape(x_st), &shape));
    }
    let rows = valid_rows(shape[0], mask);
    if rows.len() < 2 {
        return g.scalar(0.0);
    }
    let proj = g.matmul(frames, x_st)?;
    let (prev, next) = if rows.len() == shape[0] {
        let k = rows.len() - 1;
        (g.slice(proj, 0, k)?, g.slice(proj, 1, k)?)
    } else {
        let picked = rows.iter().map(|&r| {
            let v = g.pick(proj, r)?;
            g.reshape(v, &[1])
        });
        let picked = picked.collect::<Result<Vec<_>>>()?;
        (g.concat(&picked[..picked.len() - 1])?, g.concat(&picked[1..])?)
    };
    let gap = g.sub(prev, next)?;
    let m = g.scalar(margin)?;
    let z = g.add(gap, m)?;
    let sp = g.softplus(z)?;
    g.sum(sp)
}

/// Baseline value of the ranked loss for a zero encoding: `(T - 1) softplus(margin)`.
pub fn zero_encoding_loss(frames: usize, margin: f64) -> f64 {
    frames.saturating_sub(1) as f64 * softplus(margin)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub lambda: f64,
    pub margin: f64,
    pub max_iters: usize,
    /// Initial step of the backtracking line search.
    pub step_size: f64,
    /// Stop once the gradient norm drops below this.
    pub tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            lambda: 1.0,
            margin: 1.0,
            max_iters: 100_000,
            step_size: 1.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Rank-SVM objective `½‖w‖² + λ Σ_t softplus(<w, x_t> + β - <w, x_{t+1}>)`.
pub fn rank_svm_objective(w: &[f64], frames: &[Vec<f64>], lambda: f64, margin: f64) -> f64 {
    let reg = 0.5 * dot(w, w);
    let data: f64 = frames
        .windows(2)
        .map(|p| softplus(dot(w, &p[0]) + margin - dot(w, &p[1])))
        .sum();
    reg + lambda * data
}

fn rank_svm_gradient(w: &[f64], frames: &[Vec<f64>], lambda: f64, margin: f64) -> Vec<f64> {
    let mut grad = w.to_vec();
    for p in frames.windows(2) {
        let s = lambda * sigmoid(dot(w, &p[0]) + margin - dot(w, &p[1]));
        for (k, gk) in grad.iter_mut().enumerate() {
            *gk += s * (p[0][k] - p[1][k]);
        }
    }
    grad
}

/// Solves the rank-SVM problem by gradient descent with Armijo backtracking.
/// The objective is strongly convex, so the stationary point found is the global optimum.
pub fn rank_svm_oracle(frames: &[Vec<f64>], cfg: &OracleConfig) -> Result<OracleSolution> {
    if frames.len() < 2 {
        return Err(Error::Empty("rank_svm_oracle needs at least two frames"));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::Parameter(format!("regularizer must be positive, got {}", cfg.lambda)));
    }
    let d = frames[0].len();
    if let Some(bad) = frames.iter().find(|f| f.len() != d) {
        return Err(Error::dim("rank_svm_oracle", &[d], &[bad.len()]));
    }
    let objective = |w: &[f64]| rank_svm_objective(w, frames, cfg.lambda, cfg.margin);

    let mut w = vec![0.0; d];
    let mut f = objective(&w);
    let mut step = cfg.step_size;
    let mut trial = vec![0.0; d];
    for iter in 0..cfg.max_iters {
        let grad = rank_svm_gradient(&w, frames, cfg.lambda, cfg.margin);
        let gn2 = dot(&grad, &grad);
        if gn2.sqrt() < cfg.tolerance {
            return Ok(OracleSolution {
                w,
                objective: f,
                grad_norm: gn2.sqrt(),
                iterations: iter,
            });
        }
        loop {
            for k in 0..d {
                trial[k] = w[k] - step * grad[k];
            }
            let ft = objective(&trial);
            if ft <= f - 1e-4 * step * gn2 || step < 1e-16 {
                w.copy_from_slice(&trial);
                f = ft;
                break;
            }
            step *= 0.5;
        }
        step = (step * 2.0).min(cfg.step_size.max(1.0) * 1e3);
    }
    let grad = rank_svm_gradient(&w, frames, cfg.lambda, cfg.margin);
    Err(Error::Convergence {
        iters: cfg.max_iters,
        grad_norm: dot(&grad, &grad).sqrt(),
    })
}

/// Fraction of consecutive pairs whose projection onto `w` strictly increases.
pub fn order_preservation_rate(w: &[f64], frames: &[Vec<f64>]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let kept = frames
        .windows(2)
        .filter(|p| dot(w, &p[1]) > dot(w, &p[0]))
        .count();
    kept as f64 / (frames.len() - 1) as f64
}
