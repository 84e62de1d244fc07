//! A standard LSTM cell, shared by the ranked temporal encoder and the caption decoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, Parameters};
use crate::tensor::Tensor;

/// Gate blocks are stacked in the order input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `[4 * hidden, input]`
    pub w_ih: Tensor,
    /// `[4 * hidden, hidden]`
    pub w_hh: Tensor,
    /// `[4 * hidden]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    hidden: usize,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            w_ih: Tensor::zeros(&[4 * hidden_dim, input_dim]),
            w_hh: Tensor::zeros(&[4 * hidden_dim, hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Weights uniform in ±1/sqrt(hidden); forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden_dim]);
        bias.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
        LstmParams {
            w_ih: init_uniform(&[4 * hidden_dim, input_dim], hidden_dim, rng),
            w_hh: init_uniform(&[4 * hidden_dim, hidden_dim], hidden_dim, rng),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> Result<LstmVars> {
        Ok(LstmVars {
            w_ih: g.param(self.w_ih.clone())?,
            w_hh: g.param(self.w_hh.clone())?,
            bias: g.param(self.bias.clone())?,
            hidden: self.hidden_dim(),
        })
    }
}

impl LstmVars {
    pub fn from_vars(g: &Graph, w_ih: Var, w_hh: Var, bias: Var) -> Self {
        LstmVars {
            w_ih,
            w_hh,
            bias,
            hidden: g.shape(w_hh)[1],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_ih, self.w_hh, self.bias]
    }

    /// Zero initial `(h, c)`.
    pub fn zero_state(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let h = g.constant(Tensor::zeros(&[self.hidden]))?;
        let c = g.constant(Tensor::zeros(&[self.hidden]))?;
        Ok((h, c))
    }
}

impl Parameters for LstmParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("bias", &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}

/// One LSTM recurrence: returns the new `(h, c)`.
pub fn lstm_step(g: &mut Graph, p: &LstmVars, h_prev: Var, c_prev: Var, x: Var) -> Result<(Var, Var)> {
    let hd = p.hidden;
    let input = g.shape(p.w_ih)[1];
    if g.shape(x) != [input] {
        return Err(Error::dim("lstm_step (input)", g.shape(x), &[input]));
    }
    if g.shape(h_prev) != [hd] || g.shape(c_prev) != [hd] {
        return Err(Error::dim("lstm_step (state)", g.shape(h_prev), g.shape(c_prev)));
    }
    let zx = g.matmul(p.w_ih, x)?;
    let zh = g.matmul(p.w_hh, h_prev)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, p.bias)?;

    let i = g.slice(z, 0, hd)?;
    let i = g.sigmoid(i)?;
    let f = g.slice(z, hd, hd)?;
    let f = g.sigmoid(f)?;
    let o = g.slice(z, 2 * hd, hd)?;
    let o = g.sigmoid(o)?;
    let cand = g.slice(z, 3 * hd, hd)?;
    let cand = g.tanh(cand)?;

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state() {
        let mut g = Graph::new();
        let p = LstmParams::zeros(3, 2).bind(&mut g).unwrap();
        let (h0, c0) = p.zero_state(&mut g).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        let (h, c) = lstm_step(&mut g, &p, h0, c0, x).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let mut g = Graph::new();
        let p = LstmParams::zeros(1, 2).bind(&mut g).unwrap();
        let h0 = g.constant(Tensor::vector(vec![0.3, 0.1])).unwrap();
        let c0 = g.constant(Tensor::vector(vec![2.0, -0.8])).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0])).unwrap();
        let (h, c) = lstm_step(&mut g, &p, h0, c0, x).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, -0.4]);
        for (hv, cv) in g.value(h).data().iter().zip([2.0f64, -0.8]) {
            assert!((hv - 0.5 * (0.5 * cv).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(3, 4, &mut rng);
        assert_eq!(&p.bias.data()[4..8], &[1.0; 4]);
        assert!(p.bias.data()[..4].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn dimension_mismatch() {
        let mut g = Graph::new();
        let p = LstmParams::zeros(3, 2).bind(&mut g).unwrap();
        let (h0, c0) = p.zero_state(&mut g).unwrap();
        let x = g.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(lstm_step(&mut g, &p, h0, c0, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmParams::init(3, 2, &mut rng);
        let params = vec![
            p.w_ih.clone(),
            p.w_hh.clone(),
            p.bias.clone(),
            Tensor::vector(vec![0.2, -0.5]),
            Tensor::vector(vec![0.7, 0.1]),
            Tensor::vector(vec![1.0, -0.3, 0.4]),
        ];
        let report = grad_check(
            |g, v| {
                let lv = LstmVars::from_vars(g, v[0], v[1], v[2]);
                let (h, c) = lstm_step(g, &lv, v[3], v[4], v[5])?;
                let (h2, _) = lstm_step(g, &lv, h, c, v[5])?;
                let s = g.mul(h2, h2)?;
                g.sum(s)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
