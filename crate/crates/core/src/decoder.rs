//! Word embeddings, the caption LSTM with single-head self-attention over the
//! words generated so far, and the next-word distribution.

use rand::Rng;

use crate::attention::{attention_scores, AttentionParams, AttentionVars, MASK_PENALTY};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, LstmParams, LstmVars};
use crate::params::{init_uniform, Parameters};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD, UNK};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `[D, embed]`; the PAD row stays zero.
    pub embedding: Tensor,
    /// Input `embed`, hidden `hidden`.
    pub lstm: LstmParams,
    /// Query (`W_h`, from the hidden state) and key (`W_x`, from embedded words) projections.
    pub self_attention: AttentionParams,
    /// `[hidden, embed]` value projection.
    pub value: Tensor,
    /// `[out, hidden + feature]`
    pub out_hidden: Tensor,
    pub out_hidden_bias: Tensor,
    /// `[D, out]`
    pub out_scores: Tensor,
    pub out_scores_bias: Tensor,
}

/// Sizes of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub self_attention: usize,
    pub output: usize,
    pub feature: usize,
}

impl DecoderParams {
    pub fn zeros(d: DecoderDims) -> Self {
        DecoderParams {
            embedding: Tensor::zeros(&[d.vocab, d.embed]),
            lstm: LstmParams::zeros(d.embed, d.hidden),
            self_attention: AttentionParams::zeros(d.self_attention, d.hidden, d.embed),
            value: Tensor::zeros(&[d.hidden, d.embed]),
            out_hidden: Tensor::zeros(&[d.output, d.hidden + d.feature]),
            out_hidden_bias: Tensor::zeros(&[d.output]),
            out_scores: Tensor::zeros(&[d.vocab, d.output]),
            out_scores_bias: Tensor::zeros(&[d.vocab]),
        }
    }

    pub fn init<R: Rng>(d: DecoderDims, rng: &mut R) -> Self {
        let mut embedding = init_uniform(&[d.vocab, d.embed], d.embed, rng);
        embedding.data_mut()[PAD * d.embed..(PAD + 1) * d.embed].fill(0.0);
        DecoderParams {
            embedding,
            lstm: LstmParams::init(d.embed, d.hidden, rng),
            self_attention: AttentionParams::init(d.self_attention, d.hidden, d.embed, rng),
            value: init_uniform(&[d.hidden, d.embed], d.embed, rng),
            out_hidden: init_uniform(&[d.output, d.hidden + d.feature], d.hidden + d.feature, rng),
            out_hidden_bias: Tensor::zeros(&[d.output]),
            out_scores: init_uniform(&[d.vocab, d.output], d.output, rng),
            out_scores_bias: Tensor::zeros(&[d.vocab]),
        }
    }

    pub fn dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.embedding.shape()[0],
            embed: self.embedding.shape()[1],
            hidden: self.lstm.hidden_dim(),
            self_attention: self.self_attention.attention_dim(),
            output: self.out_hidden.shape()[0],
            feature: self.out_hidden.shape()[1] - self.lstm.hidden_dim(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<DecoderVars> {
        let vars = self
            .named()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        DecoderVars::from_vars(g, &vars)
    }
}

impl Parameters for DecoderParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("embedding", &self.embedding),
            ("lstm.w_ih", &self.lstm.w_ih),
            ("lstm.w_hh", &self.lstm.w_hh),
            ("lstm.bias", &self.lstm.bias),
            ("self_attention.w_h", &self.self_attention.w_h),
            ("self_attention.w_x", &self.self_attention.w_x),
            ("self_attention.b", &self.self_attention.b),
            ("self_attention.w", &self.self_attention.w),
            ("value", &self.value),
            ("out_hidden", &self.out_hidden),
            ("out_hidden_bias", &self.out_hidden_bias),
            ("out_scores", &self.out_scores),
            ("out_scores_bias", &self.out_scores_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.lstm.tensors_mut());
        v.extend(self.self_attention.tensors_mut());
        v.extend([
            &mut self.value,
            &mut self.out_hidden,
            &mut self.out_hidden_bias,
            &mut self.out_scores,
            &mut self.out_scores_bias,
        ]);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub embedding: Var,
    pub lstm: LstmVars,
    pub self_attention: AttentionVars,
    pub value: Var,
    pub out_hidden: Var,
    pub out_hidden_bias: Var,
    pub out_scores: Var,
    pub out_scores_bias: Var,
    pad_mask: Var,
    vocab: usize,
}

impl DecoderVars {
    /// Same order as [`DecoderParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        v.extend(self.lstm.vars());
        v.extend(self.self_attention.vars());
        v.extend([
            self.value,
            self.out_hidden,
            self.out_hidden_bias,
            self.out_scores,
            self.out_scores_bias,
        ]);
        v
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Rebuilds the handles from vars in [`DecoderVars::vars`] order.
    pub fn from_vars(g: &mut Graph, v: &[Var]) -> Result<Self> {
        if v.len() != 13 {
            return Err(Error::Contract(format!("decoder needs 13 parameter vars, got {}", v.len())));
        }
        let vocab = g.shape(v[0])[0];
        let mut pad_mask = vec![0.0; vocab];
        pad_mask[PAD] = MASK_PENALTY;
        Ok(DecoderVars {
            embedding: v[0],
            lstm: LstmVars::from_vars(g, v[1], v[2], v[3]),
            self_attention: AttentionVars::from_vars(g, v[4], v[5], v[6], v[7])?,
            value: v[8],
            out_hidden: v[9],
            out_hidden_bias: v[10],
            out_scores: v[11],
            out_scores_bias: v[12],
            pad_mask: g.constant(Tensor::vector(pad_mask))?,
            vocab,
        })
    }
}

/// Language state between words.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    /// `h` plus the self-attention context over `history`.
    pub query: Var,
    /// Embeddings of the words emitted so far.
    pub history: Vec<Var>,
}

impl DecoderState {
    pub fn initial(g: &mut Graph, dv: &DecoderVars) -> Result<Self> {
        let (h, c) = dv.lstm.zero_state(g)?;
        Ok(DecoderState {
            h,
            c,
            query: h,
            history: Vec::new(),
        })
    }
}

/// Embedding row of `token`. PAD maps to a constant zero vector, so its row never receives gradient.
pub fn embed(g: &mut Graph, dv: &DecoderVars, token: usize) -> Result<Var> {
    if token >= dv.vocab {
        return Err(Error::Vocabulary(format!("token index {token} out of range for size {}", dv.vocab)));
    }
    if token == PAD {
        let e = g.shape(dv.embedding)[1];
        return g.constant(Tensor::zeros(&[e]));
    }
    g.row(dv.embedding, token)
}

/// Additive self-attention of `h` over the embedded history; the context is
/// the value projection of the attended embedding, zero for an empty history.
pub fn self_attend_history(g: &mut Graph, dv: &DecoderVars, h: Var, history: &[Var]) -> Result<Var> {
    if history.is_empty() {
        let hd = dv.lstm.hidden_dim();
        return g.constant(Tensor::zeros(&[hd]));
    }
    let keys = g.stack(history)?;
    let scores = attention_scores(g, &dv.self_attention, h, keys)?;
    let weights = g.softmax(scores, 0, 1.0)?;
    let attended = g.weighted_sum_axis(keys, weights, 0)?;
    g.matmul(dv.value, attended)
}

/// Output scores `W2 tanh(W1 [query; x] + b1) + b2`, with PAD pushed to `-1e9`.
pub fn output_scores(g: &mut Graph, dv: &DecoderVars, query: Var, x_hat: Var) -> Result<Var> {
    let expected = g.shape(dv.out_hidden)[1] - dv.lstm.hidden_dim();
    if g.shape(x_hat) != [expected] {
        return Err(Error::dim("decode_step (visual feature)", g.shape(x_hat), &[expected]));
    }
    let joint = g.concat(&[query, x_hat])?;
    let a = g.matmul(dv.out_hidden, joint)?;
    let a = g.add(a, dv.out_hidden_bias)?;
    let a = g.tanh(a)?;
    let s = g.matmul(dv.out_scores, a)?;
    let s = g.add(s, dv.out_scores_bias)?;
    g.add(s, dv.pad_mask)
}

/// One word: advance the LSTM on `prev`, refresh the self-attention query and
/// return the next-word distribution with the new state.
pub fn decode_step(
    g: &mut Graph,
    dv: &DecoderVars,
    state: &DecoderState,
    prev: usize,
    x_hat: Var,
) -> Result<(Var, DecoderState)> {
    let e = embed(g, dv, prev)?;
    let (h, c) = lstm_step(g, &dv.lstm, state.h, state.c, e)?;
    let mut history = state.history.clone();
    if prev != BOS {
        history.push(e);
    }
    let ctx = self_attend_history(g, dv, h, &history)?;
    let query = g.add(h, ctx)?;
    let scores = output_scores(g, dv, query, x_hat)?;
    let dist = g.softmax(scores, 0, 1.0)?;
    Ok((dist, DecoderState { h, c, query, history }))
}

/// Whether `token` may be emitted during generation (EOS or a real word).
pub fn emittable(token: usize) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

/// Most probable emittable token; ties go to the lowest index.
pub fn argmax_token(dist: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &p) in dist.iter().enumerate() {
        if emittable(i) && p > dist[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DecoderDims {
        DecoderDims {
            vocab: 7,
            embed: 3,
            hidden: 4,
            self_attention: 3,
            output: 5,
            feature: 2,
        }
    }

    fn params() -> DecoderParams {
        DecoderParams::init(dims(), &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn named_and_vars_orders_agree() {
        let p = params();
        let mut g = Graph::new();
        let dv = p.bind(&mut g).unwrap();
        let named = p.named();
        let vars = dv.vars();
        assert_eq!(named.len(), vars.len());
        for ((_, t), v) in named.iter().zip(vars) {
            assert_eq!(*t, g.value(v));
        }
    }

    #[test]
    fn embedding_lookup() {
        let p = params();
        let mut g = Graph::new();
        let dv = p.bind(&mut g).unwrap();
        let a = embed(&mut g, &dv, 5).unwrap();
        let b = embed(&mut g, &dv, 5).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(g.value(a).data(), p.embedding.row(5));
        let pad = embed(&mut g, &dv, PAD).unwrap();
        assert!(g.value(pad).data().iter().all(|&x| x == 0.0));
        assert!(matches!(embed(&mut g, &dv, 7), Err(Error::Vocabulary(_))));

        // Gradient of a loss touching only token 5 lives only in row 5.
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(dv.embedding);
        for r in 0..7 {
            let nz = grad.row(r).iter().any(|&x| x != 0.0);
            assert_eq!(nz, r == 5, "row {r}");
        }
    }

    #[test]
    fn self_attention_base_cases() {
        let p = params();
        let mut g = Graph::new();
        let dv = p.bind(&mut g).unwrap();
        let h = g.constant(Tensor::vector(vec![0.3, -0.2, 0.1, 0.5])).unwrap();
        let empty = self_attend_history(&mut g, &dv, h, &[]).unwrap();
        assert!(g.value(empty).data().iter().all(|&x| x == 0.0));

        let e1 = embed(&mut g, &dv, 4).unwrap();
        let one = self_attend_history(&mut g, &dv, h, &[e1]).unwrap();
        let direct = g.matmul(dv.value, e1).unwrap();
        assert_eq!(g.value(one), g.value(direct));
        let three = self_attend_history(&mut g, &dv, h, &[e1, e1, e1]).unwrap();
        for (a, b) in g.value(three).data().iter().zip(g.value(one).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_step_masks_pad_and_tracks_history() {
        let mut p = DecoderParams::zeros(dims());
        let mut g = Graph::new();
        let dv = p.bind(&mut g).unwrap();
        let st = DecoderState::initial(&mut g, &dv).unwrap();
        let x = g.constant(Tensor::vector(vec![0.5, -0.5])).unwrap();
        let (dist, st1) = decode_step(&mut g, &dv, &st, BOS, x).unwrap();
        let d = g.value(dist).data().to_vec();
        assert_eq!(d[PAD], 0.0);
        for &p in &d[1..] {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert!(st1.history.is_empty());
        let (_, st2) = decode_step(&mut g, &dv, &st1, 4, x).unwrap();
        assert_eq!(st2.history.len(), 1);

        let bad = g.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(decode_step(&mut g, &dv, &st, BOS, bad), Err(Error::Dimension { .. })));

        // Rigged output: +50 on EOS saturates.
        p.out_scores_bias.data_mut()[EOS] = 50.0;
        let mut g = Graph::new();
        let dv = p.bind(&mut g).unwrap();
        let st = DecoderState::initial(&mut g, &dv).unwrap();
        let x = g.constant(Tensor::vector(vec![0.5, -0.5])).unwrap();
        let (dist, _) = decode_step(&mut g, &dv, &st, BOS, x).unwrap();
        let d = g.value(dist).data();
        assert_eq!(argmax_token(d), EOS);
        assert!(d[EOS] >= 1.0 - 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_and_exclusions() {
        assert_eq!(argmax_token(&[0.0, 0.9, 0.05, 0.0, 0.05]), EOS);
        assert_eq!(argmax_token(&[0.0, 0.0, 0.2, 0.0, 0.4, 0.4]), 4);
        assert_eq!(argmax_token(&[0.0, 0.0, 0.1, 0.8, 0.1]), EOS);
    }

    #[test]
    fn decode_step_gradients() {
        // Unit-scale weights keep every gradient entry well above finite-difference noise.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = params();
        let tensors: Vec<Tensor> = base
            .named()
            .into_iter()
            .map(|(_, t)| init_uniform(t.shape(), 1, &mut rng))
            .collect();
        let report = grad_check(
            |g, vars| {
                let dv = DecoderVars::from_vars(g, vars)?;
                let st = DecoderState::initial(g, &dv)?;
                let x = g.constant(Tensor::vector(vec![0.4, -0.7]))?;
                let (_, st) = decode_step(g, &dv, &st, BOS, x)?;
                let (_, st) = decode_step(g, &dv, &st, 4, x)?;
                let (dist, _) = decode_step(g, &dv, &st, 5, x)?;
                let p6 = g.pick(dist, 6)?;
                g.log_clamped(p6, 1e-12)
            },
            &tensors,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
