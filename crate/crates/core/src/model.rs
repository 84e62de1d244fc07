//! The full captioner: ST and TS visual branches, their fusion, and the
//! decoder, with teacher-forced scoring and caption generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    per_frame_spatial_attention, st_spatial_attention, stats_fusion, temporal_attention, ts_attention,
    AttentionParams, AttentionVars, FrameSummary, FusionParams, FusionVars, Layout, VideoFeatures,
};
use crate::autodiff::{Graph, Var};
use crate::decoder::{argmax_token, decode_step, emittable, DecoderDims, DecoderParams, DecoderState, DecoderVars};
use crate::error::{Error, Result};
use crate::lstm::{LstmParams, LstmVars};
use crate::params::{init_uniform, Parameters};
use crate::ranked::{masked_mean_rows, ranked_encode, ranked_loss, RankedPoolingConfig};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

/// How the ST branch aggregates its spatially pooled frames over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalScheme {
    MeanPool,
    Lstm,
    MeanPlusLstm,
    TemporalAtt,
    MeanPlusTemporal,
    RankedAtt,
    MeanPlusRanked,
}

impl TemporalScheme {
    pub const ALL: [TemporalScheme; 7] = [
        TemporalScheme::MeanPool,
        TemporalScheme::Lstm,
        TemporalScheme::MeanPlusLstm,
        TemporalScheme::TemporalAtt,
        TemporalScheme::MeanPlusTemporal,
        TemporalScheme::RankedAtt,
        TemporalScheme::MeanPlusRanked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalScheme::MeanPool => "mean_pool",
            TemporalScheme::Lstm => "lstm",
            TemporalScheme::MeanPlusLstm => "mean_plus_lstm",
            TemporalScheme::TemporalAtt => "temporal_att",
            TemporalScheme::MeanPlusTemporal => "mean_plus_temporal",
            TemporalScheme::RankedAtt => "ranked_att",
            TemporalScheme::MeanPlusRanked => "mean_plus_ranked",
        }
    }

    /// Whether the temporal mean is concatenated to the scheme's own summary.
    pub fn combines_mean(self) -> bool {
        matches!(
            self,
            TemporalScheme::MeanPlusLstm | TemporalScheme::MeanPlusTemporal | TemporalScheme::MeanPlusRanked
        )
    }

    pub fn is_ranked(self) -> bool {
        matches!(self, TemporalScheme::RankedAtt | TemporalScheme::MeanPlusRanked)
    }

    fn uses_encoder(self) -> bool {
        matches!(
            self,
            TemporalScheme::Lstm | TemporalScheme::MeanPlusLstm | TemporalScheme::RankedAtt | TemporalScheme::MeanPlusRanked
        )
    }
}

impl std::str::FromStr for TemporalScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown temporal scheme {s:?}")))
    }
}

/// Which visual branch feeds the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "st")]
    St,
    #[serde(rename = "ts")]
    Ts,
    #[serde(rename = "stats")]
    Stats,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::St, Branch::Ts, Branch::Stats];

    pub fn name(self) -> &'static str {
        match self {
            Branch::St => "st",
            Branch::Ts => "ts",
            Branch::Stats => "stats",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parameter(format!("unknown branch {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Dimension `d` of the input region features.
    pub feature_dim: usize,
    /// Learned linear embedding of region features; `None` uses them as they are.
    pub feature_embed_dim: Option<usize>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub fusion_dim: usize,
    pub self_attention_dim: usize,
    /// Width of the hidden layer of the word predictor.
    pub output_dim: usize,
    pub vocab_size: usize,
    pub scheme: TemporalScheme,
    pub branch: Branch,
    pub ranked_margin: f64,
    pub ts_temperature: f64,
    pub frame_summary: FrameSummary,
    /// Query the visual attention with `h` plus the self-attention context
    /// (true) or with the raw LSTM state (false).
    pub history_in_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 1024,
            feature_embed_dim: Some(512),
            embed_dim: 256,
            hidden_dim: 512,
            attention_dim: 128,
            fusion_dim: 128,
            self_attention_dim: 128,
            output_dim: 512,
            vocab_size: 0,
            scheme: TemporalScheme::MeanPlusRanked,
            branch: Branch::Stats,
            ranked_margin: 1.0,
            ts_temperature: 0.1,
            frame_summary: FrameSummary::Mean,
            history_in_query: true,
        }
    }
}

impl ModelConfig {
    /// Small dimensions suited to the synthetic corpus on a CPU.
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            feature_embed_dim: None,
            embed_dim: 32,
            hidden_dim: 64,
            attention_dim: 32,
            fusion_dim: 32,
            self_attention_dim: 32,
            output_dim: 64,
            vocab_size,
            ..Default::default()
        }
    }

    /// Width of the features the attention stack works on.
    pub fn encoded_dim(&self) -> usize {
        self.feature_embed_dim.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("fusion_dim", self.fusion_dim),
            ("self_attention_dim", self.self_attention_dim),
            ("output_dim", self.output_dim),
            ("feature_embed_dim", self.feature_embed_dim.unwrap_or(1)),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if self.vocab_size < 5 {
            return Err(Error::Parameter(format!(
                "vocabulary of {} tokens has no word besides the reserved ones",
                self.vocab_size
            )));
        }
        if !(self.ts_temperature > 0.0) {
            return Err(Error::Parameter(format!("TS temperature must be positive, got {}", self.ts_temperature)));
        }
        RankedPoolingConfig {
            margin: self.ranked_margin,
            loss_weight: 0.0,
            combine_mean: false,
        }
        .validate()
    }

    fn ranked_config(&self) -> RankedPoolingConfig {
        RankedPoolingConfig {
            margin: self.ranked_margin,
            loss_weight: 0.0,
            combine_mean: self.scheme.combines_mean(),
        }
    }

    fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab_size,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            self_attention: self.self_attention_dim,
            output: self.output_dim,
            feature: self.encoded_dim(),
        }
    }
}

/// Every learned tensor of the captioner.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `[F, d]`, present when features are embedded.
    pub feature_embed: Option<Tensor>,
    /// Temporal attention over ST-pooled frames.
    pub temporal: AttentionParams,
    pub st_spatial: AttentionParams,
    pub ts_temporal: AttentionParams,
    pub ts_spatial: AttentionParams,
    /// Ranked / plain LSTM encoder over ST-pooled frames (`F -> F`).
    pub encoder: LstmParams,
    /// `[F, 2F]` projection of concatenated ST codes.
    pub st_project: Tensor,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    fn init<R: Rng>(cfg: &ModelConfig, r: &mut R) -> Self {
        let (d, f, a, h) = (cfg.feature_dim, cfg.encoded_dim(), cfg.attention_dim, cfg.hidden_dim);
        ModelParams {
            feature_embed: cfg.feature_embed_dim.map(|k| init_uniform(&[k, d], d, r)),
            temporal: AttentionParams::init(a, h, f, r),
            st_spatial: AttentionParams::init(a, h, f, r),
            ts_temporal: AttentionParams::init(a, h, f, r),
            ts_spatial: AttentionParams::init(a, h, f, r),
            encoder: LstmParams::init(f, f, r),
            st_project: init_uniform(&[f, 2 * f], 2 * f, r),
            fusion: FusionParams::init(cfg.fusion_dim, h, f, r),
            decoder: DecoderParams::init(cfg.decoder_dims(), r),
        }
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, a, h) = (cfg.feature_dim, cfg.encoded_dim(), cfg.attention_dim, cfg.hidden_dim);
        ModelParams {
            feature_embed: cfg.feature_embed_dim.map(|k| Tensor::zeros(&[k, d])),
            temporal: AttentionParams::zeros(a, h, f),
            st_spatial: AttentionParams::zeros(a, h, f),
            ts_temporal: AttentionParams::zeros(a, h, f),
            ts_spatial: AttentionParams::zeros(a, h, f),
            encoder: LstmParams::zeros(f, f),
            st_project: Tensor::zeros(&[f, 2 * f]),
            fusion: FusionParams::zeros(cfg.fusion_dim, h, f),
            decoder: DecoderParams::zeros(cfg.decoder_dims()),
        }
    }

    /// `(group, name, tensor)` in a fixed order shared with [`ModelVars::vars`].
    pub fn named(&self) -> Vec<(&'static str, &'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.feature_embed {
            out.push(("feature_embed", "w", t));
        }
        let groups: [(&'static str, &dyn Parameters); 7] = [
            ("temporal", &self.temporal),
            ("st_spatial", &self.st_spatial),
            ("ts_temporal", &self.ts_temporal),
            ("ts_spatial", &self.ts_spatial),
            ("encoder", &self.encoder),
            ("fusion", &self.fusion),
            ("decoder", &self.decoder),
        ];
        for (group, p) in groups.into_iter().take(5) {
            out.extend(p.named().into_iter().map(|(n, t)| (group, n, t)));
        }
        out.push(("st_project", "w", &self.st_project));
        for (group, p) in groups.into_iter().skip(5) {
            out.extend(p.named().into_iter().map(|(n, t)| (group, n, t)));
        }
        out
    }

    /// Mutable tensors in [`ModelParams::named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.feature_embed {
            out.push(t);
        }
        out.extend(self.temporal.tensors_mut());
        out.extend(self.st_spatial.tensors_mut());
        out.extend(self.ts_temporal.tensors_mut());
        out.extend(self.ts_spatial.tensors_mut());
        out.extend(self.encoder.tensors_mut());
        out.push(&mut self.st_project);
        out.extend(self.fusion.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }

    /// Dotted `group.name` of every tensor.
    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(g, n, _)| format!("{g}.{n}")).collect()
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, _, t)| t.numel()).sum()
    }
}

/// Graph handles of every parameter.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub feature_embed: Option<Var>,
    pub temporal: AttentionVars,
    pub st_spatial: AttentionVars,
    pub ts_temporal: AttentionVars,
    pub ts_spatial: AttentionVars,
    pub encoder: LstmVars,
    pub st_project: Var,
    pub fusion: FusionVars,
    pub decoder: DecoderVars,
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.feature_embed.into_iter().collect();
        out.extend(self.temporal.vars());
        out.extend(self.st_spatial.vars());
        out.extend(self.ts_temporal.vars());
        out.extend(self.ts_spatial.vars());
        out.extend(self.encoder.vars());
        out.push(self.st_project);
        out.extend(self.fusion.vars());
        out.extend(self.decoder.vars());
        out
    }

    /// Rebuilds handles from vars in [`ModelVars::vars`] order.
    pub fn from_vars(g: &mut Graph, cfg: &ModelConfig, v: &[Var]) -> Result<Self> {
        let off = usize::from(cfg.feature_embed_dim.is_some());
        if v.len() != off + 4 * 4 + 3 + 1 + 5 + 13 {
            return Err(Error::Contract(format!("model needs {} parameter vars, got {}", off + 38, v.len())));
        }
        let att = |g: &mut Graph, i: usize| AttentionVars::from_vars(g, v[i], v[i + 1], v[i + 2], v[i + 3]);
        let temporal = att(g, off)?;
        let st_spatial = att(g, off + 4)?;
        let ts_temporal = att(g, off + 8)?;
        let ts_spatial = att(g, off + 12)?;
        let e = off + 16;
        let encoder = LstmVars::from_vars(g, v[e], v[e + 1], v[e + 2]);
        let st_project = v[e + 3];
        let f = e + 4;
        let fusion = FusionVars {
            w_st: v[f],
            w_ts: v[f + 1],
            w_h: v[f + 2],
            v_st: v[f + 3],
            v_ts: v[f + 4],
        };
        let decoder = DecoderVars::from_vars(g, &v[f + 5..])?;
        Ok(ModelVars {
            feature_embed: (off == 1).then(|| v[0]),
            temporal,
            st_spatial,
            ts_temporal,
            ts_spatial,
            encoder,
            st_project,
            fusion,
            decoder,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// A video bound into a graph, ready for repeated attention queries.
#[derive(Clone, Debug)]
pub struct VideoContext {
    /// `[T, n, F]`
    pub video: Var,
    pub layout: Layout,
    pub mask: Option<Vec<bool>>,
    valid_rows: Vec<usize>,
}

impl VideoContext {
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
}

/// Everything the visual stack produced for one word.
#[derive(Clone, Debug)]
pub struct VisualOutput {
    /// Feature handed to the word predictor.
    pub fused: Var,
    /// ST spatial weights: `[n]` on grids, `[T, n]` for detection boxes.
    pub st_spatial: Option<Var>,
    /// Temporal weights of the attention schemes, `[T]`.
    pub temporal: Option<Var>,
    pub ts_frames: Option<Var>,
    pub ts_spatial: Option<Var>,
    /// `[beta_st, beta_ts]` after the softmax.
    pub branch: Option<Var>,
    pub ranked_loss: Option<Var>,
}

/// Result of scoring a caption with teacher forcing (or scheduled sampling).
#[derive(Clone, Debug)]
pub struct CaptionForward {
    /// One distribution per real target.
    pub dists: Vec<Var>,
    /// Ranked loss averaged over decoding steps; `None` for unranked schemes.
    pub ranked_loss: Option<Var>,
}

/// How the word fed at the next step is chosen while scoring a caption.
pub enum Feed<'a> {
    /// Always the ground-truth previous word.
    Teacher,
    /// Ground truth with probability `ratio`, the model's argmax otherwise.
    /// One draw from `rng` per decoding step.
    Scheduled { ratio: f64, rng: &'a mut dyn rand::RngCore },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Attention weights recorded while emitting one word.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDump {
    pub token: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub st_spatial: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts_frames: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts_spatial: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Log-probability of the emitted tokens (and of EOS when it ended the caption).
    pub log_prob: f64,
    /// One entry per decoding step, the EOS step included.
    pub dumps: Vec<StepDump>,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::zeros(&config);
        Ok(Model { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars> {
        let vars = self
            .params
            .named()
            .into_iter()
            .map(|(_, _, t)| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        ModelVars::from_vars(g, &self.config, &vars)
    }

    /// Binds `vf` into the graph, embedding its features if configured.
    pub fn prepare_video(
        &self,
        g: &mut Graph,
        mv: &ModelVars,
        vf: &VideoFeatures,
        mask: Option<&[bool]>,
    ) -> Result<VideoContext> {
        let (t, n, d) = (vf.frames(), vf.regions(), vf.dim());
        if d != self.config.feature_dim {
            return Err(Error::dim("video features", &[t, n, d], &[t, n, self.config.feature_dim]));
        }
        if let Some(m) = mask {
            if m.len() != t {
                return Err(Error::dim("frame mask", &[m.len()], &[t]));
            }
        }
        let mask = mask.filter(|m| !m.iter().all(|&b| b)).map(<[bool]>::to_vec);
        let valid_rows: Vec<usize> = (0..t).filter(|&i| mask.as_ref().is_none_or(|m| m[i])).collect();
        if valid_rows.is_empty() {
            return Err(Error::Empty("every frame is masked"));
        }
        let raw = g.constant(vf.values().clone())?;
        let video = match mv.feature_embed {
            None => raw,
            Some(w) => {
                let flat = g.reshape(raw, &[t * n, d])?;
                let wt = g.transpose(w)?;
                let emb = g.matmul(flat, wt)?;
                let k = g.shape(w)[0];
                g.reshape(emb, &[t, n, k])?
            }
        };
        Ok(VideoContext {
            video,
            layout: vf.layout(),
            mask,
            valid_rows,
        })
    }

    /// Runs the configured visual stack for one attention query.
    pub fn visual_step(&self, g: &mut Graph, mv: &ModelVars, query: Var, ctx: &VideoContext) -> Result<VisualOutput> {
        let cfg = &self.config;
        let mut out = VisualOutput {
            fused: query,
            st_spatial: None,
            temporal: None,
            ts_frames: None,
            ts_spatial: None,
            branch: None,
            ranked_loss: None,
        };
        let x_st = if cfg.branch != Branch::Ts {
            Some(self.st_branch(g, mv, query, ctx, &mut out)?)
        } else {
            None
        };
        let x_ts = if cfg.branch != Branch::St {
            let ts = ts_attention(
                g,
                &mv.ts_temporal,
                &mv.ts_spatial,
                query,
                ctx.video,
                cfg.frame_summary,
                cfg.ts_temperature,
                ctx.mask(),
            )?;
            out.ts_frames = Some(ts.frame_weights);
            out.ts_spatial = Some(ts.spatial_weights);
            Some(ts.attended)
        } else {
            None
        };
        out.fused = match (x_st, x_ts) {
            (Some(s), Some(t)) => {
                let (fused, w) = stats_fusion(g, &mv.fusion, query, s, t)?;
                out.branch = Some(w);
                fused
            }
            (Some(x), None) | (None, Some(x)) => g.tanh(x)?,
            (None, None) => unreachable!("a branch is always active"),
        };
        Ok(out)
    }

    fn st_branch(
        &self,
        g: &mut Graph,
        mv: &ModelVars,
        query: Var,
        ctx: &VideoContext,
        out: &mut VisualOutput,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (weights, pooled) = match ctx.layout {
            Layout::Grid { .. } => st_spatial_attention(g, &mv.st_spatial, query, ctx.video, ctx.layout, ctx.mask())?,
            Layout::DetectionBoxes => per_frame_spatial_attention(g, &mv.st_spatial, query, ctx.video)?,
        };
        out.st_spatial = Some(weights);
        let scheme = cfg.scheme;
        let code = match scheme {
            TemporalScheme::MeanPool => masked_mean_rows(g, pooled, &ctx.valid_rows)?,
            TemporalScheme::TemporalAtt | TemporalScheme::MeanPlusTemporal => {
                let (w, att) = temporal_attention(g, &mv.temporal, query, pooled, ctx.mask())?;
                out.temporal = Some(w);
                if scheme.combines_mean() {
                    let mean = masked_mean_rows(g, pooled, &ctx.valid_rows)?;
                    g.concat(&[att, mean])?
                } else {
                    att
                }
            }
            _ => {
                debug_assert!(scheme.uses_encoder());
                let enc = ranked_encode(g, &mv.encoder, &cfg.ranked_config(), pooled, ctx.mask())?;
                if scheme.is_ranked() {
                    out.ranked_loss = Some(ranked_loss(g, enc.encoding, pooled, cfg.ranked_margin, ctx.mask())?);
                }
                enc.code
            }
        };
        if scheme.combines_mean() {
            g.matmul(mv.st_project, code)
        } else {
            Ok(code)
        }
    }

    /// The query handed to the visual attention for the next word.
    fn visual_query(&self, state: &DecoderState) -> Var {
        if self.config.history_in_query {
            state.query
        } else {
            state.h
        }
    }

    /// Scores `targets` (caption then EOS; a PAD suffix is ignored via
    /// `target_mask`) one word at a time, recomputing attention per word.
    pub fn forward_caption(
        &self,
        g: &mut Graph,
        mv: &ModelVars,
        ctx: &VideoContext,
        targets: &[usize],
        target_mask: &[bool],
        mut feed: Feed<'_>,
    ) -> Result<CaptionForward> {
        if targets.len() != target_mask.len() {
            return Err(Error::dim("caption targets", &[targets.len()], &[target_mask.len()]));
        }
        let steps = target_mask.iter().take_while(|&&m| m).count();
        if target_mask[steps..].iter().any(|&m| m) {
            return Err(Error::Contract("target mask must be a prefix of real tokens".into()));
        }
        let mut state = DecoderState::initial(g, &mv.decoder)?;
        let mut dists = Vec::with_capacity(steps);
        let mut ranked = Vec::new();
        let mut prev = BOS;
        for i in 0..steps {
            if let Feed::Scheduled { ratio, rng } = &mut feed {
                let u: f64 = rng.random();
                if i > 0 {
                    prev = if u < *ratio {
                        targets[i - 1]
                    } else {
                        argmax_token(g.value(dists[i - 1]).data())
                    };
                }
            } else if i > 0 {
                prev = targets[i - 1];
            }
            let vis = self.visual_step(g, mv, self.visual_query(&state), ctx)?;
            ranked.extend(vis.ranked_loss);
            let (dist, next) = decode_step(g, &mv.decoder, &state, prev, vis.fused)?;
            state = next;
            dists.push(dist);
        }
        let ranked_loss = if ranked.is_empty() {
            None
        } else {
            let n = ranked.len() as f64;
            let parts = ranked.iter().map(|&r| g.reshape(r, &[1])).collect::<Result<Vec<_>>>()?;
            let all = g.concat(&parts)?;
            let total = g.sum(all)?;
            Some(g.scale(total, 1.0 / n)?)
        };
        Ok(CaptionForward { dists, ranked_loss })
    }

    /// Generates a caption inside `g`, returning it with the graph node of its
    /// summed log-probability.
    pub fn generate_in_graph(
        &self,
        g: &mut Graph,
        mv: &ModelVars,
        ctx: &VideoContext,
        mut sampler: Option<(&mut dyn rand::RngCore, f64)>,
        max_len: usize,
        dumps: bool,
    ) -> Result<(Generation, Var)> {
        if max_len == 0 {
            return Err(Error::Parameter("max_len must be at least 1".into()));
        }
        let mut state = DecoderState::initial(g, &mv.decoder)?;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut records = Vec::new();
        for _ in 0..max_len {
            let vis = self.visual_step(g, mv, self.visual_query(&state), ctx)?;
            let (dist, next) = decode_step(g, &mv.decoder, &state, prev, vis.fused)?;
            state = next;
            let token = match sampler.as_mut() {
                None => argmax_token(g.value(dist).data()),
                Some((rng, temperature)) => sample_token(g.value(dist).data(), *temperature, *rng)?,
            };
            let p = g.pick(dist, token)?;
            logps.push(g.log_clamped(p, 1e-12)?);
            if dumps {
                let vals = |g: &Graph, v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
                records.push(StepDump {
                    token,
                    st_spatial: vals(g, vis.st_spatial),
                    temporal: vals(g, vis.temporal),
                    ts_frames: vals(g, vis.ts_frames),
                    ts_spatial: vals(g, vis.ts_spatial),
                    branch: vals(g, vis.branch),
                });
            }
            if token == EOS {
                break;
            }
            tokens.push(token);
            prev = token;
        }
        let parts = logps.iter().map(|&r| g.reshape(r, &[1])).collect::<Result<Vec<_>>>()?;
        let all = g.concat(&parts)?;
        let total = g.sum(all)?;
        let generation = Generation {
            tokens,
            log_prob: g.value(total).item(),
            dumps: records,
        };
        Ok((generation, total))
    }

    /// Captions one video. Greedy decoding breaks ties toward the lowest index.
    pub fn generate(&self, vf: &VideoFeatures, mode: DecodeMode, max_len: usize, dumps: bool) -> Result<Generation> {
        let mut g = Graph::new();
        let mv = self.bind(&mut g)?;
        let ctx = self.prepare_video(&mut g, &mv, vf, None)?;
        let mut rng;
        let sampler = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sample { temperature, seed } => {
                rng = crate::rng::substream(seed, crate::rng::SAMPLING, 0);
                Some((&mut rng as &mut dyn rand::RngCore, temperature))
            }
        };
        Ok(self.generate_in_graph(&mut g, &mv, &ctx, sampler, max_len, dumps)?.0)
    }
}

/// Draws an emittable token from `dist` sharpened or flattened by `temperature`.
pub fn sample_token(dist: &[f64], temperature: f64, rng: &mut dyn rand::RngCore) -> Result<usize> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("sampling temperature must be positive, got {temperature}")));
    }
    let weights: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(i, &p)| if emittable(i) && p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(argmax_token(dist));
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = EOS;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return Ok(i);
            }
            u -= w;
        }
    }
    Ok(last)
}
