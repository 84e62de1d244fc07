//! Optimisation: masked cross-entropy with the ranked loss, scheduled
//! sampling, RMSprop, and self-critical policy-gradient fine-tuning.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{batch_iter, Batch, CaptionSampling, Video};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, sentence_bleu4_smoothed, CiderScorer, CorpusScores};
use crate::model::{DecodeMode, Feed, Model};
use crate::rng::{substream, SAMPLING, SCHEDULED_SAMPLING};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of cross-entropy training before self-critical fine-tuning starts.
    pub ce_epochs_before_rl: usize,
    /// `eta` of the teacher-forcing schedule `eta / (eta + exp(p / eta))`.
    pub schedule_eta: f64,
    /// Weight `alpha` of the ranked loss.
    pub ranked_loss_weight: f64,
    /// `gamma` in `gamma * CE + (1 - gamma) * RL`.
    pub rl_loss_mix: f64,
    pub rng_seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Longest generated caption (validation and sampling).
    pub max_caption_len: usize,
    pub caption_sampling: CaptionSampling,
    /// Reward is `w * BLEU4 + (1 - w) * CIDEr`.
    pub reward_bleu_weight: f64,
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 20,
            ce_epochs_before_rl: 10,
            schedule_eta: 24.0,
            ranked_loss_weight: 0.1,
            rl_loss_mix: 0.5,
            rng_seed: 0,
            clip_norm: 5.0,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            max_caption_len: 12,
            caption_sampling: CaptionSampling::OnePerEpoch,
            reward_bleu_weight: 0.5,
            sample_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings that train the desk-sized model on the synthetic corpus in minutes.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 30,
            ce_epochs_before_rl: 30,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rl_loss_mix) {
            return bad(format!("rl_loss_mix must lie in [0, 1], got {}", self.rl_loss_mix));
        }
        if !(self.schedule_eta > 0.0) {
            return bad(format!("schedule eta must be positive, got {}", self.schedule_eta));
        }
        if !(self.ranked_loss_weight >= 0.0) {
            return bad(format!("ranked loss weight must be nonnegative, got {}", self.ranked_loss_weight));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_eps > 0.0) {
            return bad("RMSprop needs decay in [0, 1) and eps > 0".into());
        }
        if self.max_caption_len == 0 {
            return bad("max_caption_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.reward_bleu_weight) {
            return bad(format!("reward_bleu_weight must lie in [0, 1], got {}", self.reward_bleu_weight));
        }
        if !(self.sample_temperature > 0.0) {
            return bad(format!("sample temperature must be positive, got {}", self.sample_temperature));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip norm must be nonnegative, got {}", self.clip_norm));
        }
        Ok(())
    }
}

/// `-sum_masked log dist[target] / count`, with probabilities floored at 1e-12.
pub fn cross_entropy_loss(g: &mut Graph, dists: &[Var], targets: &[usize], mask: &[bool]) -> Result<Var> {
    if dists.len() != targets.len() || targets.len() != mask.len() {
        return Err(Error::dim("cross_entropy_loss", &[dists.len(), targets.len()], &[mask.len()]));
    }
    let mut terms = Vec::new();
    for ((&d, &t), &m) in dists.iter().zip(targets).zip(mask) {
        if m {
            let p = g.pick(d, t)?;
            let lp = g.log_clamped(p, PROB_FLOOR)?;
            terms.push(g.reshape(lp, &[1])?);
        }
    }
    if terms.is_empty() {
        return Err(Error::DegenerateBatch("every target position is masked".into()));
    }
    let n = terms.len() as f64;
    let all = g.concat(&terms)?;
    let total = g.sum(all)?;
    g.scale(total, -1.0 / n)
}

/// Probability of feeding the ground-truth word at epoch `p` (0-based).
pub fn teacher_forcing_ratio(eta: f64, p: f64) -> f64 {
    eta / (eta + (p / eta).exp())
}

/// RMSprop running averages, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub v: Vec<Tensor>,
    pub decay: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(shapes: &[&Tensor], decay: f64, eps: f64) -> Self {
        OptimizerState {
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            decay,
            eps,
        }
    }

    pub fn for_model(model: &Model, cfg: &TrainConfig) -> Self {
        let named = model.params.named();
        let tensors: Vec<&Tensor> = named.iter().map(|(_, _, t)| *t).collect();
        Self::new(&tensors, cfg.rmsprop_decay, cfg.rmsprop_eps)
    }
}

/// `v <- rho v + (1 - rho) g^2`, `theta <- theta - lr g / sqrt(v + eps)`.
/// Nothing is updated if any gradient is non-finite.
pub fn rmsprop_step(
    opt: &mut OptimizerState,
    params: Vec<&mut Tensor>,
    names: &[String],
    grads: &[Tensor],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || grads.len() != opt.v.len() || names.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            opt.v.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::dim("rmsprop_step", params[i].shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of {}", names[i])));
        }
    }
    let (rho, eps) = (opt.decay, opt.eps);
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut opt.v) {
        for ((theta, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = rho * *vi + (1.0 - rho) * gi * gi;
            *theta -= lr * gi / (*vi + eps).sqrt();
        }
    }
    Ok(())
}

/// Scales `grads` down to global norm `max_norm` if they exceed it; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Caption reward: `w * smoothed sentence BLEU4 + (1 - w) * CIDEr`.
pub struct Reward {
    scorer: CiderScorer,
    bleu_weight: f64,
}

impl Reward {
    pub fn new(train: &[Video], bleu_weight: f64) -> Result<Self> {
        let corpus: Vec<Vec<Vec<String>>> = train.iter().map(|v| v.references.clone()).collect();
        Ok(Reward {
            scorer: CiderScorer::new(&corpus)?,
            bleu_weight,
        })
    }

    pub fn score(&self, caption: &[String], references: &[Vec<String>]) -> Result<f64> {
        let bleu = sentence_bleu4_smoothed(caption, references)?;
        let cider = self.scorer.score(caption, references)?;
        Ok(self.bleu_weight * bleu + (1.0 - self.bleu_weight) * cider)
    }
}

pub type RewardFn<'a> = &'a dyn Fn(&[String], &[Vec<String>]) -> Result<f64>;

/// Random streams consumed by one optimisation step.
pub struct StepRng<'a> {
    /// One draw per decoding step of every teacher-forced caption.
    pub scheduled: &'a mut dyn RngCore,
    /// Caption sampling for the policy gradient.
    pub sampling: &'a mut dyn RngCore,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Token-mean cross-entropy over the batch.
    pub ce_loss: f64,
    /// Item-mean ranked loss.
    pub ranked_loss: f64,
    /// Item-mean policy-gradient loss `-A log p(sample)`.
    pub rl_loss: f64,
    /// Mean reward of sampled captions.
    pub reward: f64,
    /// Videos whose sampled caption was empty.
    pub skipped: usize,
    pub tokens: usize,
    pub items: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepReport {
    /// `gamma CE + alpha ranked + (1 - gamma) RL`.
    pub fn total(&self, cfg: &TrainConfig, rl: bool) -> f64 {
        let gamma = if rl { cfg.rl_loss_mix } else { 1.0 };
        gamma * self.ce_loss + cfg.ranked_loss_weight * self.ranked_loss + (1.0 - gamma) * self.rl_loss
    }
}

fn add_grads(acc: &mut [Tensor], g: &Graph, vars: &[Var], weight: f64) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        let gv = g.grad(v);
        if weight == 1.0 {
            a.data_mut().iter_mut().zip(gv.data()).for_each(|(x, y)| *x += y);
        } else {
            a.data_mut().iter_mut().zip(gv.data()).for_each(|(x, y)| *x += weight * y);
        }
    }
}

fn zero_grads(model: &Model) -> Vec<Tensor> {
    model.params.named().iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect()
}

/// Gradient of `ce_weight * CE + alpha * ranked` for one batch, plus
/// `(1 - ce_weight) * RL` when `reward` is given.
///
/// Per-item graphs are reduced in batch order, so the result is deterministic.
pub fn batch_gradients(
    model: &Model,
    videos: &[Video],
    vocab: &Vocabulary,
    batch: &Batch,
    cfg: &TrainConfig,
    ratio: f64,
    rngs: &mut StepRng<'_>,
    reward: Option<(RewardFn<'_>, f64)>,
) -> Result<(Vec<Tensor>, StepReport)> {
    let total_tokens = batch.num_targets();
    if total_tokens == 0 {
        return Err(Error::DegenerateBatch("batch has no target tokens".into()));
    }
    let items = batch.items.len() as f64;
    let ce_weight = reward.map_or(1.0, |(_, gamma)| gamma);
    let mut acc = zero_grads(model);
    let mut report = StepReport {
        tokens: total_tokens,
        items: batch.items.len(),
        ..Default::default()
    };
    let mut rewarded = 0usize;
    for item in &batch.items {
        let video = &videos[item.video];
        let wrap = |e: Error| match e {
            Error::Numeric(m) => Error::Divergence(format!("video {}: non-finite value in {m}", video.id)),
            other => other,
        };
        let mut g = Graph::new();
        let mv = model.bind(&mut g)?;
        let ctx = model.prepare_video(&mut g, &mv, &item.features, item.mask())?;
        let fwd = model
            .forward_caption(
                &mut g,
                &mv,
                &ctx,
                &item.targets,
                &item.target_mask,
                Feed::Scheduled {
                    ratio,
                    rng: &mut *rngs.scheduled,
                },
            )
            .map_err(wrap)?;
        let steps = fwd.dists.len();
        let ce = cross_entropy_loss(&mut g, &fwd.dists, &item.targets[..steps], &item.target_mask[..steps])?;
        report.ce_loss += g.value(ce).item() * steps as f64 / total_tokens as f64;
        let mut root = g.scale(ce, steps as f64 / total_tokens as f64 * ce_weight)?;
        if let Some(r) = fwd.ranked_loss {
            report.ranked_loss += g.value(r).item() / items;
            let weighted = g.scale(r, cfg.ranked_loss_weight / items)?;
            root = g.add(root, weighted)?;
        }
        if !g.value(root).is_finite() {
            return Err(Error::Divergence(format!("video {}: loss is not finite", video.id)));
        }
        g.backward(root)?;
        add_grads(&mut acc, &g, &mv.vars(), 1.0);

        if let Some((reward_fn, gamma)) = reward {
            let mut g = Graph::new();
            let mv = model.bind(&mut g)?;
            let ctx = model.prepare_video(&mut g, &mv, &item.features, item.mask())?;
            let (sample, logp) = model
                .generate_in_graph(
                    &mut g,
                    &mv,
                    &ctx,
                    Some((&mut *rngs.sampling, cfg.sample_temperature)),
                    cfg.max_caption_len,
                    false,
                )
                .map_err(wrap)?;
            if sample.tokens.is_empty() {
                report.skipped += 1;
                continue;
            }
            let (greedy, _) = model.generate_in_graph(&mut g, &mv, &ctx, None, cfg.max_caption_len, false)?;
            let r_sample = reward_fn(&vocab.decode(&sample.tokens)?, &video.references)?;
            let r_greedy = reward_fn(&vocab.decode(&greedy.tokens)?, &video.references)?;
            let advantage = r_sample - r_greedy;
            rewarded += 1;
            report.reward += r_sample;
            report.rl_loss += -advantage * sample.log_prob / items;
            let root = g.scale(logp, -advantage / items)?;
            g.backward(root)?;
            if gamma != 1.0 {
                add_grads(&mut acc, &g, &mv.vars(), 1.0 - gamma);
            }
        }
    }
    if rewarded > 0 {
        report.reward /= rewarded as f64;
    }
    if report.skipped > 0 {
        warn!("{} sampled caption(s) were empty and skipped", report.skipped);
    }
    Ok((acc, report))
}

/// Clips and applies `grads` with RMSprop.
pub fn apply_gradients(model: &mut Model, opt: &mut OptimizerState, mut grads: Vec<Tensor>, cfg: &TrainConfig) -> Result<f64> {
    let norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let names = model.params.names();
    rmsprop_step(opt, model.params.tensors_mut(), &names, &grads, cfg.learning_rate)?;
    Ok(norm)
}

/// One cross-entropy (+ ranked loss) update with scheduled sampling.
pub fn ce_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    videos: &[Video],
    vocab: &Vocabulary,
    batch: &Batch,
    cfg: &TrainConfig,
    ratio: f64,
    rngs: &mut StepRng<'_>,
) -> Result<StepReport> {
    let (grads, mut report) = batch_gradients(model, videos, vocab, batch, cfg, ratio, rngs, None)?;
    report.grad_norm = apply_gradients(model, opt, grads, cfg)?;
    Ok(report)
}

/// One self-critical update: per video, a sampled caption is rewarded against
/// the greedy caption (the baseline), and `gamma CE + alpha ranked + (1 - gamma) RL`
/// is minimised.
#[allow(clippy::too_many_arguments)]
pub fn self_critical_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    videos: &[Video],
    vocab: &Vocabulary,
    batch: &Batch,
    cfg: &TrainConfig,
    ratio: f64,
    rngs: &mut StepRng<'_>,
    reward: RewardFn<'_>,
) -> Result<StepReport> {
    let (grads, mut report) = batch_gradients(model, videos, vocab, batch, cfg, ratio, rngs, Some((reward, cfg.rl_loss_mix)))?;
    report.grad_norm = apply_gradients(model, opt, grads, cfg)?;
    Ok(report)
}

/// Greedy captions for `videos`, as words.
pub fn caption_videos(model: &Model, vocab: &Vocabulary, videos: &[Video], max_len: usize) -> Result<Vec<Vec<String>>> {
    videos
        .iter()
        .map(|v| vocab.decode(&model.generate(&v.features, DecodeMode::Greedy, max_len, false)?.tokens))
        .collect()
}

/// Greedy-decodes `videos` and scores them against their references.
pub fn evaluate_model(model: &Model, vocab: &Vocabulary, videos: &[Video], max_len: usize) -> Result<CorpusScores> {
    let captions = caption_videos(model, vocab, videos, max_len)?;
    let caps: BTreeMap<String, Vec<String>> = videos.iter().map(|v| v.id.clone()).zip(captions).collect();
    let refs: BTreeMap<String, Vec<Vec<String>>> = videos.iter().map(|v| (v.id.clone(), v.references.clone())).collect();
    evaluate_corpus(&caps, &refs)
}

/// One row of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_loss: f64,
    pub ranked_loss: Option<f64>,
    pub reward: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
}

/// Trains `model` in place. Epochs `1..=ce_epochs_before_rl` use cross-entropy
/// with scheduled sampling, later ones self-critical updates. `on_epoch` sees
/// the model after every epoch (for checkpoints).
pub fn train<F>(
    model: &mut Model,
    vocab: &Vocabulary,
    train_videos: &[Video],
    val_videos: &[Video],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &Model) -> Result<()>,
{
    cfg.validate()?;
    if train_videos.is_empty() {
        return Err(Error::Empty("training split has no videos"));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Vocabulary(format!(
            "model expects {} tokens, vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let mut opt = OptimizerState::for_model(model, cfg);
    let reward = if cfg.epochs > cfg.ce_epochs_before_rl {
        Some(Reward::new(train_videos, cfg.reward_bleu_weight)?)
    } else {
        None
    };
    let reward_fn = |c: &[String], r: &[Vec<String>]| reward.as_ref().expect("reward built for RL epochs").score(c, r);
    let ranked = model.config.scheme.is_ranked() && model.config.branch != crate::model::Branch::Ts;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let p = (epoch - 1) as f64;
        let ratio = teacher_forcing_ratio(cfg.schedule_eta, p);
        let rl = epoch > cfg.ce_epochs_before_rl;
        let mut scheduled = substream(cfg.rng_seed, SCHEDULED_SAMPLING, epoch as u64);
        let mut sampling = substream(cfg.rng_seed, SAMPLING, epoch as u64);
        let mut rngs = StepRng {
            scheduled: &mut scheduled,
            sampling: &mut sampling,
        };
        let (mut ce_sum, mut tokens, mut ranked_sum, mut items, mut reward_sum, mut batches) = (0.0, 0, 0.0, 0, 0.0, 0);
        for (b, batch) in batch_iter(train_videos, vocab, cfg.batch_size, cfg.rng_seed, epoch, cfg.caption_sampling)?.enumerate() {
            let report = if rl {
                self_critical_step(model, &mut opt, train_videos, vocab, &batch, cfg, ratio, &mut rngs, &reward_fn)
            } else {
                ce_step(model, &mut opt, train_videos, vocab, &batch, cfg, ratio, &mut rngs)
            }
            .map_err(|e| match e {
                Error::Divergence(m) | Error::Numeric(m) => Error::Divergence(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            ce_sum += report.ce_loss * report.tokens as f64;
            tokens += report.tokens;
            ranked_sum += report.ranked_loss * report.items as f64;
            items += report.items;
            reward_sum += report.reward;
            batches += 1;
        }
        let scores = if val_videos.is_empty() {
            None
        } else {
            Some(evaluate_model(model, vocab, val_videos, cfg.max_caption_len)?)
        };
        let entry = EpochLog {
            epoch,
            ce_loss: ce_sum / tokens as f64,
            ranked_loss: ranked.then(|| ranked_sum / items as f64),
            reward: rl.then(|| reward_sum / batches as f64),
            bleu4: scores.map(|s| s.bleu4),
            rouge_l: scores.map(|s| s.rouge_l),
            cider: scores.map(|s| s.cider),
        };
        info!(
            "epoch {epoch}: ce {:.4} ranked {:?} reward {:?} bleu4 {:?} cider {:?}",
            entry.ce_loss, entry.ranked_loss, entry.reward, entry.bleu4, entry.cider
        );
        on_epoch(&entry, model)?;
        log.push(entry);
    }
    Ok(log)
}

/// Writes the training log as CSV (`epoch, ce_loss, ranked_loss, reward, bleu4, rouge_l, cider`).
pub fn write_log_csv<W: std::io::Write>(w: W, log: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if log.is_empty() {
        out.write_record(["epoch", "ce_loss", "ranked_loss", "reward", "bleu4", "rouge_l", "cider"])
            .map_err(csv_err)?;
    }
    for row in log {
        out.serialize(row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
