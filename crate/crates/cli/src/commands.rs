use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use stats_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stats_core::data::{
    build_vocab, generate_synthetic_corpus, load_split, read_feature_file, synth_accuracy, CorpusManifest, Split,
    SynthAccuracy, SynthLabel, Video,
};
use stats_core::metrics::{evaluate_corpus, tokenize, CorpusScores};
use stats_core::model::{Branch, DecodeMode, Model, ModelConfig, TemporalScheme};
use stats_core::ranked::{order_preservation_rate, rank_svm_oracle, OracleConfig};
use stats_core::records::{attention_records, read_caption_records, CaptionRecord};
use stats_core::rng::{substream, INIT};
use stats_core::training::{caption_videos, evaluate_model, train as train_model, write_log_csv, EpochLog, TrainConfig};
use stats_core::Vocabulary;

use crate::config::RunConfig;
use crate::{Common, TrainFlags};

pub type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    apply(&mut cfg);
    cfg.propagate_seed();
    eprintln!("config: {}", serde_json::to_string(&cfg).map_err(|e| e.to_string())?);
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    macro_rules! set {
        ($flag:expr, $slot:expr) => {
            if let Some(v) = $flag {
                $slot = v;
            }
        };
    }
    set!(f.epochs, t.epochs);
    set!(f.ce_epochs, t.ce_epochs_before_rl);
    set!(f.lr, t.learning_rate);
    set!(f.batch_size, t.batch_size);
    set!(f.gamma, t.rl_loss_mix);
    set!(f.alpha, t.ranked_loss_weight);
    set!(f.eta, t.schedule_eta);
    set!(f.max_len, t.max_caption_len);
    set!(f.hidden_dim, cfg.model.hidden_dim);
    set!(f.embed_dim, cfg.model.embed_dim);
    set!(f.attention_dim, cfg.model.attention_dim);
}

pub struct SynthFlags {
    pub videos: Option<usize>,
    pub val_videos: Option<usize>,
    pub frames: Option<usize>,
    pub dim: Option<usize>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub noise: Option<f64>,
}

pub fn synth(common: &Common, out: &Path, f: SynthFlags) -> CmdResult {
    let cfg = resolve(common, |c| {
        let s = &mut c.synth;
        if let Some(v) = f.videos {
            s.num_videos = v;
            if f.val_videos.is_none() {
                s.val_videos = s.val_videos.min(v / 5);
            }
        }
        s.val_videos = f.val_videos.unwrap_or(s.val_videos);
        s.frames = f.frames.unwrap_or(s.frames);
        s.dim = f.dim.unwrap_or(s.dim);
        s.rows = f.rows.unwrap_or(s.rows);
        s.cols = f.cols.unwrap_or(s.cols);
        s.noise_sigma = f.noise.unwrap_or(s.noise_sigma);
    })?;
    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    corpus.write(out)?;
    println!(
        "wrote {} videos ({} val) to {}",
        corpus.videos.len(),
        corpus.split(Split::Val).len(),
        out.display()
    );
    Ok(())
}

struct Corpus {
    vocab: Vocabulary,
    train: Vec<Video>,
    val: Vec<Video>,
}

fn load_corpus(root: &Path, min_count: usize) -> Result<Corpus, stats_core::Error> {
    let manifest = CorpusManifest::load(root)?;
    let vocab = build_vocab(&manifest, min_count)?;
    let train = load_split(root, &manifest, Split::Train)?;
    let val = load_split(root, &manifest, Split::Val)?;
    Ok(Corpus {
        vocab,
        train,
        val,
    })
}

fn model_config(cfg: &RunConfig, corpus: &Corpus) -> Result<ModelConfig, String> {
    let first = corpus.train.first().ok_or("corpus has no training videos")?;
    Ok(ModelConfig {
        feature_dim: first.features.dim(),
        vocab_size: corpus.vocab.len(),
        ..cfg.model.clone()
    })
}

fn fresh_model(mc: ModelConfig, seed: u64) -> Result<Model, stats_core::Error> {
    Model::new(mc, &mut substream(seed, INIT, 0))
}

pub fn train(
    common: &Common,
    flags: &TrainFlags,
    corpus_dir: &Path,
    out: &Path,
    scheme: Option<TemporalScheme>,
    branch: Option<Branch>,
) -> CmdResult {
    let mut cfg = resolve(common, |c| {
        apply_train_flags(c, flags);
        if let Some(s) = scheme {
            c.model.scheme = s;
        }
        if let Some(b) = branch {
            c.model.branch = b;
        }
    })?;
    let corpus = load_corpus(corpus_dir, cfg.min_count)?;
    cfg.model = model_config(&cfg, &corpus)?;
    let mut model = fresh_model(cfg.model.clone(), cfg.seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    info!(
        "training {} parameters on {} videos ({} val)",
        model.params.num_values(),
        corpus.train.len(),
        corpus.val.len()
    );
    let log = train_model(&mut model, &corpus.vocab, &corpus.train, &corpus.val, &cfg.train, |e, m| {
        save_checkpoint(&out.join(checkpoint_name(e.epoch)), m, &corpus.vocab, e.epoch, Some(&cfg.train))
    })?;
    write_log_csv(File::create(out.join("log.csv"))?, &log)?;
    match log.last() {
        Some(last) => println!("{}", summary(last)),
        None => println!("no epochs run"),
    }
    Ok(())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn summary(e: &EpochLog) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    format!(
        "epoch {}: ce_loss {:.4} ranked_loss {} reward {} bleu4 {} rouge_l {} cider {}",
        e.epoch,
        e.ce_loss,
        opt(e.ranked_loss),
        opt(e.reward),
        opt(e.bleu4),
        opt(e.rouge_l),
        opt(e.cider)
    )
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown split {s:?}"))
}

fn read_labels(root: &Path) -> Option<Vec<SynthLabel>> {
    let text = fs::read_to_string(root.join("labels.json")).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Serialize)]
struct EvaluationReport {
    split: String,
    videos: usize,
    scores: CorpusScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<SynthAccuracy>,
}

pub fn evaluate(
    common: &Common,
    corpus_dir: &Path,
    split_name: &str,
    captions: Option<&Path>,
    checkpoint: Option<&Path>,
    max_len: Option<usize>,
) -> CmdResult {
    let cfg = resolve(common, |c| {
        if let Some(m) = max_len {
            c.train.max_caption_len = m;
        }
    })?;
    let split = parse_split(split_name)?;
    let manifest = CorpusManifest::load(corpus_dir)?;
    let entries: Vec<_> = manifest.split(split).collect();
    let refs: BTreeMap<String, Vec<Vec<String>>> = entries
        .iter()
        .map(|e| {
            let refs = e.captions.iter().map(|c| tokenize(c)).filter(|t| !t.is_empty()).collect();
            (e.video_id.clone(), refs)
        })
        .collect();
    let caps: BTreeMap<String, Vec<String>> = match (captions, checkpoint) {
        (Some(path), _) => read_caption_records(BufReader::new(File::open(path)?))?
            .into_iter()
            .map(|r| (r.video_id, r.caption))
            .collect(),
        (None, Some(path)) => {
            let ck = load_checkpoint(path)?;
            let videos = load_split(corpus_dir, &manifest, split)?;
            let words = caption_videos(&ck.model, &ck.vocab, &videos, cfg.train.max_caption_len)?;
            videos.iter().map(|v| v.id.clone()).zip(words).collect()
        }
        (None, None) => return Err("evaluate needs --captions or --checkpoint".into()),
    };
    let scores = evaluate_corpus(&caps, &refs)?;
    let synthetic = read_labels(corpus_dir).and_then(|labels| {
        let (ordered, labels): (Vec<Vec<String>>, Vec<SynthLabel>) = manifest
            .entries
            .iter()
            .zip(labels)
            .filter(|(e, _)| e.split == split)
            .map(|(e, l)| (caps[&e.video_id].clone(), l))
            .unzip();
        synth_accuracy(&ordered, &labels).ok()
    });
    let report = EvaluationReport {
        split: split_name.to_string(),
        videos: refs.len(),
        scores,
        synthetic,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint, stats_core::Error> {
    let ck = load_checkpoint(path)?;
    info!("loaded {} (epoch {})", path.display(), ck.header.epoch);
    Ok(ck)
}

fn video_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn caption(
    common: &Common,
    checkpoint: &Path,
    features: &[std::path::PathBuf],
    sample: bool,
    temperature: Option<f64>,
    max_len: Option<usize>,
    dumps: bool,
) -> CmdResult {
    let cfg = resolve(common, |c| {
        if let Some(t) = temperature {
            c.train.sample_temperature = t;
        }
        if let Some(m) = max_len {
            c.train.max_caption_len = m;
        }
    })?;
    let ck = load_model(checkpoint)?;
    let mode = if sample {
        DecodeMode::Sample {
            temperature: cfg.train.sample_temperature,
            seed: cfg.seed,
        }
    } else {
        DecodeMode::Greedy
    };
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for path in features {
        let vf = read_feature_file(path)?;
        let generation = ck.model.generate(&vf, mode, cfg.train.max_caption_len, dumps)?;
        let record = CaptionRecord::new(video_id(path), &generation, &ck.vocab, dumps)?;
        writeln!(w, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

pub fn dump_attention(
    common: &Common,
    checkpoint: &Path,
    features: &Path,
    out: Option<&Path>,
    max_len: Option<usize>,
) -> CmdResult {
    let cfg = resolve(common, |c| {
        if let Some(m) = max_len {
            c.train.max_caption_len = m;
        }
    })?;
    let ck = load_model(checkpoint)?;
    let vf = read_feature_file(features)?;
    let generation = ck.model.generate(&vf, DecodeMode::Greedy, cfg.train.max_caption_len, true)?;
    let records = attention_records(&generation, &ck.vocab)?;
    let json = serde_json::to_string_pretty(&records)? + "\n";
    match out {
        Some(path) => fs::write(path, json)?,
        None => io::stdout().write_all(json.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    frames: usize,
    dim: usize,
    w: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    iterations: usize,
    order_preservation: f64,
}

pub fn oracle(common: &Common, frames: Option<&Path>, length: usize, dim: usize, lambda: f64, margin: f64) -> CmdResult {
    let cfg = resolve(common, |_| {})?;
    let frames: Vec<Vec<f64>> = match frames {
        Some(path) => serde_json::from_reader(BufReader::new(File::open(path)?))?,
        None => normal_sequence(cfg.seed, length, dim),
    };
    let oc = OracleConfig {
        lambda,
        margin,
        ..OracleConfig::default()
    };
    let sol = rank_svm_oracle(&frames, &oc)?;
    let report = OracleReport {
        frames: frames.len(),
        dim: frames.first().map_or(0, Vec::len),
        order_preservation: order_preservation_rate(&sol.w, &frames),
        w: sol.w,
        objective: sol.objective,
        grad_norm: sol.grad_norm,
        iterations: sol.iterations,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Random separable sequence for the oracle: `x_t = t u + noise`.
fn normal_sequence(seed: u64, length: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, "oracle", 0);
    let u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    (1..=length)
        .map(|t| {
            u.iter()
                .map(|&uk| t as f64 * uk + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

const SCHEME_ORDER: [TemporalScheme; 7] = TemporalScheme::ALL;
const BRANCH_ORDER: [Branch; 3] = [Branch::St, Branch::Ts, Branch::Stats];

pub fn ablate(common: &Common, flags: &TrainFlags, corpus_dir: &Path, out: Option<&Path>, threads: usize) -> CmdResult {
    let cfg = resolve(common, |c| apply_train_flags(c, flags))?;
    let corpus = load_corpus(corpus_dir, cfg.min_count)?;
    if corpus.val.is_empty() {
        return Err("ablation needs a validation split".into());
    }
    let base = model_config(&cfg, &corpus)?;
    let jobs: Vec<(TemporalScheme, Branch)> = SCHEME_ORDER
        .iter()
        .flat_map(|&s| BRANCH_ORDER.iter().map(move |&b| (s, b)))
        .collect();
    let results: Vec<Mutex<Option<Result<CorpusScores, String>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run = |scheme: TemporalScheme, branch: Branch| -> Result<CorpusScores, stats_core::Error> {
        let mc = ModelConfig {
            scheme,
            branch,
            ..base.clone()
        };
        let mut model = fresh_model(mc, cfg.seed)?;
        let tc: &TrainConfig = &cfg.train;
        train_model(&mut model, &corpus.vocab, &corpus.train, &[], tc, |_, _| Ok(()))?;
        let scores = evaluate_model(&model, &corpus.vocab, &corpus.val, tc.max_caption_len)?;
        info!("{} / {}: {scores:?}", scheme.name(), branch.name());
        Ok(scores)
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(scheme, branch)) = jobs.get(i) else { break };
                let r = run(scheme, branch).map_err(|e| format!("{} / {}: {e}", scheme.name(), branch.name()));
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let scores: Vec<CorpusScores> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect::<Result<_, _>>()?;

    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["scheme".to_string()];
    for b in BRANCH_ORDER {
        for m in ["cider", "bleu4", "rouge_l", "meteor"] {
            header.push(format!("{}_{m}", b.name()));
        }
    }
    w.write_record(&header)?;
    for (si, scheme) in SCHEME_ORDER.iter().enumerate() {
        let mut row = vec![scheme.name().to_string()];
        for bi in 0..BRANCH_ORDER.len() {
            let s = scores[si * BRANCH_ORDER.len() + bi];
            row.extend([format!("{:.6}", s.cider), format!("{:.6}", s.bleu4), format!("{:.6}", s.rouge_l), String::new()]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
