//! Caption metrics: BLEU4, ROUGE-L and CIDEr over whitespace tokens.
//!
//! Corpus-level BLEU is unsmoothed; [`sentence_bleu4_smoothed`] adds one to
//! every n-gram count and is meant for rewards. CIDEr is the plain variant
//! (no length penalty) with idf `ln((N + 1) / (df + 1))`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;
const MAX_N: usize = 4;

/// Lowercases, splits on whitespace and strips trailing punctuation from each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase().trim_end_matches(|c: char| c.is_ascii_punctuation()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

type NGram<'a> = &'a [String];

/// Counts of every n-gram of order `n`. Ordered, so sums over it are reproducible.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<NGram<'_>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Clone, Copy, Debug, Default)]
struct BleuStats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }
}

fn bleu_stats(candidate: &[String], references: &[Vec<String>]) -> BleuStats {
    let mut stats = BleuStats {
        cand_len: candidate.len(),
        ..Default::default()
    };
    // Closest reference length, ties to the shorter one.
    stats.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate.len()), r))
        .unwrap_or(0);
    for n in 1..=MAX_N {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<NGram<'_>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
    }
    stats
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn bleu_from_stats(s: &BleuStats, smooth: bool) -> f64 {
    if s.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        let (m, t) = if smooth {
            (s.matches[n] as f64 + 1.0, s.totals[n] as f64 + 1.0)
        } else {
            (s.matches[n] as f64, s.totals[n] as f64)
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    brevity_penalty(s.cand_len, s.ref_len) * (log_sum / MAX_N as f64).exp()
}

fn require_refs(references: &[Vec<String>]) -> Result<()> {
    if references.is_empty() {
        Err(Error::Empty("metrics need at least one reference"))
    } else {
        Ok(())
    }
}

/// Unsmoothed sentence BLEU4. An empty candidate scores 0.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    require_refs(references)?;
    Ok(bleu_from_stats(&bleu_stats(candidate, references), false))
}

/// Sentence BLEU4 with add-one smoothing on every n-gram order.
pub fn sentence_bleu4_smoothed(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    require_refs(references)?;
    Ok(bleu_from_stats(&bleu_stats(candidate, references), true))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with `beta = 1.2`, maximised over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    require_refs(references)?;
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let best = references
        .iter()
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// CIDEr scorer holding document frequencies of a reference corpus, one
/// document per video (the set of its references).
#[derive(Clone, Debug)]
pub struct CiderScorer {
    df: HashMap<Vec<String>, usize>,
    log_docs: f64,
}

impl CiderScorer {
    pub fn new(corpus: &[Vec<Vec<String>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("CIDEr needs a nonempty reference corpus"));
        }
        let mut df = HashMap::new();
        for refs in corpus {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    if r.len() >= n {
                        seen.extend(r.windows(n));
                    }
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(CiderScorer {
            df,
            log_docs: (corpus.len() as f64 + 1.0).ln(),
        })
    }

    fn idf(&self, g: &[String]) -> f64 {
        let df = self.df.get(g).copied().unwrap_or(0);
        self.log_docs - (df as f64 + 1.0).ln()
    }

    fn tfidf<'a>(&self, tokens: &'a [String], n: usize) -> BTreeMap<NGram<'a>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| (g, c as f64 * self.idf(g)))
            .collect()
    }

    /// Score of one candidate against its video's references.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
        require_refs(references)?;
        let mut total = 0.0;
        for n in 1..=MAX_N {
            let c = self.tfidf(candidate, n);
            let c_norm = c.values().map(|v| v * v).sum::<f64>().sqrt();
            for r in references {
                let rv = self.tfidf(r, n);
                let r_norm = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if c_norm == 0.0 || r_norm == 0.0 {
                    continue;
                }
                let dot: f64 = c.iter().map(|(g, v)| v * rv.get(g).copied().unwrap_or(0.0)).sum();
                total += dot / (c_norm * r_norm);
            }
        }
        Ok(CIDER_SCALE * total / (MAX_N * references.len()) as f64)
    }
}

/// Per-video CIDEr scores and their mean, with document frequencies taken from `references`.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<(Vec<f64>, f64)> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let scorer = CiderScorer::new(references)?;
    let scores = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((scores, mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// Corpus BLEU4 (aggregated counts), mean ROUGE-L and mean CIDEr over videos
/// keyed by id. Both maps must hold exactly the same ids.
pub fn evaluate_corpus(
    captions: &BTreeMap<String, Vec<String>>,
    references: &BTreeMap<String, Vec<Vec<String>>>,
) -> Result<CorpusScores> {
    let mut missing: Vec<String> = references.keys().filter(|k| !captions.contains_key(*k)).cloned().collect();
    missing.extend(captions.keys().filter(|k| !references.contains_key(*k)).cloned());
    if captions.is_empty() || !missing.is_empty() {
        return Err(Error::Alignment(missing));
    }
    let mut stats = BleuStats::default();
    let mut rouge = 0.0;
    let mut cands = Vec::with_capacity(captions.len());
    let mut refs = Vec::with_capacity(captions.len());
    for (id, cand) in captions {
        let r = &references[id];
        require_refs(r)?;
        stats.add(&bleu_stats(cand, r));
        rouge += rouge_l(cand, r)?;
        cands.push(cand.clone());
        refs.push(r.clone());
    }
    let (_, cider_mean) = cider(&cands, &refs)?;
    Ok(CorpusScores {
        bleu4: bleu_from_stats(&stats, false),
        rouge_l: rouge / captions.len() as f64,
        cider: cider_mean,
    })
}
