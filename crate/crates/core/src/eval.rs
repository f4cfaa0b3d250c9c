//! ROUGE-1/2/SU4, C_v topic coherence and document-count bucketed
//! evaluation.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;

use log::warn;
use serde::Serialize;

use crate::error::Result;
use crate::training::{Example, Model};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate > 0 {
            overlap as f64 / candidate as f64
        } else {
            0.0
        };
        let recall = if reference > 0 {
            overlap as f64 / reference as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn multiset<T: Eq + Hash>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// Clipped intersection size of two multisets.
fn overlap<T: Eq + Hash>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &c)| c.min(b.get(k).copied().unwrap_or(0))).sum()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> Vec<Vec<&str>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect()
}

pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    if reference.len() < n {
        warn!("reference shorter than {n} tokens; ROUGE-{n} is 0");
        return RougeScore::default();
    }
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let (cn, rn) = (c.len(), r.len());
    RougeScore::from_counts(overlap(&multiset(c), &multiset(r)), cn, rn)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum SuUnit<'a> {
    Uni(&'a str),
    Skip(&'a str, &'a str),
}

fn su_units<S: AsRef<str>>(tokens: &[S], max_skip: usize) -> Vec<SuUnit<'_>> {
    let mut out: Vec<SuUnit<'_>> = tokens.iter().map(|t| SuUnit::Uni(t.as_ref())).collect();
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len().min(i + max_skip + 2) {
            out.push(SuUnit::Skip(tokens[i].as_ref(), tokens[j].as_ref()));
        }
    }
    out
}

/// Skip-bigrams with at most `max_skip` intervening tokens, plus unigrams.
pub fn rouge_su<S: AsRef<str>>(candidate: &[S], reference: &[S], max_skip: usize) -> RougeScore {
    if reference.is_empty() {
        warn!("empty reference; ROUGE-SU is 0");
        return RougeScore::default();
    }
    let c = su_units(candidate, max_skip);
    let r = su_units(reference, max_skip);
    let (cn, rn) = (c.len(), r.len());
    RougeScore::from_counts(overlap(&multiset(c), &multiset(r)), cn, rn)
}

pub const SU_MAX_SKIP: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceReport {
    pub per_topic: Vec<f64>,
    pub mean: f64,
}

pub const CV_WINDOW: usize = 110;
pub const NPMI_EPS: f64 = 1e-12;

/// Boolean sliding-window document frequencies of `words` and their pairs.
struct WindowCounts {
    windows: usize,
    single: Vec<usize>,
    pair: Vec<Vec<usize>>,
}

fn window_counts<S: AsRef<str>>(corpus: &[Vec<S>], words: &[String], window: usize) -> WindowCounts {
    let index: HashMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let u = words.len();
    let mut counts = WindowCounts {
        windows: 0,
        single: vec![0; u],
        pair: vec![vec![0; u]; u],
    };
    let mut in_window = vec![0usize; u];
    for doc in corpus {
        if doc.is_empty() {
            continue;
        }
        let ids: Vec<Option<usize>> = doc.iter().map(|t| index.get(t.as_ref()).copied()).collect();
        let w = window.min(ids.len());
        in_window.iter_mut().for_each(|c| *c = 0);
        for id in ids[..w].iter().flatten() {
            in_window[*id] += 1;
        }
        for start in 0..=ids.len() - w {
            if start > 0 {
                if let Some(out) = ids[start - 1] {
                    in_window[out] -= 1;
                }
                if let Some(inc) = ids[start + w - 1] {
                    in_window[inc] += 1;
                }
            }
            counts.windows += 1;
            let present: Vec<usize> = (0..u).filter(|&i| in_window[i] > 0).collect();
            for &a in &present {
                counts.single[a] += 1;
                for &b in &present {
                    counts.pair[a][b] += 1;
                }
            }
        }
    }
    counts
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// C_v coherence: boolean sliding windows, NPMI context vectors over the
/// topic's own words, one-set segmentation, cosine confirmation, mean.
/// Per-topic values are clamped to `[0, 1]`.
pub fn coherence_cv<S: AsRef<str>>(topics: &[Vec<String>], corpus: &[Vec<S>], window: usize) -> CoherenceReport {
    let mut vocab: Vec<String> = topics.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();
    let counts = window_counts(corpus, &vocab, window.max(1));
    let pos: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let n = counts.windows.max(1) as f64;
    let npmi = |a: usize, b: usize| -> f64 {
        let (pa, pb) = (counts.single[a] as f64 / n, counts.single[b] as f64 / n);
        if pa == 0.0 || pb == 0.0 {
            return -1.0;
        }
        let pab = counts.pair[a][b] as f64 / n + NPMI_EPS;
        (pab / (pa * pb)).ln() / -pab.ln()
    };
    for (w, i) in &pos {
        if counts.single[*i] == 0 {
            warn!("topic word {w:?} never occurs in the reference corpus");
        }
    }
    let per_topic: Vec<f64> = topics
        .iter()
        .map(|topic| {
            let ids: Vec<usize> = topic.iter().map(|w| pos[w.as_str()]).collect();
            let vectors: Vec<Vec<f64>> = ids
                .iter()
                .map(|&a| ids.iter().map(|&b| npmi(a, b)).collect())
                .collect();
            let total: Vec<f64> = (0..ids.len())
                .map(|j| vectors.iter().map(|v| v[j]).sum())
                .collect();
            let score = vectors.iter().map(|v| cosine(v, &total)).sum::<f64>() / ids.len().max(1) as f64;
            score.clamp(0.0, 1.0)
        })
        .collect();
    let mean = if per_topic.is_empty() {
        0.0
    } else {
        per_topic.iter().sum::<f64>() / per_topic.len() as f64
    };
    CoherenceReport { per_topic, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterScore {
    pub id: String,
    pub n_docs: usize,
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rsu: RougeScore,
}

impl ClusterScore {
    pub fn score<S: AsRef<str>>(id: &str, n_docs: usize, candidate: &[S], reference: &[S]) -> Self {
        Self {
            id: id.to_string(),
            n_docs,
            r1: rouge_n(candidate, reference, 1),
            r2: rouge_n(candidate, reference, 2),
            rsu: rouge_su(candidate, reference, SU_MAX_SKIP),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketRow {
    pub n_docs: usize,
    pub count: usize,
    pub r1: f64,
    pub r2: f64,
    pub rsu: f64,
    pub r_tilde: f64,
}

pub const MIN_BUCKET: usize = 100;

/// Groups clusters by source-document count, dropping buckets with fewer
/// than `min_count` clusters. Scores are mean F1 values.
pub fn bucket_scores(scores: &[ClusterScore], min_count: usize) -> Vec<BucketRow> {
    let mut groups: BTreeMap<usize, Vec<&ClusterScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.n_docs).or_default().push(s);
    }
    groups
        .into_iter()
        .filter(|(_, g)| g.len() >= min_count)
        .map(|(n_docs, g)| {
            let c = g.len() as f64;
            let r1 = g.iter().map(|s| s.r1.f1).sum::<f64>() / c;
            let r2 = g.iter().map(|s| s.r2.f1).sum::<f64>() / c;
            let rsu = g.iter().map(|s| s.rsu.f1).sum::<f64>() / c;
            BucketRow {
                n_docs,
                count: g.len(),
                r1,
                r2,
                rsu,
                r_tilde: (r1 + r2 + rsu) / 3.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scores: Vec<ClusterScore>,
    pub failures: Vec<(String, String)>,
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rsu: RougeScore,
    pub buckets: Vec<BucketRow>,
}

fn mean_score(scores: &[ClusterScore], f: impl Fn(&ClusterScore) -> RougeScore) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    let (p, r, f1) = scores.iter().map(&f).fold((0.0, 0.0, 0.0), |acc, s| {
        (acc.0 + s.precision, acc.1 + s.recall, acc.2 + s.f1)
    });
    RougeScore {
        precision: p / n,
        recall: r / n,
        f1: f1 / n,
    }
}

impl EvalReport {
    pub fn from_scores(scores: Vec<ClusterScore>, failures: Vec<(String, String)>, min_bucket: usize) -> Self {
        Self {
            r1: mean_score(&scores, |s| s.r1),
            r2: mean_score(&scores, |s| s.r2),
            rsu: mean_score(&scores, |s| s.rsu),
            buckets: bucket_scores(&scores, min_bucket),
            scores,
            failures,
        }
    }

    pub fn r_tilde(&self) -> f64 {
        (self.r1.f1 + self.r2.f1 + self.rsu.f1) / 3.0
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.scores.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }

    /// More than 1% of clusters failed to decode.
    pub fn too_many_failures(&self) -> bool {
        self.failure_rate() > 0.01
    }

    pub fn write_metrics_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "metric,value")?;
        let rows = [
            ("rouge1_p", self.r1.precision),
            ("rouge1_r", self.r1.recall),
            ("rouge1_f1", self.r1.f1),
            ("rouge2_p", self.r2.precision),
            ("rouge2_r", self.r2.recall),
            ("rouge2_f1", self.r2.f1),
            ("rougesu4_p", self.rsu.precision),
            ("rougesu4_r", self.rsu.recall),
            ("rougesu4_f1", self.rsu.f1),
            ("r_tilde", self.r_tilde()),
            ("clusters", self.scores.len() as f64),
            ("failures", self.failures.len() as f64),
        ];
        for (k, v) in rows {
            writeln!(out, "{k},{v}")?;
        }
        Ok(())
    }

    pub fn write_bucket_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "n_docs,count,r1,r2,rsu,r_tilde")?;
        for b in &self.buckets {
            writeln!(out, "{},{},{},{},{},{}", b.n_docs, b.count, b.r1, b.r2, b.rsu, b.r_tilde)?;
        }
        Ok(())
    }
}

/// Decodes every example and scores it against its reference, spreading
/// clusters over `workers` threads (0 = all available cores). Results keep
/// input order.
pub fn evaluate_run(
    model: &Model,
    examples: &[Example],
    beam: usize,
    max_len: usize,
    min_bucket: usize,
    workers: usize,
) -> EvalReport {
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(examples.len().max(1));
    let chunk = examples.len().div_ceil(workers).max(1);
    let outcomes: Vec<std::result::Result<ClusterScore, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|ex| {
                            model
                                .summarize(&ex.input, beam, max_len)
                                .map(|c| ClusterScore::score(&ex.id, ex.source_docs, &c, &ex.reference))
                                .map_err(|e| e.to_string())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut scores = Vec::with_capacity(examples.len());
    let mut failures = Vec::new();
    for (ex, outcome) in examples.iter().zip(outcomes) {
        match outcome {
            Ok(score) => scores.push(score),
            Err(e) => {
                warn!("cluster {}: decode failed: {e}", ex.id);
                failures.push((ex.id.clone(), e));
            }
        }
    }
    EvalReport::from_scores(scores, failures, min_bucket)
}
