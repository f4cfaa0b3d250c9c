//! Independent reference implementations of the evaluation metrics.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topicsum::eval::{coherence_cv, rouge_n, rouge_su, ClusterScore, EvalReport, RougeScore, NPMI_EPS};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Clipped overlap by greedy one-to-one matching of equal units.
pub fn matched<T: PartialEq>(cand: &[T], reference: &[T]) -> usize {
    let mut used = vec![false; reference.len()];
    let mut hits = 0;
    for c in cand {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *c) {
            used[j] = true;
            hits += 1;
        }
    }
    hits
}

pub fn oracle_score(overlap: usize, c: usize, r: usize) -> RougeScore {
    let p = if c == 0 { 0.0 } else { overlap as f64 / c as f64 };
    let rc = if r == 0 { 0.0 } else { overlap as f64 / r as f64 };
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    RougeScore {
        precision: p,
        recall: rc,
        f1: f,
    }
}

pub fn oracle_rouge_n(c: &[String], r: &[String], n: usize) -> RougeScore {
    if r.len() < n {
        return RougeScore::default();
    }
    let grams = |t: &[String]| -> Vec<Vec<String>> {
        (0..(t.len() + 1).saturating_sub(n)).map(|i| t[i..i + n].to_vec()).collect()
    };
    let (cg, rg) = (grams(c), grams(r));
    oracle_score(matched(&cg, &rg), cg.len(), rg.len())
}

pub fn oracle_rouge_su(c: &[String], r: &[String], max_skip: usize) -> RougeScore {
    if r.is_empty() {
        return RougeScore::default();
    }
    // Units: unigrams as (w, None), skip-bigrams as (a, Some(b)).
    let units = |t: &[String]| -> Vec<(String, Option<String>)> {
        let mut out: Vec<_> = t.iter().map(|w| (w.clone(), None)).collect();
        for i in 0..t.len() {
            for j in 0..t.len() {
                if i < j && j - i - 1 <= max_skip {
                    out.push((t[i].clone(), Some(t[j].clone())));
                }
            }
        }
        out
    };
    let (cu, ru) = (units(c), units(r));
    oracle_score(matched(&cu, &ru), cu.len(), ru.len())
}

/// Direct C_v: explicit window sets, NPMI, one-set cosine confirmation.
pub fn oracle_cv(topic: &[String], corpus: &[Vec<String>], window: usize) -> f64 {
    let mut windows: Vec<HashSet<&str>> = Vec::new();
    for doc in corpus.iter().filter(|d| !d.is_empty()) {
        let w = window.min(doc.len());
        for start in 0..=doc.len() - w {
            windows.push(doc[start..start + w].iter().map(String::as_str).collect());
        }
    }
    let n = windows.len() as f64;
    let p = |a: &str| windows.iter().filter(|s| s.contains(a)).count() as f64 / n;
    let p2 = |a: &str, b: &str| windows.iter().filter(|s| s.contains(a) && s.contains(b)).count() as f64 / n;
    let npmi = |a: &str, b: &str| {
        if p(a) == 0.0 || p(b) == 0.0 {
            return -1.0;
        }
        let joint = p2(a, b) + NPMI_EPS;
        (joint / (p(a) * p(b))).ln() / -joint.ln()
    };
    let vecs: Vec<Vec<f64>> = topic
        .iter()
        .map(|a| topic.iter().map(|b| npmi(a, b)).collect())
        .collect();
    let total: Vec<f64> = (0..topic.len()).map(|j| vecs.iter().map(|v| v[j]).sum()).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: f64 = vecs
        .iter()
        .map(|v| {
            let d: f64 = v.iter().zip(&total).map(|(x, y)| x * y).sum();
            if norm(v) == 0.0 || norm(&total) == 0.0 {
                0.0
            } else {
                d / (norm(v) * norm(&total))
            }
        })
        .sum();
    (cos / topic.len() as f64).clamp(0.0, 1.0)
}

fn random_text(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| format!("w{}", rng.gen_range(0..6))).collect()
}

/// Pairs on which library ROUGE-1/2/SU4 differ from the oracles, out of `n`.
pub fn rouge_disagreements(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..n {
        let c = random_text(&mut rng, 15);
        let r = random_text(&mut rng, 15);
        if rouge_n(&c, &r, 1) != oracle_rouge_n(&c, &r, 1)
            || rouge_n(&c, &r, 2) != oracle_rouge_n(&c, &r, 2)
            || rouge_su(&c, &r, 4) != oracle_rouge_su(&c, &r, 4)
        {
            bad.push(format!("{c:?} / {r:?}"));
        }
    }
    bad
}

/// Largest |library - oracle| C_v over `n` random topics, with the library
/// per-topic values and mean.
pub fn coherence_max_diff(n: usize, seed: u64) -> (f64, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..40).map(|i| format!("v{i}")).collect();
    let corpus: Vec<Vec<String>> = (0..60)
        .map(|_| {
            let len = rng.gen_range(5..40);
            // Words are drawn from a sliding slice of the pool so that
            // co-occurrence varies across pairs.
            let base = rng.gen_range(0..30);
            (0..len).map(|_| words[base + rng.gen_range(0..10)].clone()).collect()
        })
        .collect();
    let topics: Vec<Vec<String>> = (0..n)
        .map(|_| words.choose_multiple(&mut rng, 10).cloned().collect())
        .collect();
    let window = 12;
    let report = coherence_cv(&topics, &corpus, window);
    let diff = topics
        .iter()
        .enumerate()
        .map(|(t, topic)| (report.per_topic[t] - oracle_cv(topic, &corpus, window)).abs())
        .fold(0.0, f64::max);
    (diff, report.per_topic, report.mean)
}

/// Bucket rows whose count or R-tilde disagrees with a recomputation from the
/// member clusters, or whose CSV line is inconsistent.
pub fn bucket_errors(report: &EvalReport) -> Vec<String> {
    let mut bad = Vec::new();
    for b in &report.buckets {
        let members: Vec<_> = report.scores.iter().filter(|s| s.n_docs == b.n_docs).collect();
        if members.len() != b.count {
            bad.push(format!("bucket {}: count {} vs {}", b.n_docs, b.count, members.len()));
            continue;
        }
        let mean = |f: &dyn Fn(&ClusterScore) -> f64| members.iter().map(|s| f(s)).sum::<f64>() / b.count as f64;
        let expected = (mean(&|s| s.r1.f1) + mean(&|s| s.r2.f1) + mean(&|s| s.rsu.f1)) / 3.0;
        if (b.r_tilde - expected).abs() >= 1e-12 {
            bad.push(format!("bucket {}: r_tilde {} vs {expected}", b.n_docs, b.r_tilde));
        }
    }
    let mut csv = Vec::new();
    report.write_bucket_csv(&mut csv).unwrap();
    for line in String::from_utf8(csv).unwrap().lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        if (v[5] - (v[2] + v[3] + v[4]) / 3.0).abs() >= 1e-12 {
            bad.push(format!("csv line {line}"));
        }
    }
    bad
}
