//! Decoder reference checks: causality, beam against greedy, and beam
//! against exhaustive enumeration on rigged step tables.

use super::tiny_model;
use topicsum::corpus::{BOS, EOS};
use topicsum::decoder::{beam_search, greedy_decode, BoundDecoder, Hypothesis, StepScorer};
use topicsum::nn::{to_rows, Ctx};
use topicsum::Result;

/// Violations found when each gold token is perturbed in turn: steps before
/// it must not change and the step that reads it must.
pub fn causality_violations(seed: u64) -> Vec<String> {
    let (model, ex) = tiny_model(seed);
    let ctx = Ctx::eval();
    let mut bad = Vec::new();
    for e in &ex {
        let enc = model.encode(&e.input, &ctx).unwrap();
        let summary = e.input.summary.clone();
        let base = to_rows(&model.decoder.teacher_forced_pass(&summary, &enc, &ctx).unwrap().p).unwrap();
        let vocab = model.vocab.seq_len() as u32;
        for t in 1..summary.len() - 1 {
            let mut changed = summary.clone();
            changed[t] = (changed[t] + 1) % vocab;
            let p = to_rows(&model.decoder.teacher_forced_pass(&changed, &enc, &ctx).unwrap().p).unwrap();
            // Step i predicts y_{i+1} from y_0..y_i, so steps before index t
            // never see y_t.
            for i in 0..t {
                if p[i] != base[i] {
                    bad.push(format!("step {i} changed after perturbing y_{t}"));
                }
            }
            if p[t] == base[t] {
                bad.push(format!("step {t} ignores y_{t}"));
            }
        }
    }
    bad
}

/// Seeds among `seeds` where beam=1 and greedy decoding disagree.
pub fn beam_one_vs_greedy(seeds: std::ops::Range<u64>) -> Vec<u64> {
    seeds
        .filter(|&seed| {
            let (model, ex) = tiny_model(seed);
            let enc = model.encode(&ex[0].input, &Ctx::eval()).unwrap();
            let scorer = BoundDecoder {
                decoder: &model.decoder,
                encoded: &enc,
            };
            let beam = beam_search(&scorer, 1, 8, 1.0).unwrap();
            let greedy = greedy_decode(&scorer, 8).unwrap();
            beam.tokens != greedy.tokens || (beam.log_prob - greedy.log_prob).abs() >= 1e-12
        })
        .collect()
}

/// Two content tokens (ids 0 and 1) plus EOS; BOS is never produced.
pub struct Rigged {
    pub table: fn(&[u32]) -> [f64; 3],
}

impl StepScorer for Rigged {
    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                assert_eq!(p[0], BOS);
                let [a, b, eos] = (self.table)(&p[1..]);
                vec![a.ln(), b.ln(), f64::NEG_INFINITY, eos.ln()]
            })
            .collect())
    }
}

/// Every finished sequence of length <= max_len, and every unfinished one of
/// length exactly max_len, with its total log-probability.
pub fn enumerate(scorer: &dyn StepScorer, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut frontier = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
    }];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for h in &frontier {
            let prefix: Vec<u32> = std::iter::once(BOS).chain(h.tokens.iter().copied()).collect();
            let lp = scorer.log_probs(&[prefix]).unwrap().remove(0);
            for (w, &s) in lp.iter().enumerate() {
                if !s.is_finite() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(w as u32);
                let hyp = Hypothesis {
                    tokens,
                    log_prob: h.log_prob + s,
                };
                if w as u32 == EOS {
                    out.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
        }
        frontier = next;
    }
    out.extend(frontier);
    out
}

pub fn best(hyps: &[Hypothesis]) -> &Hypothesis {
    hyps.iter().max_by(|a, b| a.log_prob.total_cmp(&b.log_prob)).unwrap()
}

/// Greedy takes token 0 first, but token 1 followed by EOS is better.
pub fn late_winner(prefix: &[u32]) -> [f64; 3] {
    match prefix {
        [] => [0.5, 0.4, 0.1],
        [1] => [0.05, 0.05, 0.9],
        _ => [0.34, 0.33, 0.33],
    }
}

/// The best sequence only pays off at the third step.
pub fn deep_winner(prefix: &[u32]) -> [f64; 3] {
    match prefix {
        [] => [0.6, 0.3, 0.1],
        [0] => [0.4, 0.4, 0.2],
        [1] => [0.1, 0.8, 0.1],
        [1, 1] => [0.02, 0.95, 0.03],
        _ => [0.3, 0.3, 0.4],
    }
}

/// For each rigged table: (beam=3 equals the exhaustive optimum, greedy is
/// strictly worse than it).
pub fn rigged_beam_three() -> Vec<(bool, bool)> {
    [late_winner as fn(&[u32]) -> [f64; 3], deep_winner]
        .into_iter()
        .map(|table| {
            let scorer = Rigged { table };
            let all = enumerate(&scorer, 3);
            let oracle = best(&all);
            let beam = beam_search(&scorer, 3, 3, 0.0).unwrap();
            let greedy = greedy_decode(&scorer, 3).unwrap();
            (
                beam.tokens == oracle.tokens && (beam.log_prob - oracle.log_prob).abs() < 1e-12,
                greedy.log_prob < oracle.log_prob,
            )
        })
        .collect()
}
