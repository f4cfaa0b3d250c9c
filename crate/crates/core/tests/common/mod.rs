#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracles;
pub mod search;

use std::collections::HashSet;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topicsum::corpus::{build_vocabulary, RawCluster, Vocabulary};
use topicsum::nn::{self, to_vec};
use topicsum::synthetic::{generate, SyntheticSpec};
use topicsum::training::{prepare_examples, Example, Model, TrainConfig};
use topicsum::Result;

/// Small model settings used by most tests: d=16, K=3, two heads.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        topics: 3,
        dim: 16,
        heads: 2,
        layers: 2,
        encoder_layers: 1,
        ntm_hidden: 8,
        batch_size: 2,
        max_doc_len: 6,
        max_docs: 2,
        max_summary_len: 4,
        max_decode_len: 8,
        dropout: 0.0,
        seed,
        ..TrainConfig::default()
    }
}

pub fn vocabulary(raw: &[RawCluster]) -> Vocabulary {
    build_vocabulary(raw, 10_000, 10_000, &HashSet::new()).unwrap()
}

pub fn examples(raw: &[RawCluster], vocab: &Vocabulary, cfg: &TrainConfig) -> Vec<Example> {
    let clusters: Vec<_> = raw
        .iter()
        .map(|r| vocab.encode_cluster(r, cfg.max_doc_len, cfg.max_summary_len).unwrap())
        .collect();
    prepare_examples(&clusters, vocab, cfg)
}

/// Synthetic clusters, a vocabulary built from them, and prepared examples.
pub fn synthetic_setup(spec: &SyntheticSpec, cfg: &TrainConfig) -> (Vocabulary, Vec<Example>, Vec<usize>) {
    let (raw, labels) = generate(spec);
    let vocab = vocabulary(&raw);
    let ex = examples(&raw, &vocab, cfg);
    (vocab, ex, labels)
}

/// A randomly initialized tiny model with a few matching examples.
pub fn tiny_model(seed: u64) -> (Model, Vec<Example>) {
    let cfg = tiny_config(seed);
    let spec = SyntheticSpec {
        clusters: 4,
        words_per_topic: 8,
        doc_len: 5,
        lead: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let (vocab, ex, _) = synthetic_setup(&spec, &cfg);
    (Model::new(cfg, vocab).unwrap(), ex)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compares backprop gradients of the scalar `loss` with central finite
/// differences on up to `per_var` randomly chosen entries of every variable.
pub fn grad_check(
    loss: &dyn Fn() -> Result<Tensor>,
    vars: &[(String, Var)],
    per_var: usize,
    seed: u64,
) -> GradReport {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads = loss().unwrap().backward().unwrap();
    let mut report = GradReport::default();
    for (name, var) in vars {
        let base = to_vec(var.as_tensor()).unwrap();
        let shape = var.dims().to_vec();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g).unwrap(),
            None => vec![0.0; base.len()],
        };
        let mut idx: Vec<usize> = (0..base.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_var);
        for i in idx {
            let eval_at = |x: f64| {
                let mut v = base.clone();
                v[i] = x;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &nn::device()).unwrap())
                    .unwrap();
                nn::scalar(&loss().unwrap()).unwrap()
            };
            let plus = eval_at(base[i] + H);
            let minus = eval_at(base[i] - H);
            let numeric = (plus - minus) / (2.0 * H);
            let e = rel_err(analytic[i], numeric, FLOOR);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{name}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &nn::device()).unwrap())
            .unwrap();
    }
    report
}

/// Variables of the store whose name starts with `prefix`.
pub fn vars_with_prefix(model: &Model, prefix: &str) -> Vec<(String, Var)> {
    model
        .store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(data, (rows, cols), &nn::device()).unwrap()
}

pub fn random_var(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Var {
    Var::from_tensor(&random_tensor(rng, rows, cols, scale)).unwrap()
}

/// Asserts every row of `t` is a distribution within `tol`.
pub fn assert_rows_are_distributions(t: &Tensor, tol: f64, what: &str) {
    for (r, row) in nn::to_rows(t).unwrap().iter().enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= tol, "{what} row {r} sums to {s}");
        assert!(row.iter().all(|&x| x >= 0.0), "{what} row {r} has a negative entry");
    }
}
