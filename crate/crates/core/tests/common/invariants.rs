//! Randomized distribution invariants over topic model, graph attention and
//! decoder outputs.

use std::collections::HashSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_tensor;
use topicsum::corpus::{BowVector, ClusterInput, DOC};
use topicsum::decoder::{Decoder, EncodedCluster};
use topicsum::dge::DgeLayer;
use topicsum::graph::{build_graph, NodeFeatures};
use topicsum::nn::{to_rows, Ctx, ParamStore};
use topicsum::ntm::TopicModel;

const TOL: f64 = 1e-6;
const DIM: usize = 8;

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<(), TestCaseError> {
    for (r, row) in rows.iter().enumerate() {
        let s: f64 = row.iter().sum();
        prop_assert!((s - 1.0).abs() <= TOL, "{} row {} sums to {}", what, r, s);
        prop_assert!(row.iter().all(|&x| x >= 0.0), "{} row {} negative", what, r);
    }
    Ok(())
}

pub fn case(seed: u64, topics: usize, heads: usize) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let bow_size = rng.gen_range(2..20);
    let seq_size = rng.gen_range(8..30);

    let ntm = TopicModel::new(&mut store, bow_size, topics, 6, DIM).unwrap();
    let bow = BowVector {
        counts: (0..bow_size).map(|_| rng.gen_range(0..4)).collect(),
    };
    let noise: Vec<f64> = (0..topics).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let post = ntm.infer_posterior(&bow, Some(&noise)).unwrap();
    check_rows(&to_rows(&post.theta).unwrap(), "theta_x")?;
    check_rows(&to_rows(&ntm.reconstruct(&post.theta).unwrap()).unwrap(), "x'_bow")?;

    let n_docs = rng.gen_range(1..4);
    let input = ClusterInput {
        docs: (0..n_docs)
            .map(|_| {
                let len = rng.gen_range(1..5);
                std::iter::once(DOC)
                    .chain((0..len).map(|_| rng.gen_range(5..seq_size as u32)))
                    .collect()
            })
            .collect(),
        summary: vec![],
    };
    let graph = build_graph(&input, topics).unwrap();
    let layer = DgeLayer::new(&mut store, "dge", DIM, heads).unwrap();
    let feats = NodeFeatures {
        words: random_tensor(&mut rng, graph.n_words(), DIM, 1.0),
        topics: ntm.topic_embeddings().unwrap(),
        docs: random_tensor(&mut rng, n_docs, DIM, 1.0),
    };
    let (out, alpha) = layer.forward_with_attention(&graph, &feats, &Ctx::eval()).unwrap();
    for h in 0..heads {
        let rows = to_rows(&alpha.get(h).unwrap()).unwrap();
        check_rows(&rows, "alpha")?;
        for (i, row) in rows.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                prop_assert!(a == 0.0 || graph.has_edge(i, j), "attention off the neighborhood");
            }
        }
    }

    let tokens = store.normal("embed", &[seq_size, DIM], 0.5).unwrap();
    let decoder = Decoder::new(&mut store, tokens, 8, heads).unwrap();
    let source = input.word_tokens();
    let mut enc = EncodedCluster::new(out.words.clone(), out.topics.clone(), source.clone());
    for k in enc.source_mask.iter_mut() {
        *k = rng.gen_bool(0.7);
    }
    let first = rng.gen_range(0..source.len());
    enc.source_mask[first] = true;
    let prefix: Vec<u32> = std::iter::once(2)
        .chain((0..rng.gen_range(0..5)).map(|_| rng.gen_range(0..seq_size as u32)))
        .collect();
    let steps = decoder.run(&prefix, &enc, &Ctx::eval()).unwrap();
    check_rows(&to_rows(&steps.theta_dec).unwrap(), "theta_dec")?;
    check_rows(&to_rows(&steps.p_g).unwrap(), "p_g")?;
    let p_c = to_rows(&steps.p_c).unwrap();
    check_rows(&p_c, "p_c")?;
    check_rows(&to_rows(&steps.p).unwrap(), "p")?;
    let support: HashSet<u32> = source
        .iter()
        .zip(&enc.source_mask)
        .filter(|(_, &k)| k)
        .map(|(&t, _)| t)
        .collect();
    for row in &p_c {
        for (w, &x) in row.iter().enumerate() {
            prop_assert!(x == 0.0 || support.contains(&(w as u32)), "copy mass on non-source token {}", w);
        }
    }
    Ok(())
}

/// Runs `cases` random cases; the error names the first failing case.
pub fn run(cases: u32) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new(config);
    runner
        .run(&(any::<u64>(), 1usize..6, any::<bool>()), |(seed, topics, two_heads)| {
            case(seed, topics, if two_heads { 2 } else { 1 })
        })
        .map_err(|e| e.to_string())
}
