//! Gradient-check setups shared by the unit suites and the acceptance run.

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, random_tensor, random_var, tiny_model, GradReport};
use topicsum::corpus::{BowVector, ClusterInput, DOC};
use topicsum::decoder::{Decoder, EncodedCluster};
use topicsum::dge::DgeLayer;
use topicsum::graph::{build_graph, NodeFeatures};
use topicsum::nn::{Ctx, ParamStore};
use topicsum::ntm::TopicModel;
use topicsum::training::joint_loss;

pub const TOL: f64 = 1e-4;

fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
}

fn weighted_sum(t: &Tensor, weights: &Tensor) -> topicsum::Result<Tensor> {
    Ok((t * weights)?.sum_all()?)
}

pub fn ntm_loss() -> GradReport {
    let mut store = ParamStore::new(3);
    let ntm = TopicModel::new(&mut store, 12, 3, 8, 16).unwrap();
    let bow = BowVector {
        counts: vec![3, 0, 1, 0, 2, 5, 0, 0, 1, 1, 0, 4],
    };
    let noise = [0.3, -1.1, 0.7];
    let loss = || {
        let post = ntm.infer_posterior(&bow, Some(&noise))?;
        ntm.ntm_loss(&bow, &post)
    };
    grad_check(&loss, &store_vars(&store), 40, 1)
}

pub fn topic_embeddings() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(4);
    let ntm = TopicModel::new(&mut store, 10, 4, 8, 16).unwrap();
    let weights = random_tensor(&mut rng, 4, 16, 1.0);
    let loss = || weighted_sum(&ntm.topic_embeddings()?, &weights);
    let vars = vec![
        ("ntm.w_phi".to_string(), ntm.w_phi.clone()),
        ("ntm.f_phi.weight".to_string(), store.get("ntm.f_phi.weight").unwrap().clone()),
    ];
    grad_check(&loss, &vars, 200, 2)
}

/// One layer on N=2 documents, K=3 topics, M=4 words; every entry checked.
pub fn dge_layer() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new(5);
    let layer = DgeLayer::new(&mut store, "dge", 16, 2).unwrap();
    let input = ClusterInput {
        docs: vec![vec![DOC, 5, 6], vec![DOC, 7, 5]],
        summary: vec![],
    };
    let graph = build_graph(&input, 3).unwrap();
    let words = random_var(&mut rng, 4, 16, 1.0);
    let topics = random_var(&mut rng, 3, 16, 1.0);
    let docs = random_var(&mut rng, 2, 16, 1.0);
    let weights = random_tensor(&mut rng, 9, 16, 1.0);
    let ctx = Ctx::eval();
    let loss = || {
        let feats = NodeFeatures {
            words: words.as_tensor().clone(),
            topics: topics.as_tensor().clone(),
            docs: docs.as_tensor().clone(),
        };
        weighted_sum(&layer.forward(&graph, &feats, &ctx)?.stacked()?, &weights)
    };
    let mut vars = store_vars(&store);
    vars.push(("words".into(), words.clone()));
    vars.push(("topics".into(), topics.clone()));
    vars.push(("docs".into(), docs.clone()));
    grad_check(&loss, &vars, usize::MAX, 3)
}

fn small_decoder(rng: &mut ChaCha8Rng, seed: u64) -> (ParamStore, Decoder, EncodedCluster, Var) {
    let mut store = ParamStore::new(seed);
    let tokens = store.normal("embed", &[12, 16], 0.25).unwrap();
    let decoder = Decoder::new(&mut store, tokens, 8, 2).unwrap();
    let h_w = random_var(rng, 5, 16, 1.0);
    let h_t = random_tensor(rng, 3, 16, 1.0);
    let mut enc = EncodedCluster::new(h_w.as_tensor().clone(), h_t, vec![5, 6, 7, 6, 9]);
    enc.source_mask[4] = false;
    (store, decoder, enc, h_w)
}

pub fn output_distribution() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (store, decoder, enc, h_w) = small_decoder(&mut rng, 6);
    let o = random_var(&mut rng, 3, 16, 0.9);
    let gold = [6usize, 2, 7];
    let loss = || {
        let mut enc = enc.clone();
        enc.h_w = h_w.as_tensor().clone();
        let out = decoder.output_distribution(o.as_tensor(), &enc)?;
        let logp = out.p.log()?;
        let mut total = Tensor::zeros((), candle_core::DType::F64, &topicsum::nn::device())?;
        for (t, &g) in gold.iter().enumerate() {
            total = (total + logp.get(t)?.get(g)?)?;
        }
        Ok(total)
    };
    let mut vars: Vec<_> = store_vars(&store)
        .into_iter()
        .filter(|(n, _)| n.starts_with("decoder.w_g") || n.starts_with("decoder.w_eta"))
        .collect();
    vars.push(("o".into(), o.clone()));
    vars.push(("h_w".into(), h_w.clone()));
    grad_check(&loss, &vars, 60, 4)
}

pub fn word_step() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (store, decoder, enc, _) = small_decoder(&mut rng, 7);
    let c_t = random_var(&mut rng, 2, 16, 1.0);
    let weights = random_tensor(&mut rng, 2, 16, 1.0);
    let loss = || weighted_sum(&decoder.word_step(c_t.as_tensor(), &enc)?.1, &weights);
    let mut vars: Vec<_> = store_vars(&store)
        .into_iter()
        .filter(|(n, _)| n.starts_with("decoder.word_attn") || n.starts_with("decoder.w_o"))
        .collect();
    vars.push(("c_t".into(), c_t.clone()));
    grad_check(&loss, &vars, 40, 5)
}

/// Full objective on a two-cluster batch of the tiny model (K=3, d=16),
/// one entry per parameter.
pub fn joint() -> GradReport {
    let (model, ex) = tiny_model(11);
    assert_eq!((model.config.topics, model.config.dim), (3, 16));
    let batch: Vec<_> = ex.iter().take(2).collect();
    assert!(batch.iter().all(|e| e.input.docs.len() == 2));
    let ctx = Ctx::eval();
    let loss = || Ok(joint_loss(&model, &batch, &ctx, 1.0)?.total);
    grad_check(&loss, &store_vars(&model.store), 1, 6)
}
