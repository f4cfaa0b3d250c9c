//! Toy corpora with planted topics, for smoke tests and sanity runs.
//!
//! Each topic owns a disjoint pool of word types. A cluster is drawn from
//! one topic; its documents are random sequences over that topic's pool and
//! its summary concatenates the first few tokens of every document, so the
//! summary is fully recoverable by copying.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawCluster;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub docs_per_cluster: usize,
    pub doc_len: usize,
    /// Leading tokens of each document copied into the summary.
    pub lead: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 32,
            topics: 2,
            words_per_topic: 100,
            docs_per_cluster: 2,
            doc_len: 12,
            lead: 3,
            seed: 0,
        }
    }
}

pub fn topic_word(topic: usize, i: usize) -> String {
    format!("t{topic}w{i}")
}

/// Clusters plus the planted topic of each.
pub fn generate(spec: &SyntheticSpec) -> (Vec<RawCluster>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.clusters).map(|c| c % spec.topics.max(1)).collect();
    labels.shuffle(&mut rng);
    let clusters = labels
        .iter()
        .enumerate()
        .map(|(c, &topic)| {
            let docs: Vec<Vec<String>> = (0..spec.docs_per_cluster)
                .map(|_| {
                    (0..spec.doc_len)
                        .map(|_| topic_word(topic, rng.gen_range(0..spec.words_per_topic)))
                        .collect()
                })
                .collect();
            let summary: Vec<String> = docs
                .iter()
                .flat_map(|d| d.iter().take(spec.lead).cloned())
                .collect();
            RawCluster {
                id: format!("syn{c}"),
                documents: docs.iter().map(|d| d.join(" ")).collect(),
                summary: summary.join(" "),
            }
        })
        .collect();
    (clusters, labels)
}

/// Fraction of items whose predicted cluster's majority label matches
/// their own label.
pub fn purity(predicted: &[usize], labels: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut groups: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&p, &l) in predicted.iter().zip(labels) {
        *groups.entry(p).or_default().entry(l).or_default() += 1;
    }
    let hits: usize = groups.values().map(|g| g.values().max().copied().unwrap_or(0)).sum();
    hits as f64 / predicted.len().max(1) as f64
}
