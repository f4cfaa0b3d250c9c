//! Gaussian-softmax variational topic model.
//!
//! The encoder maps a (log-scaled) bag-of-words vector to a diagonal Gaussian
//! posterior, a reparameterized sample is pushed through softmax to get the
//! topic mixture, and `softmax(W_phi theta)` reconstructs the input.
//! `W_phi` doubles as the raw feature matrix for the topic nodes of the
//! document graph.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{Tensor, Var};

use crate::corpus::{BowVector, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamStore};

pub const LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct TopicModel {
    pub vocab_size: usize,
    pub topics: usize,
    pub dim: usize,
    mu_hidden: Linear,
    mu_out: Linear,
    sigma_hidden: Linear,
    sigma_out: Linear,
    /// `|V| x K` unnormalized topic-word weights.
    pub w_phi: Var,
    f_phi: Linear,
}

/// Posterior quantities for a batch of clusters, each `[B, K]`.
#[derive(Debug, Clone)]
pub struct TopicPosterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub z: Tensor,
    pub theta: Tensor,
}

impl TopicPosterior {
    pub fn sigma(&self) -> Result<Tensor> {
        Ok(self.log_sigma.exp()?)
    }
}

/// `log(1 + count)` rows, `[B, |V|]`.
pub fn bow_features(bows: &[&BowVector]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = bows
        .iter()
        .map(|b| b.counts.iter().map(|&c| (c as f64).ln_1p()).collect())
        .collect();
    nn::tensor_from_rows(&rows)
}

/// Raw counts, `[B, |V|]`.
pub fn bow_counts(bows: &[&BowVector]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = bows
        .iter()
        .map(|b| b.counts.iter().map(|&c| c as f64).collect())
        .collect();
    nn::tensor_from_rows(&rows)
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))` summed over topics, `[B]`.
pub fn gaussian_kl(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let sigma_sq = (log_sigma * 2.0)?.exp()?;
    let terms = ((mu.sqr()? + sigma_sq)? - 1.0)?.sub(&(log_sigma * 2.0)?)?;
    Ok((terms.sum(1)? * 0.5)?)
}

impl TopicModel {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        topics: usize,
        hidden: usize,
        dim: usize,
    ) -> Result<Self> {
        if topics == 0 {
            return Err(Error::Config("topic count must be at least 1".into()));
        }
        Ok(Self {
            vocab_size,
            topics,
            dim,
            mu_hidden: Linear::new(store, "ntm.f_mu.hidden", vocab_size, hidden)?,
            mu_out: Linear::new(store, "ntm.f_mu.out", hidden, topics)?,
            sigma_hidden: Linear::new(store, "ntm.f_sigma.hidden", vocab_size, hidden)?,
            sigma_out: Linear::new(store, "ntm.f_sigma.out", hidden, topics)?,
            // Unit-scale entries keep topic embeddings distinct at init.
            // Near-identical topic states leave the decoder's topic pointer
            // constant across steps until the topic model separates them.
            w_phi: store.normal("ntm.w_phi", &[vocab_size, topics], 1.0)?,
            f_phi: Linear::new(store, "ntm.f_phi", vocab_size, dim)?,
        })
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        let (_, v) = x.dims2()?;
        if v != self.vocab_size {
            return Err(Error::Shape(format!(
                "bag-of-words length {v} does not match vocabulary size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Posterior for a batch of `log(1 + count)` feature rows. `noise`, when
    /// given, is a `[B, K]` standard-normal sample; without it `z = mu`.
    pub fn posterior(&self, features: &Tensor, noise: Option<&Tensor>) -> Result<TopicPosterior> {
        self.check_width(features)?;
        let mu = self
            .mu_out
            .forward(&self.mu_hidden.forward(features)?.relu()?)?;
        let log_sigma = self
            .sigma_out
            .forward(&self.sigma_hidden.forward(features)?.relu()?)?;
        let z = match noise {
            Some(eps) => (&mu + log_sigma.exp()?.mul(eps)?)?,
            None => mu.clone(),
        };
        let theta = nn::softmax(&z)?;
        Ok(TopicPosterior {
            mu,
            log_sigma,
            z,
            theta,
        })
    }

    pub fn infer_posterior(&self, x_bow: &BowVector, noise: Option<&[f64]>) -> Result<TopicPosterior> {
        if x_bow.counts.len() != self.vocab_size {
            return Err(Error::Shape(format!(
                "bag-of-words length {} does not match vocabulary size {}",
                x_bow.counts.len(),
                self.vocab_size
            )));
        }
        let features = bow_features(&[x_bow])?;
        let noise = match noise {
            Some(n) if n.len() != self.topics => {
                return Err(Error::Shape(format!(
                    "noise length {} does not match topic count {}",
                    n.len(),
                    self.topics
                )))
            }
            Some(n) => Some(Tensor::from_vec(n.to_vec(), (1, self.topics), &nn::device())?),
            None => None,
        };
        self.posterior(&features, noise.as_ref())
    }

    /// `softmax(W_phi theta)` for `[B, K]` mixtures, giving `[B, |V|]`.
    pub fn reconstruct(&self, theta: &Tensor) -> Result<Tensor> {
        nn::softmax(&theta.matmul(&self.w_phi.as_tensor().t()?)?)
    }

    /// Per-cluster `(KL, reconstruction)` terms, each `[B]`.
    pub fn loss_terms(&self, counts: &Tensor, posterior: &TopicPosterior) -> Result<(Tensor, Tensor)> {
        let kl = gaussian_kl(&posterior.mu, &posterior.log_sigma)?;
        let recon = self.reconstruct(&posterior.theta)?;
        let rec = counts.mul(&(recon + LOG_EPS)?.log()?)?.sum(1)?.neg()?;
        Ok((kl, rec))
    }

    /// Negative ELBO for one cluster.
    pub fn ntm_loss(&self, x_bow: &BowVector, posterior: &TopicPosterior) -> Result<Tensor> {
        let counts = bow_counts(&[x_bow])?;
        let (kl, rec) = self.loss_terms(&counts, posterior)?;
        Ok((kl + rec)?.sum_all()?)
    }

    /// `H_T = tanh(f_phi(W_phi^T))`, one row per topic, `[K, d]`.
    pub fn topic_embeddings(&self) -> Result<Tensor> {
        Ok(self.f_phi.forward(&self.w_phi.as_tensor().t()?)?.tanh()?)
    }

    pub fn top_word_ids(&self, topic: usize, n: usize) -> Result<Vec<usize>> {
        if topic >= self.topics {
            return Err(Error::OutOfRange {
                what: "topics",
                index: topic,
                size: self.topics,
            });
        }
        if n > self.vocab_size {
            return Err(Error::OutOfRange {
                what: "bag-of-words vocabulary",
                index: n,
                size: self.vocab_size,
            });
        }
        let column = nn::to_vec(&self.w_phi.as_tensor().narrow(1, topic, 1)?)?;
        let mut ids: Vec<usize> = (0..column.len()).collect();
        ids.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
        ids.truncate(n);
        Ok(ids)
    }

    pub fn top_words(&self, topic: usize, n: usize, vocab: &Vocabulary) -> Result<Vec<String>> {
        Ok(self
            .top_word_ids(topic, n)?
            .into_iter()
            .map(|i| vocab.bow.token(i as u32).unwrap_or("<unk>").to_string())
            .collect())
    }

    pub fn all_top_words(&self, n: usize, vocab: &Vocabulary) -> Result<Vec<Vec<String>>> {
        (0..self.topics).map(|k| self.top_words(k, n, vocab)).collect()
    }
}

/// Writes `topic_id<TAB>w1 w2 ...` lines.
pub fn write_topic_report(mut out: impl Write, topics: &[Vec<String>]) -> Result<()> {
    for (k, words) in topics.iter().enumerate() {
        writeln!(out, "{k}\t{}", words.join(" "))?;
    }
    Ok(())
}

pub fn read_topic_report(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut topics = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (_, words) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected topic_id<TAB>words".into(),
        })?;
        topics.push(words.split_whitespace().map(str::to_string).collect());
    }
    Ok(topics)
}
