//! Topic-aware decoder with a copy mechanism, plus beam search.
//!
//! Each step first attends from the decoded prefix over the topic node
//! states (the topic pointer `c_T`), then uses `c_T` to query the word node
//! states, and finally mixes a generation softmax with a copy distribution
//! over source tokens.

use candle_core::{Tensor, Var};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    tokens: Var,
    positions: Var,
    pub self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    pub topic_attn: MultiHeadAttention,
    pub word_attn: MultiHeadAttention,
    pub w_o: Linear,
    pub w_g: Linear,
    pub w_eta: Linear,
    /// When set, word attention is queried by the prefix state instead of
    /// the topic pointer.
    pub bypass_topic_pointer: bool,
}

/// Graph-encoder output the decoder conditions on.
#[derive(Debug, Clone)]
pub struct EncodedCluster {
    /// `[M, d]` word node states.
    pub h_w: Tensor,
    /// `[K, d]` topic node states.
    pub h_t: Tensor,
    pub source_ids: Vec<u32>,
    pub source_mask: Vec<bool>,
}

impl EncodedCluster {
    pub fn new(h_w: Tensor, h_t: Tensor, source_ids: Vec<u32>) -> Self {
        let source_mask = vec![true; source_ids.len()];
        Self {
            h_w,
            h_t,
            source_ids,
            source_mask,
        }
    }

    fn check(&self) -> Result<()> {
        let m = self.h_w.dims()[0];
        if m != self.source_ids.len() || m != self.source_mask.len() {
            return Err(Error::Shape(format!(
                "{m} word states but {} source ids / {} mask entries",
                self.source_ids.len(),
                self.source_mask.len()
            )));
        }
        if !self.source_mask.iter().any(|&k| k) {
            return Err(Error::EmptySource);
        }
        Ok(())
    }

    /// `[M, |V|]` one-hot rows of the unmasked source tokens.
    fn copy_matrix(&self, vocab: usize) -> Result<Tensor> {
        let m = self.source_ids.len();
        let mut data = vec![0.0f64; m * vocab];
        for (j, (&t, &keep)) in self.source_ids.iter().zip(&self.source_mask).enumerate() {
            if keep {
                data[j * vocab + t as usize] = 1.0;
            }
        }
        Ok(Tensor::from_vec(data, (m, vocab), &nn::device())?)
    }

    fn word_mask(&self) -> Result<Tensor> {
        nn::additive_mask(&self.source_mask, &[1, self.source_mask.len()])
    }
}

/// Per-position decoder quantities for a prefix of length `T`, each with a
/// leading `T` axis.
#[derive(Debug, Clone)]
pub struct DecoderSteps {
    pub u: Tensor,
    pub c_t: Tensor,
    pub theta_dec: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    pub p: Tensor,
    pub p_g: Tensor,
    pub p_c: Tensor,
    pub eta: Tensor,
}

/// Output of [`Decoder::output_distribution`], rows per query position.
#[derive(Debug, Clone)]
pub struct OutputDistribution {
    pub p: Tensor,
    pub p_g: Tensor,
    pub p_c: Tensor,
    pub eta: Tensor,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        tokens: Var,
        max_len: usize,
        heads: usize,
    ) -> Result<Self> {
        let (vocab_size, dim) = tokens.dims2()?;
        Ok(Self {
            dim,
            vocab_size,
            max_len,
            positions: store.normal("decoder.positions", &[max_len, dim], 0.1)?,
            tokens,
            self_attn: MultiHeadAttention::new(store, "decoder.self_attn", dim, heads)?,
            self_norm: LayerNorm::new(store, "decoder.self_norm", dim)?,
            topic_attn: MultiHeadAttention::new(store, "decoder.topic_attn", dim, heads)?,
            word_attn: MultiHeadAttention::new(store, "decoder.word_attn", dim, heads)?,
            w_o: Linear::new(store, "decoder.w_o", 2 * dim, dim)?,
            w_g: Linear::new(store, "decoder.w_g", dim, vocab_size)?,
            w_eta: Linear::new(store, "decoder.w_eta", dim, 1)?,
            bypass_topic_pointer: false,
        })
    }

    /// Target embeddings plus positions, `[T, d]`.
    pub fn embed_prefix(&self, prefix: &[u32]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(Error::Shape("empty decoder prefix".into()));
        }
        if prefix.len() > self.max_len {
            return Err(Error::Shape(format!(
                "prefix of {} tokens exceeds decoder limit {}",
                prefix.len(),
                self.max_len
            )));
        }
        let ids = Tensor::new(prefix, &nn::device())?;
        let emb = self.tokens.as_tensor().index_select(&ids, 0)?;
        let pos = self.positions.as_tensor().narrow(0, 0, prefix.len())?;
        Ok((emb + pos)?)
    }

    /// Causal self-attention state for every prefix position, `[T, d]`.
    pub fn prefix_states(&self, embeddings: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let t = embeddings.dims()[0];
        let e = embeddings.unsqueeze(0)?;
        let (a, _) = self.self_attn.forward(&e, &e, Some(&nn::causal_mask(t)?))?;
        let u = self.self_norm.forward(&(&e + ctx.dropout(&a)?)?)?;
        Ok(u.squeeze(0)?)
    }

    /// Topic pointer `c_T` `[T, d]` and head-averaged topic attention
    /// `theta_dec` `[T, K]` for each prefix position.
    pub fn topic_step(&self, prefix_embeddings: &Tensor, h_t: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor, Tensor)> {
        if prefix_embeddings.dims()[0] == 0 {
            return Err(Error::Shape("empty decoder prefix".into()));
        }
        let u = self.prefix_states(prefix_embeddings, ctx)?;
        let (c_t, theta_dec) = self.topic_attention(&u, h_t)?;
        Ok((u, c_t, theta_dec))
    }

    /// Attention of prefix states over topic states.
    pub fn topic_attention(&self, u: &Tensor, h_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c_t, w) = self
            .topic_attn
            .forward(&u.unsqueeze(0)?, &h_t.unsqueeze(0)?, None)?;
        let theta = w.squeeze(0)?.mean(0)?;
        Ok((c_t.squeeze(0)?, theta))
    }

    /// `v = MHAttn(query, H_W, H_W)`, `o = tanh(W_o [v; query])`.
    pub fn word_step(&self, query: &Tensor, enc: &EncodedCluster) -> Result<(Tensor, Tensor)> {
        enc.check()?;
        let mask = enc.word_mask()?;
        let (v, _) = self
            .word_attn
            .forward(&query.unsqueeze(0)?, &enc.h_w.unsqueeze(0)?, Some(&mask))?;
        let v = v.squeeze(0)?;
        let o = self.w_o.forward(&Tensor::cat(&[&v, query], 1)?)?.tanh()?;
        Ok((v, o))
    }

    /// Generation/copy mixture for output states `o` `[T, d]`.
    pub fn output_distribution(&self, o: &Tensor, enc: &EncodedCluster) -> Result<OutputDistribution> {
        enc.check()?;
        let p_g = nn::softmax(&self.w_g.forward(o)?)?;
        let scores = o.matmul(&enc.h_w.t()?)?.broadcast_add(&enc.word_mask()?)?;
        let eps = nn::softmax(&scores)?;
        let p_c = eps.matmul(&enc.copy_matrix(self.vocab_size)?)?;
        let eta = nn::sigmoid(&self.w_eta.forward(o)?)?;
        let p = (p_c.broadcast_mul(&eta)? + p_g.broadcast_mul(&(1.0 - &eta)?)?)?;
        Ok(OutputDistribution { p, p_g, p_c, eta })
    }

    /// All decoder quantities for every position of `prefix` (causal).
    pub fn run(&self, prefix: &[u32], enc: &EncodedCluster, ctx: &Ctx) -> Result<DecoderSteps> {
        let e = self.embed_prefix(prefix)?;
        let (u, c_t, theta_dec) = self.topic_step(&e, &enc.h_t, ctx)?;
        let query = if self.bypass_topic_pointer { &u } else { &c_t };
        let (v, o) = self.word_step(query, enc)?;
        let out = self.output_distribution(&o, enc)?;
        Ok(DecoderSteps {
            u,
            c_t,
            theta_dec,
            v,
            o,
            p: out.p,
            p_g: out.p_g,
            p_c: out.p_c,
            eta: out.eta,
        })
    }

    /// Teacher forcing: step `i` conditions on gold `y_0..y_i` and predicts
    /// `y_{i+1}`; yields `|summary| - 1` steps.
    pub fn teacher_forced_pass(&self, summary: &[u32], enc: &EncodedCluster, ctx: &Ctx) -> Result<DecoderSteps> {
        if summary.len() < 2 {
            return Err(Error::Shape("summary needs at least BOS and one target".into()));
        }
        self.run(&summary[..summary.len() - 1], enc, ctx)
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_log_probs(&self, prefix: &[u32], enc: &EncodedCluster) -> Result<Vec<f64>> {
        let steps = self.run(prefix, enc, &Ctx::eval())?;
        let last = steps.p.narrow(0, prefix.len() - 1, 1)?;
        Ok(nn::to_vec(&last)?
            .into_iter()
            .map(|p| (p + 1e-300).ln())
            .collect())
    }
}

/// Anything that can score the next token for a batch of prefixes.
pub trait StepScorer {
    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// A decoder bound to one encoded cluster.
pub struct BoundDecoder<'a> {
    pub decoder: &'a Decoder,
    pub encoded: &'a EncodedCluster,
}

impl StepScorer for BoundDecoder<'_> {
    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|p| self.decoder.next_log_probs(p, self.encoded))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS; ends with EOS when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    pub fn normalized(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn body(&self) -> &[u32] {
        if self.finished() {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Beam search over at most `max_len` generated tokens. Returns the
/// hypothesis with the best `log_prob / len^length_penalty`.
pub fn beam_search(
    scorer: &dyn StepScorer,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let beam = beam.max(1);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let scores = scorer.log_probs(&prefixes)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, lp) in scores.iter().enumerate() {
            for (w, &s) in lp.iter().enumerate() {
                if s.is_finite() {
                    candidates.push((live[h].log_prob + s, h, w as u32));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(score, h, w) in candidates.iter().take(beam) {
            let mut tokens = live[h].tokens.clone();
            tokens.push(w);
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
            };
            if w == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }
    finished.extend(live);
    finished
        .into_iter()
        .reduce(|best, h| {
            if h.normalized(length_penalty) > best.normalized(length_penalty) {
                h
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Config("beam search produced no hypothesis".into()))
}

/// Argmax decoding, stopping at EOS or `max_len`.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let prefix: Vec<u32> = std::iter::once(BOS).chain(hyp.tokens.iter().copied()).collect();
        let lp = scorer.log_probs(&[prefix])?.remove(0);
        let (w, s) = lp
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best });
        hyp.tokens.push(w as u32);
        hyp.log_prob += s;
        if w as u32 == EOS {
            break;
        }
    }
    Ok(hyp)
}
