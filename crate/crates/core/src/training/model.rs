use candle_core::{Tensor, Var};

use crate::corpus::{self, to_bow, BowVector, ClusterInput, DocumentCluster, Vocabulary};
use crate::decoder::{beam_search, greedy_decode, BoundDecoder, Decoder, EncodedCluster, Hypothesis};
use crate::dge::{dge_stack, DgeLayer};
use crate::error::{Error, Result};
use crate::graph::{build_graph, build_graph_without_topics, init_node_features, DocumentEncoder, HeteroGraph};
use crate::nn::{self, Ctx, ParamStore};
use crate::ntm::{self, TopicModel, TopicPosterior};

use super::TrainConfig;

/// A cluster prepared for the model: batched input view plus its
/// bag-of-words vector.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub input: ClusterInput,
    pub bow: BowVector,
    pub source_docs: usize,
    /// Lowercased reference tokens for ROUGE.
    pub reference: Vec<String>,
}

impl Example {
    pub fn new(cluster: &DocumentCluster, vocab: &Vocabulary, config: &TrainConfig) -> Self {
        Self {
            id: cluster.id.clone(),
            input: corpus::cluster_input(cluster, config.max_doc_len, config.max_docs),
            bow: to_bow(cluster, vocab),
            source_docs: cluster.source_docs,
            reference: corpus::tokenize(&cluster.raw_summary),
        }
    }
}

pub fn prepare_examples(clusters: &[DocumentCluster], vocab: &Vocabulary, config: &TrainConfig) -> Vec<Example> {
    clusters.iter().map(|c| Example::new(c, vocab, config)).collect()
}

/// The full summarizer: topic model, shared document encoder, graph
/// encoder layers and topic-aware decoder.
#[derive(Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub ntm: TopicModel,
    pub encoder: DocumentEncoder,
    pub dge: Vec<DgeLayer>,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let d = config.dim;
        let ntm = TopicModel::new(&mut store, vocab.bow_len(), config.topics, config.ntm_hidden, d)?;
        let embed = store.normal("embed.tokens", &[vocab.seq_len(), d], 1.0 / (d as f64).sqrt())?;
        let encoder = DocumentEncoder::new(
            &mut store,
            embed.clone(),
            config.max_doc_len + 1,
            config.encoder_layers,
            config.heads,
        )?;
        let dge = (0..config.effective_layers())
            .map(|l| DgeLayer::new(&mut store, &format!("dge.layer{l}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = Decoder::new(&mut store, embed, config.max_decode_len.max(config.max_summary_len + 2), config.heads)?;
        decoder.bypass_topic_pointer = config.ablations.no_topic_pointer;
        Ok(Self {
            config,
            vocab,
            store,
            ntm,
            encoder,
            dge,
            decoder,
        })
    }

    /// Variables the optimizer updates.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store
            .iter()
            .filter(|(name, _)| !(self.config.ablations.fixed_topic_matrix && *name == "ntm.w_phi"))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn graph(&self, input: &ClusterInput) -> Result<HeteroGraph> {
        if self.config.ablations.no_topic_nodes {
            return build_graph_without_topics(input);
        }
        let mut graph = build_graph(input, self.config.topics)?;
        if self.config.topic_word_top_r > 0 {
            let phi = nn::to_rows(self.ntm.w_phi.as_tensor())?;
            let bow_ids: Vec<Option<u32>> = graph
                .word_nodes
                .iter()
                .map(|w| self.vocab.seq.token(w.token).and_then(|t| self.vocab.bow.id(t)))
                .collect();
            let index: std::collections::HashMap<(usize, usize), usize> = graph
                .word_nodes
                .iter()
                .enumerate()
                .map(|(i, w)| ((w.doc, w.position), i))
                .collect();
            graph.prune_topic_words(self.config.topic_word_top_r, |k, w| {
                match bow_ids[index[&(w.doc, w.position)]] {
                    Some(b) => phi[b as usize][k],
                    None => f64::NEG_INFINITY,
                }
            });
        }
        Ok(graph)
    }

    /// Document encoder, graph construction and graph encoder for one
    /// cluster.
    pub fn encode(&self, input: &ClusterInput, ctx: &Ctx) -> Result<EncodedCluster> {
        let (h_w, h_d) = self.encoder.encode_documents(input, ctx)?;
        let topic_emb = self.ntm.topic_embeddings()?;
        let graph = self.graph(input)?;
        let h_t_init = if graph.topics == 0 {
            Tensor::zeros((0, self.config.dim), nn::DTYPE, &nn::device())?
        } else {
            topic_emb.clone()
        };
        let feats = init_node_features(&graph, &h_w, &h_d, &h_t_init)?;
        let refined = dge_stack(&graph, &feats, &self.dge, ctx)?;
        let h_t = if graph.topics == 0 { topic_emb } else { refined.topics };
        Ok(EncodedCluster::new(refined.words, h_t, input.word_tokens()))
    }

    /// Topic posteriors for a batch; noise is drawn from `ctx` in train mode.
    pub fn posterior(&self, bows: &[&BowVector], ctx: &Ctx) -> Result<TopicPosterior> {
        let features = ntm::bow_features(bows)?;
        let noise = match ctx.gaussian_noise(bows.len() * self.config.topics) {
            Some(n) => Some(Tensor::from_vec(n, (bows.len(), self.config.topics), &nn::device())?),
            None => None,
        };
        self.ntm.posterior(&features, noise.as_ref())
    }

    /// Longest output the decoder's position table allows.
    pub fn max_output_len(&self) -> usize {
        self.decoder.max_len - 1
    }

    /// Beam search; `max_len` is capped at [`Model::max_output_len`].
    pub fn summarize_ids(&self, input: &ClusterInput, beam: usize, max_len: usize) -> Result<Hypothesis> {
        let max_len = max_len.min(self.max_output_len());
        let encoded = self.encode(input, &Ctx::eval())?;
        let scorer = BoundDecoder {
            decoder: &self.decoder,
            encoded: &encoded,
        };
        beam_search(&scorer, beam, max_len, self.config.length_penalty)
    }

    pub fn greedy_ids(&self, input: &ClusterInput, max_len: usize) -> Result<Hypothesis> {
        let max_len = max_len.min(self.max_output_len());
        let encoded = self.encode(input, &Ctx::eval())?;
        greedy_decode(
            &BoundDecoder {
                decoder: &self.decoder,
                encoded: &encoded,
            },
            max_len,
        )
    }

    pub fn summarize(&self, input: &ClusterInput, beam: usize, max_len: usize) -> Result<Vec<String>> {
        let hyp = self.summarize_ids(input, beam, max_len)?;
        Ok(self.vocab.decode(hyp.body()))
    }

    /// Fraction of gold tokens that are the argmax of their teacher-forced
    /// step distribution.
    pub fn token_accuracy(&self, examples: &[Example]) -> Result<f64> {
        let ctx = Ctx::eval();
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in examples {
            let enc = self.encode(&ex.input, &ctx)?;
            let steps = self.decoder.teacher_forced_pass(&ex.input.summary, &enc, &ctx)?;
            let pred = steps.p.argmax(1)?.to_vec1::<u32>()?;
            for (p, &g) in pred.iter().zip(&ex.input.summary[1..]) {
                hit += usize::from(*p == g);
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(hit as f64 / total as f64)
    }

    /// Deep copies of all parameter values, in store order.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.store
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.store.len() {
            return Err(Error::Shape("snapshot does not match parameter store".into()));
        }
        for ((_, v), t) in self.store.iter().zip(snapshot) {
            v.set(t)?;
        }
        Ok(())
    }
}
