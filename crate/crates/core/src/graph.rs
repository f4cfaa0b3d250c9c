//! Heterogeneous word/topic/document graph and its initial node features.
//!
//! Nodes are laid out as `[words (M) | topics (K) | documents (N)]`. Edges
//! connect documents with topics and topics with words (both complete
//! bipartite), and every node carries a self-loop.

use std::io::Write;

use candle_core::{Tensor, Var};

use crate::corpus::ClusterInput;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeType {
    Word,
    Topic,
    Document,
}

impl NodeType {
    pub fn tag(self) -> &'static str {
        match self {
            NodeType::Word => "word",
            NodeType::Topic => "topic",
            NodeType::Document => "doc",
        }
    }
}

/// One token occurrence. `position` counts content tokens from 0 (the DOC
/// marker is not a word node).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordNode {
    pub doc: usize,
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroGraph {
    pub word_nodes: Vec<WordNode>,
    pub topics: usize,
    pub docs: usize,
    /// Neighbor lists in node order, self-loop included, sorted ascending.
    neighbors: Vec<Vec<usize>>,
}

impl HeteroGraph {
    pub fn n_words(&self) -> usize {
        self.word_nodes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_words() + self.topics + self.docs
    }

    pub fn word_index(&self, i: usize) -> usize {
        i
    }

    pub fn topic_index(&self, k: usize) -> usize {
        self.n_words() + k
    }

    pub fn doc_index(&self, n: usize) -> usize {
        self.n_words() + self.topics + n
    }

    pub fn node_type(&self, node: usize) -> NodeType {
        if node < self.n_words() {
            NodeType::Word
        } else if node < self.n_words() + self.topics {
            NodeType::Topic
        } else {
            NodeType::Document
        }
    }

    /// Type and within-type index of a node.
    pub fn describe(&self, node: usize) -> (NodeType, usize) {
        match self.node_type(node) {
            NodeType::Word => (NodeType::Word, node),
            NodeType::Topic => (NodeType::Topic, node - self.n_words()),
            NodeType::Document => (NodeType::Document, node - self.n_words() - self.topics),
        }
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Undirected edges `(a, b)` with `a < b`, self-loops excluded.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    pub fn edges_between(&self, a: NodeType, b: NodeType) -> Vec<(usize, usize)> {
        self.edges()
            .into_iter()
            .filter(|&(x, y)| {
                let (tx, ty) = (self.node_type(x), self.node_type(y));
                (tx == a && ty == b) || (tx == b && ty == a)
            })
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Dense keep-mask `[n, n]`, row-major.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.n_nodes();
        let mut keep = vec![false; n * n];
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                keep[i * n + j] = true;
            }
        }
        keep
    }

    /// Additive attention mask `[n, n]` (0 on edges, -inf elsewhere).
    pub fn attention_mask(&self) -> Result<Tensor> {
        let n = self.n_nodes();
        nn::additive_mask(&self.adjacency(), &[n, n])
    }

    /// Keeps, for every topic, only the `r` word nodes with the highest
    /// score. Self-loops keep every word connected.
    pub fn prune_topic_words(&mut self, r: usize, score: impl Fn(usize, &WordNode) -> f64) {
        let m = self.n_words();
        let mut keep = vec![vec![false; m]; self.topics];
        for (k, row) in keep.iter_mut().enumerate() {
            let mut order: Vec<usize> = (0..m).collect();
            let scores: Vec<f64> = self.word_nodes.iter().map(|w| score(k, w)).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for &w in order.iter().take(r) {
                row[w] = true;
            }
        }
        for k in 0..self.topics {
            let t = self.topic_index(k);
            self.neighbors[t].retain(|&j| j >= m || keep[k][j]);
        }
        for w in 0..m {
            let topics_start = m;
            self.neighbors[w]
                .retain(|&j| j < topics_start || j >= topics_start + self.topics || keep[j - topics_start][w]);
        }
    }

    /// Edge list dump, one `type:idx<TAB>type:idx` line per undirected edge.
    pub fn write_edge_list(&self, mut out: impl Write) -> Result<()> {
        for (a, b) in self.edges() {
            let (ta, ia) = self.describe(a);
            let (tb, ib) = self.describe(b);
            writeln!(out, "{}:{ia}\t{}:{ib}", ta.tag(), tb.tag())?;
        }
        Ok(())
    }
}

fn word_nodes(input: &ClusterInput) -> Vec<WordNode> {
    input
        .docs
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| {
            doc[1..].iter().enumerate().map(move |(p, &token)| WordNode {
                doc: d,
                position: p,
                token,
            })
        })
        .collect()
}

fn finish(word_nodes: Vec<WordNode>, topics: usize, docs: usize, adj: Vec<Vec<usize>>) -> HeteroGraph {
    let neighbors = adj
        .into_iter()
        .enumerate()
        .map(|(i, mut ns)| {
            ns.push(i);
            ns.sort_unstable();
            ns.dedup();
            ns
        })
        .collect();
    HeteroGraph {
        word_nodes,
        topics,
        docs,
        neighbors,
    }
}

/// Three-layer graph with complete document-topic and topic-word edges.
pub fn build_graph(input: &ClusterInput, topics: usize) -> Result<HeteroGraph> {
    if input.docs.is_empty() || input.n_words() == 0 {
        return Err(Error::EmptyCluster("no source tokens".into()));
    }
    if topics == 0 {
        return Err(Error::Config("graph needs at least one topic node".into()));
    }
    let words = word_nodes(input);
    let (m, k, n) = (words.len(), topics, input.docs.len());
    let mut adj = vec![Vec::new(); m + k + n];
    for t in m..m + k {
        for w in 0..m {
            adj[t].push(w);
            adj[w].push(t);
        }
        for d in m + k..m + k + n {
            adj[t].push(d);
            adj[d].push(t);
        }
    }
    Ok(finish(words, k, n, adj))
}

/// Two-layer variant used when topic nodes are ablated: every word is linked
/// to the document it occurs in.
pub fn build_graph_without_topics(input: &ClusterInput) -> Result<HeteroGraph> {
    if input.docs.is_empty() || input.n_words() == 0 {
        return Err(Error::EmptyCluster("no source tokens".into()));
    }
    let words = word_nodes(input);
    let (m, n) = (words.len(), input.docs.len());
    let mut adj = vec![Vec::new(); m + n];
    for (w, node) in words.iter().enumerate() {
        adj[w].push(m + node.doc);
        adj[m + node.doc].push(w);
    }
    Ok(finish(words, 0, n, adj))
}

#[derive(Debug, Clone)]
pub struct NodeFeatures {
    pub words: Tensor,
    pub topics: Tensor,
    pub docs: Tensor,
}

impl NodeFeatures {
    /// All node rows in graph order, `[n, d]`.
    pub fn stacked(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = [&self.words, &self.topics, &self.docs]
            .into_iter()
            .filter(|t| t.dims()[0] > 0)
            .collect();
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn from_stacked(graph: &HeteroGraph, x: &Tensor) -> Result<Self> {
        let (m, k, n) = (graph.n_words(), graph.topics, graph.docs);
        Ok(Self {
            words: x.narrow(0, 0, m)?,
            topics: x.narrow(0, m, k)?,
            docs: x.narrow(0, m + k, n)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.words.dims()[1]
    }
}

/// Copies encoder states into word/document slots and attaches topic
/// embeddings.
pub fn init_node_features(
    graph: &HeteroGraph,
    h_w: &Tensor,
    h_d: &Tensor,
    h_t: &Tensor,
) -> Result<NodeFeatures> {
    let (m, dw) = h_w.dims2()?;
    let (n, dd) = h_d.dims2()?;
    let (k, dt) = h_t.dims2()?;
    if m != graph.n_words() || n != graph.docs || k != graph.topics {
        return Err(Error::Shape(format!(
            "feature rows (words {m}, docs {n}, topics {k}) do not match graph ({}, {}, {})",
            graph.n_words(),
            graph.docs,
            graph.topics
        )));
    }
    if dw != dd || (k > 0 && dw != dt) {
        return Err(Error::Shape(format!(
            "feature widths differ: words {dw}, docs {dd}, topics {dt}"
        )));
    }
    Ok(NodeFeatures {
        words: h_w.clone(),
        topics: h_t.clone(),
        docs: h_d.clone(),
    })
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (a, _) = self.attn.forward(x, x, Some(mask))?;
        let x = self.norm1.forward(&(x + ctx.dropout(&a)?)?)?;
        let f = self.ff_out.forward(&self.ff_in.forward(&x)?.relu()?)?;
        self.norm2.forward(&(&x + ctx.dropout(&f)?)?)
    }
}

/// Shared self-attention encoder run on each document independently.
#[derive(Debug, Clone)]
pub struct DocumentEncoder {
    pub dim: usize,
    pub max_len: usize,
    tokens: Var,
    positions: Var,
    layers: Vec<EncoderLayer>,
}

impl DocumentEncoder {
    /// `tokens` is the embedding table shared with the decoder.
    pub fn new(
        store: &mut ParamStore,
        tokens: Var,
        max_len: usize,
        layers: usize,
        heads: usize,
    ) -> Result<Self> {
        let dim = tokens.dims()[1];
        let positions = store.normal("encoder.positions", &[max_len, dim], 0.1)?;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), dim, heads)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), dim)?,
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), dim, 2 * dim)?,
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), 2 * dim, dim)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dim,
            max_len,
            tokens,
            positions,
            layers,
        })
    }

    /// Encoder output for every (document, position) slot, `[N, L, d]`,
    /// where `L` is the longest document in the cluster.
    pub fn encode_all(&self, input: &ClusterInput, ctx: &Ctx) -> Result<Tensor> {
        let n = input.docs.len();
        let len = input.docs.iter().map(Vec::len).max().unwrap_or(0);
        if len > self.max_len {
            return Err(Error::Shape(format!(
                "document of {len} positions exceeds encoder limit {}",
                self.max_len
            )));
        }
        let mut ids = vec![0u32; n * len];
        let mut keep = vec![false; n * len];
        for (i, doc) in input.docs.iter().enumerate() {
            for (j, &t) in doc.iter().enumerate() {
                ids[i * len + j] = t;
                keep[i * len + j] = true;
            }
        }
        let ids = Tensor::from_vec(ids, n * len, &nn::device())?;
        let emb = self
            .tokens
            .as_tensor()
            .index_select(&ids, 0)?
            .reshape((n, len, self.dim))?;
        let pos = self.positions.as_tensor().narrow(0, 0, len)?;
        let mut x = ctx.dropout(&emb.broadcast_add(&pos)?)?;
        let mask = nn::additive_mask(&keep, &[n, 1, 1, len])?;
        for layer in &self.layers {
            x = layer.forward(&x, &mask, ctx)?;
        }
        Ok(x)
    }

    /// `(H_W, H_D)`: word rows in (document, position) order and the DOC
    /// slot of each document.
    pub fn encode_documents(&self, input: &ClusterInput, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let all = self.encode_all(input, ctx)?;
        let (n, len, d) = all.dims3()?;
        let flat = all.reshape((n * len, d))?;
        let word_rows: Vec<u32> = input
            .docs
            .iter()
            .enumerate()
            .flat_map(|(i, doc)| (1..doc.len()).map(move |j| (i * len + j) as u32))
            .collect();
        let doc_rows: Vec<u32> = (0..n).map(|i| (i * len) as u32).collect();
        let h_w = flat.index_select(&Tensor::new(word_rows, &nn::device())?, 0)?;
        let h_d = flat.index_select(&Tensor::new(doc_rows, &nn::device())?, 0)?;
        Ok((h_w, h_d))
    }
}
