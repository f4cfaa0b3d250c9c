//! Document graph encoder: node-type aware graph attention layers.
//!
//! Per layer and node `i`:
//!
//! ```text
//! u~_i   = W1 ReLU(W2 u_i + b1) + b2
//! z_ij   = LeakyReLU(a_m . [f_t(u~_i); f_t(u~_j)])      j in N(i), self included
//! alpha  = softmax_j(z_ij)
//! agg_i  = ||_m sum_j tanh(alpha^m_ij W4_m u~_j)
//! u'_i   = LayerNorm(u_i + Dropout(agg_i))
//! ```

use std::io::Write;

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeFeatures, NodeType};
use crate::nn::{self, Ctx, LayerNorm, Linear, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct DgeLayer {
    pub heads: usize,
    pub dim: usize,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Word, topic and document projections into the attention space.
    pub type_proj: [Linear; 3],
    /// `[heads, d_t]` halves of the per-head attention vectors.
    pub attn_src: Var,
    pub attn_dst: Var,
    /// Stacked per-head value maps, `d -> heads * (d / heads)`.
    pub values: Linear,
    pub norm: LayerNorm,
}

fn type_slot(t: NodeType) -> usize {
    match t {
        NodeType::Word => 0,
        NodeType::Topic => 1,
        NodeType::Document => 2,
    }
}

impl DgeLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide node width {dim}"
            )));
        }
        let proj = |store: &mut ParamStore, t: &str| Linear::new(store, &format!("{name}.f_t.{t}"), dim, dim);
        let type_proj = [proj(store, "word")?, proj(store, "topic")?, proj(store, "doc")?];
        let attn_std = (1.0 / dim as f64).sqrt();
        Ok(Self {
            heads,
            dim,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, 2 * dim)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 2 * dim, dim)?,
            type_proj,
            attn_src: store.normal(format!("{name}.attn_src"), &[heads, dim], attn_std)?,
            attn_dst: store.normal(format!("{name}.attn_dst"), &[heads, dim], attn_std)?,
            values: Linear::no_bias(store, &format!("{name}.w4"), dim, dim)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    fn project_types(&self, graph: &HeteroGraph, u: &Tensor) -> Result<Tensor> {
        let spans = [
            (NodeType::Word, 0, graph.n_words()),
            (NodeType::Topic, graph.n_words(), graph.topics),
            (NodeType::Document, graph.n_words() + graph.topics, graph.docs),
        ];
        let parts = spans
            .iter()
            .filter(|(_, _, len)| *len > 0)
            .map(|&(t, start, len)| self.type_proj[type_slot(t)].forward(&u.narrow(0, start, len)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Layer output and attention weights `[heads, n, n]` (zero off the
    /// neighborhood).
    pub fn forward_with_attention(
        &self,
        graph: &HeteroGraph,
        feats: &NodeFeatures,
        ctx: &Ctx,
    ) -> Result<(NodeFeatures, Tensor)> {
        if feats.dim() != self.dim {
            return Err(Error::Shape(format!(
                "node width {} does not match layer width {}",
                feats.dim(),
                self.dim
            )));
        }
        let x = feats.stacked()?;
        let n = x.dims()[0];
        if n != graph.n_nodes() {
            return Err(Error::Shape(format!(
                "{n} feature rows for a graph of {} nodes",
                graph.n_nodes()
            )));
        }
        let u = self.ffn_out.forward(&self.ffn_in.forward(&x)?.relu()?)?;
        let p = self.project_types(graph, &u)?;
        let src = p.matmul(&self.attn_src.as_tensor().t()?)?.t()?.unsqueeze(2)?;
        let dst = p.matmul(&self.attn_dst.as_tensor().t()?)?.t()?.unsqueeze(1)?;
        let logits = nn::leaky_relu(&src.broadcast_add(&dst)?, LEAKY_SLOPE)?;
        let alpha = nn::softmax(&logits.broadcast_add(&graph.attention_mask()?)?)?;

        let head_dim = self.dim / self.heads;
        let v = self
            .values
            .forward(&u)?
            .reshape((n, self.heads, head_dim))?
            .transpose(0, 1)?
            .contiguous()?;
        let agg = alpha
            .unsqueeze(3)?
            .broadcast_mul(&v.unsqueeze(1)?)?
            .tanh()?
            .sum(2)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((n, self.dim))?;
        let out = self.norm.forward(&(x + ctx.dropout(&agg)?)?)?;
        Ok((NodeFeatures::from_stacked(graph, &out)?, alpha))
    }

    pub fn forward(&self, graph: &HeteroGraph, feats: &NodeFeatures, ctx: &Ctx) -> Result<NodeFeatures> {
        Ok(self.forward_with_attention(graph, feats, ctx)?.0)
    }
}

pub fn dge_stack(
    graph: &HeteroGraph,
    feats: &NodeFeatures,
    layers: &[DgeLayer],
    ctx: &Ctx,
) -> Result<NodeFeatures> {
    layers
        .iter()
        .try_fold(feats.clone(), |f, layer| layer.forward(graph, &f, ctx))
}

/// Writes `layer<TAB>head<TAB>type:i<TAB>type:j<TAB>alpha` for every edge
/// (self-loops included).
pub fn write_attention_dump(
    mut out: impl Write,
    graph: &HeteroGraph,
    feats: &NodeFeatures,
    layers: &[DgeLayer],
    ctx: &Ctx,
) -> Result<()> {
    let mut f = feats.clone();
    for (l, layer) in layers.iter().enumerate() {
        let (next, alpha) = layer.forward_with_attention(graph, &f, ctx)?;
        let alpha = alpha.to_vec3::<f64>()?;
        for (h, rows) in alpha.iter().enumerate() {
            for i in 0..graph.n_nodes() {
                let (ti, ii) = graph.describe(i);
                for &j in graph.neighbors(i) {
                    let (tj, ij) = graph.describe(j);
                    writeln!(
                        out,
                        "{l}\t{h}\t{}:{ii}\t{}:{ij}\t{:.6}",
                        ti.tag(),
                        tj.tag(),
                        rows[i][j]
                    )?;
                }
            }
        }
        f = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClusterInput, DOC};
    use crate::graph::build_graph;
    use crate::nn::{to_rows, DTYPE};

    fn setup(lens: &[usize], k: usize, d: usize) -> (HeteroGraph, NodeFeatures, ParamStore) {
        let input = ClusterInput {
            docs: lens
                .iter()
                .map(|&l| std::iter::once(DOC).chain(5..5 + l as u32).collect())
                .collect(),
            summary: vec![],
        };
        let g = build_graph(&input, k).unwrap();
        let mut store = ParamStore::new(11);
        let f = store.normal("x", &[g.n_nodes(), d], 1.0).unwrap();
        let feats = NodeFeatures::from_stacked(&g, f.as_tensor()).unwrap();
        (g, feats, store)
    }

    #[test]
    fn attention_rows_are_distributions_over_neighbors() {
        let (g, feats, mut store) = setup(&[3, 2], 2, 8);
        let layer = DgeLayer::new(&mut store, "l0", 8, 2).unwrap();
        let (_, alpha) = layer.forward_with_attention(&g, &feats, &Ctx::eval()).unwrap();
        for head in alpha.to_vec3::<f64>().unwrap() {
            for (i, row) in head.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &a) in row.iter().enumerate() {
                    assert!(a >= 0.0);
                    if !g.has_edge(i, j) {
                        assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_neighbors_split_evenly() {
        // Word node of a 1-token, 1-topic graph: self-loop + topic. Identical
        // projected features make both logits equal.
        let (g, _, mut store) = setup(&[1], 1, 4);
        let layer = DgeLayer::new(&mut store, "l0", 4, 1).unwrap();
        let word_w = layer.type_proj[0].weight.as_tensor().clone();
        layer.type_proj[1].weight.set(&word_w).unwrap();
        let row = Tensor::new(&[[0.3f64, -0.2, 0.5, 0.1]], &nn::device()).unwrap();
        let x = Tensor::cat(&[&row, &row, &row], 0).unwrap();
        let feats = NodeFeatures::from_stacked(&g, &x).unwrap();
        let (_, alpha) = layer.forward_with_attention(&g, &feats, &Ctx::eval()).unwrap();
        let a = alpha.to_vec3::<f64>().unwrap();
        assert!((a[0][0][0] - 0.5).abs() < 1e-12);
        assert!((a[0][0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_value_map_leaves_layer_norm_of_input() {
        let (g, feats, mut store) = setup(&[2], 2, 6);
        let layer = DgeLayer::new(&mut store, "l0", 6, 3).unwrap();
        layer
            .values
            .weight
            .set(&layer.values.weight.zeros_like().unwrap())
            .unwrap();
        let out = layer.forward(&g, &feats, &Ctx::eval()).unwrap();
        let expect = layer.norm.forward(&feats.stacked().unwrap()).unwrap();
        assert_eq!(
            to_rows(&out.stacked().unwrap()).unwrap(),
            to_rows(&expect).unwrap()
        );
    }

    #[test]
    fn empty_stack_is_identity_and_width_checked() {
        let (g, feats, mut store) = setup(&[2], 2, 6);
        let out = dge_stack(&g, &feats, &[], &Ctx::eval()).unwrap();
        assert_eq!(
            to_rows(&out.stacked().unwrap()).unwrap(),
            to_rows(&feats.stacked().unwrap()).unwrap()
        );
        let wide = DgeLayer::new(&mut store, "w", 8, 2).unwrap();
        assert!(matches!(wide.forward(&g, &feats, &Ctx::eval()), Err(Error::Shape(_))));
        assert!(DgeLayer::new(&mut store, "bad", 6, 4).is_err());
    }

    #[test]
    fn eval_mode_is_bit_identical() {
        let (g, feats, mut store) = setup(&[3, 1], 3, 8);
        let layers: Vec<_> = (0..2)
            .map(|l| DgeLayer::new(&mut store, &format!("l{l}"), 8, 2).unwrap())
            .collect();
        let a = dge_stack(&g, &feats, &layers, &Ctx::eval()).unwrap();
        let b = dge_stack(&g, &feats, &layers, &Ctx::eval()).unwrap();
        assert_eq!(
            to_rows(&a.stacked().unwrap()).unwrap(),
            to_rows(&b.stacked().unwrap()).unwrap()
        );
        assert_eq!(a.stacked().unwrap().dtype(), DTYPE);
    }

    #[test]
    fn attention_dump_lists_every_edge() {
        let (g, feats, mut store) = setup(&[1], 1, 4);
        let layer = DgeLayer::new(&mut store, "l0", 4, 2).unwrap();
        let mut buf = Vec::new();
        write_attention_dump(&mut buf, &g, &feats, &[layer], &Ctx::eval()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let total_degree: usize = (0..g.n_nodes()).map(|i| g.degree(i)).sum();
        assert_eq!(text.lines().count(), 2 * total_degree);
        assert!(text.starts_with("0\t0\tword:0\tword:0\t"));
    }
}
