//! Multi-head self-attention and the pre-norm transformer block, expressed
//! as graph builders over already-bound parameter nodes.

use super::graph::{Graph, NnError, NodeId};
use super::tensor::Element;

/// Node ids of one block's parameters, bound into a specific graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Standard multi-head self-attention: shared Q/K/V projections, per-head
/// scaled dot-product attention over column slices, concat, output
/// projection. No masking and no dropout.
pub fn multi_head_self_attention<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    heads: usize,
    n: &BlockNodes,
) -> Result<NodeId, NnError> {
    let d = g.value(x).dim2().1;
    if heads == 0 || d % heads != 0 {
        return Err(NnError::Invalid {
            op: "multi_head_self_attention",
            detail: format!("width {} not divisible by {} heads", d, heads),
        });
    }
    let dh = d / heads;
    let q = g.linear(x, n.wq, n.bq)?;
    let k = g.linear(x, n.wk, n.bk)?;
    let v = g.linear(x, n.wv, n.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(g.attn_head(qh, kh, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    g.linear(cat, n.wo, n.bo)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `y + MLP(LN(y))` with a GELU
/// between the two MLP projections.
pub fn transformer_block<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    heads: usize,
    n: &BlockNodes,
) -> Result<NodeId, NnError> {
    let ln1 = g.layer_norm(x, n.ln1_g, n.ln1_b)?;
    let att = multi_head_self_attention(g, ln1, heads, n)?;
    let x = g.add(x, att)?;
    let ln2 = g.layer_norm(x, n.ln2_g, n.ln2_b)?;
    let h = g.linear(ln2, n.w1, n.b1)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, n.w2, n.b2)?;
    g.add(x, h)
}
