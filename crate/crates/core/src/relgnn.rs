//! Relation-side encoder.
//!
//! Message passing over the merged relation graph. Each edge type owns a
//! learned prototype vector that is added to the source feature before
//! attention and aggregation; attention is an independent sigmoid gate per
//! edge, not normalized over the neighborhood.
//!
//! Features are batched as [B, R, d]: one relation-feature sheet per query in
//! the batch, since layer 0 depends on which relations sit around the query.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::relgraph::{MergedRelationGraph, NUM_EDGE_TYPES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RelGnnLayerParams {
    /// [d, d], applied as x @ w.
    pub w_rel: Tensor,
    /// [d, d], applied to the aggregated messages.
    pub w_msg: Tensor,
    /// [2d]; first half scores the prototype-shifted source, second half the
    /// destination.
    pub w_alpha: Tensor,
}

#[derive(Clone, Debug)]
pub struct RelGnnParams {
    /// [NUM_EDGE_TYPES, d].
    pub prototypes: Tensor,
    pub layers: Vec<RelGnnLayerParams>,
    pub leaky_slope: f64,
}

impl RelGnnParams {
    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn groups(&self) -> Vec<(String, &Tensor)> {
        let mut g = vec![("relgnn.prototypes".to_string(), &self.prototypes)];
        for (i, l) in self.layers.iter().enumerate() {
            g.push((format!("relgnn.l{}.w_rel", i), &l.w_rel));
            g.push((format!("relgnn.l{}.w_msg", i), &l.w_msg));
            g.push((format!("relgnn.l{}.w_alpha", i), &l.w_alpha));
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut g = vec![("relgnn.prototypes".to_string(), &mut self.prototypes)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            g.push((format!("relgnn.l{}.w_rel", i), &mut l.w_rel));
            g.push((format!("relgnn.l{}.w_msg", i), &mut l.w_msg));
            g.push((format!("relgnn.l{}.w_alpha", i), &mut l.w_alpha));
        }
        g
    }
}

pub struct RelGnnLayerVars {
    pub w_rel: Var,
    pub w_msg: Var,
    pub w_alpha: Var,
}

pub struct RelGnnVars {
    pub prototypes: Var,
    pub layers: Vec<RelGnnLayerVars>,
    pub leaky_slope: f64,
}

impl RelGnnVars {
    /// Puts the parameters on the tape. `reg` receives one Var per parameter
    /// group in the same order as `RelGnnParams::groups`.
    pub fn lift(tape: &mut Tape, p: &RelGnnParams, trainable: bool, reg: &mut Vec<Var>) -> Self {
        let prototypes = tape.leaf(p.prototypes.clone(), trainable);
        reg.push(prototypes);
        let layers = p
            .layers
            .iter()
            .map(|l| {
                let w_rel = tape.leaf(l.w_rel.clone(), trainable);
                let w_msg = tape.leaf(l.w_msg.clone(), trainable);
                let w_alpha = tape.leaf(l.w_alpha.clone(), trainable);
                reg.extend([w_rel, w_msg, w_alpha]);
                RelGnnLayerVars { w_rel, w_msg, w_alpha }
            })
            .collect();
        RelGnnVars {
            prototypes,
            layers,
            leaky_slope: p.leaky_slope,
        }
    }
}

/// Incoming-edge CSR over relation nodes. Segments are keyed by destination;
/// within a segment edges are ordered by (type, cross-block flag, source id
/// local to its block), which is stable under swapping the two graphs.
#[derive(Clone, Debug)]
pub struct RelCsr {
    pub num_nodes: usize,
    pub offsets: Rc<Vec<usize>>,
    pub src: Rc<Vec<usize>>,
    pub typ: Rc<Vec<usize>>,
}

impl RelCsr {
    pub fn build(graph: &MergedRelationGraph) -> Self {
        let mut edges: Vec<(u32, u32, usize)> = graph
            .edges()
            .iter()
            .map(|&(s, d, t)| (s, d, t.index()))
            .collect();
        edges.sort_by_key(|&(s, d, t)| {
            (
                d,
                t,
                graph.block_of(s) != graph.block_of(d),
                graph.local_id(s),
            )
        });
        Self::from_sorted(graph.num_rel_nodes(), &edges)
    }

    /// Plain constructor for hand-built graphs; sorts by (dst, type, src).
    pub fn from_edges(num_nodes: usize, edges: &[(u32, u32, usize)]) -> Self {
        let mut edges = edges.to_vec();
        edges.sort_by_key(|&(s, d, t)| (d, t, s));
        Self::from_sorted(num_nodes, &edges)
    }

    fn from_sorted(num_nodes: usize, edges: &[(u32, u32, usize)]) -> Self {
        let mut offsets = vec![0usize; num_nodes + 1];
        for &(_, d, _) in edges {
            offsets[d as usize + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let src: Vec<usize> = edges.iter().map(|&(s, _, _)| s as usize).collect();
        let typ: Vec<usize> = edges.iter().map(|&(_, _, t)| t).collect();
        RelCsr {
            num_nodes,
            offsets: Rc::new(offsets),
            src: Rc::new(src),
            typ: Rc::new(typ),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Layer-0 features for one query: rows of active relation nodes are all-ones,
/// the rest zero.
pub fn init_relation_features(num_rel_nodes: usize, active: &[u32], d: usize) -> Tensor {
    init_relation_features_batch(num_rel_nodes, &[active], d)
}

/// Stacked layer-0 features, [B, R, d].
pub fn init_relation_features_batch(
    num_rel_nodes: usize,
    actives: &[&[u32]],
    d: usize,
) -> Tensor {
    let b = actives.len();
    let mut t = Tensor::zeros(&[b, num_rel_nodes, d]);
    let data = t.data_mut();
    for (bi, active) in actives.iter().enumerate() {
        for &r in active.iter() {
            let base = (bi * num_rel_nodes + r as usize) * d;
            data[base..base + d].fill(1.0);
        }
    }
    t
}

/// Runs all layers; `init` is [B, R, d], the result has the same shape.
pub fn relgnn_forward(tape: &mut Tape, vars: &RelGnnVars, csr: &RelCsr, init: Var) -> Result<Var> {
    let shape = tape.val(init).shape().to_vec();
    assert_eq!(shape.len(), 3, "relation features must be [batch, nodes, d]");
    assert_eq!(shape[1], csr.num_nodes, "feature rows vs relation nodes");
    assert_eq!(
        tape.val(vars.prototypes).shape(),
        &[NUM_EDGE_TYPES, shape[2]],
        "prototype sheet shape"
    );

    let proto_per_edge = tape.gather_rows(vars.prototypes, Rc::clone(&csr.typ));
    let mut r = init;
    for (li, layer) in vars.layers.iter().enumerate() {
        let d = shape[2];
        let w1 = tape.slice_rows(layer.w_alpha, 0, d);
        let w2 = tape.slice_rows(layer.w_alpha, d, d);

        let s_src = tape.matvec(r, w1);
        let s_dst = tape.matvec(r, w2);
        let s_proto = tape.matvec(vars.prototypes, w1);
        let e_src = tape.gather_rows_b(s_src, Rc::clone(&csr.src));
        let e_dst = gather_cols_by_dst(tape, s_dst, csr);
        let e_proto = tape.gather_rows(s_proto, Rc::clone(&csr.typ));
        let node_part = tape.add(e_src, e_dst);
        let logits = tape.add_bcast0(node_part, e_proto);
        let alpha = tape.sigmoid(logits);

        let src_feats = tape.gather_rows_b(r, Rc::clone(&csr.src));
        let msg = tape.add_bcast0(src_feats, proto_per_edge);
        let weighted = tape.mul_bcast_last(msg, alpha);
        let agg = tape.segment_sum_b(weighted, Rc::clone(&csr.offsets));

        let self_part = tape.matmul(r, layer.w_rel);
        let msg_part = tape.matmul(agg, layer.w_msg);
        let pre = tape.add(self_part, msg_part);
        r = tape.leaky_relu(pre, vars.leaky_slope);

        if !tape.val(r).is_finite() {
            return Err(Error::NonFinite {
                module: "relgnn",
                layer: li,
                detail: "non-finite relation features".into(),
            });
        }
    }
    Ok(r)
}

/// Per-edge destination scores: expands [B, R] node scores to [B, E] where
/// edge e belongs to the segment of its destination.
fn gather_cols_by_dst(tape: &mut Tape, node_scores: Var, csr: &RelCsr) -> Var {
    // dst index of each edge is implied by the offsets; materialize once.
    let mut dst = Vec::with_capacity(csr.num_edges());
    for n in 0..csr.num_nodes {
        for _ in csr.offsets[n]..csr.offsets[n + 1] {
            dst.push(n);
        }
    }
    tape.gather_rows_b(node_scores, Rc::new(dst))
}
