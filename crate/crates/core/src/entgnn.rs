//! Entity-side encoder, conditioned on a query.
//!
//! Layer 0 is an indicator: anchor entities near the query (and their
//! counterparts in the other graph) start at all-ones, everything else at
//! zero. Layers then propagate over each graph separately with shared
//! weights, mixing in the final relation features on every edge. Attention is
//! softmax-normalized per destination, unlike the relation side.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, GraphTag, KnowledgeGraph, Query, SeedAlignment};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EntGnnLayerParams {
    /// [d, d], applied to the aggregated messages.
    pub w_ent: Tensor,
    /// [d, d], entity half of the attention bilinear form.
    pub w_s: Tensor,
    /// [d, d], relation half.
    pub w_r: Tensor,
    /// [2d], attention vector over the two halves.
    pub attn: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct EntGnnParams {
    pub layers: Vec<EntGnnLayerParams>,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl EntGnnParams {
    pub fn dim(&self) -> usize {
        self.layers[0].ln_gain.shape()[0]
    }

    pub fn groups(&self) -> Vec<(String, &Tensor)> {
        let mut g = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            g.push((format!("entgnn.l{}.w_ent", i), &l.w_ent));
            g.push((format!("entgnn.l{}.w_s", i), &l.w_s));
            g.push((format!("entgnn.l{}.w_r", i), &l.w_r));
            g.push((format!("entgnn.l{}.attn", i), &l.attn));
            g.push((format!("entgnn.l{}.ln_gain", i), &l.ln_gain));
            g.push((format!("entgnn.l{}.ln_bias", i), &l.ln_bias));
        }
        g
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut g = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            g.push((format!("entgnn.l{}.w_ent", i), &mut l.w_ent));
            g.push((format!("entgnn.l{}.w_s", i), &mut l.w_s));
            g.push((format!("entgnn.l{}.w_r", i), &mut l.w_r));
            g.push((format!("entgnn.l{}.attn", i), &mut l.attn));
            g.push((format!("entgnn.l{}.ln_gain", i), &mut l.ln_gain));
            g.push((format!("entgnn.l{}.ln_bias", i), &mut l.ln_bias));
        }
        g
    }
}

pub struct EntGnnLayerVars {
    pub w_ent: Var,
    pub w_s: Var,
    pub w_r: Var,
    pub attn: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

pub struct EntGnnVars {
    pub layers: Vec<EntGnnLayerVars>,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl EntGnnVars {
    pub fn lift(tape: &mut Tape, p: &EntGnnParams, trainable: bool, reg: &mut Vec<Var>) -> Self {
        let layers = p
            .layers
            .iter()
            .map(|l| {
                let w_ent = tape.leaf(l.w_ent.clone(), trainable);
                let w_s = tape.leaf(l.w_s.clone(), trainable);
                let w_r = tape.leaf(l.w_r.clone(), trainable);
                let attn = tape.leaf(l.attn.clone(), trainable);
                let ln_gain = tape.leaf(l.ln_gain.clone(), trainable);
                let ln_bias = tape.leaf(l.ln_bias.clone(), trainable);
                reg.extend([w_ent, w_s, w_r, attn, ln_gain, ln_bias]);
                EntGnnLayerVars {
                    w_ent,
                    w_s,
                    w_r,
                    attn,
                    ln_gain,
                    ln_bias,
                }
            })
            .collect();
        EntGnnVars {
            layers,
            leaky_slope: p.leaky_slope,
            ln_eps: p.ln_eps,
        }
    }
}

/// Incoming-edge CSR over entities. Relation ids are merged relation-graph
/// node ids, so the same relation-feature sheet serves both graphs.
#[derive(Clone, Debug)]
pub struct EntCsr {
    pub num_entities: usize,
    pub offsets: Rc<Vec<usize>>,
    pub src: Rc<Vec<usize>>,
    pub rel: Rc<Vec<usize>>,
}

impl EntCsr {
    pub fn build(graph: &KnowledgeGraph, rel_offset: u32) -> Self {
        let edges: Vec<(u32, u32, u32)> = graph
            .triples()
            .iter()
            .map(|t| (t.head, rel_offset + t.rel, t.tail))
            .collect();
        Self::from_edges(graph.num_entities(), &edges)
    }

    /// Edges as (src, rel_node, dst).
    pub fn from_edges(num_entities: usize, edges: &[(u32, u32, u32)]) -> Self {
        let mut edges = edges.to_vec();
        edges.sort_by_key(|&(s, r, d)| (d, s, r));
        let mut offsets = vec![0usize; num_entities + 1];
        for &(_, _, d) in &edges {
            offsets[d as usize + 1] += 1;
        }
        for i in 0..num_entities {
            offsets[i + 1] += offsets[i];
        }
        EntCsr {
            num_entities,
            offsets: Rc::new(offsets),
            src: Rc::new(edges.iter().map(|&(s, _, _)| s as usize).collect()),
            rel: Rc::new(edges.iter().map(|&(_, r, _)| r as usize).collect()),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

/// Which entities light up at layer 0 for a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorActivation {
    pub query: Query,
    /// Hop radius that produced the activation; larger than requested when
    /// the fallback expansion kicked in.
    pub k_used: usize,
    /// No anchor reachable even at the expansion cap.
    pub degenerate: bool,
    pub active_g1: Vec<u32>,
    pub active_g2: Vec<u32>,
}

/// Finds train-seed anchors within k hops of the query on its own graph and
/// mirrors them to their counterparts. When none are reachable, k grows one
/// hop at a time up to `expand_cap`.
pub fn activate_anchors(
    task: &AlignmentTask,
    seeds: &SeedAlignment,
    query: Query,
    k: usize,
    expand_cap: usize,
) -> Result<AnchorActivation> {
    let (tag, e) = query;
    let graph = task.graph(tag);
    let own_to_other: HashMap<u32, u32> = seeds
        .pairs
        .iter()
        .map(|&(a, b)| match tag {
            GraphTag::G1 => (a, b),
            GraphTag::G2 => (b, a),
        })
        .collect();

    let limit = k.max(expand_cap);
    let mut kk = k;
    loop {
        let hood = graph.khop_entities(e, kk)?;
        let own: Vec<u32> = hood
            .iter()
            .copied()
            .filter(|x| own_to_other.contains_key(x))
            .collect();
        if !own.is_empty() {
            let mut other: Vec<u32> = own.iter().map(|x| own_to_other[x]).collect();
            other.sort_unstable();
            let (active_g1, active_g2) = match tag {
                GraphTag::G1 => (own, other),
                GraphTag::G2 => (other, own),
            };
            return Ok(AnchorActivation {
                query,
                k_used: kk,
                degenerate: false,
                active_g1,
                active_g2,
            });
        }
        if kk >= limit {
            return Ok(AnchorActivation {
                query,
                k_used: kk,
                degenerate: true,
                active_g1: Vec::new(),
                active_g2: Vec::new(),
            });
        }
        kk += 1;
    }
}

/// Layer-0 entity features for a batch of activations: [B, N1, d], [B, N2, d].
pub fn init_entity_features_batch(
    n1: usize,
    n2: usize,
    activations: &[&AnchorActivation],
    d: usize,
) -> (Tensor, Tensor) {
    let b = activations.len();
    let mut t1 = Tensor::zeros(&[b, n1, d]);
    let mut t2 = Tensor::zeros(&[b, n2, d]);
    for (bi, act) in activations.iter().enumerate() {
        for &e in &act.active_g1 {
            let base = (bi * n1 + e as usize) * d;
            t1.data_mut()[base..base + d].fill(1.0);
        }
        for &e in &act.active_g2 {
            let base = (bi * n2 + e as usize) * d;
            t2.data_mut()[base..base + d].fill(1.0);
        }
    }
    (t1, t2)
}

/// Final embeddings of one query, rows per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddings {
    pub h1: Tensor,
    pub h2: Tensor,
}

/// Per-layer attention weights and hidden states, for inspection in tests.
/// Push order: for each layer, one entry per graph in input order.
#[derive(Default)]
pub struct EntDiag {
    pub betas: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
}

/// Runs all layers over one or more graphs that share parameters and the
/// relation-feature sheet. Each entry of `graphs` pairs a CSR with its
/// [B, N, d] layer-0 features; `rel_feats` is [B, R, d].
pub fn entgnn_forward_batched(
    tape: &mut Tape,
    vars: &EntGnnVars,
    graphs: &[(&EntCsr, Var)],
    rel_feats: Var,
    mut diag: Option<&mut EntDiag>,
) -> Result<Vec<Var>> {
    let d = tape.val(rel_feats).shape()[2];
    let mut hs: Vec<Var> = graphs.iter().map(|&(_, init)| init).collect();
    // Relation features per edge are layer-independent.
    let rel_edge_feats: Vec<Var> = graphs
        .iter()
        .map(|(csr, _)| tape.gather_rows_b(rel_feats, Rc::clone(&csr.rel)))
        .collect();

    for (li, layer) in vars.layers.iter().enumerate() {
        let a1 = tape.slice_rows(layer.attn, 0, d);
        let a2 = tape.slice_rows(layer.attn, d, d);
        let q_s = tape.matvec(layer.w_s, a1);
        let q_r = tape.matvec(layer.w_r, a2);

        for (gi, (csr, _)) in graphs.iter().enumerate() {
            let h = hs[gi];
            let node_sc = tape.matvec(h, q_s);
            let src_sc = tape.gather_rows_b(node_sc, Rc::clone(&csr.src));
            let rel_sc = tape.matvec(rel_edge_feats[gi], q_r);
            let pre_logits = tape.add(src_sc, rel_sc);
            let logits = tape.leaky_relu(pre_logits, vars.leaky_slope);
            let beta = tape.segment_softmax_b(logits, Rc::clone(&csr.offsets));

            let src_feats = tape.gather_rows_b(h, Rc::clone(&csr.src));
            let msgs = tape.add(src_feats, rel_edge_feats[gi]);
            let weighted = tape.mul_bcast_last(msgs, beta);
            let agg = tape.segment_sum_b(weighted, Rc::clone(&csr.offsets));

            let lin = tape.matmul(agg, layer.w_ent);
            let upd = tape.leaky_relu(lin, vars.leaky_slope);
            let res = tape.add(h, upd);
            let new_h = tape.layer_norm(res, layer.ln_gain, layer.ln_bias, vars.ln_eps);

            if !tape.val(new_h).is_finite() {
                return Err(Error::NonFinite {
                    module: "entgnn",
                    layer: li,
                    detail: format!("non-finite entity features in graph {}", gi),
                });
            }
            if let Some(ref mut dg) = diag {
                dg.betas.push(tape.val(beta).clone());
                dg.hidden.push(tape.val(new_h).clone());
            }
            hs[gi] = new_h;
        }
    }
    Ok(hs)
}
