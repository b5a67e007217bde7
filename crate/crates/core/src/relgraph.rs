//! Merged relation graph construction.
//!
//! Relations of both graphs become nodes. Two relations are connected when
//! they co-occur through a shared entity in a unified entity space (head/head,
//! head/tail, tail/head, tail/tail), and every relation is connected to its
//! inverse. Training seeds collapse entity pairs into single unified ids, so
//! seed anchors are what lets edges cross the two graphs.
//!
//! The ablation variant skips unification and instead bridges the graphs with
//! explicit sameAs triples over the seeds, giving sameAs (and its inverse) own
//! relation nodes.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::Result;
use crate::kg::{AlignmentTask, GraphTag, SeedAlignment};

pub const NUM_EDGE_TYPES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelEdgeType {
    /// Shared head entity.
    HH = 0,
    /// Head of src is tail of dst.
    HT = 1,
    /// Tail of src is head of dst.
    TH = 2,
    /// Shared tail entity.
    TT = 3,
    /// Relation and its inverse.
    Inv = 4,
}

impl RelEdgeType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelEdgeType::HH => "HH",
            RelEdgeType::HT => "HT",
            RelEdgeType::TH => "TH",
            RelEdgeType::TT => "TT",
            RelEdgeType::Inv => "INV",
        }
    }
}

/// Maps entities of both graphs into one id space where each train-seed pair
/// shares a single id. G1 entities keep their ids; unmatched G2 entities get
/// ids |E1|.. in ascending order of their G2 id.
#[derive(Clone, Debug)]
pub struct UnifiedEntitySpace {
    g1: Vec<u32>,
    g2: Vec<u32>,
    num_unified: usize,
}

impl UnifiedEntitySpace {
    pub fn unified(&self, tag: GraphTag, e: u32) -> u32 {
        match tag {
            GraphTag::G1 => self.g1[e as usize],
            GraphTag::G2 => self.g2[e as usize],
        }
    }

    pub fn num_unified(&self) -> usize {
        self.num_unified
    }
}

pub fn unify_entities(task: &AlignmentTask, seeds: &SeedAlignment) -> Result<UnifiedEntitySpace> {
    seeds.validate(&task.g1, &task.g2)?;
    let n1 = task.g1.num_entities();
    let n2 = task.g2.num_entities();
    let g1: Vec<u32> = (0..n1 as u32).collect();
    let mut g2 = vec![u32::MAX; n2];
    for &(a, b) in &seeds.pairs {
        g2[b as usize] = a;
    }
    let mut next = n1 as u32;
    for slot in g2.iter_mut() {
        if *slot == u32::MAX {
            *slot = next;
            next += 1;
        }
    }
    Ok(UnifiedEntitySpace {
        g1,
        g2,
        num_unified: next as usize,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelGraphConfig {
    /// When false, inverse-augmented relations are left out of the four
    /// co-occurrence scans (INV edges are kept regardless).
    pub include_inverses: bool,
}

impl Default for RelGraphConfig {
    fn default() -> Self {
        RelGraphConfig {
            include_inverses: true,
        }
    }
}

/// Relation nodes of both graphs plus typed edges. Node numbering: G1's
/// augmented relations first, then G2's, then (in the sameAs variant) the
/// sameAs relation and its inverse.
#[derive(Clone, Debug)]
pub struct MergedRelationGraph {
    r1_aug: usize,
    r2_aug: usize,
    has_sameas: bool,
    /// Sorted, deduplicated (src, dst, type).
    edges: Vec<(u32, u32, RelEdgeType)>,
}

impl MergedRelationGraph {
    pub fn num_rel_nodes(&self) -> usize {
        self.r1_aug + self.r2_aug + if self.has_sameas { 2 } else { 0 }
    }

    pub fn edges(&self) -> &[(u32, u32, RelEdgeType)] {
        &self.edges
    }

    /// Node id of a graph-local augmented relation id.
    pub fn rel_node(&self, tag: GraphTag, local_rel: u32) -> u32 {
        match tag {
            GraphTag::G1 => local_rel,
            GraphTag::G2 => self.r1_aug as u32 + local_rel,
        }
    }

    pub fn sameas_node(&self) -> Option<u32> {
        self.has_sameas.then(|| (self.r1_aug + self.r2_aug) as u32)
    }

    /// Block-aware inverse of a relation node.
    pub fn node_inverse(&self, node: u32) -> u32 {
        let n = node as usize;
        if n < self.r1_aug {
            flip_within_block(n, 0, self.r1_aug) as u32
        } else if n < self.r1_aug + self.r2_aug {
            flip_within_block(n, self.r1_aug, self.r2_aug) as u32
        } else {
            // sameAs pair occupies the last two ids
            let base = self.r1_aug + self.r2_aug;
            (base + (1 - (n - base))) as u32
        }
    }

    /// Local id within the node's own block, used for block-symmetric edge
    /// ordering downstream.
    pub fn local_id(&self, node: u32) -> u32 {
        let n = node as usize;
        if n < self.r1_aug {
            node
        } else if n < self.r1_aug + self.r2_aug {
            (n - self.r1_aug) as u32
        } else {
            (n - self.r1_aug - self.r2_aug) as u32
        }
    }

    /// Block index (0, 1, or 2 for the sameAs pair).
    pub fn block_of(&self, node: u32) -> usize {
        let n = node as usize;
        if n < self.r1_aug {
            0
        } else if n < self.r1_aug + self.r2_aug {
            1
        } else {
            2
        }
    }

    /// Edge-list text dump, one `src<TAB>dst<TAB>type` line per edge.
    pub fn dump_edge_list(&self, w: &mut impl Write) -> std::io::Result<()> {
        for &(s, d, t) in &self.edges {
            writeln!(w, "{}\t{}\t{}", s, d, t.name())?;
        }
        Ok(())
    }
}

fn flip_within_block(n: usize, base: usize, block_len: usize) -> usize {
    let half = block_len / 2;
    let local = n - base;
    if local < half {
        base + local + half
    } else {
        base + local - half
    }
}

struct IncidenceScan {
    heads: Vec<BTreeSet<u32>>,
    tails: Vec<BTreeSet<u32>>,
}

impl IncidenceScan {
    fn new(num_entities: usize) -> Self {
        IncidenceScan {
            heads: vec![BTreeSet::new(); num_entities],
            tails: vec![BTreeSet::new(); num_entities],
        }
    }

    fn record(&mut self, head: u32, rel_node: u32, tail: u32) {
        self.heads[head as usize].insert(rel_node);
        self.tails[tail as usize].insert(rel_node);
    }

    fn co_occurrence_edges(&self, edges: &mut BTreeSet<(u32, u32, RelEdgeType)>) {
        for (hs, ts) in self.heads.iter().zip(&self.tails) {
            for &a in hs {
                for &b in hs {
                    if a != b {
                        edges.insert((a, b, RelEdgeType::HH));
                    }
                }
                for &b in ts {
                    if a != b {
                        edges.insert((a, b, RelEdgeType::HT));
                    }
                }
            }
            for &a in ts {
                for &b in ts {
                    if a != b {
                        edges.insert((a, b, RelEdgeType::TT));
                    }
                }
                for &b in hs {
                    if a != b {
                        edges.insert((a, b, RelEdgeType::TH));
                    }
                }
            }
        }
    }
}

/// Standard construction: co-occurrence through the seed-unified entity space.
pub fn build_relation_graph(
    task: &AlignmentTask,
    unified: &UnifiedEntitySpace,
    cfg: RelGraphConfig,
) -> MergedRelationGraph {
    let r1_aug = task.g1.num_relations();
    let r2_aug = task.g2.num_relations();
    let mut scan = IncidenceScan::new(unified.num_unified());

    for (tag, graph, offset) in [
        (GraphTag::G1, &task.g1, 0u32),
        (GraphTag::G2, &task.g2, r1_aug as u32),
    ] {
        let orig = graph.num_original_relations() as u32;
        for t in graph.triples() {
            if !cfg.include_inverses && t.rel >= orig {
                continue;
            }
            scan.record(
                unified.unified(tag, t.head),
                offset + t.rel,
                unified.unified(tag, t.tail),
            );
        }
    }

    let mut edges = BTreeSet::new();
    scan.co_occurrence_edges(&mut edges);
    let graph = MergedRelationGraph {
        r1_aug,
        r2_aug,
        has_sameas: false,
        edges: Vec::new(),
    };
    add_inverse_edges(&graph, &mut edges);
    MergedRelationGraph {
        edges: edges.into_iter().collect(),
        ..graph
    }
}

/// Ablation construction: no entity unification. The graphs stay a disjoint
/// union and are bridged by sameAs triples over the train seeds; sameAs and
/// its inverse become ordinary relation nodes.
pub fn build_relation_graph_sameas(
    task: &AlignmentTask,
    seeds: &SeedAlignment,
    cfg: RelGraphConfig,
) -> MergedRelationGraph {
    let n1 = task.g1.num_entities() as u32;
    let r1_aug = task.g1.num_relations();
    let r2_aug = task.g2.num_relations();
    let sameas = (r1_aug + r2_aug) as u32;
    let inv_sameas = sameas + 1;

    let mut scan = IncidenceScan::new(task.g1.num_entities() + task.g2.num_entities());
    for t in task.g1.triples() {
        if !cfg.include_inverses && t.rel >= task.g1.num_original_relations() as u32 {
            continue;
        }
        scan.record(t.head, t.rel, t.tail);
    }
    for t in task.g2.triples() {
        if !cfg.include_inverses && t.rel >= task.g2.num_original_relations() as u32 {
            continue;
        }
        scan.record(n1 + t.head, r1_aug as u32 + t.rel, n1 + t.tail);
    }
    for &(u, v) in &seeds.pairs {
        scan.record(u, sameas, n1 + v);
        if cfg.include_inverses {
            scan.record(n1 + v, inv_sameas, u);
        }
    }

    let mut edges = BTreeSet::new();
    scan.co_occurrence_edges(&mut edges);
    let graph = MergedRelationGraph {
        r1_aug,
        r2_aug,
        has_sameas: true,
        edges: Vec::new(),
    };
    add_inverse_edges(&graph, &mut edges);
    MergedRelationGraph {
        edges: edges.into_iter().collect(),
        ..graph
    }
}

fn add_inverse_edges(graph: &MergedRelationGraph, edges: &mut BTreeSet<(u32, u32, RelEdgeType)>) {
    for node in 0..graph.num_rel_nodes() as u32 {
        edges.insert((node, graph.node_inverse(node), RelEdgeType::Inv));
    }
}
