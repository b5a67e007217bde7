//! Shared generators and brute-force oracles for the integration suites.
//!
//! The oracles here recompute results from first principles (quadratic scans,
//! plain BFS, a private union-find) so they share no code paths with the
//! library implementations they check.

use ealign_core::kg::{AlignmentTask, GraphTag, KnowledgeGraph, Query, SeedAlignment};
use ealign_core::relgraph::{MergedRelationGraph, RelEdgeType};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeSet;

/// Random small task: both graphs drawn independently, seeds drawn as a
/// random partial matching. Sizes stay within the given caps; self-loops and
/// parallel edges are left in deliberately.
pub fn rand_task(rng: &mut StdRng, max_entities: usize, max_relations: usize) -> AlignmentTask {
    let rand_graph = |rng: &mut StdRng| {
        let n = rng.random_range(2..=max_entities);
        let r = rng.random_range(1..=max_relations);
        let m = rng.random_range(1..=2 * n);
        let triples: Vec<(u32, u32, u32)> = (0..m)
            .map(|_| {
                (
                    rng.random_range(0..n) as u32,
                    rng.random_range(0..r) as u32,
                    rng.random_range(0..n) as u32,
                )
            })
            .collect();
        KnowledgeGraph::build(n, r, &triples).unwrap()
    };
    let g1 = rand_graph(rng);
    let g2 = rand_graph(rng);
    let max_pairs = g1.num_entities().min(g2.num_entities());
    let want = rng.random_range(0..=max_pairs);
    let mut left: Vec<u32> = (0..g1.num_entities() as u32).collect();
    let mut right: Vec<u32> = (0..g2.num_entities() as u32).collect();
    left.shuffle(rng);
    right.shuffle(rng);
    let pairs: Vec<(u32, u32)> = left.into_iter().zip(right).take(want).collect();
    AlignmentTask::new(
        g1,
        g2,
        SeedAlignment::new(pairs),
        SeedAlignment::default(),
        SeedAlignment::default(),
    )
    .unwrap()
}

pub fn rand_perm(rng: &mut StdRng, n: usize) -> Vec<u32> {
    let mut v: Vec<u32> = (0..n as u32).collect();
    v.shuffle(rng);
    v
}

/// Rebuilds the task with entity ids mapped through `perm1`/`perm2` and
/// original relation ids through `rho1`/`rho2` (new id = map[old id]).
pub fn relabel_task(
    task: &AlignmentTask,
    perm1: &[u32],
    perm2: &[u32],
    rho1: &[u32],
    rho2: &[u32],
) -> AlignmentTask {
    let map_graph = |g: &KnowledgeGraph, perm: &[u32], rho: &[u32]| {
        let orig = g.num_original_relations() as u32;
        let triples: Vec<(u32, u32, u32)> = g
            .triples()
            .iter()
            .filter(|t| t.rel < orig)
            .map(|t| (perm[t.head as usize], rho[t.rel as usize], perm[t.tail as usize]))
            .collect();
        KnowledgeGraph::build(g.num_entities(), orig as usize, &triples).unwrap()
    };
    let map_pairs = |s: &SeedAlignment| {
        SeedAlignment::new(
            s.pairs
                .iter()
                .map(|&(a, b)| (perm1[a as usize], perm2[b as usize]))
                .collect(),
        )
    };
    AlignmentTask::new(
        map_graph(&task.g1, perm1, rho1),
        map_graph(&task.g2, perm2, rho2),
        map_pairs(&task.train_seeds),
        map_pairs(&task.valid_pairs),
        map_pairs(&task.test_pairs),
    )
    .unwrap()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Typed edge set recomputed by brute force: every pair of augmented triples
/// is compared through a union-find over the train seeds, and inverse links
/// are derived from each graph's own relation arithmetic. Node ids use the
/// merged graph's published (tag, local) mapping so the sets are comparable.
pub fn brute_force_relation_edges(
    task: &AlignmentTask,
    merged: &MergedRelationGraph,
) -> BTreeSet<(u32, u32, RelEdgeType)> {
    let n1 = task.g1.num_entities();
    let mut uf = UnionFind::new(n1 + task.g2.num_entities());
    for &(a, b) in &task.train_seeds.pairs {
        uf.union(a as usize, n1 + b as usize);
    }
    let mut items: Vec<(usize, u32, usize)> = Vec::new();
    for (tag, g) in [(GraphTag::G1, &task.g1), (GraphTag::G2, &task.g2)] {
        let base = match tag {
            GraphTag::G1 => 0,
            GraphTag::G2 => n1,
        };
        for t in g.triples() {
            items.push((
                uf.find(base + t.head as usize),
                merged.rel_node(tag, t.rel),
                uf.find(base + t.tail as usize),
            ));
        }
    }
    let mut edges = BTreeSet::new();
    for &(ha, ra, ta) in &items {
        for &(hb, rb, tb) in &items {
            if ra == rb {
                continue;
            }
            if ha == hb {
                edges.insert((ra, rb, RelEdgeType::HH));
            }
            if ha == tb {
                edges.insert((ra, rb, RelEdgeType::HT));
            }
            if ta == hb {
                edges.insert((ra, rb, RelEdgeType::TH));
            }
            if ta == tb {
                edges.insert((ra, rb, RelEdgeType::TT));
            }
        }
    }
    for (tag, g) in [(GraphTag::G1, &task.g1), (GraphTag::G2, &task.g2)] {
        let orig = g.num_original_relations() as u32;
        for r in 0..g.num_relations() as u32 {
            let inv = if r < orig { r + orig } else { r - orig };
            edges.insert((merged.rel_node(tag, r), merged.rel_node(tag, inv), RelEdgeType::Inv));
        }
    }
    edges
}

/// Plain-BFS reimplementation of anchor activation: neighborhood by
/// undirected BFS, filtered to train-seed entities on the query's side,
/// counterparts mirrored, hop radius expanded one step at a time up to the
/// cap when the filtered set is empty.
pub struct OracleActivation {
    pub k_used: usize,
    pub degenerate: bool,
    pub active_g1: Vec<u32>,
    pub active_g2: Vec<u32>,
}

pub fn oracle_anchors(
    task: &AlignmentTask,
    seeds: &SeedAlignment,
    query: Query,
    k: usize,
    cap: usize,
) -> OracleActivation {
    let (tag, root) = query;
    let g = task.graph(tag);
    let bfs = |radius: usize| -> BTreeSet<u32> {
        let mut seen = BTreeSet::from([root]);
        let mut frontier = vec![root];
        for _ in 0..radius {
            let mut next = Vec::new();
            for &u in &frontier {
                let step = g
                    .out_edges(u)
                    .iter()
                    .map(|&(_, v)| v)
                    .chain(g.in_edges(u).iter().map(|&(_, v)| v));
                for v in step {
                    if seen.insert(v) {
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        seen
    };
    let mut k_used = k;
    loop {
        let hood = bfs(k_used);
        let mut same_side = BTreeSet::new();
        let mut other_side = BTreeSet::new();
        for &(u, v) in &seeds.pairs {
            let (mine, theirs) = match tag {
                GraphTag::G1 => (u, v),
                GraphTag::G2 => (v, u),
            };
            if hood.contains(&mine) {
                same_side.insert(mine);
                other_side.insert(theirs);
            }
        }
        if !same_side.is_empty() {
            let (active_g1, active_g2) = match tag {
                GraphTag::G1 => (same_side, other_side),
                GraphTag::G2 => (other_side, same_side),
            };
            return OracleActivation {
                k_used,
                degenerate: false,
                active_g1: active_g1.into_iter().collect(),
                active_g2: active_g2.into_iter().collect(),
            };
        }
        if k_used >= cap {
            return OracleActivation {
                k_used,
                degenerate: true,
                active_g1: Vec::new(),
                active_g2: Vec::new(),
            };
        }
        k_used += 1;
    }
}
