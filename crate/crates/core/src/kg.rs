//! Knowledge graphs, seed alignments, and alignment tasks.
//!
//! Graphs are stored inverse-augmented: every original triple (h, r, t) is
//! accompanied by (t, inv(r), h) with inv(r) = r + num_original_relations.
//! Augmentation makes propagation bidirectional, so breadth-first reach over
//! out-edges equals undirected reach over the original graph.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphTag {
    G1,
    G2,
}

impl GraphTag {
    pub fn other(self) -> GraphTag {
        match self {
            GraphTag::G1 => GraphTag::G2,
            GraphTag::G2 => GraphTag::G1,
        }
    }
}

/// A query entity, tagged with the graph it lives in.
pub type Query = (GraphTag, u32);

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_original_relations: usize,
    /// Deduplicated originals plus inverses, sorted lexicographically.
    triples: Vec<Triple>,
    /// Per entity: (rel, tail) over augmented triples, sorted.
    out_index: Vec<Vec<(u32, u32)>>,
    /// Per entity: (rel, head) over augmented triples, sorted.
    in_index: Vec<Vec<(u32, u32)>>,
}

impl KnowledgeGraph {
    /// Builds a graph from original (pre-augmentation) triples.
    /// `num_relations` counts original relations only; the built graph
    /// exposes twice that many.
    pub fn build(
        num_entities: usize,
        num_relations: usize,
        raw_triples: &[(u32, u32, u32)],
    ) -> Result<Self> {
        if raw_triples.is_empty() {
            return Err(Error::EmptyTripleSet);
        }
        let mut originals = BTreeSet::new();
        for &(h, r, t) in raw_triples {
            if h as usize >= num_entities || t as usize >= num_entities || r as usize >= num_relations
            {
                return Err(Error::TripleOutOfRange {
                    head: h,
                    rel: r,
                    tail: t,
                    num_entities,
                    num_relations,
                });
            }
            originals.insert(Triple { head: h, rel: r, tail: t });
        }
        let mut triples: Vec<Triple> = Vec::with_capacity(originals.len() * 2);
        for &t in &originals {
            triples.push(t);
            triples.push(Triple {
                head: t.tail,
                rel: t.rel + num_relations as u32,
                tail: t.head,
            });
        }
        triples.sort_unstable();

        let mut out_index = vec![Vec::new(); num_entities];
        let mut in_index = vec![Vec::new(); num_entities];
        for t in &triples {
            out_index[t.head as usize].push((t.rel, t.tail));
            in_index[t.tail as usize].push((t.rel, t.head));
        }
        for v in out_index.iter_mut().chain(in_index.iter_mut()) {
            v.sort_unstable();
        }
        Ok(KnowledgeGraph {
            num_entities,
            num_original_relations: num_relations,
            triples,
            out_index,
            in_index,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Relation count after inverse augmentation (always even).
    pub fn num_relations(&self) -> usize {
        self.num_original_relations * 2
    }

    pub fn num_original_relations(&self) -> usize {
        self.num_original_relations
    }

    /// Augmented triples, deduplicated and sorted.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn out_edges(&self, e: u32) -> &[(u32, u32)] {
        &self.out_index[e as usize]
    }

    pub fn in_edges(&self, e: u32) -> &[(u32, u32)] {
        &self.in_index[e as usize]
    }

    pub fn inverse_of(&self, r: u32) -> u32 {
        let orig = self.num_original_relations as u32;
        if r < orig {
            r + orig
        } else {
            r - orig
        }
    }

    fn check_entity(&self, e: u32) -> Result<()> {
        if (e as usize) < self.num_entities {
            Ok(())
        } else {
            Err(Error::EntityOutOfRange {
                entity: e,
                num_entities: self.num_entities,
            })
        }
    }

    /// Entities within k hops of e (augmentation makes direction
    /// irrelevant). Always contains e. Sorted ascending.
    pub fn khop_entities(&self, e: u32, k: usize) -> Result<Vec<u32>> {
        self.check_entity(e)?;
        let mut seen = vec![false; self.num_entities];
        seen[e as usize] = true;
        let mut frontier = vec![e];
        for _ in 0..k {
            let mut next = Vec::new();
            for &u in &frontier {
                for &(_, v) in &self.out_index[u as usize] {
                    if !seen[v as usize] {
                        seen[v as usize] = true;
                        next.push(v);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok((0..self.num_entities as u32).filter(|&u| seen[u as usize]).collect())
    }

    /// Relations on edges touching e, in either direction. Incoming edges
    /// contribute their (inverse) relation ids, so the set is closed in the
    /// sense that every edge at e appears under the id it carries there.
    pub fn one_hop_relations(&self, e: u32) -> Result<Vec<u32>> {
        self.check_entity(e)?;
        let mut rels = BTreeSet::new();
        for &(r, _) in &self.out_index[e as usize] {
            rels.insert(r);
        }
        for &(r, _) in &self.in_index[e as usize] {
            rels.insert(r);
        }
        Ok(rels.into_iter().collect())
    }
}

/// Pre-aligned entity pairs (G1 entity, G2 entity).
#[derive(Clone, Debug, Default)]
pub struct SeedAlignment {
    pub pairs: Vec<(u32, u32)>,
}

impl SeedAlignment {
    pub fn new(pairs: Vec<(u32, u32)>) -> Self {
        SeedAlignment { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Bounds and one-to-one checks against the two graphs.
    pub fn validate(&self, g1: &KnowledgeGraph, g2: &KnowledgeGraph) -> Result<()> {
        let mut left = BTreeSet::new();
        let mut right = BTreeSet::new();
        for &(a, b) in &self.pairs {
            if a as usize >= g1.num_entities() || b as usize >= g2.num_entities() {
                return Err(Error::InvalidAlignmentPair { e1: a, e2: b });
            }
            if !left.insert(a) {
                return Err(Error::DuplicateAlignmentEntity { entity: a, side: 1 });
            }
            if !right.insert(b) {
                return Err(Error::DuplicateAlignmentEntity { entity: b, side: 2 });
            }
        }
        Ok(())
    }
}

/// Two graphs plus train/valid/test alignment splits.
#[derive(Clone, Debug)]
pub struct AlignmentTask {
    pub g1: KnowledgeGraph,
    pub g2: KnowledgeGraph,
    pub train_seeds: SeedAlignment,
    pub valid_pairs: SeedAlignment,
    pub test_pairs: SeedAlignment,
}

impl AlignmentTask {
    pub fn new(
        g1: KnowledgeGraph,
        g2: KnowledgeGraph,
        train_seeds: SeedAlignment,
        valid_pairs: SeedAlignment,
        test_pairs: SeedAlignment,
    ) -> Result<Self> {
        train_seeds.validate(&g1, &g2)?;
        valid_pairs.validate(&g1, &g2)?;
        test_pairs.validate(&g1, &g2)?;
        let splits = [&train_seeds, &valid_pairs, &test_pairs];
        let mut left = BTreeSet::new();
        let mut right = BTreeSet::new();
        for split in splits {
            for &(a, b) in &split.pairs {
                if !left.insert(a) {
                    return Err(Error::OverlappingSplits { entity: a, side: 1 });
                }
                if !right.insert(b) {
                    return Err(Error::OverlappingSplits { entity: b, side: 2 });
                }
            }
        }
        Ok(AlignmentTask {
            g1,
            g2,
            train_seeds,
            valid_pairs,
            test_pairs,
        })
    }

    pub fn graph(&self, tag: GraphTag) -> &KnowledgeGraph {
        match tag {
            GraphTag::G1 => &self.g1,
            GraphTag::G2 => &self.g2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_edge_graph() -> KnowledgeGraph {
        KnowledgeGraph::build(2, 1, &[(0, 0, 1)]).unwrap()
    }

    #[test]
    fn inverse_augmentation_doubles() {
        let g = single_edge_graph();
        assert_eq!(g.num_relations(), 2);
        assert_eq!(
            g.triples(),
            &[
                Triple { head: 0, rel: 0, tail: 1 },
                Triple { head: 1, rel: 1, tail: 0 }
            ]
        );
    }

    #[test]
    fn duplicates_collapse() {
        let g = KnowledgeGraph::build(2, 1, &[(0, 0, 1), (0, 0, 1)]).unwrap();
        assert_eq!(g.triples().len(), 2);
    }

    #[test]
    fn inverse_is_an_involution() {
        let g = KnowledgeGraph::build(5, 3, &[(0, 0, 1), (1, 2, 3), (3, 1, 3), (2, 0, 4)]).unwrap();
        for t in g.triples() {
            assert_eq!(g.inverse_of(g.inverse_of(t.rel)), t.rel);
            let inv = Triple {
                head: t.tail,
                rel: g.inverse_of(t.rel),
                tail: t.head,
            };
            assert!(g.triples().binary_search(&inv).is_ok(), "missing inverse of {:?}", t);
        }
    }

    #[test]
    fn indices_round_trip() {
        let g = KnowledgeGraph::build(6, 2, &[(0, 0, 1), (1, 1, 2), (2, 0, 0), (4, 1, 5)]).unwrap();
        let mut from_out: Vec<Triple> = Vec::new();
        for h in 0..g.num_entities() as u32 {
            for &(r, t) in g.out_edges(h) {
                from_out.push(Triple { head: h, rel: r, tail: t });
            }
        }
        from_out.sort_unstable();
        assert_eq!(from_out, g.triples());

        let mut from_in: Vec<Triple> = Vec::new();
        for t in 0..g.num_entities() as u32 {
            for &(r, h) in g.in_edges(t) {
                from_in.push(Triple { head: h, rel: r, tail: t });
            }
        }
        from_in.sort_unstable();
        assert_eq!(from_in, g.triples());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(
            KnowledgeGraph::build(2, 1, &[(0, 0, 2)]),
            Err(Error::TripleOutOfRange { .. })
        ));
        assert!(matches!(
            KnowledgeGraph::build(2, 1, &[(0, 1, 1)]),
            Err(Error::TripleOutOfRange { .. })
        ));
        assert!(matches!(KnowledgeGraph::build(2, 1, &[]), Err(Error::EmptyTripleSet)));
    }

    #[test]
    fn khop_on_path_graph() {
        let g = KnowledgeGraph::build(4, 1, &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]).unwrap();
        assert_eq!(g.khop_entities(0, 2).unwrap(), vec![0, 1, 2]);
        assert_eq!(g.khop_entities(0, 0).unwrap(), vec![0]);
        assert_eq!(g.khop_entities(3, 1).unwrap(), vec![2, 3]);
        assert!(g.khop_entities(9, 1).is_err());
    }

    /// Independent oracle: undirected BFS over the original edge list.
    fn bfs_oracle(n: usize, edges: &[(u32, u32, u32)], start: u32, k: usize) -> Vec<u32> {
        let mut adj = vec![Vec::new(); n];
        for &(h, _, t) in edges {
            adj[h as usize].push(t);
            adj[t as usize].push(h);
        }
        let mut dist = vec![usize::MAX; n];
        dist[start as usize] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            if dist[u as usize] == k {
                continue;
            }
            for &v in &adj[u as usize] {
                if dist[v as usize] == usize::MAX {
                    dist[v as usize] = dist[u as usize] + 1;
                    queue.push_back(v);
                }
            }
        }
        (0..n as u32).filter(|&u| dist[u as usize] <= k).collect()
    }

    #[test]
    fn khop_matches_bfs_oracle() {
        // Fixed pseudo-random graph; no rand dependency needed here.
        let n = 30;
        let mut state: u64 = 7;
        let mut edges = Vec::new();
        for _ in 0..45 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let h = ((state >> 33) % n as u64) as u32;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = ((state >> 33) % n as u64) as u32;
            edges.push((h, (state % 3) as u32, t));
        }
        let g = KnowledgeGraph::build(n, 3, &edges).unwrap();
        for start in [0u32, 5, 17, 29] {
            let mut prev: Vec<u32> = vec![start];
            for k in 0..5 {
                let got = g.khop_entities(start, k).unwrap();
                let want = bfs_oracle(n, &edges, start, k);
                assert_eq!(got, want, "start {} k {}", start, k);
                assert!(prev.iter().all(|u| got.contains(u)), "khop not monotone");
                prev = got;
            }
        }
    }

    #[test]
    fn one_hop_relations_touching_semantics() {
        let g = single_edge_graph();
        // Edge (0,0,1) and its inverse (1,1,0) both touch entity 0.
        assert_eq!(g.one_hop_relations(0).unwrap(), vec![0, 1]);
        assert_eq!(g.one_hop_relations(1).unwrap(), vec![0, 1]);
    }

    #[test]
    fn one_hop_relations_isolated_entity() {
        let g = KnowledgeGraph::build(3, 1, &[(0, 0, 1)]).unwrap();
        assert_eq!(g.one_hop_relations(2).unwrap(), Vec::<u32>::new());
        assert!(g.one_hop_relations(3).is_err());
    }

    #[test]
    fn one_hop_relations_matches_triple_scan() {
        let g = KnowledgeGraph::build(6, 2, &[(0, 0, 1), (1, 1, 2), (2, 0, 0), (0, 1, 0)]).unwrap();
        for e in 0..6u32 {
            let mut want: Vec<u32> = g
                .triples()
                .iter()
                .filter(|t| t.head == e || t.tail == e)
                .map(|t| t.rel)
                .collect();
            want.sort_unstable();
            want.dedup();
            assert_eq!(g.one_hop_relations(e).unwrap(), want, "entity {}", e);
        }
    }

    #[test]
    fn self_loop_inverse_is_distinct() {
        let g = KnowledgeGraph::build(2, 1, &[(0, 0, 0)]).unwrap();
        assert_eq!(g.triples().len(), 2);
        assert_eq!(g.one_hop_relations(0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn relabeling_permutes_neighborhoods() {
        let edges = [(0u32, 0u32, 1u32), (1, 1, 2), (2, 0, 3), (3, 1, 0)];
        let g = KnowledgeGraph::build(4, 2, &edges).unwrap();
        let perm = [2u32, 0, 3, 1];
        let permuted: Vec<(u32, u32, u32)> = edges
            .iter()
            .map(|&(h, r, t)| (perm[h as usize], r, perm[t as usize]))
            .collect();
        let gp = KnowledgeGraph::build(4, 2, &permuted).unwrap();
        for e in 0..4u32 {
            let want: Vec<u32> = {
                let mut v: Vec<u32> = g
                    .khop_entities(e, 2)
                    .unwrap()
                    .iter()
                    .map(|&u| perm[u as usize])
                    .collect();
                v.sort_unstable();
                v
            };
            assert_eq!(gp.khop_entities(perm[e as usize], 2).unwrap(), want);
            assert_eq!(
                gp.one_hop_relations(perm[e as usize]).unwrap(),
                g.one_hop_relations(e).unwrap()
            );
        }
    }

    #[test]
    fn task_validation_rejects_overlap_and_duplicates() {
        let g1 = KnowledgeGraph::build(4, 1, &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]).unwrap();
        let g2 = g1.clone();
        let dup = SeedAlignment::new(vec![(0, 0), (0, 1)]);
        assert!(dup.validate(&g1, &g2).is_err());

        let train = SeedAlignment::new(vec![(0, 0)]);
        let valid = SeedAlignment::new(vec![(0, 1)]);
        assert!(matches!(
            AlignmentTask::new(g1.clone(), g2.clone(), train, valid, SeedAlignment::default()),
            Err(Error::OverlappingSplits { .. })
        ));

        let ok = AlignmentTask::new(
            g1,
            g2,
            SeedAlignment::new(vec![(0, 0)]),
            SeedAlignment::new(vec![(1, 1)]),
            SeedAlignment::new(vec![(2, 2), (3, 3)]),
        );
        assert!(ok.is_ok());
    }
}
