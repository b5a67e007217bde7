//! Synthetic KG-pair generator with controllable density and heterogeneity.
//!
//! A base graph is sampled once; the second side is an entity-relabeled copy
//! under a hidden permutation, optionally with a renamed relation vocabulary,
//! and each side drops edges independently. The hidden permutation is the
//! ground-truth alignment, so generated tasks come with perfect labels.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, KnowledgeGraph, SeedAlignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_entities: usize,
    pub num_relations: usize,
    /// Average undirected degree of the base graph; the generator samples
    /// round(num_entities * avg_degree / 2) triples.
    pub avg_degree: f64,
    pub edge_drop_1: f64,
    pub edge_drop_2: f64,
    /// When set, the second side uses a fresh relation vocabulary under a
    /// hidden bijection instead of sharing relation ids.
    pub relation_renaming: bool,
    /// Fraction of true pairs that become train seeds; the remainder splits
    /// 1:6 into validation and test.
    pub seed_fraction: f64,
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSynthSpec(msg));
        if self.num_entities < 3 {
            return fail(format!("need at least 3 entities, got {}", self.num_entities));
        }
        if self.num_relations == 0 {
            return fail("need at least one relation".into());
        }
        if !(self.avg_degree > 0.0) {
            return fail(format!("avg_degree must be positive, got {}", self.avg_degree));
        }
        for (name, rate) in [("edge_drop_1", self.edge_drop_1), ("edge_drop_2", self.edge_drop_2)] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(format!("{name} must lie in [0, 1], got {rate}"));
            }
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction < 1.0) {
            return fail(format!(
                "seed_fraction must lie in (0, 1), got {}",
                self.seed_fraction
            ));
        }
        Ok(())
    }
}

pub struct SyntheticTask {
    pub task: AlignmentTask,
    /// Hidden entity permutation: G1 entity i corresponds to G2 entity
    /// entity_map[i].
    pub entity_map: Vec<u32>,
    /// Hidden relation bijection (identity unless renaming was requested).
    pub relation_map: Vec<u32>,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let n = spec.num_entities;
    let r = spec.num_relations;
    let mut rng = StdRng::seed_from_u64(spec.rng_seed);

    let m = ((n as f64 * spec.avg_degree) / 2.0).round().max(1.0) as usize;
    let mut base = Vec::with_capacity(m);
    for _ in 0..m {
        let h = rng.random_range(0..n as u32);
        // Uniform tail over the other n-1 entities with a single draw.
        let mut t = rng.random_range(0..n as u32 - 1);
        if t >= h {
            t += 1;
        }
        let rel = rng.random_range(0..r as u32);
        base.push((h, rel, t));
    }

    let mut degree = vec![0usize; n];
    for &(h, _, t) in &base {
        degree[h as usize] += 1;
        degree[t as usize] += 1;
    }
    let zero_degree = degree.iter().filter(|&&d| d == 0).count();
    if zero_degree * 2 > n {
        return Err(Error::DegenerateSynthGraph {
            zero_degree,
            num_entities: n,
        });
    }

    let mut entity_map: Vec<u32> = (0..n as u32).collect();
    entity_map.shuffle(&mut rng);
    let mut relation_map: Vec<u32> = (0..r as u32).collect();
    if spec.relation_renaming {
        relation_map.shuffle(&mut rng);
    }

    let keep = |rng: &mut StdRng, rate: f64| rng.random::<f64>() >= rate;
    let t1: Vec<(u32, u32, u32)> = base
        .iter()
        .filter(|_| keep(&mut rng, spec.edge_drop_1))
        .copied()
        .collect();
    let t2: Vec<(u32, u32, u32)> = base
        .iter()
        .filter(|_| keep(&mut rng, spec.edge_drop_2))
        .map(|&(h, rel, t)| {
            (
                entity_map[h as usize],
                relation_map[rel as usize],
                entity_map[t as usize],
            )
        })
        .collect();

    let g1 = KnowledgeGraph::build(n, r, &t1)?;
    let g2 = KnowledgeGraph::build(n, r, &t2)?;

    let mut pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, entity_map[i as usize])).collect();
    pairs.shuffle(&mut rng);
    let n_train = ((spec.seed_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let rem = n - n_train;
    let n_valid = ((rem as f64 / 7.0).round() as usize).clamp(1, rem - 1);

    let mut train: Vec<(u32, u32)> = pairs[..n_train].to_vec();
    let mut valid: Vec<(u32, u32)> = pairs[n_train..n_train + n_valid].to_vec();
    let mut test: Vec<(u32, u32)> = pairs[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();

    let task = AlignmentTask::new(
        g1,
        g2,
        SeedAlignment::new(train),
        SeedAlignment::new(valid),
        SeedAlignment::new(test),
    )?;
    Ok(SyntheticTask {
        task,
        entity_map,
        relation_map,
    })
}
