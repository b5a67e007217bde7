//! Ranking evaluation, frozen transfer, and the anchor-hop sweep.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, GraphTag, Query, SeedAlignment};
use crate::matcher::{dot_score, interaction_score};
use crate::pipeline::{
    forward_queries, sample_distinct, Ablation, ModelParams, ModelVars, TaskContext, TrainConfig,
};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    G1ToG2,
    G2ToG1,
    /// Averages the two directions' rates; query counts add up.
    Mean,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g1_to_g2" => Ok(Direction::G1ToG2),
            "g2_to_g1" => Ok(Direction::G2ToG1),
            "mean" => Ok(Direction::Mean),
            other => Err(Error::InvalidConfig(format!(
                "unknown direction '{}'; expected g1_to_g2, g2_to_g1, or mean",
                other
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::G1ToG2 => "g1_to_g2",
            Direction::G2ToG1 => "g2_to_g1",
            Direction::Mean => "mean",
        })
    }
}

/// Which entities a query is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePool {
    /// Opposite-side entities of the evaluation pairs.
    EvalPairs,
    /// Every entity of the opposite graph.
    All,
}

impl FromStr for CandidatePool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(CandidatePool::EvalPairs),
            "all" => Ok(CandidatePool::All),
            other => Err(Error::InvalidConfig(format!(
                "unknown candidate pool '{}'; expected test or all",
                other
            ))),
        }
    }
}

impl fmt::Display for CandidatePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidatePool::EvalPairs => "test",
            CandidatePool::All => "all",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub direction: Direction,
    pub candidates: CandidatePool,
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_5: f64,
    pub hits_at_10: f64,
    pub num_queries: usize,
    pub num_degenerate_queries: usize,
    pub wall_clock_seconds: f64,
}

impl Metrics {
    /// Key-value lines, one metric per line.
    pub fn to_text(&self) -> String {
        format!(
            "direction={}\ncandidates={}\nmrr={:.6}\nhits@1={:.6}\nhits@5={:.6}\nhits@10={:.6}\nnum_queries={}\nnum_degenerate_queries={}\nwall_clock_seconds={:.3}\n",
            self.direction,
            self.candidates,
            self.mrr,
            self.hits_at_1,
            self.hits_at_5,
            self.hits_at_10,
            self.num_queries,
            self.num_degenerate_queries,
            self.wall_clock_seconds,
        )
    }
}

#[derive(Default)]
struct DirAccum {
    sum_rr: f64,
    hit1: usize,
    hit5: usize,
    hit10: usize,
    n: usize,
    degenerate: usize,
}

impl DirAccum {
    fn push(&mut self, rank: usize) {
        self.sum_rr += 1.0 / rank as f64;
        self.hit1 += (rank <= 1) as usize;
        self.hit5 += (rank <= 5) as usize;
        self.hit10 += (rank <= 10) as usize;
        self.n += 1;
    }

    fn mrr(&self) -> f64 {
        self.sum_rr / self.n as f64
    }
}

/// Rank of `target` among scored candidates: strictly better scores rank
/// ahead, ties are broken by candidate id ascending.
pub fn rank_of_target(scores: &[f64], candidates: &[u32], target: u32) -> Result<usize> {
    let tpos = candidates
        .iter()
        .position(|&c| c == target)
        .ok_or(Error::TargetNotInCandidates {
            query: u32::MAX,
            target,
        })?;
    let ts = scores[tpos];
    let mut rank = 1;
    for (i, (&s, &c)) in scores.iter().zip(candidates).enumerate() {
        if i == tpos {
            continue;
        }
        if s > ts || (s == ts && c < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Evaluates alignment pairs with the model frozen. The candidate pool is the
/// opposite side of `pairs`.
pub fn evaluate(
    model: &ModelParams,
    task: &AlignmentTask,
    pairs: &SeedAlignment,
    direction: Direction,
) -> Result<Metrics> {
    let ctx = TaskContext::new(task, &model.config)?;
    evaluate_with_ctx(model, &ctx, pairs, direction, CandidatePool::EvalPairs)
}

pub fn evaluate_with_ctx(
    model: &ModelParams,
    ctx: &TaskContext,
    pairs: &SeedAlignment,
    direction: Direction,
    pool: CandidatePool,
) -> Result<Metrics> {
    pairs.validate(&ctx.task.g1, &ctx.task.g2)?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "evaluation needs at least one pair".into(),
        ));
    }
    let start = Instant::now();
    // Both directions rank the same pairs, so pooling the reciprocal ranks
    // and hit counts reproduces the equal-weight direction average exactly.
    let accum = match direction {
        Direction::G1ToG2 => rank_direction(model, ctx, pairs, false, pool, None)?,
        Direction::G2ToG1 => rank_direction(model, ctx, pairs, true, pool, None)?,
        Direction::Mean => {
            let a = rank_direction(model, ctx, pairs, false, pool, None)?;
            let b = rank_direction(model, ctx, pairs, true, pool, None)?;
            DirAccum {
                sum_rr: a.sum_rr + b.sum_rr,
                hit1: a.hit1 + b.hit1,
                hit5: a.hit5 + b.hit5,
                hit10: a.hit10 + b.hit10,
                n: a.n + b.n,
                degenerate: a.degenerate + b.degenerate,
            }
        }
    };
    let n = accum.n as f64;
    let (mrr, h1, h5, h10) = (
        accum.mrr(),
        accum.hit1 as f64 / n,
        accum.hit5 as f64 / n,
        accum.hit10 as f64 / n,
    );
    Ok(Metrics {
        direction,
        candidates: pool,
        mrr,
        hits_at_1: h1,
        hits_at_5: h5,
        hits_at_10: h10,
        num_queries: accum.n,
        num_degenerate_queries: accum.degenerate,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Fast per-epoch validation: one direction, per-query candidate pool capped
/// by sampling (the true target always stays in).
pub(crate) fn validation_mrr(
    model: &ModelParams,
    ctx: &TaskContext,
    pairs: &SeedAlignment,
    cap: usize,
    rng: &mut StdRng,
) -> Result<f64> {
    let accum = rank_direction(
        model,
        ctx,
        pairs,
        false,
        CandidatePool::EvalPairs,
        Some((cap, rng)),
    )?;
    Ok(accum.mrr())
}

fn rank_direction(
    model: &ModelParams,
    ctx: &TaskContext,
    pairs: &SeedAlignment,
    reversed: bool,
    pool: CandidatePool,
    mut cap: Option<(usize, &mut StdRng)>,
) -> Result<DirAccum> {
    let (query_tag, cand_tag) = if reversed {
        (GraphTag::G2, GraphTag::G1)
    } else {
        (GraphTag::G1, GraphTag::G2)
    };
    let queries: Vec<(Query, u32)> = pairs
        .pairs
        .iter()
        .map(|&(a, b)| {
            if reversed {
                ((GraphTag::G2, b), a)
            } else {
                ((GraphTag::G1, a), b)
            }
        })
        .collect();
    debug_assert_eq!(queries[0].0 .0, query_tag);

    let pool_ids: Vec<u32> = match pool {
        CandidatePool::EvalPairs => {
            let mut ids: Vec<u32> = pairs
                .pairs
                .iter()
                .map(|&(a, b)| if reversed { a } else { b })
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
        CandidatePool::All => (0..ctx.task.graph(cand_tag).num_entities() as u32).collect(),
    };

    let d = model.config.dim;
    let (c_sheet, c_base) = ctx.side_base(cand_tag);
    let chunk = ctx.chunk_cap(&model.config);
    let mut accum = DirAccum::default();

    for batch in queries.chunks(chunk) {
        let mut tape = Tape::new();
        let (mvars, _) = ModelVars::lift(&mut tape, model, false);
        let qs: Vec<Query> = batch.iter().map(|&(q, _)| q).collect();
        let fwd = forward_queries(&mut tape, &mvars, ctx, &qs)?;
        accum.degenerate += fwd.degenerate;

        for (bi, &(q, target)) in batch.iter().enumerate() {
            let (q_sheet, q_row) = ctx.locate(q);
            let own = tape.val(fwd.sides[q_sheet]);
            let n_own = own.shape()[1];
            let h_q = &own.data()[(bi * n_own + q_row) * d..(bi * n_own + q_row + 1) * d];

            let cands: Vec<u32> = match cap.as_mut() {
                Some((limit, rng)) if pool_ids.len() > *limit => {
                    let tpos = pool_ids
                        .binary_search(&target)
                        .expect("target sits in its own pool");
                    let mut ids = vec![target];
                    ids.extend(
                        sample_distinct(rng, pool_ids.len(), *limit - 1, tpos as u32)
                            .into_iter()
                            .map(|p| pool_ids[p as usize]),
                    );
                    ids.sort_unstable();
                    ids
                }
                _ => pool_ids.clone(),
            };

            let sheet = tape.val(fwd.sides[c_sheet]);
            let n_sheet = sheet.shape()[1];
            let sheet_data = sheet.data();
            let w = model.matcher.w_final.data();
            let scores: Vec<f64> = cands
                .iter()
                .map(|&c| {
                    let row = c_base + c as usize;
                    let h_c = &sheet_data[(bi * n_sheet + row) * d..(bi * n_sheet + row + 1) * d];
                    if ctx.ablation == Ablation::NoInteraction {
                        dot_score(h_q, h_c)
                    } else {
                        interaction_score(h_q, h_c, w)
                    }
                })
                .collect();
            let rank = rank_of_target(&scores, &cands, target)?;
            accum.push(rank);
        }
    }
    Ok(accum)
}

/// Zero-shot deployment: evaluates the frozen model on another task's test
/// pairs, with that task's train split serving as the anchor set.
pub fn transfer(model: &ModelParams, task: &AlignmentTask, direction: Direction) -> Result<Metrics> {
    evaluate(model, task, &task.test_pairs, direction)
}

/// Metrics per anchor-hop radius. With `base` the frozen model is re-run at
/// each k; without it a fresh model trains per k.
pub fn hop_sweep(
    task: &AlignmentTask,
    config: &TrainConfig,
    k_values: &[usize],
    base: Option<&ModelParams>,
) -> Result<Vec<(usize, Metrics)>> {
    if k_values.is_empty() {
        return Err(Error::InvalidConfig("hop sweep needs at least one k".into()));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let metrics = match base {
            Some(model) => {
                let cfg = TrainConfig {
                    anchor_hop: k,
                    ..model.config.clone()
                };
                let ctx = TaskContext::new(task, &cfg)?;
                evaluate_with_ctx(
                    model,
                    &ctx,
                    &task.test_pairs,
                    Direction::G1ToG2,
                    CandidatePool::EvalPairs,
                )?
            }
            None => {
                let cfg = TrainConfig {
                    anchor_hop: k,
                    ..config.clone()
                };
                let out = crate::pipeline::train(task, &cfg)?;
                let ctx = TaskContext::new(task, &cfg)?;
                evaluate_with_ctx(
                    &out.model,
                    &ctx,
                    &task.test_pairs,
                    Direction::G1ToG2,
                    CandidatePool::EvalPairs,
                )?
            }
        };
        rows.push((k, metrics));
    }
    Ok(rows)
}
