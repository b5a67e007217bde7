//! Training loop: shuffled batches, bidirectional softmax loss, adaptive
//! updates, early stopping on validation MRR.

use std::rc::Rc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, GraphTag, Query};
use crate::matcher::{dot_scores_on_tape, interaction_scores_on_tape};
use crate::pipeline::eval::validation_mrr;
use crate::pipeline::optim::{AdamW, GradStore};
use crate::pipeline::{
    forward_queries, sample_distinct, Ablation, ModelParams, ModelVars, TaskContext, TrainConfig,
};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch, not the last one.
    pub model: ModelParams,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
    pub epochs_run: usize,
}

/// Global gradient-norm ceiling. Binary anchor rows keep early LayerNorm
/// inputs near-constant, and the eps-guarded backward amplifies those paths
/// by 1/sqrt(eps) per layer; uncapped first steps poison the adaptive
/// moments and strand training at uniform scores.
const GRAD_CLIP_NORM: f64 = 1.0;

pub fn train(task: &AlignmentTask, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    require_splits(task)?;
    // One rng stream drives init, shuffling, and sampling; splitting it would
    // silently decouple determinism from rng_seed.
    let mut rng = StdRng::seed_from_u64(config.rng_seed);
    let ctx = TaskContext::new(task, config)?;
    let model = ModelParams::init_for_task(config, &ctx, &mut rng);
    train_loop(model, &ctx, config, &mut rng)
}

/// Continues from loaded parameters under a new config. Optimizer moments
/// start from zero. Layer shapes must match the loaded model.
pub fn finetune(
    model: ModelParams,
    task: &AlignmentTask,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    require_splits(task)?;
    if config.dim != model.config.dim
        || config.rel_layers != model.config.rel_layers
        || config.ent_layers != model.config.ent_layers
    {
        return Err(Error::InvalidConfig(format!(
            "finetune config shapes (d={}, rel={}, ent={}) do not match the checkpoint (d={}, rel={}, ent={})",
            config.dim,
            config.rel_layers,
            config.ent_layers,
            model.config.dim,
            model.config.rel_layers,
            model.config.ent_layers,
        )));
    }
    let mut model = model;
    model.config = config.clone();
    let ctx = TaskContext::new(task, config)?;
    let mut rng = StdRng::seed_from_u64(config.rng_seed);
    train_loop(model, &ctx, config, &mut rng)
}

fn require_splits(task: &AlignmentTask) -> Result<()> {
    if task.train_seeds.is_empty() || task.valid_pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs non-empty train and validation pair sets".into(),
        ));
    }
    Ok(())
}

fn train_loop(
    mut model: ModelParams,
    ctx: &TaskContext,
    config: &TrainConfig,
    rng: &mut StdRng,
) -> Result<TrainOutcome> {
    let mut opt = AdamW::new(&model);
    let cap = ctx.chunk_cap(config);
    let pairs_all = ctx.task.train_seeds.pairs.clone();

    let mut best_mrr = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..pairs_all.len()).collect();
        order.shuffle(rng);

        let mut epoch_loss = 0.0;
        let mut num_batches = 0;
        for (bi, batch_ids) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(u32, u32)> = batch_ids.iter().map(|&i| pairs_all[i]).collect();
            let mut grads = GradStore::zeros_like(&model);
            let mut batch_loss = 0.0;
            for chunk in batch.chunks(cap) {
                let mut tape = Tape::new();
                let (mvars, flat) = ModelVars::lift(&mut tape, &model, true);
                let loss = chunk_loss(
                    &mut tape,
                    &mvars,
                    ctx,
                    chunk,
                    batch.len(),
                    config.negative_sample_size,
                    rng,
                )?;
                let lv = tape.val(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi });
                }
                batch_loss += lv;
                let mut g = tape.backward(loss);
                grads.accumulate(&mut g, &flat);
            }
            grads.clip_global_norm(GRAD_CLIP_NORM);
            opt.step(&mut model, &grads, config.lr, config.weight_decay);
            epoch_loss += batch_loss;
            num_batches += 1;
        }
        let epoch_loss = epoch_loss / num_batches.max(1) as f64;

        crate::pipeline::rescale_msg_if_drifted(&mut model, ctx);

        let val_mrr = validation_mrr(
            &model,
            ctx,
            &ctx.task.valid_pairs,
            config.valid_candidate_cap,
            rng,
        )?;
        // Snapshot the strictly best validation score; on exact ties (a small
        // validation split saturates early) prefer the epoch with lower mean
        // training loss, whose embeddings are sharper on unseen pairs.
        // Patience counts strict improvements only, so stopping is unaffected.
        let improved = val_mrr > best_mrr;
        if improved || (val_mrr == best_mrr && epoch_loss < best_loss) {
            best_mrr = val_mrr;
            best_loss = epoch_loss;
            best_model = model.clone();
            best_epoch = epoch;
        }
        if improved {
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        best_val_mrr: best_mrr,
        epochs_run,
    })
}

/// Both direction terms for a micro-chunk of pairs, scaled so that summing
/// chunk losses over a batch reproduces the full-batch loss.
pub(crate) fn chunk_loss(
    tape: &mut Tape,
    mvars: &ModelVars,
    ctx: &TaskContext,
    pairs: &[(u32, u32)],
    full_batch: usize,
    negatives: usize,
    rng: &mut StdRng,
) -> Result<Var> {
    let q1: Vec<Query> = pairs.iter().map(|&(a, _)| (GraphTag::G1, a)).collect();
    let t1: Vec<u32> = pairs.iter().map(|&(_, b)| b).collect();
    let l1 = direction_loss(tape, mvars, ctx, &q1, &t1, GraphTag::G2, full_batch, negatives, rng)?;

    let q2: Vec<Query> = pairs.iter().map(|&(_, b)| (GraphTag::G2, b)).collect();
    let t2: Vec<u32> = pairs.iter().map(|&(a, _)| a).collect();
    let l2 = direction_loss(tape, mvars, ctx, &q2, &t2, GraphTag::G1, full_batch, negatives, rng)?;

    Ok(tape.add(l1, l2))
}

fn direction_loss(
    tape: &mut Tape,
    mvars: &ModelVars,
    ctx: &TaskContext,
    queries: &[Query],
    targets: &[u32],
    cand_tag: GraphTag,
    full_batch: usize,
    negatives: usize,
    rng: &mut StdRng,
) -> Result<Var> {
    let batch = forward_queries(tape, mvars, ctx, queries)?;
    let (q_sheet, _) = ctx.locate(queries[0]);
    let h_own = batch.sides[q_sheet];
    let (c_sheet, c_base) = ctx.side_base(cand_tag);
    let h_cand_sheet = batch.sides[c_sheet];
    let n_other = ctx.task.graph(cand_tag).num_entities();

    let score = |tape: &mut Tape, h_q: Var, h_c: Var| -> Var {
        if ctx.ablation == Ablation::NoInteraction {
            dot_scores_on_tape(tape, h_q, h_c)
        } else {
            interaction_scores_on_tape(tape, h_q, h_c, mvars.matcher.w_final)
        }
    };

    if negatives == 0 {
        // Full softmax over the opposite entity set; candidate position
        // equals entity id.
        let q_rows: Vec<usize> = queries.iter().map(|&q| ctx.locate(q).1).collect();
        let h_q = tape.gather_row_per_batch(h_own, Rc::new(q_rows));
        let h_cand = if c_base == 0 && tape.val(h_cand_sheet).shape()[1] == n_other {
            h_cand_sheet
        } else {
            let rows: Vec<usize> = (c_base..c_base + n_other).collect();
            tape.gather_rows_b(h_cand_sheet, Rc::new(rows))
        };
        let scores = score(tape, h_q, h_cand);
        let logp = tape.log_softmax_last(scores);
        let tgt_pos: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let sel = tape.gather_row_per_batch(logp, Rc::new(tgt_pos));
        let s = tape.sum_all(sel);
        Ok(tape.scale(s, -1.0 / full_batch as f64))
    } else {
        // Candidate lists differ per query: target first, then sampled
        // negatives. Rows are pulled from per-query slices of the batch.
        let mut total: Option<Var> = None;
        for (bi, (&q, &tgt)) in queries.iter().zip(targets).enumerate() {
            let negs = sample_distinct(rng, n_other, negatives, tgt);
            let mut rows: Vec<usize> = Vec::with_capacity(negs.len() + 1);
            rows.push(c_base + tgt as usize);
            rows.extend(negs.iter().map(|&c| c_base + c as usize));

            let own_bi = tape.slice_rows(h_own, bi, 1);
            let cand_bi = tape.slice_rows(h_cand_sheet, bi, 1);
            let h_q = tape.gather_row_per_batch(own_bi, Rc::new(vec![ctx.locate(q).1]));
            let h_c = tape.gather_rows_b(cand_bi, Rc::new(rows));
            let scores = score(tape, h_q, h_c);
            let logp = tape.log_softmax_last(scores);
            let sel = tape.gather_row_per_batch(logp, Rc::new(vec![0]));
            let s = tape.sum_all(sel);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let total = total.expect("non-empty chunk");
        Ok(tape.scale(total, -1.0 / full_batch as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KnowledgeGraph, SeedAlignment};
    use crate::matcher::{interaction_score, softmax_nll};
    use crate::pipeline::forward_query;

    fn toy_task() -> AlignmentTask {
        let tri = [(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (4, 0, 0), (1, 0, 3)];
        let g1 = KnowledgeGraph::build(5, 2, &tri).unwrap();
        let g2 = KnowledgeGraph::build(5, 2, &tri).unwrap();
        AlignmentTask::new(
            g1,
            g2,
            SeedAlignment::new(vec![(0, 0), (1, 1)]),
            SeedAlignment::new(vec![(2, 2)]),
            SeedAlignment::new(vec![(3, 3), (4, 4)]),
        )
        .unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            dim: 4,
            rel_layers: 2,
            ent_layers: 2,
            max_epochs: 2,
            patience: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn chunk_loss_matches_reference_composition() {
        let task = toy_task();
        let cfg = toy_config();
        let model = ModelParams::init(&cfg).unwrap();
        let ctx = TaskContext::new(&task, &cfg).unwrap();
        let pairs = task.train_seeds.pairs.clone();

        let mut tape = Tape::new();
        let (mvars, _) = ModelVars::lift(&mut tape, &model, false);
        let mut rng = StdRng::seed_from_u64(0);
        let loss = chunk_loss(&mut tape, &mvars, &ctx, &pairs, pairs.len(), 0, &mut rng).unwrap();
        let got = tape.val(loss).item();

        // Reference: per-query no-gradient forwards and scalar loss math.
        let mut dir1 = Vec::new();
        let mut dir2 = Vec::new();
        let w = model.matcher.w_final.data();
        let d = cfg.dim;
        for &(a, b) in &pairs {
            let (emb, _) = forward_query(&model, &ctx, (GraphTag::G1, a)).unwrap();
            let hq = &emb.h1.data()[a as usize * d..(a as usize + 1) * d];
            let scores: Vec<f64> = (0..5)
                .map(|c| interaction_score(hq, &emb.h2.data()[c * d..(c + 1) * d], w))
                .collect();
            dir1.push(softmax_nll(&scores, b as usize));

            let (emb, _) = forward_query(&model, &ctx, (GraphTag::G2, b)).unwrap();
            let hq = &emb.h2.data()[b as usize * d..(b as usize + 1) * d];
            let scores: Vec<f64> = (0..5)
                .map(|c| interaction_score(hq, &emb.h1.data()[c * d..(c + 1) * d], w))
                .collect();
            dir2.push(softmax_nll(&scores, a as usize));
        }
        let want = dir1.iter().sum::<f64>() / pairs.len() as f64
            + dir2.iter().sum::<f64>() / pairs.len() as f64;
        assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
    }

    #[test]
    fn chunked_loss_grads_equal_full_batch() {
        let task = toy_task();
        let cfg = toy_config();
        let model = ModelParams::init(&cfg).unwrap();
        let ctx = TaskContext::new(&task, &cfg).unwrap();
        let pairs = task.train_seeds.pairs.clone();

        let run = |chunks: &[&[(u32, u32)]]| -> GradStore {
            let mut store = GradStore::zeros_like(&model);
            let mut rng = StdRng::seed_from_u64(0);
            for chunk in chunks {
                let mut tape = Tape::new();
                let (mvars, flat) = ModelVars::lift(&mut tape, &model, true);
                let loss =
                    chunk_loss(&mut tape, &mvars, &ctx, chunk, pairs.len(), 0, &mut rng).unwrap();
                let mut g = tape.backward(loss);
                store.accumulate(&mut g, &flat);
            }
            store
        };

        let full = run(&[&pairs]);
        let split = run(&[&pairs[..1], &pairs[1..]]);
        for (a, b) in full.g.iter().zip(&split.g) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_negative_loss_is_finite_and_positive() {
        let task = toy_task();
        let cfg = TrainConfig {
            negative_sample_size: 2,
            ..toy_config()
        };
        let model = ModelParams::init(&cfg).unwrap();
        let ctx = TaskContext::new(&task, &cfg).unwrap();
        let mut tape = Tape::new();
        let (mvars, _) = ModelVars::lift(&mut tape, &model, false);
        let mut rng = StdRng::seed_from_u64(9);
        let pairs = task.train_seeds.pairs.clone();
        let loss = chunk_loss(&mut tape, &mvars, &ctx, &pairs, pairs.len(), 2, &mut rng).unwrap();
        let v = tape.val(loss).item();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn train_returns_best_epoch_snapshot() {
        let task = toy_task();
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 3,
            lr: 0.01,
            ..toy_config()
        };
        let out = train(&task, &cfg).unwrap();
        assert!(out.best_epoch >= 1 && out.best_epoch <= out.epochs_run);
        assert!(out.best_val_mrr > 0.0);
    }

    #[test]
    fn train_is_deterministic() {
        let task = toy_task();
        let cfg = toy_config();
        let a = train(&task, &cfg).unwrap();
        let b = train(&task, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.best_val_mrr, b.best_val_mrr);
    }

    #[test]
    fn zero_lr_training_keeps_params() {
        let task = toy_task();
        let cfg = TrainConfig {
            lr: 0.0,
            max_epochs: 2,
            patience: 2,
            ..toy_config()
        };
        let ctx = TaskContext::new(&task, &cfg).unwrap();
        let mut rng = StdRng::seed_from_u64(cfg.rng_seed);
        let fresh = ModelParams::init_for_task(&cfg, &ctx, &mut rng);
        let out = train(&task, &cfg).unwrap();
        assert_eq!(out.model.checksum(), fresh.checksum());
    }

    #[test]
    fn finetune_rejects_shape_mismatch() {
        let task = toy_task();
        let model = ModelParams::init(&toy_config()).unwrap();
        let bad = TrainConfig {
            dim: 8,
            ..toy_config()
        };
        assert!(matches!(
            finetune(model, &task, &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn finetune_runs_from_loaded_params() {
        let task = toy_task();
        let cfg = toy_config();
        let base = train(&task, &cfg).unwrap();
        let out = finetune(base.model.clone(), &task, &cfg).unwrap();
        assert!(out.best_val_mrr >= 0.0);
    }

    #[test]
    fn empty_split_is_rejected() {
        let tri = [(0, 0, 1)];
        let g1 = KnowledgeGraph::build(2, 1, &tri).unwrap();
        let g2 = KnowledgeGraph::build(2, 1, &tri).unwrap();
        let task = AlignmentTask::new(
            g1,
            g2,
            SeedAlignment::new(vec![(0, 0)]),
            SeedAlignment::default(),
            SeedAlignment::new(vec![(1, 1)]),
        )
        .unwrap();
        assert!(matches!(
            train(&task, &toy_config()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
