//! Central-difference verification of the end-to-end gradient.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kg::{AlignmentTask, KnowledgeGraph, SeedAlignment};
use crate::pipeline::optim::GradStore;
use crate::pipeline::train::chunk_loss;
use crate::pipeline::{ModelParams, ModelVars, TaskContext, TrainConfig};
use crate::tape::Tape;

/// Two isomorphic 12-entity graphs over 3 relations, related by the entity
/// relabeling i -> (5i + 3) mod 12 and the relation renaming [2, 0, 1].
/// Big enough to exercise every message path, small enough to finite-diff.
pub fn tiny_task() -> AlignmentTask {
    const TRIPLES: [(u32, u32, u32); 15] = [
        (0, 0, 1),
        (1, 0, 2),
        (2, 1, 3),
        (3, 0, 4),
        (4, 2, 5),
        (5, 0, 6),
        (6, 1, 7),
        (7, 2, 8),
        (8, 0, 9),
        (9, 1, 10),
        (10, 2, 11),
        (0, 2, 6),
        (2, 2, 9),
        (4, 1, 11),
        (1, 1, 8),
    ];
    let pi = |i: u32| (i * 5 + 3) % 12;
    let rho = [2u32, 0, 1];

    let t1: Vec<(u32, u32, u32)> = TRIPLES.to_vec();
    let t2: Vec<(u32, u32, u32)> = TRIPLES
        .iter()
        .map(|&(h, r, t)| (pi(h), rho[r as usize], pi(t)))
        .collect();
    let g1 = KnowledgeGraph::build(12, 3, &t1).expect("static triples");
    let g2 = KnowledgeGraph::build(12, 3, &t2).expect("static triples");

    let train = SeedAlignment::new(vec![(0, 3), (5, 4), (8, 7), (2, 1)]);
    let valid = SeedAlignment::new(vec![(1, 8), (9, 0)]);
    let test = SeedAlignment::new(vec![(3, 6), (4, 11), (6, 9), (7, 2), (10, 5), (11, 10)]);
    AlignmentTask::new(g1, g2, train, valid, test).expect("static splits")
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group.
    pub groups: Vec<(String, f64)>,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|&(_, e)| e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }
}

fn loss_at(model: &ModelParams, ctx: &TaskContext, pairs: &[(u32, u32)]) -> Result<f64> {
    let mut tape = Tape::new();
    let (mvars, _) = ModelVars::lift(&mut tape, model, false);
    let mut rng = StdRng::seed_from_u64(0);
    let loss = chunk_loss(&mut tape, &mvars, ctx, pairs, pairs.len(), 0, &mut rng)?;
    Ok(tape.val(loss).item())
}

/// Compares the analytic gradient of the full-batch bidirectional loss
/// against central differences, coordinate by coordinate. Errors out on the
/// first group whose worst relative error exceeds `tolerance`.
pub fn gradient_check(
    task: &AlignmentTask,
    config: &TrainConfig,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    // Sampled negatives would make the two loss evaluations disagree on
    // which candidates they see; the check always runs the full softmax.
    let cfg = TrainConfig {
        negative_sample_size: 0,
        ..config.clone()
    };
    let ctx = TaskContext::new(task, &cfg)?;
    let pairs = &task.train_seeds.pairs;
    let mut model = ModelParams::init(&cfg)?;

    let analytic = {
        let mut tape = Tape::new();
        let (mvars, reg) = ModelVars::lift(&mut tape, &model, true);
        let mut rng = StdRng::seed_from_u64(0);
        let loss = chunk_loss(&mut tape, &mvars, &ctx, pairs, pairs.len(), 0, &mut rng)?;
        let mut grads = tape.backward(loss);
        let mut store = GradStore::zeros_like(&model);
        store.accumulate(&mut grads, &reg);
        store
    };

    let names: Vec<String> = model.groups().iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::with_capacity(names.len());
    let mut worst = (String::new(), 0.0f64);
    for (gi, name) in names.iter().enumerate() {
        let len = model.groups()[gi].1.numel();
        let mut group_err = 0.0f64;
        for i in 0..len {
            let orig = model.groups()[gi].1.data()[i];
            model.groups_mut()[gi].1.data_mut()[i] = orig + epsilon;
            let lp = loss_at(&model, &ctx, pairs)?;
            model.groups_mut()[gi].1.data_mut()[i] = orig - epsilon;
            let lm = loss_at(&model, &ctx, pairs)?;
            model.groups_mut()[gi].1.data_mut()[i] = orig;

            let g_n = (lp - lm) / (2.0 * epsilon);
            let g_a = analytic.g[gi].data()[i];
            let err = if g_a.abs() < 1e-8 && g_n.abs() < 1e-8 {
                0.0
            } else {
                (g_a - g_n).abs() / g_a.abs().max(g_n.abs()).max(1e-8)
            };
            group_err = group_err.max(err);
        }
        if group_err > worst.1 {
            worst = (name.clone(), group_err);
        }
        rows.push((name.clone(), group_err));
    }

    let report = GradCheckReport {
        groups: rows,
        epsilon,
        tolerance,
    };
    if !report.passed() {
        return Err(Error::GradCheckFailed {
            group: worst.0,
            max_rel_err: worst.1,
            tolerance,
        });
    }
    Ok(report)
}
