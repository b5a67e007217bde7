//! Command-line surface over the alignment engine.
//!
//! Every subcommand prints machine-parseable `key=value` lines to stdout;
//! `--out` mirrors the metric block to a file. Errors go to stderr with a
//! category prefix and a nonzero exit.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ealign_core::data::{generate_synthetic, load_task, write_task_dir, DatasetManifest, SynthSpec};
use ealign_core::kg::AlignmentTask;
use ealign_core::pipeline::checkpoint;
use ealign_core::pipeline::{
    evaluate_with_ctx, finetune, gradient_check, hop_sweep, tiny_task, train, CandidatePool,
    Direction, Metrics, ModelParams, TaskContext, TrainConfig,
};
use ealign_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ealign", version, about = "Structure-only entity alignment over knowledge-graph pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch on a task directory.
    Pretrain(PretrainArgs),
    /// Continue training a checkpoint on a (new) task.
    Finetune(FinetuneArgs),
    /// Evaluate a frozen checkpoint on another task's test split.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint on a chosen split of a task.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Generate a synthetic task directory with known ground truth.
    GenSynth(GenSynthArgs),
    /// Evaluate or train across a range of anchor-hop radii.
    HopSweep(HopSweepArgs),
}

/// Training-configuration flags shared by the model-building subcommands.
/// Precedence: defaults, then `--config` file, then explicit flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Key-value file (`key = value` per line, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    /// Sets both encoder depths.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    anchor_hop: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Negatives per query; 0 scores against the full opposite entity set.
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    valid_candidate_cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of: none, no_relgraph, no_parallel, no_interaction.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    relgraph_include_inverses: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            apply_config_file(&mut cfg, path)?;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.layers {
            cfg.rel_layers = v;
            cfg.ent_layers = v;
        }
        if let Some(v) = self.anchor_hop {
            cfg.anchor_hop = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.negatives {
            cfg.negative_sample_size = v;
        }
        if let Some(v) = self.valid_candidate_cap {
            cfg.valid_candidate_cap = v;
        }
        if let Some(v) = self.seed {
            cfg.rng_seed = v;
        }
        if let Some(v) = &self.ablation {
            cfg.ablation = v.parse()?;
        }
        if let Some(v) = self.relgraph_include_inverses {
            cfg.relgraph_include_inverses = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad("expected key=value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
        let parse_f64 = || value.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        match key {
            "dim" => cfg.dim = parse_usize()?,
            "layers" => {
                cfg.rel_layers = parse_usize()?;
                cfg.ent_layers = cfg.rel_layers;
            }
            "rel_layers" => cfg.rel_layers = parse_usize()?,
            "ent_layers" => cfg.ent_layers = parse_usize()?,
            "anchor_hop" => cfg.anchor_hop = parse_usize()?,
            "anchor_expand_cap" => cfg.anchor_expand_cap = parse_usize()?,
            "lr" => cfg.lr = parse_f64()?,
            "batch_size" => cfg.batch_size = parse_usize()?,
            "epochs" | "max_epochs" => cfg.max_epochs = parse_usize()?,
            "patience" => cfg.patience = parse_usize()?,
            "weight_decay" => cfg.weight_decay = parse_f64()?,
            "negatives" | "negative_sample_size" => cfg.negative_sample_size = parse_usize()?,
            "valid_candidate_cap" => cfg.valid_candidate_cap = parse_usize()?,
            "seed" | "rng_seed" => {
                cfg.rng_seed = value.parse().map_err(|e| bad(format!("{key}: {e}")))?
            }
            "ablation" => cfg.ablation = value.parse()?,
            "relgraph_include_inverses" => {
                cfg.relgraph_include_inverses =
                    value.parse().map_err(|e| bad(format!("{key}: {e}")))?
            }
            other => return Err(bad(format!("unknown config key '{other}'"))),
        }
    }
    Ok(())
}

fn config_echo(cfg: &TrainConfig) -> String {
    format!(
        "dim={}\nrel_layers={}\nent_layers={}\nanchor_hop={}\nanchor_expand_cap={}\nlr={}\nbatch_size={}\nmax_epochs={}\npatience={}\nweight_decay={}\nnegative_sample_size={}\nvalid_candidate_cap={}\nrng_seed={}\nablation={}\nrelgraph_include_inverses={}\n",
        cfg.dim,
        cfg.rel_layers,
        cfg.ent_layers,
        cfg.anchor_hop,
        cfg.anchor_expand_cap,
        cfg.lr,
        cfg.batch_size,
        cfg.max_epochs,
        cfg.patience,
        cfg.weight_decay,
        cfg.negative_sample_size,
        cfg.valid_candidate_cap,
        cfg.rng_seed,
        cfg.ablation,
        cfg.relgraph_include_inverses,
    )
}

#[derive(Args)]
struct PretrainArgs {
    /// Task directory (rel_triples_1, rel_triples_2, ent_links, optional folds).
    #[arg(long)]
    task: PathBuf,
    /// Where the trained checkpoint is written.
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, default_value = "mean")]
    direction: String,
    /// Mirror the final metric block to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump the merged relation graph as `src<TAB>dst<TAB>type` lines.
    #[arg(long)]
    dump_relgraph: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    task: PathBuf,
    /// Checkpoint to start from.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, default_value = "mean")]
    direction: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "mean")]
    direction: String,
    /// Candidate pool: `test` ranks against the evaluation pairs' entities,
    /// `all` against the whole opposite graph.
    #[arg(long, default_value = "test")]
    candidates: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Which alignment split to rank: train, valid, or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "mean")]
    direction: String,
    #[arg(long, default_value = "test")]
    candidates: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Task directory; defaults to the bundled two-graph check task.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Small defaults keep the coordinate-wise sweep under a minute.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    anchor_hop: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    entities: usize,
    #[arg(long)]
    relations: usize,
    #[arg(long)]
    avg_degree: f64,
    #[arg(long, default_value_t = 0.0)]
    edge_drop_1: f64,
    #[arg(long, default_value_t = 0.0)]
    edge_drop_2: f64,
    /// Give the second graph a fresh relation vocabulary.
    #[arg(long)]
    relation_renaming: bool,
    #[arg(long, default_value_t = 0.2)]
    seed_fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HopSweepArgs {
    #[arg(long)]
    task: PathBuf,
    /// Frozen checkpoint; omitting it trains a fresh model per k.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}: {e}", category(&e));
        std::process::exit(1);
    }
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::InvalidConfig(_) | Error::InvalidSynthSpec(_) => "config error",
        Error::Io(_) => "io error",
        Error::MalformedLine { .. }
        | Error::TripleOutOfRange { .. }
        | Error::EmptyTripleSet
        | Error::EntityOutOfRange { .. }
        | Error::InvalidAlignmentPair { .. }
        | Error::DuplicateAlignmentEntity { .. }
        | Error::OverlappingSplits { .. }
        | Error::DegenerateSynthGraph { .. } => "data error",
        Error::Divergence { .. } | Error::NonFinite { .. } => "training error",
        Error::GradCheckFailed { .. } => "gradient check failure",
        Error::Checkpoint(_) | Error::Json(_) => "checkpoint error",
        Error::ShapeMismatch { .. }
        | Error::EmptyCandidates { .. }
        | Error::TargetNotInCandidates { .. } => "internal error",
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Finetune(args) => cmd_finetune(args),
        Cmd::Transfer(args) => cmd_transfer(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::GradCheck(args) => cmd_grad_check(args),
        Cmd::GenSynth(args) => cmd_gen_synth(args),
        Cmd::HopSweep(args) => cmd_hop_sweep(args),
    }
}

fn load_dir(dir: &Path, rng_seed: u64) -> Result<AlignmentTask> {
    Ok(load_task(&DatasetManifest::from_dir(dir, rng_seed))?.task)
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text)?;
    }
    Ok(())
}

fn eval_block(
    model: &ModelParams,
    task: &AlignmentTask,
    pairs: &ealign_core::kg::SeedAlignment,
    direction: &str,
    candidates: &str,
) -> Result<Metrics> {
    let direction: Direction = direction.parse()?;
    let pool: CandidatePool = candidates.parse()?;
    let ctx = TaskContext::new(task, &model.config)?;
    evaluate_with_ctx(model, &ctx, pairs, direction, pool)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    print!("{}", config_echo(&cfg));
    let task = load_dir(&args.task, cfg.rng_seed)?;

    if let Some(path) = &args.dump_relgraph {
        let ctx = TaskContext::new(&task, &cfg)?;
        let mut buf = Vec::new();
        ctx.rel_graph.dump_edge_list(&mut buf)?;
        fs::write(path, buf)?;
    }

    let outcome = train(&task, &cfg)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_val_mrr={:.6}", outcome.best_val_mrr);
    println!("epochs_run={}", outcome.epochs_run);
    checkpoint::save(&outcome.model, &args.out_model)?;
    println!("model={}", args.out_model.display());

    if !task.test_pairs.is_empty() {
        let metrics = eval_block(&outcome.model, &task, &task.test_pairs, &args.direction, "test")?;
        emit(&metrics.to_text(), args.out.as_ref())?;
    }
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    print!("{}", config_echo(&cfg));
    let start = checkpoint::load(&args.model)?;
    let task = load_dir(&args.task, cfg.rng_seed)?;
    let outcome = finetune(start, &task, &cfg)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_val_mrr={:.6}", outcome.best_val_mrr);
    println!("epochs_run={}", outcome.epochs_run);
    checkpoint::save(&outcome.model, &args.out_model)?;
    println!("model={}", args.out_model.display());

    if !task.test_pairs.is_empty() {
        let metrics = eval_block(&outcome.model, &task, &task.test_pairs, &args.direction, "test")?;
        emit(&metrics.to_text(), args.out.as_ref())?;
    }
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let model = checkpoint::load(&args.model)?;
    let task = load_dir(&args.task, model.config.rng_seed)?;
    let metrics = eval_block(&model, &task, &task.test_pairs, &args.direction, &args.candidates)?;
    emit(&metrics.to_text(), args.out.as_ref())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.model)?;
    let task = load_dir(&args.task, model.config.rng_seed)?;
    let pairs = match args.split.as_str() {
        "train" => &task.train_seeds,
        "valid" => &task.valid_pairs,
        "test" => &task.test_pairs,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split '{other}'; expected train, valid, or test"
            )))
        }
    };
    let metrics = eval_block(&model, &task, pairs, &args.direction, &args.candidates)?;
    emit(&metrics.to_text(), args.out.as_ref())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let task = match &args.task {
        Some(dir) => load_dir(dir, args.seed)?,
        None => tiny_task(),
    };
    let cfg = TrainConfig {
        dim: args.dim,
        rel_layers: args.layers,
        ent_layers: args.layers,
        anchor_hop: args.anchor_hop,
        rng_seed: args.seed,
        ..TrainConfig::default()
    };
    println!("epsilon={}", args.epsilon);
    println!("tolerance={}", args.tolerance);
    match gradient_check(&task, &cfg, args.epsilon, args.tolerance) {
        Ok(report) => {
            for (name, err) in &report.groups {
                println!("group={name} rel_err={err:.3e}");
            }
            println!("max_rel_err={:.3e}", report.max_rel_err());
            println!("result=PASS");
            Ok(())
        }
        Err(e) => {
            if let Error::GradCheckFailed { max_rel_err, .. } = &e {
                println!("max_rel_err={max_rel_err:.3e}");
            }
            println!("result=FAIL");
            Err(e)
        }
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_entities: args.entities,
        num_relations: args.relations,
        avg_degree: args.avg_degree,
        edge_drop_1: args.edge_drop_1,
        edge_drop_2: args.edge_drop_2,
        relation_renaming: args.relation_renaming,
        seed_fraction: args.seed_fraction,
        rng_seed: args.seed,
    };
    let out = generate_synthetic(&spec)?;
    write_task_dir(&out.task, &args.out_dir)?;
    println!("out_dir={}", args.out_dir.display());
    println!("entities_1={}", out.task.g1.num_entities());
    println!("entities_2={}", out.task.g2.num_entities());
    println!("triples_1={}", out.task.g1.triples().len() / 2);
    println!("triples_2={}", out.task.g2.triples().len() / 2);
    println!("train={}", out.task.train_seeds.len());
    println!("valid={}", out.task.valid_pairs.len());
    println!("test={}", out.task.test_pairs.len());
    Ok(())
}

fn cmd_hop_sweep(args: HopSweepArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let task = load_dir(&args.task, cfg.rng_seed)?;
    let base = match &args.model {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };
    let rows = hop_sweep(&task, &cfg, &args.ks, base.as_ref())?;
    let mut text = String::new();
    for (k, m) in &rows {
        text.push_str(&format!(
            "k={k} mrr={:.6} hits@1={:.6} hits@5={:.6} hits@10={:.6} degenerate={}\n",
            m.mrr, m.hits_at_1, m.hits_at_5, m.hits_at_10, m.num_degenerate_queries
        ));
    }
    emit(&text, args.out.as_ref())
}
