//! Command-line surface: one thin binary over the library.
//!
//! Exit codes: 0 success, 2 config error, 3 capacity error, 4 corrupt file,
//! 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregator::ProjectionLayer;
use crate::backbone::BackboneWeights;
use crate::bank::DemonstrationBank;
use crate::bench::{bench_throughput, run_grid, Mode, RunSpec, Selection};
use crate::config::AppConfig;
use crate::corpus_io;
use crate::engine::attention_mass;
use crate::error::{Error, Result};
use crate::prompt::build_prompt_baseline;
use crate::report;
use crate::rices::rices_rank;
use crate::synth::{corpus_digest, synth_corpus, synth_eval_set};
use crate::trainer::{batch_for_step, load_checkpoint, save_checkpoint, train_step, TrainerState};
use crate::weights_io::{load_weights_expecting, save_weights};

#[derive(Parser)]
#[command(
    name = "icl-fusion",
    version,
    about = "Fused-virtual-token compression for multimodal in-context learning"
)]
struct Cli {
    /// JSON config file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Backbone weight file; deterministic init from the config seed when
    /// absent.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,

    /// Demonstration bank file.
    #[arg(long, global = true)]
    bank: Option<PathBuf>,

    /// Run seed for corpora, evaluation sets, and demo selection
    /// (the backbone seed stays in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where reports and artifacts go.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Shot counts, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 4, 8, 16])]
    shots: Vec<usize>,

    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Mode::Fused, Mode::Baseline])]
    modes: Vec<Mode>,

    #[arg(long, value_enum, default_value_t = Selection::Random)]
    selection: Selection,

    #[arg(long, default_value_t = 8)]
    queries: usize,

    #[arg(long, default_value_t = 32)]
    pool: usize,

    #[arg(long, default_value_t = 8)]
    max_new: usize,

    /// Timed repetitions (throughput), median reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,

    #[arg(long, default_value_t = 3)]
    warmup: usize,

    /// Trained projection checkpoint; noise-initialized projection when
    /// absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the projection layer on an interleaved synthetic corpus.
    Train {
        /// Training corpus (JSONL); synthesized when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: u64,
        /// Instances to synthesize when no corpus file is given.
        #[arg(long, default_value_t = 256)]
        synth_instances: usize,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a synthetic interleaved training corpus on disk.
    SynthCorpus {
        #[arg(long, default_value_t = 64)]
        instances: usize,
    },
    /// Populate a demonstration bank from a demo corpus.
    Aggregate {
        /// Demo corpus (JSONL with image_path/instruction/label).
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run generation over synthetic queries and print the outputs.
    Generate {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Perplexity-vs-shots curves (no generation).
    PplCurve {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Throughput benchmark (median of timed repetitions).
    Bench {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Full experiment grid: cost reports, per-query records, attention
    /// masses, plot script.
    Grid {
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Attention-mass analysis of baseline prompts.
    AttnMap {
        #[command(flatten)]
        grid: GridArgs,
        /// Layer to analyze; last layer when absent.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Rank a demonstration pool against synthetic queries by image cosine.
    Rices {
        #[arg(long, default_value_t = 16)]
        pool: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        queries: usize,
    },
}

pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    config: AppConfig,
    weights: BackboneWeights,
    run_seed: u64,
    out_dir: PathBuf,
    bank_path: Option<PathBuf>,
}

fn load_context(cli: &Cli) -> Result<Context> {
    let config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    let weights = match &cli.weights {
        Some(path) if path.exists() => load_weights_expecting(path, &config.model)?,
        Some(path) => {
            return Err(Error::Config(format!(
                "weight file {} does not exist",
                path.display()
            )))
        }
        None => BackboneWeights::init(config.model.clone())?,
    };
    fs::create_dir_all(&cli.out_dir)?;
    Ok(Context {
        run_seed: cli.seed.unwrap_or(config.train.seed),
        config,
        weights,
        out_dir: cli.out_dir.clone(),
        bank_path: cli.bank.clone(),
    })
}

fn projection_for(ctx: &Context, checkpoint: &Option<PathBuf>) -> Result<ProjectionLayer> {
    match checkpoint {
        Some(path) => {
            let state = load_checkpoint(path, &ctx.config.model, &ctx.config.train)?;
            Ok(state.projection)
        }
        None => Ok(ProjectionLayer::init(
            ctx.config.model.d_model,
            ctx.config.train.seed,
        )),
    }
}

fn spec_from(ctx: &Context, args: &GridArgs, max_new: usize) -> RunSpec {
    RunSpec {
        shots: args.shots.clone(),
        modes: args.modes.clone(),
        selection: args.selection,
        n_queries: args.queries,
        pool_size: args.pool,
        seed: ctx.run_seed,
        max_new_tokens: max_new,
        repetitions: args.reps,
        warmup: args.warmup,
        aggregation_layers: ctx.config.aggregation_layers,
        attn_queries: 2,
    }
}

fn execute(cli: Cli) -> Result<()> {
    let ctx = load_context(&cli)?;
    match &cli.command {
        Command::Train {
            corpus,
            steps,
            synth_instances,
            resume,
        } => cmd_train(&ctx, corpus, *steps, *synth_instances, resume),
        Command::SynthCorpus { instances } => cmd_synth_corpus(&ctx, *instances),
        Command::Aggregate { demos, checkpoint } => cmd_aggregate(&ctx, demos, checkpoint),
        Command::Generate { grid } => cmd_generate(&ctx, grid),
        Command::PplCurve { grid } => cmd_ppl_curve(&ctx, grid),
        Command::Bench { grid } => cmd_bench(&ctx, grid),
        Command::Grid { grid } => cmd_grid(&ctx, grid),
        Command::AttnMap { grid, layer } => cmd_attn_map(&ctx, grid, layer),
        Command::Rices { pool, k, queries } => cmd_rices(&ctx, *pool, *k, *queries),
    }
}

fn cmd_train(
    ctx: &Context,
    corpus_path: &Option<PathBuf>,
    steps: u64,
    synth_instances: usize,
    resume: &Option<PathBuf>,
) -> Result<()> {
    let corpus = match corpus_path {
        Some(path) => corpus_io::read_training_corpus(path)?,
        None => synth_corpus(synth_instances, ctx.run_seed, &ctx.config.model),
    };
    println!(
        "training corpus: {} instances (digest {})",
        corpus.len(),
        corpus_digest(&corpus).short()
    );

    let mut state = match resume {
        Some(path) => load_checkpoint(path, &ctx.config.model, &ctx.config.train)?,
        None => TrainerState::new(ctx.config.model.clone(), ctx.config.train.clone())?,
    };

    let log_path = ctx.out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    let every = ctx.config.train.checkpoint_every_steps as u64;
    if corpus.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    for _ in 0..steps {
        let batch = batch_for_step(&corpus, state.step, state.train_config.effective_batch);
        let r = train_step(&mut state, &batch, &ctx.weights)?;
        let line = serde_json::json!({
            "step": r.step,
            "loss": r.mean_loss,
            "grad_norm": r.grad_norm,
            "wall_time_ns": r.wall_time_ns,
            "skipped": r.skipped,
        });
        writeln!(log, "{line}")?;
        if every > 0 && r.step % every == 0 {
            let path = ctx.out_dir.join(format!("projection_step{:06}.fckp", r.step));
            save_checkpoint(&state, &path)?;
        }
    }

    let ckpt = ctx.out_dir.join("projection.fckp");
    save_checkpoint(&state, &ckpt)?;
    let wfile = ctx.out_dir.join("backbone.ficl");
    save_weights(&ctx.weights, &wfile)?;
    let first = state.loss_history.first().copied().unwrap_or(f64::NAN);
    let last = state.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {steps} steps: loss {first:.4} -> {last:.4}; checkpoint {}, weights {}, log {}",
        ckpt.display(),
        wfile.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_synth_corpus(ctx: &Context, instances: usize) -> Result<()> {
    let corpus = synth_corpus(instances, ctx.run_seed, &ctx.config.model);
    let path = corpus_io::write_training_corpus(&ctx.out_dir, &corpus)?;
    println!(
        "wrote {} instances to {} (digest {})",
        corpus.len(),
        path.display(),
        corpus_digest(&corpus).short()
    );
    Ok(())
}

fn cmd_aggregate(ctx: &Context, demos: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let bank_path = ctx.bank_path.clone().ok_or_else(|| {
        Error::Config("aggregate requires --bank to name the output bank file".into())
    })?;
    let demos = corpus_io::load_demonstrations(demos)?;
    let proj = projection_for(ctx, checkpoint)?;
    let agg = ctx.config.aggregation();
    let bank = if bank_path.exists() {
        DemonstrationBank::load(&bank_path)?
    } else {
        DemonstrationBank::new()
    };
    for demo in &demos {
        bank.get_or_aggregate(demo, &agg, &ctx.weights, &proj)?;
    }
    bank.save(&bank_path)?;
    println!(
        "bank {}: {} entries ({} hits, {} misses this run)",
        bank_path.display(),
        bank.len(),
        bank.hits(),
        bank.misses()
    );
    Ok(())
}

fn cmd_generate(ctx: &Context, args: &GridArgs) -> Result<()> {
    let proj = projection_for(ctx, &args.checkpoint)?;
    let spec = spec_from(ctx, args, args.max_new.max(1));
    let out = run_grid(&spec, &ctx.weights, &proj, &ctx.config.templates)?;
    for rec in &out.queries {
        println!(
            "[{} {}-shot] query {} -> {:?} (ppl {})",
            rec.mode,
            rec.n_shots,
            rec.query_id,
            rec.output,
            rec.ppl
                .map(|p| format!("{p:.3}"))
                .unwrap_or_else(|| "inf".into())
        );
    }
    report::write_query_records_jsonl(&ctx.out_dir.join("queries.jsonl"), &out.queries)?;
    report_cell_errors(&out.cell_errors)
}

fn cmd_ppl_curve(ctx: &Context, args: &GridArgs) -> Result<()> {
    let proj = projection_for(ctx, &args.checkpoint)?;
    let spec = spec_from(ctx, args, 0);
    let out = run_grid(&spec, &ctx.weights, &proj, &ctx.config.templates)?;
    report::write_cost_reports_csv(&ctx.out_dir.join("ppl_curve.csv"), &out.cells)?;
    report::write_query_records_jsonl(&ctx.out_dir.join("queries.jsonl"), &out.queries)?;
    report::write_plot_script(&ctx.out_dir)?;
    for cell in &out.cells {
        println!(
            "{} {}-shot: mean ppl {} ({} overflowed)",
            cell.mode,
            cell.n_shots,
            cell.ppl_mean
                .map(|p| format!("{p:.3}"))
                .unwrap_or_else(|| "-".into()),
            cell.ppl_inf_count
        );
    }
    report_cell_errors(&out.cell_errors)
}

fn cmd_bench(ctx: &Context, args: &GridArgs) -> Result<()> {
    if let Some(path) = &ctx.bank_path {
        if !path.exists() {
            return Err(Error::Config(format!(
                "bank file {} does not exist",
                path.display()
            )));
        }
    }
    let proj = projection_for(ctx, &args.checkpoint)?;
    let spec = spec_from(ctx, args, args.max_new.max(1));
    let reports = bench_throughput(&spec, &ctx.weights, &proj, &ctx.config.templates)?;
    report::write_cost_reports_csv(&ctx.out_dir.join("bench.csv"), &reports)?;
    report::write_plot_script(&ctx.out_dir)?;
    println!("mode,n_shots,prompt_len,tokens_per_s,queries_per_s");
    for r in &reports {
        println!(
            "{},{},{},{:.2},{:.3}",
            r.mode, r.n_shots, r.prompt_len, r.tokens_per_second, r.queries_per_second
        );
    }
    Ok(())
}

fn cmd_grid(ctx: &Context, args: &GridArgs) -> Result<()> {
    let proj = projection_for(ctx, &args.checkpoint)?;
    let spec = spec_from(ctx, args, args.max_new);
    let out = run_grid(&spec, &ctx.weights, &proj, &ctx.config.templates)?;
    report::write_cost_reports_csv(&ctx.out_dir.join("cells.csv"), &out.cells)?;
    report::write_query_records_jsonl(&ctx.out_dir.join("queries.jsonl"), &out.queries)?;
    report::write_attention_mass_csv(&ctx.out_dir.join("attn_mass.csv"), &out.attn_rows)?;
    report::write_plot_script(&ctx.out_dir)?;
    println!(
        "grid: {} cells, {} query records, {} attention rows -> {}",
        out.cells.len(),
        out.queries.len(),
        out.attn_rows.len(),
        ctx.out_dir.display()
    );
    report_cell_errors(&out.cell_errors)
}

fn cmd_attn_map(ctx: &Context, args: &GridArgs, layer: &Option<usize>) -> Result<()> {
    let layer = layer.unwrap_or(ctx.config.model.n_layers - 1);
    let (pool, queries) = synth_eval_set(
        args.pool,
        args.queries,
        ctx.run_seed,
        &ctx.config.model,
        &ctx.config.templates.caption_instruction(),
    )?;
    let mut rows = Vec::new();
    for &shots in args.shots.iter().filter(|&&s| s >= 1) {
        for (query_id, q) in queries.iter().enumerate() {
            let demos: Vec<_> = pool.iter().take(shots).cloned().collect();
            let prompt = build_prompt_baseline(&demos, &q.query, &ctx.weights)?;
            let mass = attention_mass(&prompt, &ctx.weights, layer)?;
            for (seg, &fraction) in prompt.segments.iter().zip(mass.fractions.iter()) {
                rows.push(report::AttnMassRow {
                    n_shots: shots,
                    query_id,
                    layer,
                    segment: seg.kind.to_string(),
                    group: match seg.kind {
                        crate::prompt::SegmentKind::VisualDemo(_) => "demo_visual".into(),
                        crate::prompt::SegmentKind::TextDemo(_) => "demo_text".into(),
                        crate::prompt::SegmentKind::VisualQuery => "query_visual".into(),
                        crate::prompt::SegmentKind::TextQuery => "query_text".into(),
                        other => other.to_string(),
                    },
                    fraction,
                });
            }
        }
    }
    report::write_attention_mass_csv(&ctx.out_dir.join("attn_mass.csv"), &rows)?;
    // headline numbers: demo-visual vs demo-text mass
    let total = |group: &str| -> (f64, usize) {
        let sel: Vec<f64> = rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.fraction)
            .collect();
        (sel.iter().sum::<f64>(), sel.len())
    };
    let (dv, nv) = total("demo_visual");
    let (dt, nt) = total("demo_text");
    println!(
        "layer {layer}: demo_visual mass {:.4} over {nv} segments, demo_text mass {:.4} over {nt} segments",
        dv, dt
    );
    Ok(())
}

fn cmd_rices(ctx: &Context, pool_size: usize, k: usize, n_queries: usize) -> Result<()> {
    let (pool, queries) = synth_eval_set(
        pool_size,
        n_queries,
        ctx.run_seed,
        &ctx.config.model,
        &ctx.config.templates.caption_instruction(),
    )?;
    if k > pool.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds pool size {}",
            pool.len()
        )));
    }
    for (qi, q) in queries.iter().enumerate() {
        let ranked = rices_rank(&q.query.image, &pool, &ctx.weights)?;
        let top: Vec<String> = ranked
            .iter()
            .take(k)
            .map(|&i| format!("{i}:{}", pool[i].label.trim_end_matches('.')))
            .collect();
        println!("query {qi} (gold {:?}): top-{k} = [{}]", q.gold, top.join(", "));
    }
    Ok(())
}

fn report_cell_errors(errors: &[String]) -> Result<()> {
    for e in errors {
        eprintln!("cell failed: {e}");
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{} grid cell(s) failed", errors.len())))
    }
}
