//! `viralscope`: drives the annotation and modeling workflow one stage at a
//! time or end to end.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use viralscope::features::write_vectors_csv;
use viralscope::learners::{eval_table, ModelKind};
use viralscope::pipeline::{
    explain, run_pipeline, ExperimentConfig, PipelineError, Run, Sampling, StageError,
};
use viralscope::store::{StoreError, ViralityClass};
use viralscope::synthetic::{synthetic_vectors, write_corpus, CorpusConfig};
use viralscope_server::{router, AppState, ServerConfig, ServerError, DEFAULT_BODY_LIMIT};

#[derive(Parser, Debug)]
#[command(name = "viralscope", version, about = "Image-meme annotation and virality modeling workbench")]
struct Cli {
    /// Directory that relative paths in the configuration resolve against.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (JSON). Defaults to `<data-dir>/config.json`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample viral and non-viral tasks from the cluster manifest.
    Ingest,
    /// Serve the annotation API (and optionally a built UI).
    Serve(ServeArgs),
    /// Count caption words for every task image.
    Words,
    /// Select the word-count threshold from the word-count distributions.
    Threshold,
    /// Compute Fleiss' kappa for every label.
    Agreement,
    /// Build consensus labels and feature vectors.
    Vectorize,
    /// Fit each model on all vectors.
    Train(ModelArgs),
    /// Cross-validate each model.
    Evaluate(ModelArgs),
    /// Score a holdout set with the trained models.
    Transfer(TransferArgs),
    /// Explain the score of one image.
    Explain(ExplainArgs),
    /// Run every stage.
    Run,
    /// Write a synthetic corpus and a matching configuration.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Codebook document; the bundled codebook when absent.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Task list; the run's tasks.json when a configuration is available.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Annotation log, created if missing.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Built annotator UI served outside `/api`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BODY_LIMIT)]
    body_limit: usize,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Models to use instead of the configured ones.
    #[arg(long = "model", value_name = "KIND")]
    models: Vec<ModelKind>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Holdout vectors CSV instead of the configured one.
    #[arg(long)]
    holdout: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    image: String,
    #[arg(long, default_value = "random_forest")]
    model: ModelKind,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Clusters in each of the most- and least-posted pools.
    #[arg(long, default_value_t = 100)]
    pool: usize,
    /// Clusters between the pools, never sampled.
    #[arg(long, default_value_t = 50)]
    middle: usize,
    #[arg(long, default_value_t = 6)]
    annotators: usize,
    /// Chance that an annotator departs from the true label on a question.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Images sampled from each pool.
    #[arg(long, default_value_t = 50)]
    sample: usize,
    /// Viral vectors in the holdout set; 0 for none.
    #[arg(long, default_value_t = 20)]
    holdout: usize,
}

const DEFAULT_SEED: u64 = 2021;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for invalid input, 3 for missing input, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::MissingInput(_) | PipelineError::MissingAnnotations { .. } => 3,
                PipelineError::InvalidConfig(_) | PipelineError::UnknownImage(_) => 2,
                PipelineError::Stage { source, .. } => match source {
                    StageError::Codebook(_) => 2,
                    StageError::Store(StoreError::ValidationFailed(_) | StoreError::CorruptLog { .. }) => 2,
                    StageError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                    _ => 1,
                },
            };
        }
        if let Some(s) = cause.downcast_ref::<ServerError>() {
            return match s {
                ServerError::Codebook(_) | ServerError::Tasks { .. } => 2,
                ServerError::Store(StoreError::CorruptLog { .. }) => 2,
                ServerError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            };
        }
    }
    1
}

struct Env {
    data_dir: PathBuf,
    config_path: PathBuf,
    seed: Option<u64>,
}

impl Env {
    fn new(cli: &Cli) -> Self {
        let data_dir = cli
            .data_dir
            .clone()
            .or_else(|| cli.config.as_ref().and_then(|c| c.parent().map(Path::to_path_buf)))
            .unwrap_or_else(|| PathBuf::from("."));
        let config_path = cli.config.clone().unwrap_or_else(|| data_dir.join("config.json"));
        Env { data_dir, config_path, seed: cli.seed }
    }

    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        if !self.config_path.exists() {
            return Err(PipelineError::MissingInput(self.config_path.clone()).into());
        }
        let mut cfg = ExperimentConfig::load(&self.config_path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn run(&self) -> anyhow::Result<Run> {
        Ok(Run::new(self.config()?, &self.data_dir)?)
    }

    fn run_with_models(&self, models: &ModelArgs) -> anyhow::Result<Run> {
        let mut cfg = self.config()?;
        if !models.models.is_empty() {
            cfg.models = models.models.clone();
        }
        Ok(Run::new(cfg, &self.data_dir)?)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let ctx = Env::new(&cli);
    match cli.command {
        Command::Ingest => {
            let run = ctx.run()?;
            let tasks = run.ingest()?;
            let viral = tasks.iter().filter(|t| t.virality_class == ViralityClass::Viral).count();
            println!("{} tasks ({viral} viral, {} non-viral) -> {}", tasks.len(), tasks.len() - viral, run.layout.tasks().display());
        }
        Command::Serve(args) => serve(&ctx, args)?,
        Command::Words => {
            let run = ctx.run()?;
            let rows = run.words(&run.load_tasks()?)?;
            let total: u64 = rows.iter().map(|r| r.count as u64).sum();
            println!("{} images, {total} words -> {}", rows.len(), run.layout.word_counts().display());
        }
        Command::Threshold => {
            let run = ctx.run()?;
            let t = run.threshold(&run.load_words()?)?;
            let a = &t.analysis;
            println!(
                "threshold {} (selected {}{}), KS D = {:.4}, p = {:.3e}, separation {:.4}{}",
                t.threshold,
                a.threshold,
                if t.overridden { ", overridden" } else { "" },
                a.ks_statistic,
                a.p_value,
                a.separation,
                if a.uninformative { ", uninformative" } else { "" }
            );
        }
        Command::Agreement => {
            let run = ctx.run()?;
            let by_image = run.annotations(&run.load_tasks()?)?;
            let report = run.agreement(&by_image)?;
            print!("{}", report.to_table(&run.codebook));
        }
        Command::Vectorize => {
            let run = ctx.run()?;
            let tasks = run.load_tasks()?;
            let by_image = run.annotations(&tasks)?;
            let threshold = run.load_threshold()?.threshold;
            let vectors = run.vectorize(&tasks, &by_image, &run.load_words()?, threshold)?;
            println!("{} vectors (threshold {threshold}) -> {}", vectors.len(), run.layout.vectors().display());
        }
        Command::Train(m) => {
            let run = ctx.run_with_models(&m)?;
            for model in run.train(&run.load_vectors()?)? {
                println!("{} -> {}", model.kind(), run.layout.model(model.kind()).display());
            }
        }
        Command::Evaluate(m) => {
            let run = ctx.run_with_models(&m)?;
            let reports = run.evaluate(&run.load_vectors()?)?;
            print!("{}", eval_table(&reports));
        }
        Command::Transfer(args) => {
            let mut cfg = ctx.config()?;
            if !args.models.models.is_empty() {
                cfg.models = args.models.models.clone();
            }
            if let Some(h) = args.holdout {
                cfg.holdout = Some(h);
            }
            if cfg.holdout.is_none() {
                bail!(PipelineError::InvalidConfig("no holdout configured".into()));
            }
            let run = Run::new(cfg, &ctx.data_dir)?;
            let models = run.cfg.models.iter().map(|&k| run.load_model(k)).collect::<Result<Vec<_>, _>>()?;
            for r in run.transfer(&models)?.unwrap_or_default() {
                println!("{:<20} {}/{} predicted viral, {} hits among labeled viral", r.model.as_str(), r.predicted_viral, r.n_items, r.hits);
            }
        }
        Command::Explain(args) => {
            let run = ctx.run()?;
            let model = run.load_model(args.model)?;
            let report = explain(&args.image, &run.load_vectors()?, &model)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{} under {}: {}", report.image_id, report.model, report.verdict);
                for t in &report.traits {
                    println!("  {:>2}. {:<32} weight {:.4}  prevalence gap {:+.3}", t.rank, t.name, t.weight, t.prevalence_delta);
                }
            }
        }
        Command::Run => {
            let cfg = ctx.config()?;
            let summary = run_pipeline(&cfg, &ctx.data_dir)?;
            print!("{}", summary.to_text());
        }
        Command::Synth(args) => synth(&ctx, args)?,
    }
    Ok(())
}

fn serve(ctx: &Env, args: ServeArgs) -> anyhow::Result<()> {
    let cfg = if ctx.config_path.exists() { Some(ctx.config()?) } else { None };
    let mut sc = ServerConfig::new(&ctx.data_dir);
    sc.codebook = args.codebook.or_else(|| cfg.as_ref().and_then(|c| c.codebook.clone()));
    if let Some(t) = args.tasks {
        sc.tasks = t;
    } else if let Some(c) = &cfg {
        sc.tasks = c.output_dir.join("tasks.json");
    }
    if let Some(a) = args.annotations.or_else(|| cfg.as_ref().map(|c| c.annotations.clone())) {
        sc.annotations = a;
    }
    sc.seed = ctx.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(DEFAULT_SEED);

    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("invalid --host/--port")?;
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let state = AppState::starting();
    let app = router(state.clone(), args.static_dir.as_deref(), args.body_limit);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = tokio::spawn(viralscope_server::serve(addr, app));
        let loaded = tokio::task::spawn_blocking(move || state.load(&sc)).await?;
        // Keep serving after a failed load so clients see the 500.
        if let Err(e) = &loaded {
            eprintln!("error: {e}");
        }
        server.await??;
        Ok(())
    })
}

fn synth(ctx: &Env, args: SynthArgs) -> anyhow::Result<()> {
    let seed = ctx.seed.unwrap_or(DEFAULT_SEED);
    let dir = &ctx.data_dir;
    fs::create_dir_all(dir)?;
    let summary = write_corpus(
        dir,
        &CorpusConfig { pool: args.pool, middle: args.middle, annotators: args.annotators, noise: args.noise, seed },
    )?;
    let holdout = if args.holdout > 0 {
        let vectors = synthetic_vectors(args.holdout, 0, seed.wrapping_add(1));
        let mut buf = Vec::new();
        write_vectors_csv(&vectors, &mut buf, None)?;
        fs::write(dir.join("holdout.csv"), buf)?;
        Some(PathBuf::from("holdout.csv"))
    } else {
        None
    };
    let cfg = ExperimentConfig {
        manifest: "manifest.json".into(),
        codebook: None,
        annotations: "annotations.jsonl".into(),
        text_dir: Some("text".into()),
        ocr_command: None,
        sampling: Sampling {
            top_k: args.pool,
            bottom_k: args.pool,
            sample_from_top: args.sample.min(args.pool),
            sample_from_bottom: args.sample.min(args.pool),
        },
        seed,
        threshold: None,
        models: ModelKind::ALL.to_vec(),
        folds: 10,
        repeats: 10,
        holdout,
        output_dir: "run".into(),
    };
    let config_path = ctx.config_path.clone();
    fs::write(&config_path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    println!("{} clusters, {} annotation records -> {}", summary.clusters, summary.records, dir.display());
    println!("configuration -> {}", config_path.display());
    Ok(())
}
