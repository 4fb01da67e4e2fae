//! `unirqr`: validate corpora, train, evaluate, build ablation tables, chat
//! and serve, all from one binary.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use unirqr_core::config::{RetrieverKind, RunConfig};
use unirqr_core::corpus::{load_corpus, write_corpus, Ablation, CorpusConfig};
use unirqr_core::eval::harness::{default_mode, evaluate_model, write_predictions, TableKind};
use unirqr_core::eval::{run_ablation_matrix, EvalMode, EvalOptions};
use unirqr_core::model::{Checkpoint, DecodingConfig, Strategy};
use unirqr_core::pipeline::{respond_with_mode, ForceMode, PipelineConfig};
use unirqr_core::retrieval::{HttpConfig, HttpRetriever, MockRetriever, Retriever};
use unirqr_core::synthetic::{generate, SyntheticConfig};
use unirqr_core::types::{validate_episode, Episode};
use unirqr_core::workflow::{prepare, smoke_config, train_prepared, FileSink};
use unirqr_core::DialogueTurn;

#[derive(Parser)]
#[command(name = "unirqr", version, about = "Unified retrieval decision, query and response generation")]
struct Cli {
    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a JSON-lines corpus and list every violation (exit 1 if any).
    Validate {
        corpus: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train from a config file; writes checkpoints and metrics.jsonl.
    Train {
        config: PathBuf,
        /// Overrides train.output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides train.ablation.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on a corpus and write report and prediction files.
    Evaluate {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Configuration to evaluate as; defaults to the one it was trained as.
        #[arg(long)]
        ablation: Option<String>,
        /// Output directory; defaults to `eval-<ablation>-<mode>` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the ablation tables from `<dir>/<config>.ckpt.json` checkpoints.
    Ablate {
        checkpoint_dir: PathBuf,
        corpus: PathBuf,
        /// Output directory; defaults to `<checkpoint_dir>/tables`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive chat printing the full trace of every turn.
    Chat {
        checkpoint: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, value_enum, default_value = "auto")]
        mode: ForceArg,
    },
    /// Run the HTTP chat API.
    Serve {
        checkpoint: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory with the built console bundle, served at /console.
        #[arg(long, default_value = "webconsole/dist")]
        console: PathBuf,
        /// JSON-lines file for persisting sessions; in-memory when omitted.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Write the synthetic corpus used by the smoke tests.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0.5)]
        retrieval_fraction: f64,
        #[arg(long, default_value_t = 0.3)]
        preamble_probability: f64,
    },
    /// Write a config file with every default spelled out.
    Init {
        out: PathBuf,
        /// Corpus path, relative to the config file's directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Use the fast settings tuned for the synthetic corpus.
        #[arg(long)]
        smoke: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "with_rd")]
    WithRd,
    #[value(name = "without_rd")]
    WithoutRd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForceArg {
    Auto,
    Always,
    Never,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverArg {
    Mock,
    Http,
}

#[derive(clap::Args)]
struct RetrievalArgs {
    /// Defaults to the config's retriever kind, else mock.
    #[arg(long, value_enum)]
    retriever: Option<RetrieverArg>,
    /// Corpus whose gold knowledge backs the mock retriever.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Search URL template containing `{query}`; the key is read from UNIRQR_SEARCH_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    /// Run config supplying retriever, decoding and context settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).with_ansi(ansi).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Validate { corpus, json } => validate(&corpus, json),
        Command::Train { config, output_dir, ablation } => train(&config, output_dir, ablation, seed).map(|_| ExitCode::SUCCESS),
        Command::Evaluate { checkpoint, corpus, mode, ablation, out } => {
            evaluate(&checkpoint, &corpus, mode, ablation, out, seed).map(|_| ExitCode::SUCCESS)
        }
        Command::Ablate { checkpoint_dir, corpus, out } => ablate(&checkpoint_dir, &corpus, out, seed).map(|_| ExitCode::SUCCESS),
        Command::Chat { checkpoint, retrieval, mode } => chat(&checkpoint, &retrieval, mode, seed).map(|_| ExitCode::SUCCESS),
        Command::Serve { checkpoint, retrieval, port, host, console, sessions } => {
            serve(&checkpoint, &retrieval, SocketAddr::new(host, port), console, sessions, seed).map(|_| ExitCode::SUCCESS)
        }
        Command::Synth { out, episodes, retrieval_fraction, preamble_probability } => {
            let cfg = SyntheticConfig { episodes, retrieval_fraction, preamble_probability, seed: seed.unwrap_or(0) };
            let eps = generate(&cfg);
            write_corpus(&out, &eps).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Init { out, corpus, smoke } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            let cfg = if smoke { smoke_config(corpus) } else { RunConfig::new(CorpusConfig::new(corpus)) };
            std::fs::write(&out, cfg.to_toml())?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_ablation(name: &str) -> Result<Ablation> {
    Ablation::from_name(name).with_context(|| {
        let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("unknown ablation {name:?}; expected one of {}", names.join(", "))
    })
}

fn reseed(d: &mut DecodingConfig, seed: Option<u64>) {
    if let (Strategy::Sample { seed: s, .. }, Some(new)) = (&mut d.strategy, seed) {
        *s = new;
    }
}

fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    load_corpus(&CorpusConfig::new(path)).with_context(|| format!("loading corpus {}", path.display()))
}

fn validate(path: &Path, json: bool) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut episodes = 0usize;
    let mut problems: Vec<(usize, Option<String>, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Episode>(line) {
            Ok(e) => {
                episodes += 1;
                for v in validate_episode(&e) {
                    problems.push((i + 1, Some(e.id.clone()), v.to_string()));
                }
            }
            Err(err) => problems.push((i + 1, None, format!("malformed record: {err}"))),
        }
    }
    if json {
        let list: Vec<_> = problems
            .iter()
            .map(|(line, id, msg)| serde_json::json!({ "line": line, "episode_id": id, "message": msg }))
            .collect();
        println!("{}", serde_json::json!({ "episodes": episodes, "violations": list }));
    } else {
        for (line, id, msg) in &problems {
            match id {
                Some(id) => println!("line {line} ({id}): {msg}"),
                None => println!("line {line}: {msg}"),
            }
        }
        println!("{episodes} episodes, {} violations", problems.len());
    }
    Ok(if problems.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train(path: &Path, output_dir: Option<PathBuf>, ablation: Option<String>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.train.output_dir = dir;
    }
    if let Some(a) = ablation {
        cfg.train.ablation = parse_ablation(&a)?;
    }
    if let Some(s) = seed {
        cfg.train.config.seed = s;
        cfg.model.init_seed = s;
        cfg.corpus.seed = s;
    }
    let prepared = prepare(&cfg)?;
    tracing::info!(
        "training {} on {} instances from {} episodes ({} vocabulary entries)",
        cfg.train.ablation,
        prepared.instances.len(),
        prepared.episodes.len(),
        prepared.model.tokenizer.len()
    );
    let dir = cfg.train.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut sink = FileSink::create(&dir)?;
    let start = std::time::Instant::now();
    let (_, report) = train_prepared(&cfg, prepared, &mut sink)?;
    sink.finish()?;
    println!(
        "{} steps in {:.1}s; loss {:.4} -> {:.4}; checkpoint {}",
        report.steps,
        start.elapsed().as_secs_f64(),
        report.first_total.unwrap_or(f64::NAN),
        report.last_total.unwrap_or(f64::NAN),
        unirqr_core::eval::harness::checkpoint_path(&dir, cfg.train.ablation).display()
    );
    Ok(())
}

fn evaluate(
    ckpt_path: &Path,
    corpus: &Path,
    mode: Option<ModeArg>,
    ablation: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.restore_model()?;
    let episodes = load_episodes(corpus)?;
    let ablation = match ablation {
        Some(a) => parse_ablation(&a)?,
        None => ckpt.config.ablation,
    };
    if ablation != ckpt.config.ablation {
        tracing::warn!("checkpoint was trained as {}, evaluating as {ablation}", ckpt.config.ablation);
    }
    let mode = match mode {
        Some(ModeArg::WithRd) => EvalMode::WithRd,
        Some(ModeArg::WithoutRd) => EvalMode::WithoutRd,
        None => default_mode(ablation),
    };
    let mut opts = EvalOptions { mode: Some(mode), ..EvalOptions::default() };
    reseed(&mut opts.query_decoding, seed);
    reseed(&mut opts.response_decoding, seed);
    let (report, records) = evaluate_model(&model, &episodes, ablation, ckpt.config.max_context_turns, &opts)?;

    let mode_name = match mode {
        EvalMode::WithRd => "with_rd",
        EvalMode::WithoutRd => "without_rd",
    };
    let out = out.unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).join(format!("eval-{ablation}-{mode_name}")));
    std::fs::create_dir_all(&out)?;
    let doc = serde_json::json!({
        "checkpoint": ckpt_path.display().to_string(),
        "corpus": corpus.display().to_string(),
        "ablation": ablation,
        "mode": mode,
        "report": report,
    });
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    let text = report.render_text();
    std::fs::write(out.join("report.txt"), &text)?;
    write_predictions(&out.join("predictions.jsonl"), &records)?;
    print!("{text}");
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate(dir: &Path, corpus: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let episodes = load_episodes(corpus)?;
    let mut opts = EvalOptions::default();
    reseed(&mut opts.query_decoding, seed);
    reseed(&mut opts.response_decoding, seed);
    let out = out.unwrap_or_else(|| dir.join("tables"));
    std::fs::create_dir_all(&out)?;
    let tables = [
        (TableKind::QueryGeneration, "query_generation", "Query generation"),
        (TableKind::ResponseGeneration, "response_generation", "Response generation"),
        (TableKind::RetrievalDecision, "retrieval_decision", "Retrieval decision"),
    ];
    let mut all = String::new();
    for (kind, file, title) in tables {
        let table = run_ablation_matrix(dir, &episodes, kind.default_rows(), kind, &opts)?;
        let text = table.render_text();
        std::fs::write(out.join(format!("{file}.txt")), &text)?;
        std::fs::write(out.join(format!("{file}.json")), serde_json::to_string_pretty(&table)?)?;
        all.push_str(&format!("{title}\n{text}\n"));
    }
    print!("{all}");
    println!("wrote {}", out.display());
    Ok(())
}

struct Runtime {
    model: unirqr_core::model::Model,
    retriever: Arc<dyn Retriever>,
    pipeline: PipelineConfig,
}

fn load_runtime(ckpt_path: &Path, args: &RetrievalArgs, seed: Option<u64>) -> Result<Runtime> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.restore_model()?;
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut pipeline = match &cfg {
        Some(c) => c.pipeline(),
        None => PipelineConfig { max_context_turns: ckpt.config.max_context_turns, ..PipelineConfig::default() },
    };
    reseed(&mut pipeline.query_decoding, seed);
    reseed(&mut pipeline.response_decoding, seed);

    let kind = match (args.retriever, &cfg) {
        (Some(RetrieverArg::Mock), _) => RetrieverKind::Mock,
        (Some(RetrieverArg::Http), _) => RetrieverKind::Http,
        (None, Some(c)) => c.retriever.kind,
        (None, None) => RetrieverKind::Mock,
    };
    let retriever: Arc<dyn Retriever> = match kind {
        RetrieverKind::Mock => {
            let path = match (&args.corpus, &cfg) {
                (Some(p), _) => p.clone(),
                (None, Some(c)) => c.corpus.path.clone(),
                (None, None) => bail!("the mock retriever needs --corpus or --config"),
            };
            let mock = MockRetriever::from_episodes(&load_episodes(&path)?);
            tracing::info!("mock retriever over {} knowledge entries", mock.len());
            Arc::new(mock)
        }
        RetrieverKind::Http => {
            let mut http = cfg.as_ref().map(|c| c.retriever.http.clone()).unwrap_or_else(HttpConfig::default);
            if let Some(e) = &args.endpoint {
                http.endpoint = e.clone();
            }
            Arc::new(HttpRetriever::new(http).map_err(|e| anyhow::anyhow!("{e}"))?)
        }
    };
    Ok(Runtime { model, retriever, pipeline })
}

fn chat(ckpt_path: &Path, args: &RetrievalArgs, mode: ForceArg, seed: Option<u64>) -> Result<()> {
    let rt = load_runtime(ckpt_path, args, seed)?;
    let mode = force_mode(mode);
    let mut turns: Vec<DialogueTurn> = Vec::new();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    eprintln!("type a message; /reset clears the dialogue, /quit exits");
    loop {
        write!(stdout, "> ")?;
        stdout.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" | "/exit" => break,
            "/reset" => {
                turns.clear();
                continue;
            }
            _ => {}
        }
        turns.push(DialogueTurn::user(text));
        match respond_with_mode(&turns, &rt.model, rt.retriever.as_ref(), &rt.pipeline, mode) {
            Ok(trace) => {
                println!("{}", serde_json::to_string_pretty(&trace)?);
                println!("bot: {}", trace.response);
                turns.push(DialogueTurn::bot(trace.response));
            }
            Err(e) => {
                turns.pop();
                eprintln!("error: {e}");
            }
        }
    }
    Ok(())
}

fn force_mode(m: ForceArg) -> ForceMode {
    match m {
        ForceArg::Auto => ForceMode::Auto,
        ForceArg::Always => ForceMode::AlwaysRetrieve,
        ForceArg::Never => ForceMode::NeverRetrieve,
    }
}

fn serve(
    ckpt_path: &Path,
    args: &RetrievalArgs,
    addr: SocketAddr,
    console: PathBuf,
    sessions: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let rt = load_runtime(ckpt_path, args, seed)?;
    let mut state = unirqr_service::AppState::new(Some(rt.model), rt.retriever, rt.pipeline);
    if let Some(path) = sessions {
        let (store, restored) =
            unirqr_service::SessionStore::open(&path).with_context(|| format!("opening session store {}", path.display()))?;
        tracing::info!("restored {} sessions from {}", restored.len(), path.display());
        state = state.with_store(store, restored);
    }
    if !console.is_dir() {
        tracing::warn!("console directory {} not found; /console will return 404", console.display());
    }
    let app = unirqr_service::router(Arc::new(state), Some(console));
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(unirqr_service::serve(addr, app))?;
    Ok(())
}
