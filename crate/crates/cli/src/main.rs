use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use reviser_core::corpus::{parse_lines, LabeledCorpus};
use reviser_core::metrics::{formalization_report, simplification_report, DeleteScore, EvalInstance};
use reviser_core::model::{Checkpoint, ModelConfig, ModelParams};
use reviser_core::revision::{ConfigOverrides, SpanSelection};
use reviser_core::synthdata::{generate_corpus, TemplateConfig};
use reviser_core::tokenizer::Vocabulary;
use reviser_core::training::{train, TrainConfig};
use reviser_service::{AppState, ReviseRequest, SessionStore};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "reviser", version, about = "Iterative in-place text revision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Simplify,
    Formalize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on a labeled TSV corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// JSON with optional `train`, `model`, `min_freq` and `init_seed`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Revise each non-blank input line toward an attribute.
    Revise {
        #[arg(long, env = "REVISER_CKPT")]
        ckpt: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        per_layer_norm: bool,
        /// Edit this span once (`t:n`, `[CLS]` is position 0).
        #[arg(long)]
        span: Option<String>,
        /// File to read, or `-` for stdin.
        #[arg(long, default_value = "-")]
        input: String,
    },
    /// Score system outputs against references.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// One file per reference set, line-aligned with the source.
        #[arg(long, required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        /// Checkpoint whose attribute head judges formality.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value = "formal")]
        target: String,
        /// Score deletions by precision only instead of F1.
        #[arg(long)]
        delete_precision: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "REVISER_CKPT")]
        ckpt: Option<PathBuf>,
        #[arg(long, env = "REVISER_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Journal sessions under this directory and restore them on start.
        #[arg(long)]
        persist: Option<PathBuf>,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long)]
        origin: Option<String>,
        #[arg(long, default_value_t = reviser_service::DEFAULT_UNDO_CAP)]
        undo_cap: usize,
    },
    /// Write the synthetic parallel-style corpus and its metadata.
    Synth {
        #[arg(long, default_value_t = 5000)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metadata: PathBuf,
        /// Template/lexicon JSON replacing the built-in one.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelShape {
    layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    ffn: Option<usize>,
    max_len: Option<usize>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    model: ModelShape,
    min_freq: usize,
    init_seed: u64,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk_scale(),
            model: ModelShape::default(),
            min_freq: 1,
            init_seed: 0,
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn cmd_train(corpus: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let file: TrainFile = match config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let corpus = LabeledCorpus::read(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let vocab = Vocabulary::build(corpus.texts(), file.min_freq)?;
    let mut model = ModelConfig::desk_scale(vocab.len(), corpus.attributes.len());
    let m = &file.model;
    model.layers = m.layers.unwrap_or(model.layers);
    model.hidden = m.hidden.unwrap_or(model.hidden);
    model.heads = m.heads.unwrap_or(model.heads);
    model.ffn = m.ffn.unwrap_or(model.ffn);
    model.max_len = m.max_len.unwrap_or(model.max_len);
    let params = ModelParams::init(&model, file.init_seed)?;
    let stdout = std::io::stdout();
    let outcome = train(params, vocab, &corpus, &file.train, |e| {
        let mut lock = stdout.lock();
        let _ = writeln!(lock, "{}", serde_json::to_string(e).expect("metrics serialize"));
        let _ = lock.flush();
    })?;
    outcome.checkpoint.save(out)?;
    tracing::info!(path = %out.display(), hash = %outcome.checkpoint.hash(), "checkpoint written");
    Ok(())
}

fn read_input(input: &str) -> Result<String> {
    if input == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(input).with_context(|| format!("reading {input}"))
    }
}

fn cmd_eval(
    task: Task,
    source: &Path,
    output: &Path,
    refs: &[PathBuf],
    classifier: Option<&Path>,
    target: &str,
    delete_precision: bool,
) -> Result<String> {
    let src = read_lines(source)?;
    let out = read_lines(output)?;
    let ref_sets: Vec<Vec<String>> = refs.iter().map(|p| read_lines(p)).collect::<Result<_>>()?;
    if out.len() != src.len() || ref_sets.iter().any(|r| r.len() != src.len()) {
        bail!("source, output and reference files must have the same number of lines");
    }
    let instances = (0..src.len())
        .filter(|&i| !src[i].is_empty())
        .map(|i| {
            let references = ref_sets.iter().map(|r| r[i].clone()).collect();
            EvalInstance::new(src[i].clone(), out[i].clone(), references)
                .with_context(|| format!("line {}", i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = match task {
        Task::Simplify => {
            let delete = if delete_precision { DeleteScore::Precision } else { DeleteScore::F1 };
            serde_json::to_string_pretty(&simplification_report(&instances, delete)?)?
        }
        Task::Formalize => {
            let ck = classifier.map(Checkpoint::load).transpose()?;
            let report = formalization_report(&instances, ck.as_ref().map(|c| (c, target)))?;
            serde_json::to_string_pretty(&report)?
        }
    };
    Ok(json)
}

async fn cmd_serve(
    ckpt: Option<PathBuf>,
    host: &str,
    port: u16,
    persist: Option<PathBuf>,
    origin: Option<String>,
    undo_cap: usize,
) -> Result<()> {
    let checkpoint = match &ckpt {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => {
            tracing::warn!("no checkpoint given; model routes will answer 503");
            None
        }
    };
    let hash = checkpoint.as_ref().map(Checkpoint::hash);
    let store = match persist {
        Some(dir) => SessionStore::persistent(dir, hash.as_deref())?,
        None => SessionStore::in_memory(),
    };
    let mut state = AppState::new(checkpoint, store);
    state.undo_cap = undo_cap;
    let origin = origin.map(|o| o.parse()).transpose().context("invalid --origin")?;
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    tracing::info!(addr = %listener.local_addr()?, sessions = state.store.len(), "listening");
    reviser_service::serve(listener, state, origin).await?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { corpus, config, out } => cmd_train(&corpus, config.as_deref(), &out)?,
        Command::Revise {
            ckpt,
            target,
            lambda,
            iters,
            delta,
            k,
            per_layer_norm,
            span,
            input,
        } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let span = span.as_deref().map(SpanSelection::parse).transpose()?;
            let config = ConfigOverrides {
                lambda,
                iters,
                delta,
                k,
                per_layer_norm: per_layer_norm.then_some(true),
                ..ConfigOverrides::default()
            };
            let stdout = std::io::stdout();
            for text in parse_lines(&read_input(&input)?) {
                let req = ReviseRequest {
                    text,
                    target: target.clone(),
                    config: config.clone(),
                    span,
                };
                let report = reviser_service::revise(&ck, &req)?;
                let mut lock = stdout.lock();
                lock.write_all(report.render().as_bytes())?;
                lock.flush()?;
            }
        }
        Command::Eval {
            task,
            source,
            output,
            refs,
            classifier,
            target,
            delete_precision,
        } => {
            let json = cmd_eval(task, &source, &output, &refs, classifier.as_deref(), &target, delete_precision)?;
            println!("{json}");
        }
        Command::Serve {
            ckpt,
            port,
            host,
            persist,
            origin,
            undo_cap,
        } => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(cmd_serve(ckpt, &host, port, persist, origin, undo_cap))?;
        }
        Command::Synth {
            size,
            seed,
            out,
            metadata,
            templates,
        } => {
            let config: TemplateConfig = match templates {
                Some(p) => read_json(&p)?,
                None => TemplateConfig::default(),
            };
            config.validate()?;
            generate_corpus(size, &config, seed)?.export_to(&out, &metadata)?;
        }
    }
    Ok(())
}
