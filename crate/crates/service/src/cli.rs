//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tlqa_core::decompose::Lexicon;
use tlqa_core::encoders::{init_parameters, EncoderConfig, Parameters};
use tlqa_core::eval::{evaluate, read_jsonl, write_jsonl};
use tlqa_core::ingest::{build_vocabulary, impute_with_schema, parse_csv, write_csv, ModalitySchema, Timeline};
use tlqa_core::pipeline::{AnswerStrategy, Strategy, WithConfig};
use tlqa_core::pretrain::{gradcheck, retrieval_accuracy, train_with_progress, TrainConfig};
use tlqa_core::query::QuerySpec;
use tlqa_core::store::{build_store, train_similarity, SimTrainConfig};
use tlqa_core::synth::{generate_timeline, qa_suite, synth_schema, synth_vocabulary, SynthConfig};

use crate::config::ServiceConfig;
use crate::state::AppState;

#[derive(Debug, Parser)]
#[command(name = "tlqa", version, about = "Question answering over multimodal sensor timelines")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Timeline CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Modality schema (TOML).
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a timeline CSV, impute missing values, print a summary.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Write the imputed timeline here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pretraining of the sensor and label encoders.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// TOML with optional [encoder] and [train] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the similarity function on frozen embeddings.
    TrainSim {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        params: PathBuf,
        /// TOML with an optional [similarity] table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every window of a timeline into a store file.
    BuildStore {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run query specs (a JSON object or array; `-` reads stdin).
    Query {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        user: Option<String>,
        /// Unix seconds or RFC 3339; defaults to the system clock.
        #[arg(long, value_parser = parse_now)]
        now: Option<i64>,
    },
    /// Interactive question answering on standard input.
    Chat {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        user: Option<String>,
        #[arg(long, value_parser = parse_now)]
        now: Option<i64>,
    },
    /// Score a QA file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, value_enum, default_value = "templates")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write a synthetic timeline, its schema and a QA file.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        users: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// QA records per question category.
        #[arg(long, default_value_t = 50)]
        qa_per_category: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Templates,
    Llm,
}

fn parse_now(s: &str) -> Result<i64, String> {
    if let Ok(t) = s.parse::<i64>() {
        return Ok(t);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .map(|d| d.timestamp())
        .map_err(|e| format!("expected unix seconds or RFC 3339 time: {e}"))
}

fn system_now() -> i64 {
    chrono::Utc::now().timestamp()
}

/// Streams used by the CLI, injectable for tests.
pub struct Io<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

type CliResult = Result<(), String>;

fn err(what: &str) -> impl Fn(&dyn std::fmt::Display) -> String + '_ {
    move |e| format!("{what}: {e}")
}

fn read_timeline(data: &DataArgs) -> Result<(ModalitySchema, Timeline), String> {
    let text = std::fs::read_to_string(&data.schema).map_err(|e| err("schema")(&e))?;
    let schema = ModalitySchema::from_toml(&text).map_err(|e| err("schema")(&e))?;
    let file = File::open(&data.data).map_err(|e| err("data")(&e))?;
    let tl = parse_csv(BufReader::new(file), &schema).map_err(|e| err("data")(&e))?;
    let tl = impute_with_schema(&tl, &schema).map_err(|e| err("imputation")(&e))?;
    Ok((schema, tl))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    encoder: EncoderConfig,
    train: TrainConfig,
    similarity: SimTrainConfig,
}

fn read_train_file(path: Option<&Path>) -> Result<TrainFile, String> {
    match path {
        None => Ok(TrainFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| err("config")(&e))?;
            toml::from_str(&text).map_err(|e| err("config")(&e))
        }
    }
}

fn load_state(config: &Path) -> Result<AppState, String> {
    let cfg = ServiceConfig::load(config).map_err(|e| e.to_string())?;
    AppState::load(cfg).map_err(|e| e.to_string())
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I, io: &mut Io) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(io.out, "{text}");
            } else {
                let _ = write!(io.err, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, io) {
        Ok(()) => 0,
        Err(msg) => {
            let _ = writeln!(io.err, "error: {msg}");
            2
        }
    }
}

fn execute(command: Command, io: &mut Io) -> CliResult {
    let out_err = |e: std::io::Error| e.to_string();
    match command {
        Command::Ingest { data, out } => {
            let (schema, tl) = read_timeline(&data)?;
            let vocab = build_vocabulary(&tl).map_err(|e| err("labels")(&e))?;
            writeln!(io.out, "windows={}", tl.len()).map_err(out_err)?;
            writeln!(io.out, "users={}", tl.users().join(",")).map_err(out_err)?;
            writeln!(io.out, "labels={}", vocab.phrases().join(",")).map_err(out_err)?;
            if let Some(path) = out {
                let file = File::create(&path).map_err(|e| err("output")(&e))?;
                write_csv(&tl, &schema, vocab.phrases(), std::io::BufWriter::new(file)).map_err(|e| err("output")(&e))?;
            }
        }
        Command::Pretrain { data, config, out } => {
            let (schema, tl) = read_timeline(&data)?;
            let cfg = read_train_file(config.as_deref())?;
            let vocab = build_vocabulary(&tl).map_err(|e| err("labels")(&e))?;
            let p0 = init_parameters(&cfg.encoder, &schema, &vocab).map_err(|e| err("encoder")(&e))?;
            let mut lines = Vec::new();
            let (params, _) = train_with_progress(&p0, &tl, &cfg.train, |i, loss| lines.push(format!("epoch={i} loss={loss}")))
                .map_err(|e| err("training")(&e))?;
            for l in lines {
                writeln!(io.out, "{l}").map_err(out_err)?;
            }
            let acc = retrieval_accuracy(&params, &tl).map_err(|e| err("training")(&e))?;
            writeln!(io.out, "retrieval_accuracy={acc}").map_err(out_err)?;
            params.save(&out).map_err(|e| err("output")(&e))?;
        }
        Command::TrainSim { data, params, config, out } => {
            let (_, tl) = read_timeline(&data)?;
            let cfg = read_train_file(config.as_deref())?;
            let params = Parameters::load(&params).map_err(|e| err("parameters")(&e))?;
            let model = train_similarity(&params, &tl, &cfg.similarity).map_err(|e| err("training")(&e))?;
            writeln!(io.out, "mode={}", model.mode_name()).map_err(out_err)?;
            model.save(&out).map_err(|e| err("output")(&e))?;
        }
        Command::BuildStore { data, params, out } => {
            let (_, tl) = read_timeline(&data)?;
            let params = Parameters::load(&params).map_err(|e| err("parameters")(&e))?;
            let store = build_store(&params, &tl).map_err(|e| err("store")(&e))?;
            store.save(&out).map_err(|e| err("output")(&e))?;
            writeln!(io.out, "records={}", store.len()).map_err(out_err)?;
        }
        Command::Query { config, spec, user, now } => {
            let state = load_state(&config)?;
            let pipeline = state.pipeline().ok_or("no embedding store is loaded")?;
            let text = if spec.as_os_str() == "-" {
                let mut s = String::new();
                io.input.read_to_string(&mut s).map_err(out_err)?;
                s
            } else {
                std::fs::read_to_string(&spec).map_err(|e| err("spec")(&e))?
            };
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| err("spec")(&e))?;
            let specs: Vec<QuerySpec> = if value.is_array() {
                serde_json::from_value(value)
            } else {
                serde_json::from_value(value).map(|s| vec![s])
            }
            .map_err(|e| err("spec")(&e))?;
            let user = user
                .or(state.config.default_user.clone())
                .or_else(|| match pipeline.store.users().as_slice() {
                    [only] => Some(only.to_string()),
                    _ => None,
                })
                .ok_or("--user is required")?;
            let results = pipeline
                .engine()
                .execute(&specs, &user, now.unwrap_or_else(system_now))
                .map_err(|e| err("query")(&e))?;
            for r in results {
                for c in r.contexts {
                    writeln!(io.out, "{}", c.text).map_err(out_err)?;
                    writeln!(io.out, "{}", serde_json::to_string(&c.values).expect("values serialize")).map_err(out_err)?;
                }
            }
        }
        Command::Chat { config, user, now } => {
            let state = load_state(&config)?;
            let pipeline = state.pipeline().ok_or("no embedding store is loaded")?;
            let user = user
                .or(state.config.default_user.clone())
                .or_else(|| pipeline.store.users().first().map(|u| u.to_string()))
                .ok_or("the store is empty")?;
            writeln!(io.out, "Answering for {user}. Empty line or :quit exits.").map_err(out_err)?;
            let mut line = String::new();
            loop {
                write!(io.out, "> ").map_err(out_err)?;
                io.out.flush().map_err(out_err)?;
                line.clear();
                if io.input.read_line(&mut line).map_err(out_err)? == 0 {
                    break;
                }
                let q = line.trim();
                if q.is_empty() || q == ":quit" {
                    break;
                }
                match pipeline.answer_trace(q, &user, now.unwrap_or_else(system_now)) {
                    Ok(t) => {
                        writeln!(io.out, "{}", t.answer.full_answer).map_err(out_err)?;
                        writeln!(io.out, "  short: {}", t.answer.short_answer).map_err(out_err)?;
                    }
                    Err(e) => writeln!(io.out, "  could not answer: {e}").map_err(out_err)?,
                }
            }
        }
        Command::Eval { config, qa, mode, out } => {
            let state = load_state(&config)?;
            let pipeline = state.pipeline().ok_or("no embedding store is loaded")?;
            let file = File::open(&qa).map_err(|e| err("qa file")(&e))?;
            let records = read_jsonl(BufReader::new(file)).map_err(|e| err("qa file")(&e))?;
            let mut cfg = pipeline.config.clone();
            (cfg.decompose, cfg.answer) = match mode {
                Mode::Templates => (Strategy::Rules, AnswerStrategy::Templates),
                Mode::Llm => {
                    if pipeline.gateway.is_none() {
                        return Err("llm mode needs a [gateway] table in the config".into());
                    }
                    (Strategy::Llm, AnswerStrategy::Llm)
                }
            };
            let report = evaluate(&records, &WithConfig(&pipeline, cfg)).map_err(|e| err("eval")(&e))?;
            write!(io.out, "{}", report.table()).map_err(out_err)?;
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&path, json).map_err(|e| err("output")(&e))?;
            }
        }
        Command::Gradcheck { cases, seed, eps } => {
            let report = gradcheck(cases, seed, eps).map_err(|e| err("gradcheck")(&e))?;
            writeln!(io.out, "cases={} max_rel_err={:e}", report.cases.len(), report.max_rel_err).map_err(out_err)?;
            if !(report.max_rel_err <= 1e-4) {
                return Err(format!("max relative error {:e} exceeds 1e-4", report.max_rel_err));
            }
        }
        Command::Serve { config, host, port } => {
            let mut state = load_state(&config)?;
            if let Some(h) = host {
                state.config.server.host = h;
            }
            if let Some(p) = port {
                state.config.server.port = p;
            }
            let addr = format!("{}:{}", state.config.server.host, state.config.server.port);
            let rt = tokio::runtime::Runtime::new().map_err(out_err)?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| err(&addr)(&e))?;
                let _ = writeln!(io.out, "listening on http://{}", listener.local_addr().map_err(out_err)?);
                axum::serve(listener, crate::api::router(Arc::new(state))).await.map_err(out_err)
            })?;
        }
        Command::Synth {
            out_dir,
            users,
            days,
            seed,
            noise,
            qa_per_category,
        } => {
            std::fs::create_dir_all(&out_dir).map_err(|e| err("output")(&e))?;
            let cfg = SynthConfig {
                users,
                days,
                seed,
                noise,
                ..Default::default()
            };
            let tl = generate_timeline(&cfg);
            let schema = synth_schema();
            let vocab = synth_vocabulary();
            std::fs::write(out_dir.join("schema.toml"), schema.to_toml()).map_err(|e| err("output")(&e))?;
            let file = File::create(out_dir.join("data.csv")).map_err(|e| err("output")(&e))?;
            write_csv(&tl, &schema, vocab.phrases(), std::io::BufWriter::new(file)).map_err(|e| err("output")(&e))?;
            let suite = qa_suite(&tl, &Lexicon::with_default_synonyms(&vocab), qa_per_category, seed);
            let file = File::create(out_dir.join("qa.jsonl")).map_err(|e| err("output")(&e))?;
            write_jsonl(std::io::BufWriter::new(file), &suite).map_err(|e| err("output")(&e))?;
            writeln!(io.out, "windows={} qa_records={}", tl.len(), suite.len()).map_err(out_err)?;
        }
    }
    Ok(())
}
