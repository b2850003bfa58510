use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use interlocutor::flow::{parse_flow, validate_flow, FlowDefinition, MemoryStrategy};
use interlocutor::gateway::Fixture;
use interlocutor::knowledge::KnowledgeStore;
use interlocutor::postprocess::{compare_memory_strategies, load_plan, render_sensitivity_table, run_sensitivity, QualityRule};
use interlocutor::replay::{render_transcript, replay, ReplayOptions};
use interlocutor::service::{self, ServiceConfig};
use interlocutor::simulate::{render_table, simulate, PersonaFile};
use interlocutor::store::{export_anonymized, export_csv, export_jsonl, FileStore, SessionStore};

#[derive(Parser)]
#[command(name = "interlocutor", version, about = "Run, test and serve conversational survey flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Memory {
    Full,
    Extracted,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TableFormat {
    Table,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check a flow document; exit 1 on findings, 2 when it does not parse.
    Validate {
        #[arg(long)]
        flow: PathBuf,
    },
    /// Replay a scripted session and print its transcript.
    Run {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        memory: Option<Memory>,
        #[arg(long)]
        language: Option<String>,
    },
    /// Run simulated participants and report clarification and completion rates.
    Simulate {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        personas: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: u32,
        #[arg(long)]
        json: bool,
    },
    /// Compare outcome distributions across prompt variants.
    Sensitivity {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Prompt tokens per turn under full-history and extracted-variable memory.
    Tokens {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        questions: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
    },
    /// Write anonymized session records from a store directory.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
    },
    /// Start the HTTP service; settings come from INTERLOCUTOR_* variables.
    Serve {
        /// File of KEY=VALUE lines taking precedence over the process environment.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

struct Failure(u8, String);

type CmdResult = Result<(), Failure>;

fn fail(code: u8) -> impl Fn(String) -> Failure {
    move |m| Failure(code, m)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure(2, format!("{}: {e}", path.display())))
}

fn load_flow(path: &Path) -> Result<FlowDefinition, Failure> {
    parse_flow(&read(path)?).map_err(|e| Failure(2, format!("{}:\n{e}", path.display())))
}

fn load_fixture(path: &Path) -> Result<Fixture, Failure> {
    Fixture::parse(&read(path)?).map_err(|e| Failure(2, format!("{}: {e}", path.display())))
}

fn validate(flow: &Path) -> CmdResult {
    let flow = load_flow(flow)?;
    let report = validate_flow(&flow);
    for f in &report.findings {
        println!("{f}");
    }
    if report.is_clean() {
        println!("ok: {} v{} ({} nodes)", flow.id, flow.version, flow.nodes.len());
        Ok(())
    } else {
        Err(Failure(1, format!("{} finding(s)", report.findings.len())))
    }
}

fn load_knowledge(flow: &FlowDefinition, path: &Path) -> Result<Arc<KnowledgeStore>, Failure> {
    let store = KnowledgeStore::new();
    store.load_flow_sources(flow, path.parent().unwrap_or(Path::new("."))).map_err(|e| Failure(2, e.to_string()))?;
    Ok(Arc::new(store))
}

fn run(path: &Path, script: &Path, seed: Option<u64>, memory: Option<Memory>, language: Option<String>) -> CmdResult {
    let flow = load_flow(path)?;
    let fixture = load_fixture(script)?;
    let knowledge = Some(load_knowledge(&flow, path)?);
    let mut opts = ReplayOptions { language, knowledge, ..Default::default() }.seed(seed.unwrap_or(0));
    if let Some(m) = memory {
        opts = opts.memory(match m {
            Memory::Full => MemoryStrategy::Full,
            Memory::Extracted => MemoryStrategy::Extracted,
        });
    }
    let out = replay(&flow, &fixture, &opts).map_err(|e| Failure(1, e.to_string()))?;
    print!("{}", render_transcript(&out.state));
    eprintln!(
        "prompt_tokens={} completion_tokens={} calls={}",
        out.ledger.total.prompt_tokens, out.ledger.total.completion_tokens, out.ledger.total.calls
    );
    if let Some(miss) = out.misses.first() {
        return Err(Failure(1, format!("fixture miss: {miss}")));
    }
    if !out.completed() {
        return Err(Failure(1, "participant script ended before the session completed".into()));
    }
    if out.unused_turns > 0 {
        eprintln!("warning: {} participant turn(s) left unused", out.unused_turns);
    }
    Ok(())
}

fn simulate_cmd(flow: &Path, personas: &Path, n: u32, json: bool) -> CmdResult {
    let flow = load_flow(flow)?;
    let personas = PersonaFile::parse(&read(personas)?).map_err(fail(2))?;
    let report = simulate(&flow, &personas, n).map_err(|e| Failure(1, e.to_string()))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure(1, e.to_string()))?);
    } else {
        print!("{}", render_table(&report));
    }
    Ok(())
}

fn sensitivity(plan: &Path) -> CmdResult {
    let plan = load_plan(plan).map_err(fail(2))?;
    let report = run_sensitivity(&plan).map_err(|e| Failure(1, e.to_string()))?;
    print!("{}", render_sensitivity_table(&report));
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure(1, e.to_string()))?);
    Ok(())
}

fn tokens(flow: &Path, script: &Path, seed: u64, questions: Option<usize>, format: TableFormat) -> CmdResult {
    let flow = load_flow(flow)?;
    let fixture = load_fixture(script)?;
    let cmp = compare_memory_strategies(&flow, &fixture, questions, seed).map_err(|e| Failure(1, e.to_string()))?;
    match format {
        TableFormat::Json => {
            println!("{}", serde_json::to_string_pretty(&cmp).map_err(|e| Failure(1, e.to_string()))?)
        }
        TableFormat::Csv => {
            println!("turn,full,extracted");
            for r in &cmp.rows {
                println!("{},{},{}", r.turn, r.full, r.extracted);
            }
            println!("total,{},{}", cmp.total_full, cmp.total_extracted);
        }
        TableFormat::Table => {
            println!("{:>6} {:>10} {:>10}", "turn", "full", "extracted");
            for r in &cmp.rows {
                println!("{:>6} {:>10} {:>10}", r.turn, r.full, r.extracted);
            }
            println!("{:>6} {:>10} {:>10}", "total", cmp.total_full, cmp.total_extracted);
        }
    }
    Ok(())
}

fn export(store: &Path, format: ExportFormat) -> CmdResult {
    if !store.is_dir() {
        return Err(Failure(2, format!("{}: not a store directory", store.display())));
    }
    let store = FileStore::open(store).map_err(|e| Failure(2, e.to_string()))?;
    let records = store.records().map_err(|e| Failure(1, e.to_string()))?;
    let flows: Vec<FlowDefinition> = store
        .flows()
        .map_err(|e| Failure(1, e.to_string()))?
        .iter()
        .filter_map(|doc| parse_flow(doc).ok())
        .collect();
    let rows = export_anonymized(&records, &flows, &store.salt(), &QualityRule::default());
    let body = match format {
        ExportFormat::Csv => export_csv(&rows),
        ExportFormat::Jsonl => export_jsonl(&rows),
    }
    .map_err(|e| Failure(1, e.to_string()))?;
    print!("{body}");
    Ok(())
}

fn env_file(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    Ok(read(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.strip_prefix("export ").unwrap_or(l).split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().trim_matches('"').to_string()))
        .collect())
}

fn serve(config: Option<&Path>) -> CmdResult {
    let overrides = config.map(env_file).transpose()?.unwrap_or_default();
    let cfg = ServiceConfig::from_lookup(|k| {
        overrides.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).or_else(|| std::env::var(k).ok())
    });
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure(1, e.to_string()))?;
    rt.block_on(service::serve(cfg)).map_err(|e| Failure(1, e.to_string()))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { flow } => validate(&flow),
        Command::Run { flow, script, seed, memory, language } => run(&flow, &script, seed, memory, language),
        Command::Simulate { flow, personas, n, json } => simulate_cmd(&flow, &personas, n, json),
        Command::Sensitivity { plan } => sensitivity(&plan),
        Command::Tokens { flow, script, seed, questions, format } => tokens(&flow, &script, seed, questions, format),
        Command::Export { store, format } => export(&store, format),
        Command::Serve { config } => serve(config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
