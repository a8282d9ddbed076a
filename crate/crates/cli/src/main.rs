use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperscope::report::{self, config::ProviderConfig, ErrorClass, ReportError};
use hyperscope::{encode_trace, serve_connection, ExperimentConfig, OutputFormat, SyntheticModel};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hyperscope",
    version,
    about = "Compare an original and a fine-tuned model through teacher-forced traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create and check HFT1 trace files.
    #[command(subcommand)]
    Trace(TraceCmd),
    /// Teacher-forced analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Free-running interventions.
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Serve a model over HFLP/1.
    #[command(subcommand)]
    Serve(ServeCmd),
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Write a synthetic trace pair to --out.
    GenSynth(Common),
    /// Check trace files and report their shapes and checksums.
    Validate(Common),
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    EntropyMatch(Common),
    Rank(Common),
    Diversity(Common),
    Geometry(Common),
    TriadSeries(Common),
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Static logit-bias injection sweep.
    Inject(Common),
}

#[derive(Subcommand)]
enum ServeCmd {
    /// Serve a synthetic model; prints the bound address, then runs until killed.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON, same schema as a report's `config` block).
    #[arg(long)]
    config: PathBuf,
    /// Output file (json) or directory (csv). JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = match e.class() {
            ErrorClass::InvalidInput => EXIT_INPUT,
            ErrorClass::Runtime => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(path: &Path, expected: &str) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("reading {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json(&text)
        .map_err(|e| Failure::input(format!("config {}: {e}", path.display())))?;
    if cfg.kind() != expected {
        return Err(Failure::input(format!(
            "config kind is {:?}, this subcommand expects {expected:?}",
            cfg.kind()
        )));
    }
    Ok(cfg)
}

fn base_dir(config: &Path) -> PathBuf {
    config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run_report(args: &Common, kind: &str) -> Result<(), Failure> {
    let cfg = load_config(&args.config, kind)?;
    let report = report::run(&cfg, &base_dir(&args.config))?;
    match (args.format, &args.out) {
        (Format::Json, Some(out)) => {
            report::emit_report(&report, OutputFormat::Json, out)?;
        }
        (Format::Json, None) => {
            let text = report::json::to_canonical_string(&report).map_err(ReportError::from)?;
            io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Failure::from(ReportError::Output(e)))?;
        }
        (Format::Csv, Some(out)) => {
            report::emit_report(&report, OutputFormat::Csv, out)?;
        }
        (Format::Csv, None) => return Err(Failure::usage("--format csv needs --out <dir>")),
    }
    Ok(())
}

fn gen_synth(args: &Common) -> Result<(), Failure> {
    if matches!(args.format, Format::Csv) {
        return Err(Failure::usage(
            "gen-synth writes an HFT1 file; --format does not apply",
        ));
    }
    let Some(out) = &args.out else {
        return Err(Failure::usage("gen-synth needs --out <trace file>"));
    };
    let ExperimentConfig::GenSynth(c) = load_config(&args.config, "gen-synth")? else {
        unreachable!("kind checked")
    };
    let trace = report::generate_trace(&c)?;
    let bytes = encode_trace(&trace).map_err(|e| Failure::input(e.to_string()))?;
    fs::write(out, bytes).map_err(|e| Failure::from(ReportError::Output(e)))?;
    Ok(())
}

fn serve_synth(config: &Path, listen: &str) -> Result<(), Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::input(format!("reading {}: {e}", config.display())))?;
    let provider =
        ProviderConfig::from_json(&text).map_err(|e| Failure::input(format!("config: {e}")))?;
    let ProviderConfig::Synthetic { vocab_size, params } = provider else {
        return Err(Failure::input(
            "serve synth needs a synthetic provider config",
        ));
    };
    let model =
        SyntheticModel::new(params, vocab_size).map_err(|e| Failure::input(e.to_string()))?;
    let listener = TcpListener::bind(listen).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("bind {listen}: {e}"),
    })?;
    let addr = listener.local_addr().map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })?;
    println!("{addr}");
    let _ = io::stdout().flush();
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        let mut m = model.clone();
        thread::spawn(move || {
            if let Err(e) = serve_connection(&mut stream, &mut m) {
                eprintln!("connection: {e}");
            }
        });
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Trace(TraceCmd::GenSynth(a)) => gen_synth(&a),
        Command::Trace(TraceCmd::Validate(a)) => run_report(&a, "validate"),
        Command::Analyze(AnalyzeCmd::EntropyMatch(a)) => run_report(&a, "entropy-match"),
        Command::Analyze(AnalyzeCmd::Rank(a)) => run_report(&a, "rank"),
        Command::Analyze(AnalyzeCmd::Diversity(a)) => run_report(&a, "diversity"),
        Command::Analyze(AnalyzeCmd::Geometry(a)) => run_report(&a, "geometry"),
        Command::Analyze(AnalyzeCmd::TriadSeries(a)) => run_report(&a, "triad-series"),
        Command::Ablate(AblateCmd::Inject(a)) => run_report(&a, "ablation"),
        Command::Serve(ServeCmd::Synth { config, listen }) => serve_synth(&config, &listen),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hyperscope: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
