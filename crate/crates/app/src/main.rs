use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fetalflow::commands::{self, Failure, Written};

#[derive(Parser)]
#[command(name = "fetalflow", version, about = "Fetal ultrasound analysis engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one image and write report.json, report.md and a run record.
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixel spacing in millimetres.
        #[arg(long)]
        spacing: Option<f64>,
    },
    /// Summarize a video described by a frame manifest.
    SummarizeVideo {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        query: Option<String>,
    },
    /// Compute metrics over a JSON-lines prediction/truth manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Stub model tool speaking the tool protocol.
    #[command(hide = true)]
    MockTool {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON table of extra mocks by name.
        #[arg(long)]
        mocks: Option<PathBuf>,
        #[arg(long)]
        fallback: Option<String>,
        /// Serve POST /invoke on this port instead of stdio.
        #[arg(long)]
        http: Option<u16>,
    },
}

fn report_written(w: Written) {
    println!("run {}", w.run_id);
    println!("{}", w.report_json.display());
    println!("{}", w.report_md.display());
    println!("{}", w.record.display());
}

fn finish(r: Result<(), Failure>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze {
            image,
            query,
            config,
            out,
            spacing,
        } => commands::analyze(&image, &query, &config, &out, spacing).map(report_written),
        Command::SummarizeVideo {
            manifest,
            config,
            out,
            query,
        } => commands::summarize_video(&manifest, query.as_deref(), &config, &out).map(report_written),
        Command::Eval {
            manifest,
            task,
            config,
            out,
        } => commands::eval(&manifest, &task, config.as_deref(), out.as_deref()).map(|r| print!("{}", r.to_table())),
        Command::Serve { config, port, bind } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
                )
                .with_writer(std::io::stderr)
                .init();
            runtime().and_then(|rt| rt.block_on(commands::serve(&config, port, &bind)))
        }
        Command::MockTool {
            config,
            mocks,
            fallback,
            http,
        } => runtime().and_then(|rt| {
            rt.block_on(commands::mock_tool(config.as_deref(), mocks.as_deref(), fallback.as_deref(), http))
        }),
    };
    finish(result)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(Failure::input)
}
