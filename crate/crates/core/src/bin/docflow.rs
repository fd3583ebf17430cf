use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use docflow::domain::{validate_config, PipelineConfig};
use docflow::inference::{self, HttpInferenceClient, InferenceService};
use docflow::stack::Stack;
use docflow::store::BlobStore;
use docflow::worldgen::{generate_corpus, write_manifest, Calibration, CorpusSpec, PagesDistribution};
use docflow::{gateway, ScaledClock};

#[derive(Parser)]
#[command(name = "docflow", about = "Document pipeline services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gateway, worker pods and inference service in one process.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "docflow-data")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        gateway_addr: SocketAddr,
        /// Also expose the in-process inference service over HTTP.
        #[arg(long)]
        inference_addr: Option<SocketAddr>,
        /// Send worker inference calls to a remote service instead.
        #[arg(long)]
        inference_url: Option<String>,
    },
    /// Standalone inference service over a blob store root.
    Inference {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "docflow-data")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8081")]
        addr: SocketAddr,
    },
    /// Writes a seeded synthetic corpus manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        docs: usize,
        #[arg(long, default_value_t = 8)]
        pages: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
    },
    /// Validates a configuration file and prints the resolved form.
    CheckConfig { path: PathBuf },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, String> {
    match path {
        None => Ok(PipelineConfig::default_config()),
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            validate_config(&raw).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, docs, pages, seed, out } => generate(config, docs, pages, seed, out),
        Command::CheckConfig { path } => load_config(&Some(path)).map(|c| print!("{}", c.to_yaml())),
        other => tokio::runtime::Runtime::new().map_err(|e| e.to_string()).and_then(|rt| rt.block_on(serve(other))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn generate(config: Option<PathBuf>, docs: usize, pages: u32, seed: u64, out: PathBuf) -> Result<(), String> {
    let config = load_config(&config)?;
    let spec = CorpusSpec::new(docs, seed).with_pages(PagesDistribution::Fixed(pages));
    let corpus = generate_corpus(&spec, &config, &Calibration::for_config(&config)).map_err(|e| e.to_string())?;
    write_manifest(&out, &corpus, seed).map_err(|e| e.to_string())?;
    println!("wrote {} documents to {}", corpus.len(), out.display());
    Ok(())
}

async fn serve(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Serve { config, root, gateway_addr, inference_addr, inference_url } => {
            let config = load_config(&config)?;
            let (pods, tasks) = (config.worker.pods, config.worker.tasks_per_pod);
            let cal = Calibration::for_config(&config);
            let mut stack = Stack::open(&root, config, cal).map_err(|e| e.to_string())?;
            if let Some(url) = inference_url {
                stack.set_inference_client(Arc::new(HttpInferenceClient::new(url)));
            }
            if let Some(addr) = inference_addr {
                let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| e.to_string())?;
                tokio::spawn(inference::serve(listener, stack.inference.clone()));
                eprintln!("inference service on http://{addr}");
            }
            stack.start_sweeper();
            stack.spawn_pods(pods, tasks);
            let listener = tokio::net::TcpListener::bind(gateway_addr).await.map_err(|e| e.to_string())?;
            eprintln!("gateway on http://{gateway_addr} ({pods} pods x {tasks} tasks)");
            let gw = stack.gateway.clone();
            tokio::select! {
                r = gateway::serve(listener, gw) => r.map_err(|e| e.to_string())?,
                _ = tokio::signal::ctrl_c() => eprintln!("shutting down"),
            }
            stack.gateway.stop();
            stack.shutdown().await;
            Ok(())
        }
        Command::Inference { config, root, addr } => {
            let config = load_config(&config)?;
            let blobs = Arc::new(BlobStore::open(root.join("blobs")).map_err(|e| e.to_string())?);
            let clock = Arc::new(ScaledClock::new(config.profiler.time_scale));
            let service = Arc::new(InferenceService::new(&config, Calibration::for_config(&config), blobs, clock));
            let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| e.to_string())?;
            eprintln!("inference service on http://{addr}");
            inference::serve(listener, service).await.map_err(|e| e.to_string())
        }
        _ => unreachable!("handled synchronously"),
    }
}
