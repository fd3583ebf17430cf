use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use docflow::domain::{validate_config, PipelineConfig};
use docflow::profiler::{
    calibrate, emit_report, report_csv, run_plan, single_doc_profile, ClockMode, ExperimentPlan,
};
use docflow::worldgen::{Calibration, PagesDistribution};

#[derive(Parser)]
#[command(name = "profiler", about = "Batch experiments over the document pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Real,
    Virtual,
}

impl From<ClockArg> for ClockMode {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Real => ClockMode::Real,
            ClockArg::Virtual => ClockMode::Virtual,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Concurrency sweep; writes report.csv and report.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        docs: usize,
        #[arg(long, default_value_t = 8)]
        pages: u32,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,25,50")]
        levels: Vec<usize>,
        #[arg(long)]
        gpu_slots: Option<usize>,
        #[arg(long)]
        api_concurrency: Option<usize>,
        #[arg(long)]
        time_scale: Option<f64>,
        /// Number of seeds (1..=N).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value = "profile-out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ClockArg::Real)]
        clock: ClockArg,
    },
    /// Per-step time breakdown of one 8-page document.
    SingleDoc {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClockArg::Virtual)]
        clock: ClockArg,
    },
    /// Classification Monte Carlo checks; exit code 2 if any band is missed.
    Calibrate {
        #[arg(long, default_value_t = 10_000)]
        pages: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
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
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Run { config, docs, pages, levels, gpu_slots, api_concurrency, time_scale, seeds, out, clock } => {
            let mut config = load_config(&config)?;
            if let Some(g) = gpu_slots {
                config.inference.gpu_slots = g;
            }
            if let Some(a) = api_concurrency {
                config.inference.api_concurrency = a;
            }
            if let Some(t) = time_scale {
                config.profiler.time_scale = t;
            }
            let mut plan = ExperimentPlan::new(config);
            plan.n_docs = docs;
            plan.pages = PagesDistribution::Fixed(pages);
            plan.levels = levels;
            plan.seeds = (1..=seeds).collect();
            plan.clock = clock.into();
            plan.work_dir = Some(out.join("runs"));
            let sat = plan.saturation();
            println!(
                "ceiling {:.4} docs/s, gpu s/doc {:.2}, wall/doc {:.2} s, C_sat {:.2}",
                sat.ceiling, sat.gpu_seconds_per_doc, sat.wall_per_doc, sat.c_sat
            );
            let reports = run_plan(&plan).map_err(|e| e.to_string())?;
            let (csv, json) = emit_report(&reports, &out).map_err(|e| e.to_string())?;
            print!("{}", report_csv(&reports));
            println!("wrote {} and {}", csv.display(), json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SingleDoc { seed, config, clock } => {
            let config = load_config(&config)?;
            let cal = Calibration::for_config(&config);
            let rt = ClockMode::from(clock).runtime().map_err(|e| e.to_string())?;
            let p = rt.block_on(single_doc_profile(&config, &cal, seed)).map_err(|e| e.to_string())?;
            println!("seed {} wall {:.2} s", p.seed, p.wall);
            for (step, share) in &p.shares {
                println!("{:<9} {:>7.2} s {:>6.1}%", step.as_str(), p.step_seconds[step], share * 100.0);
            }
            println!("{:<9} {:>7} {:>6.1}%", "other", "", p.overhead_share * 100.0);
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { pages, seeds, config } => {
            let config = load_config(&config)?;
            let cal = Calibration::for_config(&config);
            let seeds: Vec<u64> = (1..=seeds).collect();
            let report = calibrate(&config, &cal, pages, &seeds);
            print!("{}", report.table(&cal));
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}
