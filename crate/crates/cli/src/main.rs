use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use growfem_core::benchmark::{convergence_study, BenchError, BenchmarkParams};
use growfem_core::laser_path::{parse_cli_with_warnings, LaserPath};
use growfem_core::pipeline::PipelineError;
use growfem_core::{run, PipelineConfig, RunOptions};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "growfem", version, about = "Thermal simulation of powder-bed printing on growing octree meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Number of parts (overrides partition.parts).
        #[arg(long)]
        parts: Option<usize>,
        /// Write a VTK file every K steps (0 disables).
        #[arg(long = "vtk-every")]
        vtk_every: Option<usize>,
        /// Output directory for reports and VTK files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a CLI scan-path file and print statistics.
    ParseCli { file: PathBuf },
    /// Run the moving-source verification study and print DOFs against error.
    BenchVerification {
        #[arg(long, default_value_t = 3)]
        refinements: u8,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            parts,
            vtk_every,
            out,
        } => simulate(&config, RunOptions { parts, vtk_every, out_dir: out }),
        Command::ParseCli { file } => parse_cli_file(&file),
        Command::BenchVerification { refinements } => bench_verification(refinements),
    }
}

fn simulate(config: &Path, opts: RunOptions) -> ExitCode {
    let cfg = match PipelineConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let out_dir = opts.out_dir.clone().or_else(|| cfg.output_dir.clone());
    let artifacts = match run(&cfg, &opts) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let report = &artifacts.report;
    if let Some(dir) = out_dir {
        if let Err(e) = report.write(&dir) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
        log::info!("reports written to {}", dir.display());
    }
    println!(
        "{} steps, {} leaves, {} active cells, {} DOFs, peak {} leaves, {:.2} s",
        report.steps.len(),
        artifacts.mesh.len(),
        artifacts.dofs.num_cells(),
        artifacts.dofs.num_dofs(),
        report.peak_cells,
        report.wall_seconds
    );
    for (name, secs) in report.timers.entries() {
        println!("  {name:<14} {secs:.3} s");
    }
    ExitCode::SUCCESS
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_input_error() {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::from(EXIT_NUMERICAL)
    }
}

fn parse_cli_file(file: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match parse_cli_with_warnings(&text) {
        Ok((path, warnings)) => {
            for w in warnings {
                eprintln!("warning: {}:{}: {}", file.display(), w.line, w.message);
            }
            print_stats(&path);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}:{}: {}", file.display(), e.line, e.message);
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn print_stats(path: &LaserPath) {
    let polylines: usize = path.layers.iter().map(|l| l.polylines.len()).sum();
    let hatches: usize = path.layers.iter().map(|l| l.hatches.len()).sum();
    let length: f64 = path
        .layers
        .iter()
        .flat_map(|l| l.entities())
        .map(|pts| pts.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum::<f64>())
        .sum();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in path.layers.iter().flat_map(|l| l.entities()).flatten() {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    println!("layers      {}", path.layers.len());
    println!("polylines   {polylines}");
    println!("hatches     {hatches}");
    println!("scan length {length:.6} mm");
    if let (Some(first), Some(last)) = (path.layers.first(), path.layers.last()) {
        println!("heights     {} .. {} mm", first.height, last.height);
    }
    if lo[0].is_finite() {
        println!("extent      [{}, {}] x [{}, {}] mm", lo[0], hi[0], lo[1], hi[1]);
    }
}

fn bench_verification(refinements: u8) -> ExitCode {
    match convergence_study(&BenchmarkParams::default(), refinements) {
        Ok(study) => {
            print!("{}", study.to_csv());
            println!("# slope {:.4}", study.slope);
            ExitCode::SUCCESS
        }
        Err(e @ (BenchError::TooFewPoints(_) | BenchError::Parameter(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}
