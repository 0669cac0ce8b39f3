use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coag_cli::run::EXIT_INVALID;
use coag_cli::{execute, load_config, Mode};

#[derive(Parser, Debug)]
#[command(name = "coag", version, about = "Cluster coagulation simulator and Flory solver")]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    mode: Mode,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replica ensembles.
    #[arg(long, env = "COAG_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("coag: {}: {e}", cli.config.display());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let threads = match cli.threads {
        Some(0) => {
            eprintln!("coag: --threads must be positive");
            return ExitCode::from(EXIT_INVALID as u8);
        }
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("coag: cannot start thread pool: {e}");
        return ExitCode::from(EXIT_INVALID as u8);
    }
    match execute(&cfg, cli.mode, threads) {
        Ok(report) => {
            println!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(report.exit_code as u8)
        }
        Err(e) => {
            eprintln!("coag: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
