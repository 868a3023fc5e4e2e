use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniedit_cli::{exit, exit_code, execute, Command, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "uniedit", version, about = "Tuning-free video motion and appearance editing")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Invert the source video and run the three-branch edit.
    Edit(RunArgs),
    /// Invert the source video to z_T.
    Invert(RunArgs),
    /// Sample a video from z_T (generate.latent) or seeded noise.
    Generate(RunArgs),
    /// Animate a still image with a camera path, then edit the result.
    Ti2v(RunArgs),
    /// Correlate optical flow with attention maps of one branch.
    Analyze(RunArgs),
    /// Frame consistency and textual alignment of a frame directory.
    Metrics(RunArgs),
    /// Print the fully resolved configuration as TOML.
    DumpConfig(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply to everything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads; also read from UNIEDIT_THREADS.
    #[arg(long, env = "UNIEDIT_THREADS")]
    threads: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.steps {
            cfg.steps = t;
        }
        cfg.resolve()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (cmd, args) = match cli.command {
        Cmd::Edit(a) => (Some(Command::Edit), a),
        Cmd::Invert(a) => (Some(Command::Invert), a),
        Cmd::Generate(a) => (Some(Command::Generate), a),
        Cmd::Ti2v(a) => (Some(Command::Ti2v), a),
        Cmd::Analyze(a) => (Some(Command::Analyze), a),
        Cmd::Metrics(a) => (Some(Command::Metrics), a),
        Cmd::DumpConfig(a) => (None, a),
    };
    let cfg = args.config()?;
    let Some(cmd) = cmd else {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    };
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(ConfigError("threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let manifest = execute(cmd, &cfg)?;
    println!("{} {}", manifest.command, manifest.config_sha256);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors by itself
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
