use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use follicle::cli::{self, Method, Overrides};
use follicle::Error;

#[derive(Parser)]
#[command(name = "follicle", version, about = "Follicle selection solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// char, fv or both.
    #[arg(long)]
    method: Option<String>,
    /// CSV of frozen controls `t,u_1..u_n,U`.
    #[arg(long)]
    freeze_controls: Option<PathBuf>,
    #[arg(long)]
    fp_tol: Option<f64>,
    #[arg(long)]
    fp_max_iter: Option<usize>,
    #[arg(long)]
    window_safety: Option<f64>,
    #[arg(long)]
    disable_mitosis: bool,
    #[arg(long)]
    zero_loss: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, env = "FOLLICLE_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and write the maturity series, snapshots and manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write back-traced characteristic chains.
        #[arg(long)]
        dump_chains: bool,
    },
    /// Convergence of the finite-volume scheme against the characteristic solution.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Cells per axis, at least three values.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
    },
    /// Run the property suite.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Print K, K1, K2, delta, C1f and C2f.
    Constants {
        #[command(flatten)]
        common: Common,
    },
}

fn setup(c: &Common) -> Result<cli::Setup, Error> {
    let method = c.method.as_deref().map(str::parse::<Method>).transpose()?;
    let ov = Overrides {
        method,
        freeze_controls: c.freeze_controls.clone(),
        fp_tol: c.fp_tol,
        fp_max_iter: c.fp_max_iter,
        window_safety: c.window_safety,
        disable_mitosis: c.disable_mitosis,
        zero_loss: c.zero_loss,
        seed: c.seed,
    };
    let s = cli::load(&c.config, &ov)?;
    cli::configure_threads(c.threads.or(s.config.threads));
    Ok(s)
}

fn execute(cmd: &Command) -> Result<bool, Error> {
    match cmd {
        Command::Run {
            common,
            dump_chains,
        } => {
            let s = setup(common)?;
            let m = cli::cmd_run(&s, &common.out, *dump_chains)?;
            println!("wrote {} files to {}", m.files.len(), common.out.display());
            Ok(true)
        }
        Command::Converge {
            common,
            resolutions,
        } => {
            let s = setup(common)?;
            let r = cli::cmd_converge(&s, &common.out, resolutions.as_deref())?;
            println!("{:>6} {:>24} {:>10}", "n", "linf maturity error", "order");
            for row in &r.maturity {
                println!(
                    "{:>6} {:>24.6e} {:>10.3}",
                    row.resolution, row.linf_error, row.order
                );
            }
            Ok(true)
        }
        Command::Verify { common } => {
            let s = setup(common)?;
            let r = cli::cmd_verify(&s, &common.out)?;
            for p in &r.properties {
                println!(
                    "{:<24} {:<4} {:e} (threshold {:e})",
                    p.name,
                    if p.passed { "pass" } else { "FAIL" },
                    p.value,
                    p.threshold
                );
            }
            Ok(r.passed)
        }
        Command::Constants { common } => {
            let s = setup(common)?;
            let c = cli::cmd_constants(&s)?;
            println!("K     {}", c.k);
            println!("K1    {}", c.k1);
            println!("K2    {}", c.k2);
            println!("delta {}", c.delta);
            for (f, (a, b)) in c.c1.iter().zip(&c.c2).enumerate() {
                println!("C1_{}  {a}", f + 1);
                println!("C2_{}  {b}", f + 1);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match execute(&args.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let code = cli::exit_code(&e);
            let err = anyhow::Error::new(e).context("follicle failed");
            eprintln!("{err:#}");
            ExitCode::from(code as u8)
        }
    }
}
