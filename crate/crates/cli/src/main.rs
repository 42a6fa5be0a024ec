use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use volterra_cli::bench::{self, BenchConfig};
use volterra_cli::verify::{self, Fault, VerifyOptions};
use volterra_cli::{exit_code, index_json, EXIT_FAILURE, EXIT_OK};
use volterra_train::{train_demo, DemoConfig};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 verification or runtime failure, 2 usage error, 3 resource limit.

CSV schemas (fixed column sets):
  verify       suite,module,cases,failures,max_error,tolerance,status
  bench-speed  impl,phase,order,n,batch,channels,median_ns,theory_ops,threads,status
  bench-space  order,n,kernel,channels,evc_terms,tvc_terms,evc_terms_total,tvc_terms_total,
               evc_bytes,tvc_bytes,evc_theory_bytes,tvc_theory_bytes,ratio,index_bytes,status
  train-demo   epoch,train_loss,train_acc,test_acc,wall_seconds";

#[derive(Debug, Parser)]
#[command(name = "evc", version, about = "Unique-term Volterra convolution: checks, benchmarks, index export, training demo")]
#[command(after_help = AFTER_HELP)]
struct Cli {
    /// Seed for every random draw (default: 0, or the config seed for train-demo).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; above 1, benchmarks split their vectors across threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Output file for the command's CSV or JSON (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every correctness suite; the report goes to stdout and the CSV summary to --out.
    Verify {
        /// Random kernels per (n, order) point of the equivalence grids.
        #[arg(long, default_value_t = 100)]
        cases: usize,

        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Median wall time of dense and unique-term filters, forward and backward.
    BenchSpeed(BenchArgs),
    /// Term-buffer bytes of dense and unique-term filters for one patch.
    BenchSpace(BenchArgs),
    /// Export position matrices and gather tables as JSON.
    GenIndices {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        order: usize,
    },
    /// Train the small conv + attention classifier on a CIFAR-100 subset.
    TrainDemo {
        #[arg(long, default_value = "configs/demo.cfg")]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    Pcm,
}

#[derive(Debug, clap::Args)]
struct BenchArgs {
    /// Comma-separated filter orders.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    orders: Vec<usize>,

    /// Comma-separated kernel sizes as HxW.
    #[arg(long, value_delimiter = ',', default_value = "3x3", value_parser = parse_kernel)]
    kernels: Vec<(usize, usize)>,

    #[arg(long, default_value_t = 10)]
    channels: usize,

    #[arg(long, default_value_t = 10)]
    out_channels: usize,

    #[arg(long, default_value_t = 10)]
    batch: usize,

    /// Timed runs per measurement (at least 3); the median is reported.
    #[arg(long, default_value_t = 5)]
    repetitions: usize,

    /// Untimed runs before timing (at least 1).
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

fn parse_kernel(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

impl BenchArgs {
    fn config(&self, cli: &Cli) -> BenchConfig {
        BenchConfig {
            orders: self.orders.clone(),
            kernel_sizes: self.kernels.clone(),
            channels: self.channels,
            out_channels: self.out_channels,
            batch: self.batch,
            repetitions: self.repetitions,
            warmup: self.warmup,
            threads: cli.threads,
            seed: cli.seed.unwrap_or(0),
        }
    }
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    let mut w = sink(out)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).with_context(|| match out {
        Some(p) => format!("writing {}", p.display()),
        None => "writing stdout".into(),
    })
}

fn run(cli: &Cli) -> Result<u8> {
    if cli.threads == 0 {
        anyhow::bail!(volterra_core::Error::InvalidArgument("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("starting the thread pool")?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Verify { cases, inject_fault } => {
            let opts = VerifyOptions {
                seed: cli.seed.unwrap_or(0),
                cases_per_point: *cases,
                fault: inject_fault.map(|FaultArg::Pcm| Fault::Pcm),
                ..Default::default()
            };
            let report = verify::run_all(&opts);
            print!("{}", report.to_text());
            if let Some(path) = out {
                emit(Some(path), &report.to_csv())?;
            }
            return Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE });
        }
        Command::BenchSpeed(args) => {
            let rows = bench::bench_speed(&args.config(cli))?;
            emit(out, &bench::speed_csv(&rows))?;
        }
        Command::BenchSpace(args) => {
            let rows = bench::bench_space(&args.config(cli))?;
            emit(out, &bench::space_csv(&rows))?;
        }
        Command::GenIndices { n, order } => {
            let json = index_json(*n, *order)?;
            emit(out, &json)?;
        }
        Command::TrainDemo { config } => {
            let mut cfg = DemoConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = cli.seed {
                cfg.sgd.seed = seed;
            }
            let mut w = sink(out)?;
            let log = train_demo(&cfg, &mut w)?;
            w.flush().context("writing the training log")?;
            if let Some(acc) = log.final_test_acc() {
                eprintln!("final test accuracy: {acc:.4}");
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
