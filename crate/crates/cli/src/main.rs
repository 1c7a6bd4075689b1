//! `egmcts` command-line entry point.
//!
//! Exit codes: 0 success (for `plan`: solved), 2 `plan` ran but found no
//! route, 1 any error.

use std::io::BufReader;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use egmcts::harness::{
    cmd_bench, cmd_generate, cmd_match, cmd_noc, cmd_plan, cmd_train, parse_algorithms, GenerateJob, HarnessError, NocJob,
    Overrides, RunConfig, Session,
};
use egmcts::remote;
use egmcts::synthetic::SyntheticDomain;

#[derive(Parser)]
#[command(name = "egmcts", version, about = "Experience-guided MCTS planner for AND-OR decomposition problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a single target.
    Plan {
        /// Target item id.
        target: String,
        #[command(flatten)]
        run: RunFlags,
        /// Also write the search tree as Graphviz DOT.
        #[arg(long)]
        dump_tree: bool,
    },
    /// Train the guidance network with the experience loop.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run planners over the test targets and write comparison tables.
    Bench {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated planner names; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<String>>,
    },
    /// Build a reaction network from records and select targets.
    Noc {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        stock: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_outdegree: usize,
        #[arg(long, default_value_t = 4)]
        min_cost: usize,
        /// Keep only targets greedy DFS cannot solve within this many iterations.
        #[arg(long)]
        screen_limit: Option<usize>,
        /// Oracle for the hardness screen.
        #[arg(long)]
        oracle: Option<String>,
        /// Split sizes as train,validation,test.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Matching degree of a generated route against a reference route.
    Match { generated: PathBuf, reference: PathBuf },
    /// Write a random synthetic domain, target lists and a config.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        validation: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 2)]
        min_depth: usize,
        #[arg(long, default_value_t = 6)]
        max_depth: usize,
    },
    /// Serve a synthetic domain over the line protocol.
    ServeOracle {
        #[arg(long)]
        domain: PathBuf,
        /// Talk over stdin/stdout.
        #[arg(long, conflicts_with = "port")]
        stdio: bool,
        /// Listen on 127.0.0.1:<port>.
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Args, Clone)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// synthetic:<path> or remote:<endpoint> (endpoint: tcp:<host:port> or cmd:<program args>).
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long, conflicts_with = "untrained")]
    weights: Option<PathBuf>,
    /// Use the constant-prior planner instead of trained weights.
    #[arg(long)]
    untrained: bool,
    #[arg(long)]
    stop_on_first: Option<bool>,
    /// Stock file, one id per line. Required with a remote oracle.
    #[arg(long)]
    stock: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn session(&self) -> Result<Session, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            iterations: self.iterations,
            k: self.k,
            c: self.c,
            z: self.z,
            jobs: self.jobs,
            oracle: self.oracle.clone(),
            weights: self.weights.clone(),
            untrained: self.untrained,
            stop_on_first: self.stop_on_first,
            stock: self.stock.clone(),
            output: self.out.clone(),
        });
        Session::open(cfg)
    }
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Plan { target, run, dump_tree } => {
            let session = run.session()?;
            let status = cmd_plan(&session, &target, dump_tree)?;
            Ok(status.exit_code() as u8)
        }
        Command::Train { run } => {
            let session = run.session()?;
            cmd_train(&session)?;
            Ok(0)
        }
        Command::Bench { run, algorithms } => {
            let session = run.session()?;
            let names = algorithms.unwrap_or_else(|| session.config.bench.algorithms.clone());
            let algs = parse_algorithms(&names)?;
            let rows = cmd_bench(&session, &algs)?;
            let solved = rows.iter().filter(|r| r.solved).count();
            eprintln!("{solved}/{} runs solved", rows.len());
            Ok(0)
        }
        Command::Noc {
            records,
            stock,
            out,
            min_outdegree,
            min_cost,
            screen_limit,
            oracle,
            split,
            seed,
        } => {
            let split = match split.as_deref() {
                None => None,
                Some(&[a, b, c]) => Some((a, b, c)),
                Some(_) => return Err(HarnessError::Config("--split takes three sizes: train,validation,test".into())),
            };
            let s = cmd_noc(&NocJob {
                records,
                stock,
                output: out,
                min_outdegree,
                min_cost,
                screen_limit,
                oracle,
                split,
                seed,
            })?;
            eprintln!(
                "{} nodes, {} edges, {} candidates, {} targets",
                s.nodes, s.edges, s.candidates, s.targets
            );
            Ok(0)
        }
        Command::Match { generated, reference } => {
            let report = cmd_match(&generated, &reference)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(0)
        }
        Command::Generate {
            out,
            seed,
            train,
            validation,
            test,
            min_depth,
            max_depth,
        } => {
            let cfg = cmd_generate(&GenerateJob {
                output: out,
                seed,
                train,
                validation,
                test,
                difficulty: (min_depth, max_depth),
                ..GenerateJob::default()
            })?;
            println!("{}", cfg.display());
            Ok(0)
        }
        Command::ServeOracle { domain, stdio, port } => {
            let d = SyntheticDomain::load(&domain)?;
            let io = |source| HarnessError::Io {
                path: domain.clone(),
                source,
            };
            if stdio {
                let stdin = std::io::stdin();
                remote::serve(&d, d.stock(), BufReader::new(stdin.lock()), std::io::stdout().lock()).map_err(io)?;
                return Ok(0);
            }
            let Some(port) = port else {
                return Err(HarnessError::Config("serve-oracle needs --stdio or --port".into()));
            };
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(io)?;
            eprintln!("listening on {}", listener.local_addr().map_err(io)?);
            let stock = Arc::new(d.stock().clone());
            remote::serve_tcp(listener, Arc::new(d), stock).map_err(io)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // clap reports usage errors with status 2, which is reserved for "no route"
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}
