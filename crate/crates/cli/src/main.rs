//! `ssr`: generate task streams, train, evaluate, report, and self-verify.

mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ssr_core::harness::{
    generate_task_stream, run_sweep, score_task, ContinualSession, Learner, OrderKind,
    StreamSource, TaskStream,
};
use ssr_core::persist::{
    load_checkpoint, round4, save_checkpoint, sweep_csv, sweep_table, write_atomic, Checkpoint,
    EvalReport, RunReport,
};
use ssr_core::verify::{run_equivalence_suite, EQUIVALENCE_TOLERANCE};
use ssr_core::RunConfig;

use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "ssr",
    version,
    about = "Continual learning with analytic subspace routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic task stream and the effective config.
    GenTasks {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every phase, checkpointing after each one.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stream file from `gen-tasks`; regenerated from the config otherwise.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a stream's eval splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the scores recorded in a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the router identities on random problems (and a checkpoint's
    /// stored router, if given).
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// OP (BWT) grid over split layer and expansion size.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
        split_layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512])]
        expanded_dims: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reseeds every component.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    generalist_route: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OrderArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Custom,
}

impl RunArgs {
    fn overrides_config(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.order.is_some()
            || self.generalist_route
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| CliError::file(p, e))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(order) = self.order {
            cfg.stream.order = match order {
                OrderArg::One => OrderKind::Order1,
                OrderArg::Two => OrderKind::Order2,
                OrderArg::Custom => OrderKind::Custom,
            };
        }
        if let Some(c) = self.chunk_size {
            cfg.chunk_size = c;
        }
        if self.generalist_route {
            cfg.generalist_route = true;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenTasks { run, out } => gen_tasks(&run.resolve()?, &out),
        Command::Train {
            run,
            checkpoint,
            stream,
            out,
        } => train(&run, checkpoint.as_deref(), stream.as_deref(), &out),
        Command::Eval {
            checkpoint,
            stream,
            out,
        } => eval(&checkpoint, stream.as_deref(), out.as_deref()),
        Command::Report { checkpoint, out } => report(&checkpoint, out.as_deref()),
        Command::Verify {
            seed,
            instances,
            checkpoint,
        } => verify(seed, instances, checkpoint.as_deref()),
        Command::Sweep {
            run,
            split_layers,
            expanded_dims,
            out,
        } => sweep(&run.resolve()?, &split_layers, &expanded_dims, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::file(path, e))
}

fn load_stream(path: Option<&Path>, cfg: &RunConfig) -> Result<TaskStream, CliError> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::file(p, e))?;
            let stream: TaskStream =
                serde_json::from_slice(&bytes).map_err(|e| CliError::file(p, e))?;
            stream
                .spec
                .validate(stream.vocab)
                .map_err(|e| CliError::file(p, e))?;
            if stream.vocab != cfg.encoder.vocab {
                return Err(CliError::Usage(format!(
                    "stream vocabulary {} does not match the encoder's {}",
                    stream.vocab, cfg.encoder.vocab
                )));
            }
            Ok(stream)
        }
        None => Ok(generate_task_stream(&cfg.stream, cfg.encoder.vocab)?),
    }
}

fn gen_tasks(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let stream = generate_task_stream(&cfg.stream, cfg.encoder.vocab)?;
    ensure_dir(out)?;
    let mut json = serde_json::to_string(&stream).map_err(ssr_core::Error::from)?;
    json.push('\n');
    write_file(&out.join("stream.json"), &json)?;
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    let (eval, router, train) = cfg.stream.split_sizes();
    println!(
        "{} tasks, {train}/{router}/{eval} train/router/eval samples each, arrival order {:?}",
        stream.task_count(),
        stream.arrival_order()?
    );
    Ok(())
}

fn write_run_report(out: &Path, ck: &Checkpoint) -> Result<RunReport, CliError> {
    let report = RunReport::from_progress(&ck.progress)?;
    write_file(&out.join("report.txt"), &report.to_table())?;
    write_file(&out.join("report.csv"), &report.to_csv())?;
    write_file(&out.join("report.json"), &report.to_json())?;
    Ok(report)
}

fn train(
    args: &RunArgs,
    resume: Option<&Path>,
    stream_path: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let (cfg, saved) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p).map_err(|e| CliError::file(p, e))?;
            let mut cfg = ck.config.clone();
            if let Some(c) = args.chunk_size {
                cfg.chunk_size = c;
            }
            if args.overrides_config() && args.resolve()? != cfg {
                return Err(CliError::Usage(
                    "config flags disagree with the checkpoint being resumed".into(),
                ));
            }
            (cfg, Some(ck))
        }
        None => (args.resolve()?, None),
    };
    let stream = load_stream(stream_path, &cfg)?;
    let learner = Learner::new(cfg.clone())?;
    let mut source = StreamSource::new(&stream)?;
    let mut session = match saved {
        Some(ck) => ContinualSession::resume(&learner, ck.router, ck.bank, ck.progress)?,
        None => ContinualSession::new(&learner, stream.task_count())?,
    };
    ensure_dir(out)?;

    let total = stream.task_count();
    while session.phases_done() < total {
        session.step(&mut source)?;
        let phase = session.phases_done();
        let ck = Checkpoint {
            config: cfg.clone(),
            router: session.router().clone(),
            bank: session.bank().clone(),
            progress: session.progress().clone(),
        };
        let path = out.join(format!("phase-{phase:02}.ckpt"));
        save_checkpoint(&ck, &path).map_err(|e| CliError::file(&path, e))?;
        let last = session
            .progress()
            .routing
            .averages()
            .last()
            .copied()
            .unwrap_or(0.0);
        info!("phase {phase}/{total}: routing accuracy {last:.4}");
    }

    let ck = Checkpoint {
        config: cfg,
        router: session.router().clone(),
        bank: session.bank().clone(),
        progress: session.progress().clone(),
    };
    let path = out.join("final.ckpt");
    save_checkpoint(&ck, &path).map_err(|e| CliError::file(&path, e))?;
    print!("{}", write_run_report(out, &ck)?.to_table());
    Ok(())
}

fn eval(ck_path: &Path, stream_path: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(ck_path).map_err(|e| CliError::file(ck_path, e))?;
    let stream = load_stream(stream_path, &ck.config)?;
    let learner = Learner::new(ck.config.clone())?;
    let mut accuracy = Vec::new();
    let mut routing = Vec::new();
    for &id in &ck.progress.task_order {
        let task = stream.tasks.get(id).ok_or_else(|| {
            CliError::Usage(format!("stream has no task {id} (checkpoint learned it)"))
        })?;
        let s = score_task(
            &learner,
            ck.router.weights(),
            &ck.progress.routes,
            &ck.bank,
            id,
            &task.eval,
        )?;
        accuracy.push(s.accuracy);
        routing.push(s.routing_accuracy);
    }
    let report = EvalReport::new(ck.progress.task_order.clone(), accuracy, routing);
    if let Some(out) = out {
        ensure_dir(out)?;
        write_file(&out.join("eval.txt"), &report.to_table())?;
        write_file(&out.join("eval.csv"), &report.to_csv())?;
        write_file(&out.join("eval.json"), &report.to_json())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn report(ck_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(ck_path).map_err(|e| CliError::file(ck_path, e))?;
    let report = match out {
        Some(out) => {
            ensure_dir(out)?;
            write_run_report(out, &ck)?
        }
        None => RunReport::from_progress(&ck.progress)?,
    };
    print!("{}", report.to_table());
    Ok(())
}

fn verify(seed: u64, instances: usize, checkpoint: Option<&Path>) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let summary = run_equivalence_suite(instances, seed)?;
    let r = summary.residuals;
    println!(
        "{instances} random ridge problems (seed {seed}), tolerance {EQUIVALENCE_TOLERANCE:e}"
    );
    println!(
        "  max joint vs recursive residual: {:.3e}",
        r.joint_vs_recursive
    );
    println!("  max weight-form residual:        {:.3e}", r.weight_forms);
    println!("  max chunk-size residual:         {:.3e}", r.chunking);
    println!("  max R symmetry residual:         {:.3e}", r.symmetry);
    println!("  max W - RQ residual:             {:.3e}", r.consistency);
    let mut failures = Vec::new();
    if !summary.passed() {
        failures.push(format!("worst residual {:.3e}", r.worst()));
    }
    if let Some(p) = checkpoint {
        let ck = load_checkpoint(p).map_err(|e| CliError::file(p, e))?;
        let sym = ck.router.symmetry_residual();
        let cons = ck.router.consistency_residual();
        let pd = ck.router.is_positive_definite();
        println!("checkpoint {}", p.display());
        println!("  R symmetry residual: {sym:.3e}");
        println!("  W - RQ residual:     {cons:.3e}");
        println!("  R positive definite: {pd}");
        if sym > EQUIVALENCE_TOLERANCE || cons > EQUIVALENCE_TOLERANCE || !pd {
            failures.push(format!(
                "checkpoint {} violates router invariants",
                p.display()
            ));
        }
    }
    if failures.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}

fn sweep(
    cfg: &RunConfig,
    split_layers: &[usize],
    dims: &[usize],
    out: &Path,
) -> Result<(), CliError> {
    let mut report = run_sweep(cfg, split_layers, dims)?;
    for c in &mut report.cells {
        c.op = round4(c.op);
        c.bwt = c.bwt.map(round4);
        c.min_routing_accuracy = round4(c.min_routing_accuracy);
    }
    ensure_dir(out)?;
    let table = sweep_table(&report);
    write_file(&out.join("sweep.txt"), &table)?;
    write_file(&out.join("sweep.csv"), &sweep_csv(&report))?;
    let mut json = serde_json::to_string_pretty(&report).map_err(ssr_core::Error::from)?;
    json.push('\n');
    write_file(&out.join("sweep.json"), &json)?;
    print!("{table}");
    Ok(())
}
