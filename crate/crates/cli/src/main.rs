use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperalign::autodiff::Fault;
use hyperalign::check::{worst, TOLERANCE};
use hyperalign::config::RunConfig;
use hyperalign::data::Dataset;
use hyperalign::encoder::{FeatureSequence, Modality};
use hyperalign::eval::{containment_rate, evaluate, DEFAULT_KS};
use hyperalign::trainer::{read_checkpoint, train, write_checkpoint};
use hyperalign::{Error, Result};

const THREADS_VAR: &str = "H2ARN_THREADS";

/// Sequences embedded per tape.
const EMBED_CHUNK: usize = 64;

#[derive(Parser)]
#[command(
    name = "hyperalign",
    version,
    about = "Hyperbolic text/point-cloud alignment: synthesize data, check gradients, train, evaluate",
    after_long_help = long_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn long_help() -> String {
    format!(
        "Config files are TOML; every key is `section.key`. Defaults:\n\n{}\n\
         Exit codes: 0 ok, 1 gradient check failed, 2 usage or config error, 3 I/O or file format error, \
         4 numeric error.\n{THREADS_VAR} caps worker threads (default: all cores).",
        RunConfig::documented_defaults()
    )
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (feature files and manifest).
    Synth {
        /// Config file; only its [synth] section is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients of the full objective with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides gradcheck.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// OP:FACTOR, scales the backward rule of OP (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train on a dataset directory and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Retrieval recall of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; defaults to paths.data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path; defaults to paths.checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics log path; defaults to paths.metrics, else `<out>.metrics`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Usage(_) | Error::Config { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 4,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn required(value: Option<PathBuf>, fallback: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    value
        .or(fallback)
        .ok_or_else(|| Error::Usage(format!("missing path: pass --{flag} or set paths.{key}")))
}

fn set_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Usage(format!("{THREADS_VAR}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(spec)?;
    let ds = cfg.synth.write(out)?;
    println!("classes={}", cfg.synth.n_classes);
    println!("text_instances={}", ds.texts.len());
    println!("pc_instances={}", ds.pcs.len());
    println!("records={}", ds.records.len());
    println!("out={}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_fault(raw: &str) -> Result<Fault> {
    let bad = || Error::Usage(format!("--inject-fault expects OP:FACTOR, got {raw:?}"));
    let (op, factor) = raw.split_once(':').ok_or_else(bad)?;
    let factor: f64 = factor.parse().map_err(|_| bad())?;
    Ok(Fault {
        op: Box::leak(op.to_string().into_boxed_str()),
        factor,
    })
}

fn gradcheck(config: Option<&Path>, seed: Option<u64>, fault: Option<&str>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let mut toy = cfg.gradcheck;
    if let Some(s) = seed {
        toy.seed = s;
    }
    let fault = fault.map(parse_fault).transpose()?;
    let errors = toy.run(&cfg.loss, fault)?;
    let width = errors.iter().map(|e| e.name.len()).max().unwrap_or(0);
    for e in &errors {
        println!("{:<width$}  {:.3e}", e.name, e.max_rel_error);
    }
    let w = worst(&errors).ok_or_else(|| Error::Usage("model has no parameters".into()))?;
    println!("max_rel_error={:e}", w.max_rel_error);
    if w.max_rel_error < TOLERANCE {
        println!("status=pass");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("status=fail");
        println!(
            "worst={}[{}] analytic={:e} numeric={:e}",
            w.name, w.index, w.analytic, w.numeric
        );
        Ok(ExitCode::from(1))
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config.as_deref())?;
    let data = required(args.data, cfg.paths.data.clone(), "data", "data")?;
    let out = required(args.out, cfg.paths.checkpoint.clone(), "out", "checkpoint")?;
    let metrics_path = args
        .metrics
        .or(cfg.paths.metrics.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics", out.display())));
    let ds = Dataset::load_dir(&data)?;
    let file = fs::File::create(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let mut log = std::io::BufWriter::new(file);
    let mut log_error = None;
    let trained = train(&ds, &cfg.train, &cfg.loss, |m| {
        if log_error.is_none() {
            log_error = writeln!(log, "{m}").err();
        }
    })?;
    if let Some(e) = log_error.or_else(|| log.flush().err()) {
        return Err(Error::Io {
            path: metrics_path,
            source: e,
        });
    }
    write_checkpoint(&out, &trained.checkpoint())?;
    let last = trained.metrics.last().expect("at least one epoch");
    println!("checkpoint={}", out.display());
    println!("metrics={}", metrics_path.display());
    println!("loss={}", last.loss);
    println!("c={}", last.c);
    println!("alpha_text={}", last.alpha_text);
    println!("alpha_pc={}", last.alpha_pc);
    println!("containment={}", last.containment);
    Ok(ExitCode::SUCCESS)
}

fn run_eval(ckpt: &Path, data: &Path, ks: &[usize]) -> Result<ExitCode> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("--ks takes positive integers".into()));
    }
    let ck = read_checkpoint(ckpt)?;
    let ds = Dataset::load_dir(data)?;
    let mismatch = |what: &str, model: usize, data: usize| Error::Config {
        key: "checkpoint".into(),
        detail: format!("model expects {what} width {model}, dataset has {data}"),
    };
    if ds.text_width() != ck.model.d_text {
        return Err(mismatch("text", ck.model.d_text, ds.text_width()));
    }
    if ds.pc_width() != ck.model.d_pc {
        return Err(mismatch("point-cloud", ck.model.d_pc, ds.pc_width()));
    }
    let (model, store) = ck.restore()?;
    let texts: Vec<&FeatureSequence> = ds.texts.iter().collect();
    let pcs: Vec<&FeatureSequence> = ds.pcs.iter().collect();
    let ht = model.embed(&store, &texts, Modality::Text, EMBED_CHUNK)?;
    let hp = model.embed(&store, &pcs, Modality::PointCloud, EMBED_CHUNK)?;
    let pairing = ds.eval_pairing()?;
    let report = evaluate(&ht, &hp, &pairing, ks)?;
    let containment = containment_rate(&ht, &hp, &pairing, ck.loss.k)?;

    println!("{:<6}{:>10}{:>10}", "", "text->pc", "pc->text");
    for (i, k) in report.ks.iter().enumerate() {
        println!(
            "{:<6}{:>10.2}{:>10.2}",
            format!("R@{k}"),
            report.text_to_pc[i],
            report.pc_to_text[i]
        );
    }
    println!("{:<6}{:>10.2}", "Rsum", report.rsum());
    println!();
    for (i, k) in report.ks.iter().enumerate() {
        println!("text_to_pc.r{k}={}", report.text_to_pc[i]);
    }
    for (i, k) in report.ks.iter().enumerate() {
        println!("pc_to_text.r{k}={}", report.pc_to_text[i]);
    }
    println!("rsum={}", report.rsum());
    println!("containment={containment}");
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    set_threads()?;
    match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Gradcheck {
            config,
            seed,
            inject_fault,
        } => gradcheck(config.as_deref(), seed, inject_fault.as_deref()),
        Command::Train(args) => run_train(args),
        Command::Eval { ckpt, data, ks } => run_eval(&ckpt, &data, &ks),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
