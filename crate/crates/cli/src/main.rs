mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glsgn::imaging::{load_image, save_image, Image};
use glsgn::model::Variant;
use glsgn::synth::{procedural_background, write_dataset, DatasetSpec, DegradationKind};
use glsgn::train::{self, Checkpoint, TrainRun};
use glsgn::verify::{self, SuiteOptions};
use glsgn::Error;

use config::CliConfig;

/// Global-local stepwise image restoration: synthesis, training, evaluation.
#[derive(Parser, Debug)]
#[command(name = "glsgn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate degraded/clean pairs with train and test manifests.
    Synth(SynthArgs),
    /// Train a model and write `checkpoint.glsg` and `train_log.csv`.
    Train(TrainArgs),
    /// Report mean PSNR/SSIM of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Restore one image, tiling inputs larger than the model.
    Restore(RestoreArgs),
    /// Train and evaluate one ablation variant.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Validate a configuration and print it with every default filled in.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Degradation: rain, reflection or haze.
    #[arg(long)]
    task: DegradationKind,
    /// Directory of background images (.ppm, or .png with the `png` feature).
    #[arg(long, required_unless_present = "procedural", conflicts_with = "procedural")]
    bg_dir: Option<PathBuf>,
    /// Use N seeded procedural backgrounds instead of a directory.
    #[arg(long, value_name = "N")]
    procedural: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Fraction of pairs assigned to the training manifest.
    #[arg(long, default_value_t = 0.875)]
    train_fraction: f64,
    /// TOML configuration; only its `[synth]` ranges are used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test manifest.
    #[arg(long)]
    data: PathBuf,
    /// Line-delimited JSON report; defaults to `<checkpoint>.eval.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// One of global-only, global-local, +pn, +pac, full.
    #[arg(long, allow_hyphen_values = true)]
    variant: Variant,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation manifest; defaults to the training manifest.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint, log and report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Add a case with a deliberately wrong gradient (negative control).
    #[arg(long)]
    sabotage: bool,
    /// Skip the tiny end-to-end model cases.
    #[arg(long)]
    ops_only: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not HxW"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Worker threads from `GLSGN_THREADS`; 0 (the default) means single-threaded.
fn threads() -> Result<usize, String> {
    match std::env::var("GLSGN_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("GLSGN_THREADS=`{v}` is not a nonnegative integer")),
        Err(_) => Ok(0),
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, Error> {
    match path {
        Some(p) => CliConfig::load(p),
        None => Ok(CliConfig::default()),
    }
}

fn backgrounds(args: &SynthArgs) -> Result<Vec<Image>, Error> {
    if let Some(n) = args.procedural {
        let (h, w) = args.size;
        return Ok((0..n as u64)
            .map(|i| procedural_background(args.seed ^ (i << 32), h, w))
            .collect());
    }
    let dir = args.bg_dir.as_ref().expect("clap enforces one source");
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no background images (.ppm/.png) in {}",
            dir.display()
        )));
    }
    paths.iter().map(load_image).collect()
}

fn cmd_synth(args: SynthArgs, threads: usize) -> Result<(), Error> {
    let cfg = load_config(args.config.as_deref())?;
    let bgs = if args.count == 0 && args.procedural.is_none() {
        Vec::new()
    } else {
        backgrounds(&args)?
    };
    let spec = DatasetSpec {
        kind: args.task,
        count: args.count,
        seed: args.seed,
        height: args.size.0,
        width: args.size.1,
        train_fraction: args.train_fraction,
        ranges: cfg.synth,
        threads,
    };
    let summary = write_dataset(&spec, &bgs, &args.out_dir)?;
    println!(
        "wrote {} pairs ({} train, {} test) to {}",
        summary.records.len(),
        summary.train.len(),
        summary.test.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_training(cfg: &CliConfig, run: &TrainRun, data: &Path, out: &Path) -> Result<Checkpoint, Error> {
    let pairs = train::load_pairs(data)?;
    let outcome = train::train(&cfg.model, &pairs, run)?;
    create_dir(out)?;
    let ck_path = out.join("checkpoint.glsg");
    outcome.checkpoint.save(&ck_path)?;
    train::write_log(&out.join("train_log.csv"), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "step {}: total {:.5} (pixel {:.5}, perceptual {:.5}, adversarial {:.5}, discriminator {:.5})",
            last.step, last.total, last.l_pixel, last.l_perc, last.l_adv_g, last.l_d
        );
    }
    println!("checkpoint {}", ck_path.display());
    Ok(outcome.checkpoint)
}

fn schedule(cfg: &CliConfig, steps: Option<u64>, seed: Option<u64>) -> TrainRun {
    TrainRun {
        steps: steps.unwrap_or(cfg.train.steps),
        seed: seed.unwrap_or(cfg.train.seed),
        ..cfg.train.clone()
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = load_config(args.config.as_deref())?;
    let run = schedule(&cfg, args.steps, args.seed);
    run_training(&cfg, &run, &args.data, &args.out).map(|_| ())
}

fn print_report(r: &train::EvalReport) {
    println!(
        "{}: {} pairs, PSNR {:.3} dB, SSIM {:.4} (degraded input: PSNR {:.3} dB, SSIM {:.4})",
        r.variant, r.count, r.mean_psnr, r.mean_ssim, r.mean_baseline_psnr, r.mean_baseline_ssim
    );
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let pairs = train::load_pairs(&args.data)?;
    let report = train::evaluate(&ck, &pairs)?;
    let path = args
        .report
        .unwrap_or_else(|| args.checkpoint.with_extension("eval.jsonl"));
    report.write(&path)?;
    print_report(&report);
    println!("report {}", path.display());
    Ok(())
}

fn cmd_restore(args: RestoreArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let img = load_image(&args.input)?;
    let out = train::restore_image(&ck.model(), &img)?;
    save_image(&out, &args.output)?;
    println!(
        "restored {}x{} -> {}",
        out.height(),
        out.width(),
        args.output.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.model = cfg.model.with_variant(args.variant);
    let run = schedule(&cfg, args.steps, args.seed);
    let ck = run_training(&cfg, &run, &args.data, &args.out)?;
    let eval = args.eval_data.as_deref().unwrap_or(&args.data);
    let report = train::evaluate(&ck, &train::load_pairs(eval)?)?;
    let path = args.out.join("report.jsonl");
    report.write(&path)?;
    print_report(&report);
    println!("report {}", path.display());
    Ok(())
}

/// Returns whether every case passed.
fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool, Error> {
    let missing = verify::unexercised_ops()?;
    let report = verify::gradient_suite(SuiteOptions {
        include_end_to_end: !args.ops_only,
        include_sabotaged: args.sabotage,
    });
    print!("{report}");
    for op in &missing {
        println!("registered op `{op}` has no gradient case");
    }
    let failures: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
    if failures.is_empty() && missing.is_empty() {
        println!("all {} cases passed", report.entries.len());
        Ok(true)
    } else {
        println!("failed: {}", failures.join(", "));
        Ok(false)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match threads() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, threads).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Restore(a) => cmd_restore(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Config { config } => load_config(config.as_deref()).map(|c| {
            print!("{}", c.to_toml());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
