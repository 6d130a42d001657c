use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distillkit::experiment::{
    expand_variants, finalize, prepare, preset, preset_names, resolve_output_dir, run_experiment, run_seed,
    soft_target_table, soft_targets_tsv, variant_dir, Comparison, ExperimentConfig, SoftTargetSource, Summary,
    DEFAULT_TAUS,
};
use distillkit::nn::Checkpoint;
use distillkit::trainer::Stage1Cache;
use distillkit::verify::{gradcheck_suite, identity_suite, CheckReport};

/// Teacher-free knowledge distillation experiments.
#[derive(Parser)]
#[command(name = "distillkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config for each of its seeds.
    Run(RunArgs),
    /// Tabulate temperature-softened soft targets of a checkpoint or the virtual teacher.
    InspectSoftTargets(InspectArgs),
    /// Baseline-relative table from summary.json or metrics.ndjson files; the first file is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
        /// Column labels, comma separated; defaults to each protocol name.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Print a shipped preset config.
    Preset {
        #[arg(required_unless_present = "list")]
        name: Option<String>,
        #[arg(long)]
        list: bool,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and architecture.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the loss identities on random cases.
    VerifyIdentities {
        /// Cases per class count.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $DISTILLKIT_OUT/<config name>, else runs/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of worker processes; 1 runs everything in this process.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    parallel: u64,
    /// Internal: index of the variant a worker trains.
    #[arg(long, hide = true, requires = "seed")]
    worker_variant: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    /// Trained checkpoint whose outputs are inspected.
    #[arg(long, requires = "config", conflicts_with_all = ["classes", "a", "labels"])]
    checkpoint: Option<PathBuf>,
    /// Config whose dataset supplies the samples.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of test samples.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Virtual teacher: number of classes.
    #[arg(long, requires_all = ["a", "labels"])]
    classes: Option<usize>,
    /// Virtual teacher: probability of the correct class.
    #[arg(long)]
    a: Option<f64>,
    /// Virtual teacher: labels, comma separated.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<usize>,
    /// Temperatures, comma separated.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::InspectSoftTargets(args) => cmd_inspect(args),
        Cmd::Compare { files, labels } => cmd_compare(&files, labels),
        Cmd::Preset { name, list, out } => cmd_preset(name, list, out),
        Cmd::Gradcheck { seed } => gradcheck_suite(seed).map_err(Into::into).and_then(report),
        Cmd::VerifyIdentities { cases, seed } => identity_suite(cases, seed).map_err(Into::into).and_then(report),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn report(checks: Vec<CheckReport>) -> Result<ExitCode> {
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config, args.seed)?;
    let name = args.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    let env_root = std::env::var_os("DISTILLKIT_OUT").map(PathBuf::from);
    let out = resolve_output_dir(args.out.as_deref(), &cfg, &name, env_root.as_deref());

    if let Some(index) = args.worker_variant {
        let variants = expand_variants(&cfg);
        let v = variants.get(index).with_context(|| format!("no variant {index}"))?;
        let seed = cfg.seeds[0];
        run_seed(v, seed, &variant_dir(&out, v), &mut Stage1Cache::new())?;
        return Ok(ExitCode::SUCCESS);
    }

    let summaries = if args.parallel > 1 {
        run_parallel(&args, &cfg, &out)?
    } else {
        run_experiment(&cfg, &out)?
    };
    for s in &summaries {
        print!("{}", s.to_markdown());
    }
    eprintln!("results in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// One worker process per (variant, seed), at most `--parallel` at a time;
/// each writes its own seed directory, merged afterwards.
fn run_parallel(args: &RunArgs, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Summary>> {
    let variants = prepare(cfg, out)?;
    let exe = std::env::current_exe().context("locating the distillkit executable")?;
    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mut pending = jobs.into_iter();
    let mut running: Vec<(Child, usize, u64)> = Vec::new();
    let mut failures = Vec::new();
    loop {
        while running.len() < args.parallel as usize {
            let Some((i, seed)) = pending.next() else { break };
            let child = Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(&args.config)
                .arg("--out")
                .arg(out)
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--worker-variant")
                .arg(i.to_string())
                .spawn()
                .context("spawning a worker")?;
            running.push((child, i, seed));
        }
        if running.is_empty() {
            break;
        }
        let mut still = Vec::with_capacity(running.len());
        for (mut child, i, seed) in running {
            match child.try_wait()? {
                Some(status) if !status.success() => failures.push(format!("variant {i} seed {seed}: {status}")),
                Some(_) => {}
                None => still.push((child, i, seed)),
            }
        }
        running = still;
        thread::sleep(Duration::from_millis(20));
    }
    if !failures.is_empty() {
        bail!("worker failures:\n  {}", failures.join("\n  "));
    }
    Ok(finalize(cfg, &variants, out)?)
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode> {
    let taus = if args.taus.is_empty() { DEFAULT_TAUS.to_vec() } else { args.taus };
    let rows = if let Some(ckpt_path) = &args.checkpoint {
        let cfg_path = args.config.as_deref().expect("clap requires --config");
        let cfg = load_config(cfg_path, None)?;
        let ckpt = Checkpoint::load(ckpt_path).with_context(|| format!("checkpoint {}", ckpt_path.display()))?;
        let model = ckpt.to_model()?;
        let (_, test) = cfg.dataset.load(args.seed)?;
        let src = SoftTargetSource::Model {
            model: &model,
            data: &test,
            count: args.count,
        };
        soft_target_table(&src, &taus)?
    } else {
        let (Some(classes), Some(a)) = (args.classes, args.a) else {
            bail!("give either --checkpoint with --config, or --classes, --a and --labels");
        };
        let src = SoftTargetSource::Virtual {
            classes,
            a,
            labels: args.labels,
        };
        soft_target_table(&src, &taus)?
    };
    write_or_print(args.out.as_deref(), &soft_targets_tsv(&rows))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(files: &[PathBuf], labels: Vec<String>) -> Result<ExitCode> {
    if !labels.is_empty() && labels.len() != files.len() {
        bail!("{} labels for {} files", labels.len(), files.len());
    }
    let mut columns = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let s = Summary::load(f).with_context(|| format!("summary {}", f.display()))?;
        let label = labels.get(i).cloned().unwrap_or_else(|| s.protocol.clone());
        columns.push((label, s));
    }
    print!("{}", Comparison::new(columns)?.to_markdown());
    Ok(ExitCode::SUCCESS)
}

fn cmd_preset(name: Option<String>, list: bool, out: Option<PathBuf>) -> Result<ExitCode> {
    if list {
        for n in preset_names() {
            println!("{n}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let name = name.expect("clap requires a name without --list");
    let text = preset(&name)?.render()?;
    write_or_print(out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}
