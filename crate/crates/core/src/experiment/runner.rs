use std::fs;
use std::path::{Path, PathBuf};

use super::config::{expand_variants, ExperimentConfig, Protocol, Variant};
use super::metrics::{
    epoch_lines, read_metrics, timing_line, to_ndjson, MetricsRecord, SummaryLine, METRICS_FILE, SCHEMA_VERSION,
    TIMING_FILE,
};
use super::report::{write_file, Summary};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Checkpoint};
use crate::trainer::{
    run_de_kd, run_normal_kd, run_re_kd, run_student, run_tf_reg, run_tf_self, Stage1Cache, TrainOutput,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const GRID_FILE: &str = "grid.tsv";
pub const DE_KD_CURVE_FILE: &str = "de_kd_curve.tsv";

/// Short label such as `mlp[256]` or `plain-cnn[8,16,32]+fc64`.
pub fn arch_label(arch: &Architecture) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match arch {
        Architecture::Mlp { hidden } => format!("mlp[{}]", list(hidden)),
        Architecture::PlainCnn { channels, hidden } => format!("plain-cnn[{}]+fc{hidden}", list(channels)),
    }
}

pub fn seed_dir(variant_dir: &Path, seed: u64) -> PathBuf {
    variant_dir.join(format!("seed-{seed}"))
}

pub fn variant_dir(out: &Path, v: &Variant) -> PathBuf {
    if v.name.is_empty() {
        out.to_path_buf()
    } else {
        out.join(&v.name)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Per-seed outcome of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub summary: SummaryLine,
    /// Teacher checkpoint used (kd family).
    pub teacher_checkpoint: Option<PathBuf>,
}

fn load_teacher(cfg: &ExperimentConfig, seed: u64) -> Result<(PathBuf, Checkpoint)> {
    let path = cfg
        .teacher_path(seed)
        .ok_or_else(|| Error::config("teacher_checkpoint", format!("the {} protocol needs one", cfg.protocol)))?;
    if !path.exists() {
        return Err(Error::Checkpoint(format!("teacher checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    if let Some(arch) = &cfg.teacher {
        if &ckpt.descriptor.arch != arch {
            return Err(Error::config(
                "teacher",
                format!(
                    "checkpoint {} holds {}, config expects {}",
                    path.display(),
                    arch_label(&ckpt.descriptor.arch),
                    arch_label(arch)
                ),
            ));
        }
    }
    Ok((path, ckpt))
}

fn save_outputs(dir: &Path, out: &TrainOutput) -> Result<()> {
    out.final_checkpoint.save(dir.join("final.ckpt"))?;
    for ckpt in &out.snapshots {
        ckpt.save(dir.join(format!("snapshot-epoch-{}.ckpt", ckpt.meta.epoch)))?;
    }
    Ok(())
}

/// Trains one seed of a single variant and writes
/// `<dir>/seed-<s>/{metrics.ndjson, timing.ndjson, final.ckpt, ...}`.
pub fn run_seed(variant: &Variant, seed: u64, dir: &Path, cache: &mut Stage1Cache) -> Result<SeedRun> {
    let cfg = &variant.config;
    let (train_set, test_set) = cfg.dataset.load(seed)?;
    if train_set.num_classes() != cfg.dataset.classes() {
        return Err(Error::config("dataset.classes", "dataset and config disagree on the class count"));
    }
    let desc = cfg.student_descriptor(&train_set)?;
    let tc = cfg.train_config()?;
    let run = if variant.name.is_empty() {
        format!("{}/seed-{seed}", cfg.protocol)
    } else {
        format!("{}/{}/seed-{seed}", cfg.protocol, variant.name)
    };

    let mut teacher_checkpoint = None;
    let mut stage1 = None;
    let out = match cfg.protocol {
        Protocol::Baseline | Protocol::Lsr => run_student(&desc, &train_set, &test_set, &tc, seed)?,
        Protocol::TfReg => run_tf_reg(&desc, &train_set, &test_set, &tc, seed)?,
        Protocol::Kd | Protocol::ReKd | Protocol::DeKd => {
            let (path, ckpt) = load_teacher(cfg, seed)?;
            teacher_checkpoint = Some(path);
            match cfg.protocol {
                Protocol::Kd => run_normal_kd(&desc, &ckpt, &train_set, &test_set, &tc, seed)?,
                Protocol::ReKd => run_re_kd(&desc, &ckpt, &train_set, &test_set, &tc, seed)?,
                _ => run_de_kd(&desc, &ckpt, &train_set, &test_set, &tc, seed)?,
            }
        }
        Protocol::TfSelf => {
            let s1_seed = cfg.stage1_seed.unwrap_or(seed);
            let (s1, s2) = run_tf_self(&desc, &train_set, &test_set, &tc, s1_seed, seed, cfg.stage2_init, cache)?;
            stage1 = Some(s1);
            s2
        }
    };

    let dir = seed_dir(dir, seed);
    create_dir(&dir)?;
    let mut lines = Vec::new();
    let mut timing = Vec::new();
    let main_stage = if let Some(s1) = &stage1 {
        lines.extend(epoch_lines(&run, seed, 1, &s1.history.records));
        timing.push(timing_line(&run, seed, 1, &s1.history));
        s1.final_checkpoint.save(dir.join("stage1.ckpt"))?;
        2
    } else {
        1
    };
    lines.extend(epoch_lines(&run, seed, main_stage, &out.history.records));
    timing.push(timing_line(&run, seed, main_stage, &out.history));

    let summary = SummaryLine {
        v: SCHEMA_VERSION,
        run,
        seed,
        protocol: cfg.protocol.to_string(),
        dataset: cfg.dataset.label(),
        model: arch_label(&cfg.student),
        epochs: cfg.epochs,
        steps: out.history.steps,
        best_test_acc: out.history.best_test_acc,
        final_test_acc: out.history.final_record().map_or(f64::NAN, |r| r.test_acc),
        teacher_test_acc: out.history.teacher_test_acc,
        stage1_best_test_acc: stage1.as_ref().map(|s| s.history.best_test_acc),
    };
    lines.push(MetricsRecord::Summary(summary.clone()));
    write_file(&dir.join(METRICS_FILE), &to_ndjson(&lines)?)?;
    write_file(&dir.join(TIMING_FILE), &to_ndjson(&timing)?)?;
    save_outputs(&dir, &out)?;

    Ok(SeedRun {
        summary,
        teacher_checkpoint,
    })
}

/// Expands `cfg` into variants, creates their directories under `out` and
/// writes each variant's `config.toml` (the full config at the root).
pub fn prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Variant>> {
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml_string()?)?;
    let variants = expand_variants(cfg);
    for v in &variants {
        if !v.name.is_empty() {
            let d = variant_dir(out, v);
            create_dir(&d)?;
            write_file(&d.join(CONFIG_FILE), &v.config.to_toml_string()?)?;
        }
    }
    Ok(variants)
}

/// Reads the per-seed summary records of one variant.
pub fn collect_seed_summaries(v: &Variant, dir: &Path) -> Result<Vec<SummaryLine>> {
    let mut out = Vec::new();
    for &seed in &v.config.seeds {
        let path = seed_dir(dir, seed).join(METRICS_FILE);
        let line = read_metrics(&path)?
            .into_iter()
            .find_map(|r| match r {
                MetricsRecord::Summary(s) => Some(s),
                MetricsRecord::Epoch(_) => None,
            })
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no summary record", path.display())))?;
        out.push(line);
    }
    Ok(out)
}

fn tsv_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Merges per-seed outputs: writes each variant's summary, plus `grid.tsv`
/// when there are several variants and `de_kd_curve.tsv` for de-kd.
pub fn finalize(cfg: &ExperimentConfig, variants: &[Variant], out: &Path) -> Result<Vec<Summary>> {
    let mut summaries = Vec::new();
    let mut curve = String::from("teacher_checkpoint\tseed\tteacher_test_acc\tstudent_best_test_acc\n");
    for v in variants {
        let dir = variant_dir(out, v);
        let lines = collect_seed_summaries(v, &dir)?;
        let s = Summary::from_lines(&lines)?;
        s.write(&dir)?;
        if cfg.protocol == Protocol::DeKd {
            for l in &lines {
                let teacher = v.config.teacher_path(l.seed).map(|p| p.display().to_string()).unwrap_or_default();
                curve.push_str(&format!(
                    "{teacher}\t{}\t{}\t{}\n",
                    l.seed,
                    tsv_opt(l.teacher_test_acc),
                    l.best_test_acc
                ));
            }
        }
        summaries.push(s);
    }
    if variants.len() > 1 {
        let mut grid = String::from("variant\talpha\ttau\ta\tteacher_checkpoint\tmean_best_test_acc\tstd_best_test_acc\n");
        for (v, s) in variants.iter().zip(&summaries) {
            let l = &v.config.loss;
            grid.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                v.name,
                tsv_opt(l.alpha),
                tsv_opt(l.tau),
                tsv_opt(l.a),
                v.config.teacher_checkpoint.as_deref().unwrap_or("-"),
                s.mean_best_test_acc,
                s.std_best_test_acc
            ));
        }
        write_file(&out.join(GRID_FILE), &grid)?;
    }
    if cfg.protocol == Protocol::DeKd {
        write_file(&out.join(DE_KD_CURVE_FILE), &curve)?;
    }
    Ok(summaries)
}

/// Runs every variant and seed in this process, then merges the results.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Summary>> {
    cfg.validate()?;
    let variants = prepare(cfg, out)?;
    let mut cache = Stage1Cache::new();
    for v in &variants {
        let dir = variant_dir(out, v);
        for &seed in &v.config.seeds {
            run_seed(v, seed, &dir, &mut cache)?;
        }
    }
    finalize(cfg, &variants, out)
}

/// Output directory: explicit flag, then `output_dir` from the config, then
/// `<env root>/<name>`, then `runs/<name>`.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig, name: &str, env_root: Option<&Path>) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(d) = &cfg.output_dir {
        return d.clone();
    }
    env_root.unwrap_or_else(|| Path::new("runs")).join(name)
}
