use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, FrozenTeacher, TrainConfig, TrainOutput};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::nn::{Checkpoint, Model, ModelDescriptor};
use crate::seed::RunSeeds;

/// Trains a fresh model with a teacher-free loss (CE, LSR or Tf-KD_reg).
pub fn run_student(
    desc: &ModelDescriptor,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    let mut model = Model::build(desc, RunSeeds::from_root(seed).init)?;
    train(&mut model, train_set, test_set, cfg, seed, None)
}

fn run_with_teacher(
    desc: &ModelDescriptor,
    teacher: &Checkpoint,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainOutput, FrozenTeacher)> {
    if !cfg.loss.needs_teacher() {
        return Err(Error::InvalidArgument(format!(
            "distillation needs a teacher-based loss, got {}",
            cfg.loss.kind
        )));
    }
    let teacher = FrozenTeacher::from_checkpoint(teacher)?;
    let mut model = Model::build(desc, RunSeeds::from_root(seed).init)?;
    let out = train(&mut model, train_set, test_set, cfg, seed, Some(&teacher))?;
    Ok((out, teacher))
}

/// Student trained against a frozen, loaded teacher.
pub fn run_normal_kd(
    student: &ModelDescriptor,
    teacher: &Checkpoint,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    run_with_teacher(student, teacher, train_set, test_set, cfg, seed).map(|r| r.0)
}

/// The larger model is trained; a smaller trained checkpoint teaches it.
pub fn run_re_kd(
    teacher: &ModelDescriptor,
    student: &Checkpoint,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    run_with_teacher(teacher, student, train_set, test_set, cfg, seed).map(|r| r.0)
}

/// Normal KD from a poorly trained snapshot. The history records the
/// teacher's test accuracy.
pub fn run_de_kd(
    student: &ModelDescriptor,
    poor_teacher: &Checkpoint,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    let (mut out, teacher) = run_with_teacher(student, poor_teacher, train_set, test_set, cfg, seed)?;
    out.history.teacher_test_acc = Some(evaluate(teacher.model(), test_set)?.accuracy);
    Ok(out)
}

/// Trains with the virtual-teacher regularizer. No teacher network exists.
pub fn run_tf_reg(
    desc: &ModelDescriptor,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    if cfg.loss.kind != LossKind::TfReg {
        return Err(Error::InvalidArgument(format!("tf-reg protocol got a {} loss", cfg.loss.kind)));
    }
    run_student(desc, train_set, test_set, cfg, seed)
}

/// Starting point of the second self-distillation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Init {
    /// Fresh initialization from the stage-2 seed stream.
    #[default]
    Fresh,
    /// Continue from the stage-1 weights.
    FineTune,
}

/// In-memory store of stage-1 runs, keyed by model, schedule, seed and data.
#[derive(Debug, Default)]
pub struct Stage1Cache {
    entries: HashMap<String, TrainOutput>,
    trained: usize,
}

impl Stage1Cache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of stage-1 runs actually trained (cache misses).
    pub fn trained(&self) -> usize {
        self.trained
    }

    fn key(desc: &ModelDescriptor, cfg: &TrainConfig, seed: u64, data: &Dataset) -> Result<String> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in data.features().iter().map(|v| v.to_bits()).chain(data.labels().iter().map(|&l| l as u64)) {
            h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(format!(
            "{}|{}|{seed}|{}|{h:016x}",
            serde_json::to_string(desc)?,
            serde_json::to_string(cfg)?,
            data.len()
        ))
    }
}

/// Two-stage self-distillation. Stage 1 trains a CE baseline from
/// `stage1_seed` (or reuses a cached one); stage 2 distills that frozen
/// checkpoint into a model seeded from `stage2_seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_tf_self(
    desc: &ModelDescriptor,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    stage1_seed: u64,
    stage2_seed: u64,
    init: Stage2Init,
    cache: &mut Stage1Cache,
) -> Result<(TrainOutput, TrainOutput)> {
    if cfg.loss.kind != LossKind::TfSelf {
        return Err(Error::InvalidArgument(format!("tf-self protocol got a {} loss", cfg.loss.kind)));
    }
    let stage1_cfg = TrainConfig {
        loss: LossSpec::cross_entropy(),
        snapshot_epochs: Vec::new(),
        ..cfg.clone()
    };
    let key = Stage1Cache::key(desc, &stage1_cfg, stage1_seed, train_set)?;
    let stage1 = match cache.entries.get(&key) {
        Some(hit) => hit.clone(),
        None => {
            let out = run_student(desc, train_set, test_set, &stage1_cfg, stage1_seed)?;
            cache.trained += 1;
            cache.entries.insert(key, out.clone());
            out
        }
    };

    let teacher = FrozenTeacher::from_checkpoint(&stage1.final_checkpoint)?;
    let mut model = match init {
        Stage2Init::Fresh => Model::build(desc, RunSeeds::second_stage(stage2_seed).init)?,
        Stage2Init::FineTune => stage1.final_checkpoint.to_model()?,
    };
    let stage2 = train(&mut model, train_set, test_set, cfg, stage2_seed, Some(&teacher))?;
    Ok((stage1, stage2))
}
