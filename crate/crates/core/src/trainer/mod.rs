//! Training and evaluation loops.

mod protocols;

pub use protocols::{
    run_de_kd, run_normal_kd, run_re_kd, run_student, run_tf_reg, run_tf_self, Stage1Cache, Stage2Init,
};

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{argmax, LossSpec};
use crate::nn::{Checkpoint, CheckpointMeta, Model};
use crate::optim::{OptimSpec, Sgd};
use crate::seed::RunSeeds;
use crate::tensor::{log_softmax_rows, Tape, Tensor};

const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimSpec,
    pub loss: LossSpec,
    /// Epoch counts after which a snapshot is taken; 0 is the initialization.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if let Some(e) = self.snapshot_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::InvalidArgument(format!(
                "snapshot epoch {e} exceeds the {} training epochs",
                self.epochs
            )));
        }
        self.optim.validate()?;
        self.loss.validate(classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// Per-epoch metrics of one run. Equality ignores wall-clock time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub best_test_acc: f64,
    /// Test accuracy of the frozen teacher, when one was used.
    pub teacher_test_acc: Option<f64>,
    pub wall_seconds: f64,
    pub steps: usize,
}

impl PartialEq for RunHistory {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.best_test_acc == other.best_test_acc
            && self.teacher_test_acc == other.teacher_test_acc
            && self.steps == other.steps
    }
}

impl RunHistory {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub history: RunHistory,
    pub model: Model,
    pub final_checkpoint: Checkpoint,
    pub snapshots: Vec<Checkpoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy against the labels.
    pub loss: f64,
}

thread_local! {
    static TEACHERS_BUILT: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`FrozenTeacher`] values constructed on this thread.
pub fn teacher_instantiations() -> usize {
    TEACHERS_BUILT.with(Cell::get)
}

/// A teacher network whose parameters are never updated. Logits are computed
/// without recording gradients.
#[derive(Debug)]
pub struct FrozenTeacher {
    model: Model,
}

impl FrozenTeacher {
    pub fn new(model: Model) -> Self {
        TEACHERS_BUILT.with(|c| c.set(c.get() + 1));
        FrozenTeacher { model }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(FrozenTeacher::new(ckpt.to_model()?))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.model.predict(batch)
    }

    fn check_compatible(&self, student: &Model) -> Result<()> {
        let (t, s) = (self.model.descriptor(), student.descriptor());
        if t.num_classes != s.num_classes || t.input_shape != s.input_shape {
            return Err(Error::shape(
                "teacher",
                format!(
                    "teacher takes {:?} -> {} classes, student {:?} -> {}",
                    t.input_shape, t.num_classes, s.input_shape, s.num_classes
                ),
            ));
        }
        Ok(())
    }
}

/// Accuracy (argmax, ties to the lowest index) and mean cross-entropy.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<Evaluation> {
    let k = model.num_classes();
    if let Some(&label) = dataset.labels().iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut log_p = Vec::new();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.gather(chunk)?;
        let logits = model.predict(&x)?;
        log_p.resize(logits.len(), 0.0);
        log_softmax_rows(logits.data(), k, &mut log_p);
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * k..(r + 1) * k];
            correct += usize::from(argmax(row) == y);
            loss -= log_p[r * k + y];
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Result of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, loss, backward and one SGD update on a single batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    loss: &LossSpec,
    teacher: Option<&FrozenTeacher>,
    lr: f64,
) -> Result<StepStats> {
    let teacher_logits = teacher.map(|t| t.logits(x)).transpose()?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let logits = model.forward(&mut tape, &bound, xv)?;
    let l = loss.compute(&mut tape, logits, labels, teacher_logits.as_ref())?;
    let value = tape.scalar(l)?;
    let k = model.num_classes();
    let correct = tape
        .value(logits)
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let grads = tape.backward(l)?;
    model.zero_grad();
    model.accumulate_grads(&bound, &grads)?;
    opt.step(model.params_mut(), lr)?;
    Ok(StepStats { loss: value, correct })
}

fn meta(epoch: usize, seed: u64, loss: &LossSpec, record: Option<&EpochRecord>) -> CheckpointMeta {
    CheckpointMeta {
        epoch,
        seed,
        loss_kind: loss.kind,
        train_acc: record.map(|r| r.train_acc),
        test_acc: record.map(|r| r.test_acc),
    }
}

/// Trains `model` in place. Batch order comes from the shuffle stream of
/// `seed`; initialization is the caller's business.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    teacher: Option<&FrozenTeacher>,
) -> Result<TrainOutput> {
    let k = model.num_classes();
    cfg.validate(k)?;
    if train_set.sample_shape() != model.descriptor().input_shape.as_slice() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset samples {:?}, model expects {:?}",
                train_set.sample_shape(),
                model.descriptor().input_shape
            ),
        ));
    }
    match (cfg.loss.needs_teacher(), teacher) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!("{} loss needs a teacher", cfg.loss.kind)));
        }
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(format!("{} loss takes no teacher", cfg.loss.kind)));
        }
        (_, Some(t)) => t.check_compatible(model)?,
        _ => {}
    }

    let start = Instant::now();
    let shuffle = RunSeeds::from_root(seed).shuffle;
    let mut opt = Sgd::from_spec(model.params(), &cfg.optim);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let mut steps = 0;
    if cfg.snapshot_epochs.contains(&0) {
        snapshots.push(Checkpoint::from_model(model, meta(0, seed, &cfg.loss, None))?);
    }

    for epoch in 0..cfg.epochs {
        let lr = cfg.optim.lr_at_epoch(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in batches(train_set.len(), cfg.batch_size, true, shuffle, epoch)?.iter().enumerate() {
            let (x, y) = train_set.gather(idx)?;
            let stats = train_step(model, &mut opt, &x, &y, &cfg.loss, teacher, lr).map_err(|e| match e {
                Error::NonFinite { .. } | Error::LogDomain { .. } => Error::Diverged {
                    epoch,
                    batch: b,
                    loss_kind: cfg.loss.kind.to_string(),
                    detail: e.to_string(),
                },
                other => other,
            })?;
            loss_sum += stats.loss * y.len() as f64;
            correct += stats.correct;
            steps += 1;
        }
        let n = train_set.len() as f64;
        let test = evaluate(model, test_set)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_loss: test.loss,
            test_acc: test.accuracy,
        };
        records.push(record);
        if model.params().iter().any(|p| p.data().iter().any(|v| v.abs() > f64::from(f32::MAX))) {
            return Err(Error::Diverged {
                epoch,
                batch: steps,
                loss_kind: cfg.loss.kind.to_string(),
                detail: "parameters left the float32 range".into(),
            });
        }
        if cfg.snapshot_epochs.contains(&(epoch + 1)) {
            snapshots.push(Checkpoint::from_model(model, meta(epoch + 1, seed, &cfg.loss, Some(&record)))?);
        }
    }

    let best_test_acc = records.iter().map(|r| r.test_acc).fold(0.0, f64::max);
    let final_checkpoint = Checkpoint::from_model(model, meta(cfg.epochs, seed, &cfg.loss, records.last()))?;
    Ok(TrainOutput {
        history: RunHistory {
            records,
            best_test_acc,
            teacher_test_acc: None,
            wall_seconds: start.elapsed().as_secs_f64(),
            steps,
        },
        model: model.clone(),
        final_checkpoint,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec, Split};
    use crate::nn::{Architecture, ModelDescriptor};

    fn blobs(spread: f64) -> (Dataset, Dataset) {
        let spec = BlobSpec {
            classes: 4,
            n_per_class: 50,
            dim: 8,
            spread,
        };
        synth_blobs(&spec, 3).unwrap()
    }

    fn desc() -> ModelDescriptor {
        ModelDescriptor::new(Architecture::Mlp { hidden: vec![16] }, vec![8], 4).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optim: OptimSpec::default(),
            loss: LossSpec::cross_entropy(),
            snapshot_epochs: vec![],
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (tr, _) = blobs(0.3);
        let init = Model::build(&desc(), 1).unwrap();
        let mut m = init.clone();
        let mut opt = Sgd::from_spec(m.params(), &OptimSpec::default());
        for idx in batches(tr.len(), 16, true, 0, 0).unwrap() {
            let (x, y) = tr.gather(&idx).unwrap();
            train_step(&mut m, &mut opt, &x, &y, &LossSpec::cross_entropy(), None, 0.0).unwrap();
        }
        for (a, b) in m.params().iter().zip(init.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn negligible_lr_gives_flat_history() {
        let (tr, te) = blobs(0.3);
        let mut m = Model::build(&desc(), 1).unwrap();
        let mut c = cfg(3);
        c.optim.lr0 = 1e-300;
        let r = train(&mut m, &tr, &te, &c, 0, None).unwrap().history.records;
        assert!(r.windows(2).all(|w| w[0].test_acc == w[1].test_acc && w[0].test_loss == w[1].test_loss));
    }

    #[test]
    fn one_epoch_on_separable_blobs() {
        let spec = BlobSpec {
            classes: 4,
            n_per_class: 500,
            dim: 8,
            spread: 0.05,
        };
        let (tr, te) = synth_blobs(&spec, 3).unwrap();
        let mut m = Model::build(&desc(), 1).unwrap();
        let out = train(&mut m, &tr, &te, &cfg(1), 0, None).unwrap();
        assert!(out.history.records[0].train_acc > 0.9, "{:?}", out.history.records[0]);
        assert_eq!(evaluate(&m, &te).unwrap().accuracy, out.history.records[0].test_acc);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, te) = blobs(0.5);
        let run = || {
            let mut m = Model::build(&desc(), 9).unwrap();
            train(&mut m, &tr, &te, &cfg(3), 4, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_checkpoint.to_bytes().unwrap(), b.final_checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn snapshots_and_metadata() {
        let (tr, te) = blobs(0.5);
        let init = Model::build(&desc(), 2).unwrap();
        let mut m = init.clone();
        let mut c = cfg(3);
        c.snapshot_epochs = vec![0, 2];
        let out = train(&mut m, &tr, &te, &c, 5, None).unwrap();
        let epochs: Vec<_> = out.snapshots.iter().map(|s| s.meta.epoch).collect();
        assert_eq!(epochs, [0, 2]);
        assert_eq!(
            out.snapshots[0].to_bytes().unwrap(),
            Checkpoint::from_model(&init, out.snapshots[0].meta.clone()).unwrap().to_bytes().unwrap()
        );
        assert_eq!(out.snapshots[1].meta.test_acc, Some(out.history.records[1].test_acc));
        assert_eq!(out.final_checkpoint.meta.epoch, 3);
        assert_eq!(out.history.steps, 3 * 10);
        c.snapshot_epochs = vec![4];
        assert!(train(&mut m, &tr, &te, &c, 5, None).is_err());
    }

    #[test]
    fn evaluate_perfect_and_label_check() {
        let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], vec![2], vec![0, 1], 2, Split::Test).unwrap();
        let d = ModelDescriptor::new(Architecture::Mlp { hidden: vec![] }, vec![2], 2).unwrap();
        let mut m = Model::build(&d, 0).unwrap();
        m.params_mut()[0].data_mut().copy_from_slice(&[5.0, 0.0, 0.0, 5.0]);
        assert_eq!(evaluate(&m, &ds).unwrap().accuracy, 1.0);
        let ds3 = Dataset::new(vec![1.0, 0.0, 0.0, 1.0], vec![2], vec![0, 2], 3, Split::Test).unwrap();
        assert!(matches!(evaluate(&m, &ds3), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn evaluate_ties_go_to_lowest_index() {
        let ds = Dataset::new(vec![1.0, 1.0], vec![1], vec![0, 1], 2, Split::Test).unwrap();
        let d = ModelDescriptor::new(Architecture::Mlp { hidden: vec![] }, vec![1], 2).unwrap();
        let mut m = Model::build(&d, 0).unwrap();
        m.params_mut()[0].data_mut().copy_from_slice(&[0.0, 0.0]);
        let e = evaluate(&m, &ds).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!((e.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        use rand::seq::SliceRandom;
        use rand_distr::{Distribution as _, StandardNormal};
        // Balanced labels drawn independently of the features, so any fixed
        // model scores Binomial(n, 1/K) / n at best.
        let (k, n) = (4usize, 4000usize);
        let mut rng = crate::seed::rng_from_seed(17);
        let features: Vec<f64> = (0..n * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let ds = Dataset::new(features, vec![8], labels, k, Split::Test).unwrap();
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for seed in 0..5 {
            let acc = evaluate(&Model::build(&desc(), seed).unwrap(), &ds).unwrap().accuracy;
            assert!((acc - 0.25).abs() < 3.0 * sigma, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, te) = blobs(0.5);
        let mut m = Model::build(&desc(), 1).unwrap();
        let mut c = cfg(2);
        c.optim.lr0 = 1e6;
        match train(&mut m, &tr, &te, &c, 0, None) {
            Err(Error::Diverged { loss_kind, .. }) => assert_eq!(loss_kind, "ce"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn teacher_requirements() {
        let (tr, te) = blobs(0.5);
        let mut m = Model::build(&desc(), 1).unwrap();
        let mut c = cfg(1);
        c.loss = LossSpec::kd(0.5, 4.0);
        assert!(train(&mut m, &tr, &te, &c, 0, None).is_err());
        let other = ModelDescriptor::new(Architecture::Mlp { hidden: vec![4] }, vec![8], 3).unwrap();
        let t = FrozenTeacher::new(Model::build(&other, 0).unwrap());
        assert!(matches!(train(&mut m, &tr, &te, &c, 0, Some(&t)), Err(Error::ShapeMismatch { .. })));
        let t = FrozenTeacher::new(Model::build(&desc(), 0).unwrap());
        assert!(train(&mut m, &tr, &te, &cfg(1), 0, Some(&t)).is_err());
    }
}
