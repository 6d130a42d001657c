use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, load_idx, synth_blobs, BlobSpec, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::nn::{Architecture, ModelDescriptor};
use crate::optim::{batch_scaled_lr, OptimSpec};
use crate::seed::data_seed;
use crate::trainer::{Stage2Init, TrainConfig};

/// Placeholder in teacher checkpoint paths replaced by the run seed.
pub const SEED_PLACEHOLDER: &str = "{seed}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Baseline,
    Lsr,
    Kd,
    ReKd,
    DeKd,
    TfSelf,
    TfReg,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::Baseline,
        Protocol::Lsr,
        Protocol::Kd,
        Protocol::ReKd,
        Protocol::DeKd,
        Protocol::TfSelf,
        Protocol::TfReg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Baseline => "baseline",
            Protocol::Lsr => "lsr",
            Protocol::Kd => "kd",
            Protocol::ReKd => "re-kd",
            Protocol::DeKd => "de-kd",
            Protocol::TfSelf => "tf-self",
            Protocol::TfReg => "tf-reg",
        }
    }

    /// Protocols that load a teacher checkpoint.
    pub fn uses_teacher_checkpoint(self) -> bool {
        matches!(self, Protocol::Kd | Protocol::ReKd | Protocol::DeKd)
    }

    fn uses_alpha(self) -> bool {
        self != Protocol::Baseline
    }

    fn uses_tau(self) -> bool {
        !matches!(self, Protocol::Baseline | Protocol::Lsr)
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs, regenerated per run seed.
    Synth {
        classes: usize,
        n_per_class: usize,
        dim: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
        #[serde(default)]
        normalization: Normalization,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        classes: usize,
        #[serde(default)]
        normalization: Normalization,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synth { classes, .. }
            | DatasetConfig::Idx { classes, .. }
            | DatasetConfig::Csv { classes, .. } => *classes,
        }
    }

    /// Short human label used in summaries and comparison tables.
    pub fn label(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        };
        match self {
            DatasetConfig::Synth {
                classes, dim, spread, ..
            } => format!("blobs(K={classes},dim={dim},spread={spread})"),
            DatasetConfig::Idx { train_images, .. } => format!("idx:{}", stem(train_images)),
            DatasetConfig::Csv { train, .. } => format!("csv:{}", stem(train)),
        }
    }

    /// Train and test splits for a run with root seed `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synth {
                classes,
                n_per_class,
                dim,
                spread,
            } => {
                let spec = BlobSpec {
                    classes: *classes,
                    n_per_class: *n_per_class,
                    dim: *dim,
                    spread: *spread,
                };
                synth_blobs(&spec, data_seed(seed))
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
                normalization,
            } => Ok((
                load_idx(train_images, train_labels, *normalization, *classes, Split::Train)?,
                load_idx(test_images, test_labels, *normalization, *classes, Split::Test)?,
            )),
            DatasetConfig::Csv {
                train,
                test,
                classes,
                normalization,
            } => Ok((
                load_csv(train, *normalization, *classes, Split::Train)?,
                load_csv(test, *normalization, *classes, Split::Test)?,
            )),
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetConfig::Synth { .. } => Vec::new(),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetConfig::Csv { train, test, .. } => vec![train, test],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::config("dataset.classes", "need at least 2 classes"));
        }
        match self {
            DatasetConfig::Synth {
                n_per_class,
                dim,
                spread,
                ..
            } => {
                if *n_per_class < 2 {
                    return Err(Error::config("dataset.n_per_class", "need at least 2 samples per class"));
                }
                if *dim == 0 {
                    return Err(Error::config("dataset.dim", "must be at least 1"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(Error::config("dataset.spread", format!("must be finite and >= 0, got {spread}")));
                }
            }
            DatasetConfig::Idx { normalization, .. } | DatasetConfig::Csv { normalization, .. } => {
                normalization
                    .validate()
                    .map_err(|e| Error::config("dataset.normalization", e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Loss hyperparameters. Which ones are required depends on the protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Correct-class probability of the virtual teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default)]
    pub tau_squared_scaling: bool,
}

/// Candidate lists for a full-factorial search. An empty list keeps the
/// value from `[loss]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub a: Vec<f64>,
}

impl GridConfig {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.tau.is_empty() && self.a.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// When set, `optim.lr0` is scaled by `batch_size / lr_reference_batch`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_reference_batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshot_epochs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Teacher checkpoint for kd, re-kd and de-kd. `{seed}` is replaced by
    /// the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<String>,
    /// Several teachers for de-kd; each becomes one point of the
    /// teacher-accuracy curve.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teacher_checkpoints: Vec<String>,
    /// Stage-2 starting point for tf-self.
    #[serde(default, skip_serializing_if = "is_default")]
    pub stage2_init: Stage2Init,
    /// Fixed stage-1 seed for tf-self, shared by every stage-2 seed. By
    /// default each seed trains its own stage 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_seed: Option<u64>,
    pub dataset: DatasetConfig,
    /// The network being trained.
    pub student: Architecture,
    /// Expected architecture of the teacher checkpoint, checked on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<Architecture>,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default, skip_serializing_if = "GridConfig::is_empty")]
    pub grid: GridConfig,
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

impl ExperimentConfig {
    /// Parses and validates TOML text. Relative paths are kept as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("(syntax)", e.message()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "(root)".to_string() } else { path };
            Error::config(field, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative dataset, checkpoint and output paths
    /// are resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Absolute, so configs copied into output directories stay valid.
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        cfg.resolve_paths(&cwd.join(path.parent().unwrap_or(Path::new(""))));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.dataset.paths_mut() {
            join(p);
        }
        if let Some(o) = &mut self.output_dir {
            join(o);
        }
        let join_str = |s: &mut String| {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        };
        if let Some(t) = &mut self.teacher_checkpoint {
            join_str(t);
        }
        self.teacher_checkpoints.iter_mut().for_each(join_str);
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("(serialize)", e.to_string()))
    }

    /// Loss for this protocol from the `[loss]` fields.
    pub fn loss_spec(&self) -> Result<LossSpec> {
        let req = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::config(format!("loss.{name}"), format!("required by the {} protocol", self.protocol)))
        };
        let l = &self.loss;
        let spec = match self.protocol {
            Protocol::Baseline => LossSpec::cross_entropy(),
            Protocol::Lsr => LossSpec::lsr(req(l.alpha, "alpha")?),
            Protocol::Kd | Protocol::ReKd | Protocol::DeKd => {
                LossSpec::kd(req(l.alpha, "alpha")?, req(l.tau, "tau")?)
            }
            Protocol::TfSelf => LossSpec::tf_self(req(l.alpha, "alpha")?, req(l.tau, "tau")?),
            Protocol::TfReg => LossSpec::tf_reg(req(l.alpha, "alpha")?, req(l.tau, "tau")?, req(l.a, "a")?),
        };
        Ok(spec.with_tau_squared_scaling(l.tau_squared_scaling))
    }

    /// Optimizer settings with batch-size scaling applied.
    pub fn effective_optim(&self) -> Result<OptimSpec> {
        let mut optim = self.optim.clone();
        if let Some(r) = self.lr_reference_batch {
            optim.lr0 = batch_scaled_lr(optim.lr0, self.batch_size, r)
                .map_err(|e| Error::config("lr_reference_batch", e.to_string()))?;
        }
        Ok(optim)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optim: self.effective_optim()?,
            loss: self.loss_spec()?,
            snapshot_epochs: self.snapshot_epochs.clone(),
        })
    }

    /// Student descriptor for the given dataset.
    pub fn student_descriptor(&self, train: &Dataset) -> Result<ModelDescriptor> {
        ModelDescriptor::new(self.student.clone(), train.sample_shape().to_vec(), train.num_classes())
            .map_err(|e| Error::config("student", e.to_string()))
    }

    /// Teacher checkpoint path for one run seed.
    pub fn teacher_path(&self, seed: u64) -> Option<PathBuf> {
        self.teacher_checkpoint
            .as_ref()
            .map(|t| PathBuf::from(t.replace(SEED_PLACEHOLDER, &seed.to_string())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "duplicate seed"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(&e) = self.snapshot_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::config(
                "snapshot_epochs",
                format!("epoch {e} exceeds the {} training epochs", self.epochs),
            ));
        }
        self.dataset.validate()?;
        self.optim.validate().map_err(|e| Error::config("optim", e.to_string()))?;
        self.effective_optim()?;

        let p = self.protocol;
        let unused = |field: &str, set: bool, used: bool| {
            if set && !used {
                Err(Error::config(field, format!("not used by the {p} protocol")))
            } else {
                Ok(())
            }
        };
        unused("loss.alpha", self.loss.alpha.is_some(), p.uses_alpha())?;
        unused("loss.tau", self.loss.tau.is_some(), p.uses_tau())?;
        unused("loss.a", self.loss.a.is_some(), p == Protocol::TfReg)?;
        unused("loss.tau_squared_scaling", self.loss.tau_squared_scaling, p.uses_tau())?;
        unused("grid.alpha", !self.grid.alpha.is_empty(), p.uses_alpha())?;
        unused("grid.tau", !self.grid.tau.is_empty(), p.uses_tau())?;
        unused("grid.a", !self.grid.a.is_empty(), p == Protocol::TfReg)?;
        unused("teacher", self.teacher.is_some(), p.uses_teacher_checkpoint())?;
        unused("teacher_checkpoint", self.teacher_checkpoint.is_some(), p.uses_teacher_checkpoint())?;
        unused("teacher_checkpoints", !self.teacher_checkpoints.is_empty(), p == Protocol::DeKd)?;
        unused("stage1_seed", self.stage1_seed.is_some(), p == Protocol::TfSelf)?;
        unused("stage2_init", self.stage2_init != Stage2Init::default(), p == Protocol::TfSelf)?;

        if p.uses_teacher_checkpoint() {
            match (&self.teacher_checkpoint, self.teacher_checkpoints.is_empty()) {
                (None, true) => {
                    return Err(Error::config(
                        "teacher_checkpoint",
                        format!("the {p} protocol needs a teacher checkpoint path"),
                    ))
                }
                (Some(_), false) => {
                    return Err(Error::config(
                        "teacher_checkpoints",
                        "give either teacher_checkpoint or teacher_checkpoints, not both",
                    ))
                }
                _ => {}
            }
        }

        for variant in self.grid_points() {
            let spec = self.with_loss(variant).loss_spec()?;
            spec.validate(self.dataset.classes())
                .map_err(|e| Error::config("loss", e.to_string()))?;
        }
        Ok(())
    }

    /// Loss settings for every grid point (the `[loss]` values alone when
    /// there is no grid).
    pub fn grid_points(&self) -> Vec<LossConfig> {
        let pick = |list: &[f64], base: Option<f64>| -> Vec<Option<f64>> {
            if list.is_empty() {
                vec![base]
            } else {
                list.iter().map(|&v| Some(v)).collect()
            }
        };
        let mut out = Vec::new();
        for alpha in pick(&self.grid.alpha, self.loss.alpha) {
            for tau in pick(&self.grid.tau, self.loss.tau) {
                for a in pick(&self.grid.a, self.loss.a) {
                    out.push(LossConfig {
                        alpha,
                        tau,
                        a,
                        tau_squared_scaling: self.loss.tau_squared_scaling,
                    });
                }
            }
        }
        out
    }

    fn with_loss(&self, loss: LossConfig) -> Self {
        ExperimentConfig {
            loss,
            grid: GridConfig::default(),
            ..self.clone()
        }
    }
}

/// One concrete configuration produced by expanding a grid or a list of
/// de-kd teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    /// Subdirectory name; empty when the experiment has a single variant.
    pub name: String,
    pub config: ExperimentConfig,
}

/// Expands grid points and teacher lists into single-run configurations.
pub fn expand_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let teachers: Vec<Option<String>> = if cfg.teacher_checkpoints.is_empty() {
        vec![cfg.teacher_checkpoint.clone()]
    } else {
        cfg.teacher_checkpoints.iter().cloned().map(Some).collect()
    };
    let points = cfg.grid_points();
    let single = teachers.len() == 1 && cfg.grid.is_empty();
    let mut out = Vec::new();
    for (ti, teacher) in teachers.iter().enumerate() {
        for point in &points {
            let mut parts = Vec::new();
            if teachers.len() > 1 {
                parts.push(format!("teacher-{ti}"));
            }
            if !cfg.grid.alpha.is_empty() {
                parts.push(format!("alpha-{}", point.alpha.unwrap_or_default()));
            }
            if !cfg.grid.tau.is_empty() {
                parts.push(format!("tau-{}", point.tau.unwrap_or_default()));
            }
            if !cfg.grid.a.is_empty() {
                parts.push(format!("a-{}", point.a.unwrap_or_default()));
            }
            let mut config = cfg.with_loss(*point);
            config.teacher_checkpoint = teacher.clone();
            config.teacher_checkpoints = Vec::new();
            out.push(Variant {
                name: if single { String::new() } else { parts.join("_") },
                config,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
protocol = "baseline"
seeds = [0, 1]
epochs = 3
batch_size = 16

[dataset]
kind = "synth"
classes = 4
n_per_class = 20
dim = 5
spread = 0.3

[student]
arch = "mlp"
hidden = [8]
"#;

    fn field_of(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.protocol, Protocol::Baseline);
        assert_eq!(c.optim, OptimSpec::default());
        assert_eq!(c.loss_spec().unwrap(), LossSpec::cross_entropy());
        assert_eq!(c.dataset.classes(), 4);
    }

    #[test]
    fn toml_roundtrip() {
        let text = format!(
            "{}\n[loss]\nalpha = 0.1\ntau = 20.0\na = 0.99\n\n[grid]\nalpha = [0.1, 0.5]\n",
            BASE.replace("\"baseline\"", "\"tf-reg\"")
        );
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let text = format!("{BASE}\n[optim]\nlr = 0.1\n");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        let text = BASE.replace("spread = 0.3", "spread = 0.3\nspraed = 1");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "dataset");
    }

    #[test]
    fn kd_without_teacher_names_the_field() {
        let text = format!("{}\n[loss]\nalpha = 0.9\ntau = 20.0\n", BASE.replace("\"baseline\"", "\"kd\""));
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "teacher_checkpoint");
    }

    #[test]
    fn tf_reg_requires_a() {
        let text = format!("{}\n[loss]\nalpha = 0.1\ntau = 20.0\n", BASE.replace("\"baseline\"", "\"tf-reg\""));
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "loss.a");
    }

    #[test]
    fn field_level_checks() {
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&BASE.replace("[0, 1]", "[]"))), "seeds");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&BASE.replace("[0, 1]", "[2, 2]"))), "seeds");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&BASE.replace("epochs = 3", "epochs = 0"))), "epochs");
        let text = format!("{BASE}\n[loss]\nalpha = 0.1\n");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "loss.alpha");
        let text = format!("{BASE}\n[optim]\nmomentum = 1.5\n");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "optim");
        let text = format!("{}\n[loss]\nalpha = 1.5\n", BASE.replace("\"baseline\"", "\"lsr\""));
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "loss");
        let text = BASE.replace("epochs = 3", "epochs = 3\nsnapshot_epochs = [4]");
        assert_eq!(field_of(ExperimentConfig::from_toml_str(&text)), "snapshot_epochs");
    }

    #[test]
    fn batch_scaling_applies_to_lr0() {
        let text = BASE.replace("batch_size = 16", "batch_size = 64\nlr_reference_batch = 128");
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!((c.train_config().unwrap().optim.lr0 - 0.05).abs() < 1e-15);
    }

    #[test]
    fn grid_expands_full_factorial() {
        let text = format!(
            "{}\n[loss]\nalpha = 0.1\ntau = 20.0\na = 0.99\n\n[grid]\nalpha = [0.1, 0.5]\ntau = [10.0, 20.0, 40.0]\n",
            BASE.replace("\"baseline\"", "\"tf-reg\"")
        );
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        let v = expand_variants(&c);
        assert_eq!(v.len(), 6);
        assert_eq!(v[0].name, "alpha-0.1_tau-10");
        assert_eq!(v[5].name, "alpha-0.5_tau-40");
        assert_eq!(v[5].config.loss.a, Some(0.99));
        assert!(v.iter().all(|x| x.config.grid.is_empty()));
    }

    #[test]
    fn single_variant_has_empty_name() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        let v = expand_variants(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].name, "");
    }

    #[test]
    fn teacher_paths_resolve_and_substitute_seed() {
        let text = format!(
            "{}teacher_checkpoint = \"t/seed-{{seed}}/final.ckpt\"\n{}\n[loss]\nalpha = 0.9\ntau = 20.0\n",
            "", BASE.replace("\"baseline\"", "\"kd\"")
        );
        let mut c = ExperimentConfig::from_toml_str(&text).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.teacher_path(3).unwrap(), PathBuf::from("/cfg/t/seed-3/final.ckpt"));
    }
}
