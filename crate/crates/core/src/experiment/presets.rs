use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::config::{DatasetConfig, ExperimentConfig, GridConfig, LossConfig, Protocol};
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::optim::OptimSpec;
use crate::trainer::Stage2Init;

/// A named configuration plus comment lines describing the original
/// setting and each desk-scale substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
}

impl Preset {
    /// TOML with the notes as a leading comment block.
    pub fn render(&self) -> Result<String> {
        let mut out = format!("# preset {}\n", self.name);
        for n in &self.notes {
            out.push_str("# ");
            out.push_str(n);
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.config.to_toml_string()?);
        Ok(out)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ds {
    Cifar10,
    Cifar100,
    Tiny,
    ImageNet,
}

impl Ds {
    fn key(self) -> &'static str {
        match self {
            Ds::Cifar10 => "cifar10",
            Ds::Cifar100 => "cifar100",
            Ds::Tiny => "tinyimagenet",
            Ds::ImageNet => "imagenet",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Ds::Cifar10 => "CIFAR10",
            Ds::Cifar100 => "CIFAR100",
            Ds::Tiny => "Tiny-ImageNet",
            Ds::ImageNet => "ImageNet",
        }
    }

    fn recipe(self) -> &'static str {
        match self {
            Ds::Cifar10 | Ds::Cifar100 => "200 epochs, batch 128, lr 0.1 divided by 5 at epochs 60/120/160, weight decay 5e-4",
            Ds::Tiny => "200 epochs, batch 128 (64 for ResNet50/DenseNet121), lr 0.1*bn/128 divided by 10 at 60/120/160",
            Ds::ImageNet => "90 epochs, batch 512, lr 0.1*bn/256 divided by 10 at 30/60/80, weight decay 1e-4",
        }
    }

    fn dataset(self) -> DatasetConfig {
        let (classes, n_per_class) = match self {
            Ds::Cifar10 => (10, 500),
            Ds::Cifar100 => (100, 100),
            Ds::Tiny => (200, 50),
            Ds::ImageNet => (1000, 20),
        };
        DatasetConfig::Synth {
            classes,
            n_per_class,
            dim: 32,
            spread: 0.33,
        }
    }

    /// `(epochs, batch, lr reference batch, optimizer)`.
    fn schedule(self) -> (usize, usize, Option<usize>, OptimSpec) {
        let base = OptimSpec {
            milestones: vec![20, 30],
            ..OptimSpec::default()
        };
        match self {
            Ds::Cifar10 | Ds::Cifar100 => (40, 64, None, base),
            Ds::Tiny => (
                40,
                64,
                Some(128),
                OptimSpec {
                    decay_factor: 0.1,
                    ..base
                },
            ),
            Ds::ImageNet => (
                40,
                256,
                Some(256),
                OptimSpec {
                    weight_decay: 1e-4,
                    milestones: vec![13, 27, 36],
                    decay_factor: 0.1,
                    ..base
                },
            ),
        }
    }

    fn schedule_note(self) -> String {
        let (epochs, batch, reference, optim) = self.schedule();
        let lr = match reference {
            Some(r) => format!("lr {}*bn/{r}", optim.lr0),
            None => format!("lr {}", optim.lr0),
        };
        format!(
            "desk substitute: schedule -> {epochs} epochs, batch {batch}, {lr}, x{} at {:?}, weight decay {}",
            optim.decay_factor, optim.milestones, optim.weight_decay
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
#[allow(clippy::enum_variant_names)]
enum Net {
    PlainCnn,
    MobileNetV2,
    ShuffleNetV2,
    ResNet18,
    ResNet50,
    ResNeXt29,
    DenseNet121,
    GoogLeNet,
}

impl Net {
    fn key(self) -> &'static str {
        match self {
            Net::PlainCnn => "plaincnn",
            Net::MobileNetV2 => "mobilenetv2",
            Net::ShuffleNetV2 => "shufflenetv2",
            Net::ResNet18 => "resnet18",
            Net::ResNet50 => "resnet50",
            Net::ResNeXt29 => "resnext29",
            Net::DenseNet121 => "densenet121",
            Net::GoogLeNet => "googlenet",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Net::PlainCnn => "Plain CNN",
            Net::MobileNetV2 => "MobileNetV2",
            Net::ShuffleNetV2 => "ShuffleNetV2",
            Net::ResNet18 => "ResNet18",
            Net::ResNet50 => "ResNet50",
            Net::ResNeXt29 => "ResNeXt29 (8x64d)",
            Net::DenseNet121 => "DenseNet121",
            Net::GoogLeNet => "GoogLeNet",
        }
    }

    /// Capacity-ordered MLP stand-ins. The plain CNN needs image input, so
    /// on blob data it is replaced by the narrowest MLP.
    fn substitute(self) -> Architecture {
        match self {
            Net::PlainCnn => Architecture::Mlp { hidden: vec![64] },
            Net::MobileNetV2 | Net::ShuffleNetV2 => Architecture::small_mlp(),
            Net::ResNet18 | Net::GoogLeNet => Architecture::Mlp { hidden: vec![512, 256] },
            Net::ResNet50 | Net::ResNeXt29 | Net::DenseNet121 => Architecture::large_mlp(),
        }
    }

    fn note(self) -> String {
        let arch = match self.substitute() {
            Architecture::Mlp { hidden } => format!("mlp {hidden:?}"),
            Architecture::PlainCnn { channels, hidden } => format!("plain-cnn {channels:?} fc {hidden}"),
        };
        let extra = if self == Net::PlainCnn {
            " (use arch = \"plain-cnn\" with an idx dataset for the convolutional model)"
        } else {
            ""
        };
        format!("desk substitute: {} -> {arch}{extra}", self.title())
    }
}

fn base_config(protocol: Protocol, ds: Ds, net: Net) -> ExperimentConfig {
    let (epochs, batch_size, lr_reference_batch, optim) = ds.schedule();
    ExperimentConfig {
        protocol,
        seeds: vec![0, 1, 2],
        epochs,
        batch_size,
        lr_reference_batch,
        snapshot_epochs: Vec::new(),
        output_dir: None,
        teacher_checkpoint: None,
        teacher_checkpoints: Vec::new(),
        stage2_init: Stage2Init::Fresh,
        stage1_seed: None,
        dataset: ds.dataset(),
        student: net.substitute(),
        teacher: None,
        loss: LossConfig::default(),
        optim,
        grid: GridConfig::default(),
    }
}

fn common_notes(ds: Ds, nets: &[Net]) -> Vec<String> {
    let mut notes = vec![format!("original recipe: {}", ds.recipe())];
    notes.push(format!(
        "desk substitute: {} -> synthetic Gaussian blobs with the same class count",
        ds.title()
    ));
    for n in nets {
        notes.push(n.note());
    }
    notes.push(ds.schedule_note());
    notes
}

fn teacher_path(ds: Ds, net: Net, file: &str) -> String {
    format!("runs/baseline-{}-{}/seed-{{seed}}/{file}", ds.key(), net.key())
}

fn loss(alpha: f64, tau: Option<f64>, a: Option<f64>) -> LossConfig {
    LossConfig {
        alpha: Some(alpha),
        tau,
        a,
        tau_squared_scaling: false,
    }
}

fn baseline(ds: Ds, net: Net) -> Preset {
    let mut config = base_config(Protocol::Baseline, ds, net);
    // Early snapshots serve as poorly trained teachers.
    config.snapshot_epochs = vec![1, 10];
    let mut notes = vec![format!("baseline, {} on {}", net.title(), ds.title())];
    notes.extend(common_notes(ds, &[net]));
    notes.push("snapshots after 1 and 10 epochs feed the de-kd presets".into());
    Preset {
        name: format!("baseline-{}-{}", ds.key(), net.key()),
        config,
        notes,
    }
}

fn lsr(ds: Ds, net: Net) -> Preset {
    let mut config = base_config(Protocol::Lsr, ds, net);
    config.loss = loss(0.1, None, None);
    let mut notes = vec![format!(
        "label smoothing, {} on {}: alpha = 0.1 (not published for the standalone baselines; the value used for the virtual-teacher runs)",
        net.title(),
        ds.title()
    )];
    notes.extend(common_notes(ds, &[net]));
    Preset {
        name: format!("lsr-{}-{}", ds.key(), net.key()),
        config,
        notes,
    }
}

/// Normal KD and Re-KD for one teacher/student row.
fn kd_pair(ds: Ds, teacher: Net, student: Net, kd: (f64, f64), rekd: (f64, f64)) -> [Preset; 2] {
    let mut c = base_config(Protocol::Kd, ds, student);
    c.teacher = Some(teacher.substitute());
    c.teacher_checkpoint = Some(teacher_path(ds, teacher, "final.ckpt"));
    c.loss = loss(kd.1, Some(kd.0), None);
    let mut notes = vec![format!(
        "normal kd on {}: {} teaches {}, tau = {}, alpha = {}",
        ds.title(),
        teacher.title(),
        student.title(),
        kd.0,
        kd.1
    )];
    notes.extend(common_notes(ds, &[teacher, student]));
    notes.push(format!("teacher checkpoint from preset baseline-{}-{}", ds.key(), teacher.key()));
    let normal = Preset {
        name: format!("kd-{}-{}-{}", ds.key(), teacher.key(), student.key()),
        config: c,
        notes,
    };

    // Roles swap: the stronger network is trained and the weaker one's
    // checkpoint teaches it.
    let mut c = base_config(Protocol::ReKd, ds, teacher);
    c.teacher = Some(student.substitute());
    c.teacher_checkpoint = Some(teacher_path(ds, student, "final.ckpt"));
    c.loss = loss(rekd.1, Some(rekd.0), None);
    let mut notes = vec![format!(
        "re-kd on {}: {} is taught by {}, tau = {}, alpha = {}",
        ds.title(),
        teacher.title(),
        student.title(),
        rekd.0,
        rekd.1
    )];
    notes.extend(common_notes(ds, &[teacher, student]));
    notes.push(format!("teacher checkpoint from preset baseline-{}-{}", ds.key(), student.key()));
    let reversed = Preset {
        name: format!("rekd-{}-{}-{}", ds.key(), teacher.key(), student.key()),
        config: c,
        notes,
    };
    [normal, reversed]
}

fn dekd(ds: Ds, teacher: Net, teacher_acc: &str, student: Net, tau: f64, alpha: f64) -> Preset {
    let mut c = base_config(Protocol::DeKd, ds, student);
    // ResNet18 was stopped after 1 epoch, the others after 50 of 200, i.e.
    // 10 of the 40 desk epochs.
    let snapshot = if teacher == Net::ResNet18 { 1 } else { 10 };
    c.teacher = Some(teacher.substitute());
    c.teacher_checkpoint = Some(teacher_path(ds, teacher, &format!("snapshot-epoch-{snapshot}.ckpt")));
    c.loss = loss(alpha, Some(tau), None);
    let mut notes = vec![format!(
        "de-kd on {}: poorly trained {} ({teacher_acc} test accuracy originally) teaches {}, tau = {tau}, alpha = {alpha}",
        ds.title(),
        teacher.title(),
        student.title()
    )];
    notes.extend(common_notes(ds, &[teacher, student]));
    notes.push(format!(
        "teacher is the {snapshot}-epoch snapshot of preset baseline-{}-{}",
        ds.key(),
        teacher.key()
    ));
    Preset {
        name: format!("dekd-{}-{}-teacher-{}", ds.key(), teacher.key(), student.key()),
        config: c,
        notes,
    }
}

fn tf_self(ds: Ds, net: Net, tau: f64, alpha: f64, name: Option<&str>) -> Preset {
    let mut c = base_config(Protocol::TfSelf, ds, net);
    c.loss = loss(alpha, Some(tau), None);
    let mut notes = vec![format!(
        "self-training distillation, {} on {}: tau = {tau}, alpha = {alpha}",
        net.title(),
        ds.title()
    )];
    notes.extend(common_notes(ds, &[net]));
    Preset {
        name: name.map_or_else(|| format!("tfself-{}-{}", ds.key(), net.key()), str::to_string),
        config: c,
        notes,
    }
}

fn tf_reg(ds: Ds, net: Net, tau: f64, alpha: f64, name: Option<&str>) -> Preset {
    let mut c = base_config(Protocol::TfReg, ds, net);
    c.loss = loss(alpha, Some(tau), Some(0.99));
    let mut notes = vec![format!(
        "virtual-teacher regularization, {} on {}: tau = {tau}, alpha = {alpha}, a = 0.99",
        net.title(),
        ds.title()
    )];
    notes.extend(common_notes(ds, &[net]));
    Preset {
        name: name.map_or_else(|| format!("tfreg-{}-{}", ds.key(), net.key()), str::to_string),
        config: c,
        notes,
    }
}

fn build() -> BTreeMap<String, Preset> {
    use Ds::*;
    use Net::*;
    let mut all = Vec::new();

    let kd_rows = [
        (Cifar10, ResNet18, PlainCnn, (20.0, 0.9), (20.0, 0.01)),
        (Cifar10, ResNet18, MobileNetV2, (20.0, 0.9), (20.0, 0.05)),
        (Cifar10, MobileNetV2, PlainCnn, (20.0, 0.4), (20.0, 0.1)),
        (Cifar10, ResNeXt29, ResNet18, (6.0, 0.95), (20.0, 0.1)),
        (Cifar100, ResNet18, MobileNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, ResNet18, ShuffleNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, ResNet50, MobileNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, ResNet50, ShuffleNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, DenseNet121, MobileNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, DenseNet121, ShuffleNetV2, (20.0, 0.95), (20.0, 0.6)),
        (Cifar100, ResNeXt29, MobileNetV2, (20.0, 0.6), (20.0, 0.6)),
        (Cifar100, ResNeXt29, ResNet18, (20.0, 0.6), (20.0, 0.6)),
        (Tiny, ResNet18, MobileNetV2, (20.0, 0.1), (20.0, 0.6)),
        (Tiny, ResNet18, ShuffleNetV2, (20.0, 0.1), (20.0, 0.6)),
        (Tiny, ResNet50, MobileNetV2, (20.0, 0.1), (20.0, 0.1)),
        (Tiny, ResNet50, ShuffleNetV2, (20.0, 0.1), (20.0, 0.5)),
        (Tiny, ResNet50, ResNet18, (20.0, 0.5), (20.0, 0.1)),
    ];
    for (ds, t, s, kd, rekd) in kd_rows {
        all.extend(kd_pair(ds, t, s, kd, rekd));
        all.push(baseline(ds, t));
        all.push(baseline(ds, s));
    }

    let dekd_rows = [
        (Cifar100, ResNet18, "15.48%", MobileNetV2, 0.95),
        (Cifar100, ResNet18, "15.48%", ShuffleNetV2, 0.95),
        (Cifar100, ResNet50, "45.82%", MobileNetV2, 0.95),
        (Cifar100, ResNet50, "45.82%", ShuffleNetV2, 0.95),
        (Cifar100, ResNet50, "45.82%", ResNet18, 0.6),
        (Cifar100, ResNeXt29, "51.94%", MobileNetV2, 0.95),
        (Cifar100, ResNeXt29, "51.94%", ShuffleNetV2, 0.95),
        (Cifar100, ResNeXt29, "51.94%", ResNet18, 0.6),
        (Tiny, ResNet18, "9.41%", MobileNetV2, 0.1),
        (Tiny, ResNet18, "9.41%", ShuffleNetV2, 0.1),
        (Tiny, ResNet50, "31.01%", MobileNetV2, 0.1),
        (Tiny, ResNet50, "31.01%", ShuffleNetV2, 0.1),
    ];
    for (ds, t, acc, s, alpha) in dekd_rows {
        all.push(dekd(ds, t, acc, s, 20.0, alpha));
        all.push(baseline(ds, t));
        all.push(baseline(ds, s));
    }
    // Teachers whose students all share one setting also get a short name.
    for (ds, t, acc, alpha) in [
        (Cifar100, ResNet18, "15.48%", 0.95),
        (Tiny, ResNet18, "9.41%", 0.1),
        (Tiny, ResNet50, "31.01%", 0.1),
    ] {
        let mut p = dekd(ds, t, acc, MobileNetV2, 20.0, alpha);
        p.name = format!("dekd-{}-{}-teacher", ds.key(), t.key());
        all.push(p);
    }

    let self_rows = [
        (Cifar100, MobileNetV2, 20.0, 0.95),
        (Cifar100, ShuffleNetV2, 20.0, 0.95),
        (Cifar100, ResNet18, 6.0, 0.95),
        (Cifar100, GoogLeNet, 20.0, 0.4),
        (Cifar100, DenseNet121, 20.0, 0.95),
        (Cifar100, ResNeXt29, 20.0, 0.9),
        (Tiny, MobileNetV2, 20.0, 0.1),
        (Tiny, ShuffleNetV2, 20.0, 0.1),
        (Tiny, ResNet18, 6.0, 0.1),
        (Tiny, ResNet50, 20.0, 0.1),
        (Tiny, DenseNet121, 20.0, 0.15),
    ];
    for (ds, net, tau, alpha) in self_rows {
        all.push(tf_self(ds, net, tau, alpha, None));
        all.push(baseline(ds, net));
    }

    let reg_rows = [
        (Cifar100, MobileNetV2, 40.0, 0.95),
        (Cifar100, ShuffleNetV2, 20.0, 0.95),
        (Cifar100, ResNet18, 20.0, 0.1),
        (Cifar100, GoogLeNet, 40.0, 0.1),
        (Tiny, MobileNetV2, 20.0, 0.1),
        (Tiny, ShuffleNetV2, 20.0, 0.1),
        (Tiny, ResNet50, 20.0, 0.1),
        (Tiny, DenseNet121, 20.0, 0.1),
    ];
    for (ds, net, tau, alpha) in reg_rows {
        all.push(tf_reg(ds, net, tau, alpha, None));
        all.push(lsr(ds, net));
        all.push(baseline(ds, net));
    }

    all.push(tf_self(ImageNet, ResNet50, 20.0, 0.1, Some("tfself-imagenet")));
    all.push(tf_reg(ImageNet, ResNet50, 20.0, 0.1, Some("tfreg-imagenet")));
    let mut p = lsr(ImageNet, ResNet50);
    p.name = "lsr-imagenet".into();
    all.push(p);
    let mut p = baseline(ImageNet, ResNet50);
    p.name = "baseline-imagenet".into();
    all.push(p);

    all.into_iter().map(|p| (p.name.clone(), p)).collect()
}

fn registry() -> &'static BTreeMap<String, Preset> {
    static PRESETS: OnceLock<BTreeMap<String, Preset>> = OnceLock::new();
    PRESETS.get_or_init(build)
}

/// Sorted preset names.
pub fn preset_names() -> Vec<&'static str> {
    registry().keys().map(String::as_str).collect()
}

pub fn preset(name: &str) -> Result<Preset> {
    registry().get(name).cloned().ok_or_else(|| {
        Error::config(
            "preset",
            format!("unknown preset `{name}`; available: {}", preset_names().join(", ")),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(name: &str) -> LossConfig {
        preset(name).unwrap().config.loss
    }

    #[test]
    fn spot_checks_of_preset_hyperparameters() {
        let l = loss_of("tfself-cifar100-mobilenetv2");
        assert_eq!((l.alpha, l.tau), (Some(0.95), Some(20.0)));
        let l = loss_of("tfreg-imagenet");
        assert_eq!((l.alpha, l.tau, l.a), (Some(0.1), Some(20.0), Some(0.99)));
        let l = loss_of("dekd-cifar100-resnet18-teacher");
        assert_eq!((l.alpha, l.tau), (Some(0.95), Some(20.0)));
        let l = loss_of("tfreg-cifar100-mobilenetv2");
        assert_eq!((l.alpha, l.tau), (Some(0.95), Some(40.0)));
        let l = loss_of("kd-cifar10-resnext29-resnet18");
        assert_eq!((l.alpha, l.tau), (Some(0.95), Some(6.0)));
        let l = loss_of("rekd-cifar10-resnet18-plaincnn");
        assert_eq!((l.alpha, l.tau), (Some(0.01), Some(20.0)));
        let l = loss_of("tfself-tinyimagenet-densenet121");
        assert_eq!((l.alpha, l.tau), (Some(0.15), Some(20.0)));
        assert_eq!(loss_of("lsr-imagenet").alpha, Some(0.1));
    }

    #[test]
    fn every_preset_validates_and_roundtrips() {
        for name in preset_names() {
            let p = preset(name).unwrap();
            p.config.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!p.config.loss.tau_squared_scaling, "{name}");
            let text = p.render().unwrap();
            assert!(text.contains("desk substitute"), "{name}");
            let back = ExperimentConfig::from_toml_str(&text).unwrap();
            assert_eq!(back, p.config, "{name}");
        }
    }

    #[test]
    fn re_kd_trains_the_stronger_network() {
        let p = preset("rekd-cifar100-resnet50-mobilenetv2").unwrap();
        assert_eq!(p.config.student, Architecture::large_mlp());
        assert_eq!(p.config.teacher, Some(Architecture::small_mlp()));
        assert!(p.config.teacher_checkpoint.unwrap().contains("baseline-cifar100-mobilenetv2"));
    }

    #[test]
    fn schedules() {
        let c = preset("tfreg-imagenet").unwrap().config;
        assert!((c.effective_optim().unwrap().lr0 - 0.1).abs() < 1e-15);
        assert_eq!(c.optim.decay_factor, 0.1);
        let c = preset("tfself-tinyimagenet-resnet50").unwrap().config;
        assert!((c.effective_optim().unwrap().lr0 - 0.05).abs() < 1e-15);
        let c = preset("tfself-cifar100-resnet18").unwrap().config;
        assert_eq!((c.epochs, c.batch_size, c.optim.milestones.clone()), (40, 64, vec![20, 30]));
        assert_eq!(c.optim.decay_factor, 0.2);
    }

    #[test]
    fn unknown_name_lists_presets() {
        let err = preset("tfself-mnist").unwrap_err().to_string();
        assert!(err.contains("tfreg-imagenet") && err.contains("baseline-cifar10-resnet18"), "{err}");
    }
}
