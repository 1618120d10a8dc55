//! Run configuration: INI sections `[dataset]`, `[dae]`, `[cluster]`,
//! `[scheduler]`, `[contrastive]`, `[eval]` plus a top-level `seed`.

use std::collections::BTreeSet;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::KMeansConfig;
use crate::contrastive::{ContrastiveConfig, EncoderSpec, ProjectionHeadSpec};
use crate::dae::{AutoencoderSpec, ConvLayerSpec, DaeTrainConfig};
use crate::data::AugmentationConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::{ClassifierConfig, TapPoint};
use crate::scheduler::PlanMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Cifar10,
    Synthetic,
}

impl SourceKind {
    fn as_str(self) -> &'static str {
        match self {
            SourceKind::Cifar10 => "cifar10",
            SourceKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar10" => Ok(SourceKind::Cifar10),
            "synthetic" => Ok(SourceKind::Synthetic),
            other => Err(format!("expected cifar10 or synthetic, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub source: SourceKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: PathBuf,
    /// Training images taken from the front of the training split; 0 keeps all.
    pub subset_size: usize,
    /// Evaluation images taken from the front of the test split; 0 keeps all.
    pub val_size: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_val_per_class: usize,
    /// Fixed across run seeds so every run sees the same images.
    pub synthetic_seed: u64,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeSection {
    pub layers: Vec<ConvLayerSpec>,
    pub sigma: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSection {
    pub k: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerSection {
    pub p: usize,
    pub mode: PlanMode,
    pub reshuffle_per_epoch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveSection {
    pub temperature: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub encoder: Vec<usize>,
    pub head: [usize; 3],
    pub flip_prob: f64,
    pub brightness_delta: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub tap_points: Vec<TapPoint>,
    pub finetune_fraction: f64,
    pub probe_epochs: usize,
    pub finetune_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub supervised_reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub dae: DaeSection,
    pub cluster: ClusterSection,
    pub scheduler: SchedulerSection,
    pub contrastive: ContrastiveSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection {
                source: SourceKind::Cifar10,
                path: PathBuf::from("data/cifar-10-batches-bin"),
                subset_size: 2000,
                val_size: 1000,
                synthetic_classes: 4,
                synthetic_per_class: 64,
                synthetic_val_per_class: 32,
                synthetic_seed: 0,
                image_size: 32,
            },
            dae: DaeSection {
                layers: AutoencoderSpec::cifar_default().encoder_layers,
                sigma: 0.01,
                epochs: 100,
                patience: 5,
                batch_size: 32,
                val_fraction: 0.1,
            },
            cluster: ClusterSection {
                k: 64,
                seed: 0,
                tol: 1e-4,
                max_iter: 300,
            },
            scheduler: SchedulerSection {
                p: 64,
                mode: PlanMode::Guided,
                reshuffle_per_epoch: true,
            },
            contrastive: ContrastiveSection {
                temperature: 0.1,
                epochs: 15,
                base_lr: 0.05,
                encoder: vec![32, 64, 128, 256],
                head: [256, 128, 64],
                flip_prob: 0.5,
                brightness_delta: 0.2,
                contrast_lo: 0.8,
                contrast_hi: 1.2,
            },
            eval: EvalSection {
                tap_points: TapPoint::ALL.to_vec(),
                finetune_fraction: 0.1,
                probe_epochs: 50,
                finetune_epochs: 50,
                patience: 5,
                batch_size: 64,
                supervised_reference: false,
            },
        }
    }
}

fn join<T: Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn parse_layers(s: &str) -> std::result::Result<Vec<ConvLayerSpec>, String> {
    s.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            match parts.as_slice() {
                [f, k, st] => Ok(ConvLayerSpec::new(
                    f.trim().parse().map_err(|_| format!("bad filters in {item:?}"))?,
                    k.trim().parse().map_err(|_| format!("bad kernel in {item:?}"))?,
                    st.trim().parse().map_err(|_| format!("bad stride in {item:?}"))?,
                )),
                _ => Err(format!("expected filters:kernel:stride, got {item:?}")),
            }
        })
        .collect()
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("bad list item {v:?}")))
        .collect()
}

struct Reader<'a> {
    ini: &'a Ini,
    errors: Vec<String>,
    known: BTreeSet<(String, String)>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, section: Option<&str>, key: &str) -> Option<&'a str> {
        self.known.insert((section.unwrap_or("").to_string(), key.to_string()));
        self.ini.get_from(section, key).map(str::trim)
    }

    fn with<T>(
        &mut self,
        section: Option<&str>,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> T {
        match self.raw(section, key) {
            None => default,
            Some(v) => match parse(v) {
                Ok(t) => t,
                Err(e) => {
                    let name = section.map_or(key.to_string(), |s| format!("{s}.{key}"));
                    self.errors.push(format!("{name} = {v:?}: {e}"));
                    default
                }
            },
        }
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> T
    where
        T::Err: Display,
    {
        self.with(Some(section), key, default, |v| {
            v.parse::<T>().map_err(|e| e.to_string())
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let d = RunConfig::default();
        let mut r = Reader {
            ini: &ini,
            errors: Vec::new(),
            known: BTreeSet::new(),
        };
        let seed = r.with(None, "seed", d.seed, |v| v.parse().map_err(|e| format!("{e}")));
        let dataset = DatasetSection {
            source: r.get("dataset", "source", d.dataset.source),
            path: r.get("dataset", "path", d.dataset.path.clone()),
            subset_size: r.get("dataset", "subset_size", d.dataset.subset_size),
            val_size: r.get("dataset", "val_size", d.dataset.val_size),
            synthetic_classes: r.get("dataset", "synthetic_classes", d.dataset.synthetic_classes),
            synthetic_per_class: r.get("dataset", "synthetic_per_class", d.dataset.synthetic_per_class),
            synthetic_val_per_class: r.get("dataset", "synthetic_val_per_class", d.dataset.synthetic_val_per_class),
            synthetic_seed: r.get("dataset", "synthetic_seed", d.dataset.synthetic_seed),
            image_size: r.get("dataset", "image_size", d.dataset.image_size),
        };
        let dae = DaeSection {
            layers: r.with(Some("dae"), "layers", d.dae.layers.clone(), parse_layers),
            sigma: r.get("dae", "sigma", d.dae.sigma),
            epochs: r.get("dae", "epochs", d.dae.epochs),
            patience: r.get("dae", "patience", d.dae.patience),
            batch_size: r.get("dae", "batch_size", d.dae.batch_size),
            val_fraction: r.get("dae", "val_fraction", d.dae.val_fraction),
        };
        let cluster = ClusterSection {
            k: r.get("cluster", "k", d.cluster.k),
            seed: r.get("cluster", "seed", d.cluster.seed),
            tol: r.get("cluster", "tol", d.cluster.tol),
            max_iter: r.get("cluster", "max_iter", d.cluster.max_iter),
        };
        let scheduler = SchedulerSection {
            p: r.get("scheduler", "p", d.scheduler.p),
            mode: r.with(Some("scheduler"), "mode", d.scheduler.mode, |v| {
                v.parse().map_err(|e: Error| e.to_string())
            }),
            reshuffle_per_epoch: r.get("scheduler", "reshuffle_per_epoch", d.scheduler.reshuffle_per_epoch),
        };
        let c = &d.contrastive;
        let contrastive = ContrastiveSection {
            temperature: r.get("contrastive", "temperature", c.temperature),
            epochs: r.get("contrastive", "epochs", c.epochs),
            base_lr: r.get("contrastive", "base_lr", c.base_lr),
            encoder: r.with(Some("contrastive"), "encoder", c.encoder.clone(), parse_list),
            head: r.with(Some("contrastive"), "head", c.head, |v| {
                let w: Vec<usize> = parse_list(v)?;
                <[usize; 3]>::try_from(w).map_err(|w| format!("need exactly 3 widths, got {}", w.len()))
            }),
            flip_prob: r.get("contrastive", "flip_prob", c.flip_prob),
            brightness_delta: r.get("contrastive", "brightness_delta", c.brightness_delta),
            contrast_lo: r.get("contrastive", "contrast_lo", c.contrast_lo),
            contrast_hi: r.get("contrastive", "contrast_hi", c.contrast_hi),
        };
        let e = &d.eval;
        let eval = EvalSection {
            tap_points: r.with(Some("eval"), "tap_points", e.tap_points.clone(), |v| {
                v.split(',')
                    .map(|p| p.parse::<TapPoint>().map_err(|e| e.to_string()))
                    .collect()
            }),
            finetune_fraction: r.get("eval", "finetune_fraction", e.finetune_fraction),
            probe_epochs: r.get("eval", "probe_epochs", e.probe_epochs),
            finetune_epochs: r.get("eval", "finetune_epochs", e.finetune_epochs),
            patience: r.get("eval", "patience", e.patience),
            batch_size: r.get("eval", "batch_size", e.batch_size),
            supervised_reference: r.get("eval", "supervised_reference", e.supervised_reference),
        };
        let mut errors = r.errors;
        for (section, props) in ini.iter() {
            for (key, _) in props.iter() {
                let id = (section.unwrap_or("").to_string(), key.to_string());
                if !r.known.contains(&id) {
                    let name = section.map_or(key.to_string(), |s| format!("{s}.{key}"));
                    errors.push(format!("{name}: unknown setting"));
                }
            }
        }
        let config = RunConfig {
            seed,
            dataset,
            dae,
            cluster,
            scheduler,
            contrastive,
            eval,
        };
        errors.extend(config.problems());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.dataset.source {
            SourceKind::Cifar10 => (32, 32, 3),
            SourceKind::Synthetic => (self.dataset.image_size, self.dataset.image_size, 3),
        }
    }

    pub fn autoencoder_spec(&self) -> AutoencoderSpec {
        AutoencoderSpec {
            input_shape: self.image_shape(),
            encoder_layers: self.dae.layers.clone(),
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec::from_filters(self.image_shape(), &self.contrastive.encoder)
    }

    pub fn head_spec(&self) -> ProjectionHeadSpec {
        ProjectionHeadSpec {
            widths: self.contrastive.head,
        }
    }

    pub fn dae_train_config(&self) -> DaeTrainConfig {
        DaeTrainConfig {
            sigma: self.dae.sigma,
            max_epochs: self.dae.epochs,
            patience: self.dae.patience,
            val_fraction: self.dae.val_fraction,
            batch_size: self.dae.batch_size,
            ..DaeTrainConfig::default()
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.cluster.k,
            max_iter: self.cluster.max_iter,
            tol: self.cluster.tol,
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            flip_prob: self.contrastive.flip_prob,
            brightness_delta: self.contrastive.brightness_delta,
            contrast_range: (self.contrastive.contrast_lo, self.contrastive.contrast_hi),
        }
    }

    pub fn contrastive_config(&self, seed: u64) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.contrastive.temperature,
            epochs: self.contrastive.epochs,
            base_lr: self.contrastive.base_lr,
            augmentation: self.augmentation(),
            seed,
        }
    }

    pub fn probe_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            max_epochs: self.eval.probe_epochs,
            patience: self.eval.patience,
            batch_size: self.eval.batch_size,
            ..ClassifierConfig::default()
        }
    }

    pub fn finetune_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            max_epochs: self.eval.finetune_epochs,
            ..self.probe_config()
        }
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                p.push(msg);
            }
        };
        let ds = &self.dataset;
        if ds.source == SourceKind::Synthetic {
            check(
                ds.synthetic_classes >= 2,
                format!("dataset.synthetic_classes must be >= 2, got {}", ds.synthetic_classes),
            );
            check(
                ds.synthetic_per_class >= 1,
                "dataset.synthetic_per_class must be >= 1".into(),
            );
            check(
                ds.synthetic_val_per_class >= 1,
                "dataset.synthetic_val_per_class must be >= 1".into(),
            );
            check(ds.image_size >= 1, "dataset.image_size must be >= 1".into());
        }
        let dae = &self.dae;
        check(
            dae.sigma >= 0.0 && dae.sigma.is_finite(),
            format!("dae.sigma must be >= 0, got {}", dae.sigma),
        );
        check(dae.epochs >= 1, "dae.epochs must be >= 1".into());
        check(dae.patience >= 1, "dae.patience must be >= 1".into());
        check(dae.batch_size >= 1, "dae.batch_size must be >= 1".into());
        check(
            dae.val_fraction > 0.0 && dae.val_fraction < 1.0,
            format!("dae.val_fraction must be in (0, 1), got {}", dae.val_fraction),
        );
        if let Err(e) = self.autoencoder_spec().latent_shape() {
            check(false, format!("dae.layers: {e}"));
        }
        let cl = &self.cluster;
        check(cl.k >= 1, "cluster.k must be >= 1".into());
        check(
            cl.tol >= 0.0 && cl.tol.is_finite(),
            format!("cluster.tol must be >= 0, got {}", cl.tol),
        );
        check(cl.max_iter >= 1, "cluster.max_iter must be >= 1".into());
        check(
            self.scheduler.p >= 2,
            format!("scheduler.p must be >= 2, got {}", self.scheduler.p),
        );
        let c = &self.contrastive;
        check(
            c.temperature > 0.0 && c.temperature.is_finite(),
            format!("contrastive.temperature must be > 0, got {}", c.temperature),
        );
        check(c.epochs >= 1, "contrastive.epochs must be >= 1".into());
        check(
            c.base_lr >= 0.0 && c.base_lr.is_finite(),
            format!("contrastive.base_lr must be >= 0, got {}", c.base_lr),
        );
        if let Err(e) = self.encoder_spec().feature_dim() {
            check(false, format!("contrastive.encoder: {e}"));
        }
        check(!c.head.contains(&0), "contrastive.head widths must be positive".into());
        check(
            (0.0..=1.0).contains(&c.flip_prob),
            format!("contrastive.flip_prob must be in [0, 1], got {}", c.flip_prob),
        );
        check(
            c.brightness_delta >= 0.0,
            format!("contrastive.brightness_delta must be >= 0, got {}", c.brightness_delta),
        );
        check(
            c.contrast_lo >= 0.0 && c.contrast_lo <= c.contrast_hi,
            format!(
                "contrastive.contrast_lo/hi must satisfy 0 <= lo <= hi, got {} / {}",
                c.contrast_lo, c.contrast_hi
            ),
        );
        let e = &self.eval;
        check(!e.tap_points.is_empty(), "eval.tap_points must not be empty".into());
        check(
            e.finetune_fraction > 0.0 && e.finetune_fraction <= 1.0,
            format!("eval.finetune_fraction must be in (0, 1], got {}", e.finetune_fraction),
        );
        check(e.probe_epochs >= 1, "eval.probe_epochs must be >= 1".into());
        check(e.finetune_epochs >= 1, "eval.finetune_epochs must be >= 1".into());
        check(e.patience >= 1, "eval.patience must be >= 1".into());
        check(e.batch_size >= 1, "eval.batch_size must be >= 1".into());
        p
    }

    fn render(&self, with_run_keys: bool) -> String {
        let mut s = String::new();
        if with_run_keys {
            let _ = writeln!(s, "seed = {}\n", self.seed);
        }
        let ds = &self.dataset;
        let _ = writeln!(s, "[dataset]");
        let _ = writeln!(s, "source = {}", ds.source.as_str());
        let _ = writeln!(s, "path = {}", ds.path.display());
        let _ = writeln!(s, "subset_size = {}", ds.subset_size);
        let _ = writeln!(s, "val_size = {}", ds.val_size);
        let _ = writeln!(s, "synthetic_classes = {}", ds.synthetic_classes);
        let _ = writeln!(s, "synthetic_per_class = {}", ds.synthetic_per_class);
        let _ = writeln!(s, "synthetic_val_per_class = {}", ds.synthetic_val_per_class);
        let _ = writeln!(s, "synthetic_seed = {}", ds.synthetic_seed);
        let _ = writeln!(s, "image_size = {}\n", ds.image_size);
        let dae = &self.dae;
        let layers: Vec<String> = dae
            .layers
            .iter()
            .map(|l| format!("{}:{}:{}", l.filters, l.kernel, l.stride))
            .collect();
        let _ = writeln!(s, "[dae]");
        let _ = writeln!(s, "layers = {}", layers.join(", "));
        let _ = writeln!(s, "sigma = {:?}", dae.sigma);
        let _ = writeln!(s, "epochs = {}", dae.epochs);
        let _ = writeln!(s, "patience = {}", dae.patience);
        let _ = writeln!(s, "batch_size = {}", dae.batch_size);
        let _ = writeln!(s, "val_fraction = {:?}\n", dae.val_fraction);
        let cl = &self.cluster;
        let _ = writeln!(s, "[cluster]");
        let _ = writeln!(s, "k = {}", cl.k);
        let _ = writeln!(s, "seed = {}", cl.seed);
        let _ = writeln!(s, "tol = {:?}", cl.tol);
        let _ = writeln!(s, "max_iter = {}\n", cl.max_iter);
        let sc = &self.scheduler;
        let _ = writeln!(s, "[scheduler]");
        let _ = writeln!(s, "p = {}", sc.p);
        if with_run_keys {
            let _ = writeln!(s, "mode = {}", sc.mode.as_str());
        }
        let _ = writeln!(s, "reshuffle_per_epoch = {}\n", sc.reshuffle_per_epoch);
        let c = &self.contrastive;
        let _ = writeln!(s, "[contrastive]");
        let _ = writeln!(s, "temperature = {:?}", c.temperature);
        let _ = writeln!(s, "epochs = {}", c.epochs);
        let _ = writeln!(s, "base_lr = {:?}", c.base_lr);
        let _ = writeln!(s, "encoder = {}", join(&c.encoder, ", "));
        let _ = writeln!(s, "head = {}", join(&c.head, ", "));
        let _ = writeln!(s, "flip_prob = {:?}", c.flip_prob);
        let _ = writeln!(s, "brightness_delta = {:?}", c.brightness_delta);
        let _ = writeln!(s, "contrast_lo = {:?}", c.contrast_lo);
        let _ = writeln!(s, "contrast_hi = {:?}\n", c.contrast_hi);
        let e = &self.eval;
        let _ = writeln!(s, "[eval]");
        let _ = writeln!(s, "tap_points = {}", join(&e.tap_points, ", "));
        let _ = writeln!(s, "finetune_fraction = {:?}", e.finetune_fraction);
        let _ = writeln!(s, "probe_epochs = {}", e.probe_epochs);
        let _ = writeln!(s, "finetune_epochs = {}", e.finetune_epochs);
        let _ = writeln!(s, "patience = {}", e.patience);
        let _ = writeln!(s, "batch_size = {}", e.batch_size);
        let _ = writeln!(s, "supervised_reference = {}", e.supervised_reference);
        s
    }

    /// Canonical INI text; parses back to an equal config.
    pub fn to_ini(&self) -> String {
        self.render(true)
    }

    /// SHA-256 of the canonical text without `seed` and `scheduler.mode`,
    /// so runs that differ only in those share a hash.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.render(false).as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.dae.sigma, 0.01);
        assert_eq!(c.dae.patience, 5);
        assert_eq!(c.cluster.k, 64);
        assert_eq!(c.scheduler.p, 64);
        assert_eq!(c.contrastive.temperature, 0.1);
        assert_eq!(c.contrastive.epochs, 15);
        assert!(c.problems().is_empty());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        c.scheduler.mode = PlanMode::Random;
        c.dae.sigma = 0.3;
        c.eval.tap_points = vec![TapPoint::P3];
        assert_eq!(RunConfig::parse(&c.to_ini()).unwrap(), c);
    }

    #[test]
    fn hash_ignores_seed_and_mode() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 3;
        b.scheduler.mode = PlanMode::Random;
        assert_eq!(a.config_hash(), b.config_hash());
        b.cluster.k = 10;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "seed = x\n[dae]\nsigma = -1\n[contrastive]\ntemperature = 0\n[scheduler]\np = 1\nbogus = 2\n";
        let Err(Error::Config(errs)) = RunConfig::parse(text) else {
            panic!("expected config error");
        };
        let joined = errs.join("\n");
        for needle in [
            "seed",
            "dae.sigma",
            "contrastive.temperature",
            "scheduler.p",
            "scheduler.bogus",
        ] {
            assert!(joined.contains(needle), "{needle} missing from:\n{joined}");
        }
    }
}
