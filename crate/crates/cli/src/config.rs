//! Flat `key=value` run configuration with dotted sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sblwta_core::attacks::{AttackConfig, CwConfig};
use sblwta_core::datasets::{self, LabeledDataset};
use sblwta_core::ecoc::{build_code, CodeKind, TransformKind};
use sblwta_core::model::{Head, LayerPlan};
use sblwta_core::tensor::Padding;
use sblwta_core::trainer::{EvalConfig, TrainingSchedule};
use sblwta_core::{Error, Result};

/// Parses `key=value` lines; `#` starts a comment line.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

/// Key lookup that tracks which entries were consumed.
struct Keys(BTreeMap<String, String>);

impl Keys {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key}={v}`"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn need<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parsed<T: FromStr<Err = Error>>(&mut self, key: &str, default: &str) -> Result<T> {
        self.0.remove(key).as_deref().unwrap_or(default).parse()
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Blobs { n_per_class: usize, classes: usize, dim: usize, separation: f64, seed: u64 },
    Mnist { dir: PathBuf },
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self.source {
            DataSource::Blobs { classes, .. } => classes,
            _ => 10,
        }
    }

    pub fn load(&self, split: Split) -> Result<LabeledDataset> {
        let data = match (&self.source, split) {
            (&DataSource::Blobs { n_per_class, classes, dim, separation, seed }, s) => {
                let seed = if s == Split::Train { seed } else { seed.wrapping_add(1) };
                datasets::synthetic_blobs(n_per_class, classes, dim, separation, seed)?
            }
            (DataSource::Mnist { dir }, Split::Train) => {
                datasets::load_idx(&dir.join(MNIST_FILES[0]), &dir.join(MNIST_FILES[1]))?
            }
            (DataSource::Mnist { dir }, Split::Test) => {
                datasets::load_idx(&dir.join(MNIST_FILES[2]), &dir.join(MNIST_FILES[3]))?
            }
            (DataSource::Cifar10 { train, .. }, Split::Train) => {
                let paths: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
                datasets::load_cifar10(&paths)?
            }
            (DataSource::Cifar10 { test, .. }, Split::Test) => datasets::load_cifar10(&[test.as_path()])?,
        };
        let limit = if split == Split::Train { self.train_limit } else { self.test_limit };
        Ok(match limit {
            Some(n) if n < data.len() => data.take(n),
            _ => data,
        })
    }

    fn paths(&self) -> Vec<PathBuf> {
        match &self.source {
            DataSource::Blobs { .. } => Vec::new(),
            DataSource::Mnist { dir } => MNIST_FILES.iter().map(|f| dir.join(f)).collect(),
            DataSource::Cifar10 { train, test } => train.iter().chain(std::iter::once(test)).cloned().collect(),
        }
    }
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub plan: Vec<LayerPlan>,
    pub prior_alpha: f64,
    pub head: Head,
    pub schedule: TrainingSchedule,
    pub eval: EvalConfig,
    pub attack: AttackConfig,
    pub cw: CwConfig,
    pub noise_amplitude: f64,
    pub rand_inputs: usize,
    pub rand_threshold: f64,
}

impl RunConfig {
    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut k = Keys(map);
        let seed = k.or("seed", 0u64)?;
        let out_dir = k.or("out_dir", PathBuf::from("runs"))?;

        let kind: String = k.need("data.kind")?;
        let source = match kind.as_str() {
            "blobs" => DataSource::Blobs {
                n_per_class: k.need("data.n_per_class")?,
                classes: k.need("data.classes")?,
                dim: k.need("data.dim")?,
                separation: k.need("data.separation")?,
                seed: k.or("data.seed", 0)?,
            },
            "mnist" => DataSource::Mnist { dir: k.need("data.dir")? },
            "cifar10" => {
                let train: String = k.need("data.train")?;
                DataSource::Cifar10 {
                    train: train.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                    test: k.need("data.test")?,
                }
            }
            other => return Err(Error::Config(format!("unknown data.kind `{other}`"))),
        };
        let data = DataConfig {
            source,
            train_limit: k.take("data.train_limit")?,
            test_limit: k.take("data.test_limit")?,
        };

        let mut plan = Vec::new();
        for i in 0.. {
            let p = format!("model.layer{i}.");
            let Some(kind) = k.take::<String>(&format!("{p}kind"))? else { break };
            let key = |s: &str| format!("{p}{s}");
            plan.push(match kind.as_str() {
                "lwta-dense" => LayerPlan::LwtaDense {
                    blocks: k.need(&key("blocks"))?,
                    units: k.need(&key("units"))?,
                    bias: k.or(&key("bias"), false)?,
                },
                "lwta-conv" => LayerPlan::LwtaConv {
                    kernel: k.need(&key("kernel"))?,
                    blocks: k.need(&key("blocks"))?,
                    units: k.need(&key("units"))?,
                    padding: match k.or(&key("padding"), "valid".to_string())?.as_str() {
                        "valid" => Padding::Valid,
                        "same" => Padding::Same,
                        other => return Err(Error::Config(format!("unknown padding `{other}`"))),
                    },
                },
                "gated-output" => LayerPlan::GatedOutput { bias: k.or(&key("bias"), false)? },
                "dense" => LayerPlan::Dense {
                    outputs: k.take(&key("outputs"))?,
                    relu: k.or(&key("relu"), false)?,
                },
                "hard-wta" => LayerPlan::HardWta {
                    blocks: k.need(&key("blocks"))?,
                    units: k.need(&key("units"))?,
                },
                other => return Err(Error::Config(format!("unknown layer kind `{other}` for model.layer{i}"))),
            });
        }
        if plan.is_empty() {
            return Err(Error::Config("no layers: expected model.layer0.kind".into()));
        }
        let prior_alpha = k.or("model.prior_alpha", 1.0)?;

        let classes = k.or("head.classes", data.classes())?;
        let head = match k.or("head.kind", "ecoc".to_string())?.as_str() {
            "ecoc" => {
                let code = match k.or("ecoc.code", "hadamard".to_string())?.as_str() {
                    "hadamard" => CodeKind::Hadamard,
                    "identity" => CodeKind::Identity,
                    other => return Err(Error::Config(format!("unknown ecoc.code `{other}`"))),
                };
                let bits = k.or("ecoc.bits", classes)?;
                Head::Ecoc {
                    code: build_code(classes, bits, code)?,
                    transform: k.parsed::<TransformKind>("ecoc.transform", "tanh")?,
                }
            }
            "categorical" => Head::Categorical { classes },
            other => return Err(Error::Config(format!("unknown head.kind `{other}`"))),
        };

        let d = TrainingSchedule::default();
        let schedule = TrainingSchedule {
            epochs: k.or("train.epochs", d.epochs)?,
            batch_size: k.or("train.batch_size", d.batch_size)?,
            learning_rate: k.or("train.learning_rate", d.learning_rate)?,
            tau_start: k.or("train.tau_start", d.tau_start)?,
            tau_end: k.or("train.tau_end", d.tau_end)?,
            anneal: d.anneal,
            kl_scale: k.or("train.kl_scale", d.kl_scale)?,
            seed,
            augment: k.or("train.augment", d.augment)?,
            record_wall_clock: false,
        };
        schedule.validate()?;

        let eval = EvalConfig {
            mc_samples: k.or("eval.mc_samples", EvalConfig::default().mc_samples)?,
            mode: k.parsed("eval.mode", "infer-exact")?,
        };
        if eval.mc_samples == 0 {
            return Err(Error::Config("eval.mc_samples must be >= 1".into()));
        }

        let a = AttackConfig::default();
        let attack = AttackConfig {
            epsilon: k.or("attack.epsilon", a.epsilon)?,
            steps: k.or("attack.steps", a.steps)?,
            step_size: k.or("attack.step_size", a.step_size)?,
            random_start: k.or("attack.random_start", a.random_start)?,
            eot_samples: k.or("attack.eot_samples", a.eot_samples)?,
            input_bounds: a.input_bounds,
        };
        attack.validate()?;
        let c = CwConfig::default();
        let cw = CwConfig {
            c: k.or("attack.cw.c", c.c)?,
            steps: k.or("attack.cw.steps", c.steps)?,
            lr: k.or("attack.cw.lr", c.lr)?,
            eot_samples: attack.eot_samples,
        };
        let noise_amplitude = k.or("attack.noise.amplitude", 1.0)?;
        let rand_inputs = k.or("attack.rand.n_inputs", 1000)?;
        let rand_threshold = k.or("attack.rand.threshold", 0.9)?;

        if let Some(extra) = k.0.keys().next() {
            return Err(Error::Config(format!("unknown configuration key `{extra}`")));
        }
        let cfg = RunConfig {
            seed,
            out_dir,
            data,
            plan,
            prior_alpha,
            head,
            schedule,
            eval,
            attack,
            cw,
            noise_amplitude,
            rand_inputs,
            rand_threshold,
        };
        for p in cfg.data.paths() {
            if !p.exists() {
                return Err(Error::Config(format!("dataset path {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> BTreeMap<String, String> {
        parse(
            "# comment\nseed=3\ndata.kind=blobs\ndata.n_per_class=5\ndata.classes=2\ndata.dim=2\ndata.separation=4\n\
             model.layer0.kind=lwta-dense\nmodel.layer0.blocks=2\nmodel.layer0.units=2\n\
             model.layer1.kind=gated-output\necoc.code=identity\necoc.transform=logistic\n",
        )
        .unwrap()
    }

    #[test]
    fn parses_blobs_config() {
        let cfg = RunConfig::from_map(blobs()).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.schedule.seed, 3);
        assert_eq!(cfg.plan.len(), 2);
        assert_eq!(cfg.head.logit_width(), 2);
        assert_eq!(cfg.eval.mc_samples, 4);
        assert_eq!(cfg.data.load(Split::Train).unwrap().len(), 10);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("novalue").is_err());
        assert!(parse("a=1\na=2").is_err());
        let mut m = blobs();
        m.insert("train.epoch".into(), "3".into());
        assert!(matches!(RunConfig::from_map(m), Err(Error::Config(_))));
        let mut m = blobs();
        m.insert("data.kind".into(), "mnist".into());
        m.insert("data.dir".into(), "/no/such/dir".into());
        for k in ["data.n_per_class", "data.classes", "data.dim", "data.separation"] {
            m.remove(k);
        }
        assert!(matches!(RunConfig::from_map(m), Err(Error::Config(_))));
        let mut m = blobs();
        m.insert("train.tau_end".into(), "2".into());
        assert!(RunConfig::from_map(m).is_err());
    }
}
