mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sblwta_core::attacks::{self, AttackKind, HIST_BINS};
use sblwta_core::datasets::LabeledDataset;
use sblwta_core::model::Model;
use sblwta_core::rng::{self, derive_seed, tags};
use sblwta_core::{checkpoint, inspect, trainer, Error, Result};

use config::{RunConfig, Split};

#[derive(Parser)]
#[command(name = "sblwta", version, about = "Train, evaluate and attack stochastic LWTA networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key=value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Defaults to `<out_dir>/model.sblwta`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    Train {
        #[command(flatten)]
        common: Common,
        /// Record per-epoch wall time in the metrics log.
        #[arg(long)]
        record_wall_clock: bool,
    },
    Eval {
        #[command(flatten)]
        model: WithModel,
        #[arg(long, default_value = "test")]
        split: String,
    },
    Attack {
        #[command(flatten)]
        model: WithModel,
        /// fgsm, pgd, cw, noise or rand.
        #[arg(long)]
        attack: String,
    },
    InspectCompetition {
        #[command(flatten)]
        model: WithModel,
        #[arg(long)]
        layer: usize,
        /// Also record patterns on fgsm or pgd examples and their distance to the benign ones.
        #[arg(long)]
        attack: Option<String>,
    },
    ConfidenceHist {
        #[command(flatten)]
        model: WithModel,
        /// `data` (test split) or `random` (uniform inputs).
        #[arg(long, default_value = "data")]
        source: String,
        #[arg(long, default_value_t = HIST_BINS)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let text = fs::read_to_string(&c.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", c.config.display())))?;
    let mut map = config::parse(&text)?;
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(s) = c.seed {
        map.insert("seed".into(), s.to_string());
    }
    if let Some(d) = &c.out_dir {
        map.insert("out_dir".into(), d.display().to_string());
    }
    if let Some(m) = c.mc_samples {
        map.insert("eval.mc_samples".into(), m.to_string());
    }
    RunConfig::from_map(map)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn to_json(v: &serde_json::Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Loads the checkpoint and the config together with one split, checking they agree.
fn load_run(m: &WithModel, split: Split) -> Result<(RunConfig, Model, LabeledDataset)> {
    let cfg = load_config(&m.common)?;
    let path = m.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.sblwta"));
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let model = checkpoint::load(&path)?;
    let data = cfg.data.load(split)?;
    if model.input_shape != data.example_shape() {
        return Err(Error::Config(format!(
            "checkpoint expects inputs {:?} but the data has {:?}",
            model.input_shape,
            data.example_shape()
        )));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::Data(format!("label {y} outside the model's {} classes", model.classes())));
    }
    Ok((cfg, model, data))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, record_wall_clock } => {
            let mut cfg = load_config(&common)?;
            cfg.schedule.record_wall_clock = record_wall_clock;
            let data = cfg.data.load(Split::Train)?;
            let mut init = rng::stream(derive_seed(cfg.seed, tags::INIT), 0);
            let mut model = Model::build(data.example_shape(), &cfg.plan, cfg.head.clone(), cfg.prior_alpha, &mut init)?;
            eprintln!(
                "training {} parameters on {} examples for {} epochs",
                model.num_params(),
                data.len(),
                cfg.schedule.epochs
            );
            fs::create_dir_all(&cfg.out_dir)?;
            let mut log = Vec::new();
            let history = trainer::train(&mut model, &data, &cfg.schedule, &mut log);
            // keep the partial log even when training diverges
            fs::write(cfg.out_dir.join("metrics.jsonl"), &log)?;
            let history = history?;
            let ckpt = cfg.out_dir.join("model.sblwta");
            checkpoint::save(&model, &ckpt)?;
            let last = history.last();
            let summary = serde_json::json!({
                "epochs": history.len(),
                "train_accuracy": last.map(|m| m.acc),
                "train_nll": last.map(|m| m.nll),
                "checkpoint": ckpt.display().to_string(),
            });
            println!("{summary}");
        }
        Command::Eval { model, split } => {
            let split: Split = split.parse()?;
            let (cfg, model, data) = load_run(&model, split)?;
            let r = trainer::evaluate(&model, &data, &cfg.eval, cfg.seed)?;
            let out = serde_json::json!({
                "benign_accuracy": r.accuracy,
                "mean_confidence": r.mean_confidence,
                "n": r.n,
                "mc_samples": r.mc_samples,
            });
            let name = match split {
                Split::Test => "eval.json",
                Split::Train => "eval_train.json",
            };
            let text = to_json(&out)?;
            write_out(&cfg.out_dir, name, &text)?;
            print!("{text}");
        }
        Command::Attack { model, attack } => {
            let kind: AttackKind = attack.parse()?;
            let (cfg, model, data) = load_run(&model, Split::Test)?;
            for w in cfg.attack.warnings() {
                eprintln!("warning: {w}");
            }
            let report = match kind {
                AttackKind::Fgsm | AttackKind::Pgd => {
                    attacks::gradient_attack(&model, &data, kind, &cfg.attack, &cfg.eval, cfg.seed)?
                }
                AttackKind::Cw => attacks::cw_attack(&model, &data, &cfg.cw, &cfg.eval, cfg.seed)?,
                AttackKind::Noise => attacks::uniform_noise_eval(
                    &model,
                    &data,
                    cfg.noise_amplitude,
                    cfg.attack.input_bounds,
                    &cfg.eval,
                    cfg.seed,
                )?,
                AttackKind::Rand => attacks::random_input_eval(
                    &model,
                    cfg.rand_inputs,
                    cfg.rand_threshold,
                    cfg.attack.input_bounds,
                    &cfg.eval,
                    cfg.seed,
                )?,
            };
            let text = to_json(&serde_json::to_value(&report)?)?;
            write_out(&cfg.out_dir, &format!("attack_{}.json", kind.as_str()), &text)?;
            print!("{text}");
        }
        Command::InspectCompetition { model, layer, attack } => {
            let kind = attack.as_deref().map(str::parse::<AttackKind>).transpose()?;
            if let Some(k) = kind {
                if !matches!(k, AttackKind::Fgsm | AttackKind::Pgd) {
                    return Err(Error::Config(format!("inspect-competition supports fgsm or pgd, not {}", k.as_str())));
                }
            }
            let (cfg, model, data) = load_run(&model, Split::Test)?;
            let n_samples = cfg.eval.mc_samples;
            let (benign, units) = inspect::competition_patterns(&model, &data, layer, n_samples, cfg.seed)?;
            let path = write_out(
                &cfg.out_dir,
                &format!("competition_layer{layer}.csv"),
                &inspect::patterns_csv(&benign, units),
            )?;
            eprintln!("wrote {}", path.display());
            if let Some(kind) = kind {
                let report = attacks::gradient_attack(&model, &data, kind, &cfg.attack, &cfg.eval, cfg.seed)?;
                let adv_inputs = report
                    .adversarial
                    .ok_or_else(|| Error::Attack("attack produced no adversarial inputs".into()))?;
                let adv = LabeledDataset::new(adv_inputs, data.labels.clone())?;
                let (patterns, _) = inspect::competition_patterns(&model, &adv, layer, n_samples, cfg.seed)?;
                let name = kind.as_str();
                write_out(
                    &cfg.out_dir,
                    &format!("competition_layer{layer}_{name}.csv"),
                    &inspect::patterns_csv(&patterns, units),
                )?;
                let tv = inspect::mean_block_tv(&benign, &patterns, units)?;
                let out = serde_json::json!({
                    "layer": layer,
                    "attack": name,
                    "mean_tv": tv,
                    "n": data.len(),
                });
                let text = to_json(&out)?;
                write_out(&cfg.out_dir, &format!("competition_layer{layer}_{name}_tv.json"), &text)?;
                print!("{text}");
            }
        }
        Command::ConfidenceHist { model, source, bins } => {
            if bins == 0 {
                return Err(Error::Config("--bins must be >= 1".into()));
            }
            let (cfg, model, data) = load_run(&model, Split::Test)?;
            let probs = match source.as_str() {
                "data" => trainer::predict(&model, &data.inputs, &cfg.eval, cfg.seed)?,
                "random" => {
                    let x = attacks::random_inputs(&model.input_shape, cfg.rand_inputs, cfg.attack.input_bounds, cfg.seed);
                    trainer::predict(&model, &x, &cfg.eval, cfg.seed)?
                }
                other => return Err(Error::Config(format!("unknown source `{other}`; expected data or random"))),
            };
            let counts = attacks::histogram(&attacks::confidences(&probs), bins);
            let path = write_out(
                &cfg.out_dir,
                &format!("confidence_{source}.csv"),
                &inspect::histogram_csv(&counts),
            )?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
