//! Minibatch ELBO training with Adam, temperature annealing and sampled
//! evaluation.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment_images, batches, LabeledDataset};
use crate::distributions::Temperature;
use crate::error::{Error, Result};
use crate::layers::{ForwardMode, Sampling};
use crate::model::Model;
use crate::rng::{self, derive_seed, tags};
use crate::tensor::{argmax, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anneal {
    ExponentialPerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal: Anneal,
    pub kl_scale: f64,
    pub seed: u64,
    /// Random flips and shifts of up to 2 pixels on image batches.
    pub augment: bool,
    /// Fill `wall_ms` in the metrics log; otherwise it is written as 0.
    pub record_wall_clock: bool,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            tau_start: 1.0,
            tau_end: 0.5,
            anneal: Anneal::ExponentialPerEpoch,
            kl_scale: 1.0,
            seed: 0,
            augment: false,
            record_wall_clock: false,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tau_end > 0.0) || !(self.kl_scale >= 0.0) {
            return Err(Error::Config(
                "learning_rate and tau must be > 0 and kl_scale >= 0".into(),
            ));
        }
        if !(self.tau_end <= self.tau_start) {
            return Err(Error::Config(format!(
                "tau_end {} exceeds tau_start {}",
                self.tau_end, self.tau_start
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub mode: ForwardMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mc_samples: 4,
            mode: ForwardMode::InferExact,
        }
    }
}

/// Geometric interpolation from `tau_start` at epoch 0 to `tau_end` at the last epoch.
pub fn anneal(tau_start: f64, tau_end: f64, epoch: usize, epochs: usize) -> Result<Temperature> {
    if epochs <= 1 {
        return Temperature::new(tau_start);
    }
    let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    Temperature::new(tau_start * (tau_end / tau_start).powf(frac))
}

// ---- ELBO -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboMetrics {
    pub loss: f64,
    /// Mean negative log-likelihood per example.
    pub nll: f64,
    /// Summed KL of all layers (unscaled).
    pub kl: f64,
    pub accuracy: f64,
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::Data(format!("label {y} outside [0, {classes})"))),
        None => Ok(()),
    }
}

/// Summed NLL of `labels` under class scores `[N, M]`.
pub(crate) fn nll_sum(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let m = g.shape(scores)[1];
    let mut onehot = vec![0.0; labels.len() * m];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * m + y] = -1.0;
    }
    let logp = g.log_softmax(scores);
    let sel = g.constant(Tensor::new(vec![labels.len(), m], onehot)?);
    let picked = g.mul(logp, sel)?;
    Ok(g.sum(picked))
}

/// Loss graph: `mean NLL + kl_scale * (N / dataset_size) * KL`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_graph<R: rand::Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    params: &[Vec<Var>],
    x: &Tensor,
    labels: &[usize],
    tau: Temperature,
    kl_scale: f64,
    dataset_size: usize,
    rng: &mut R,
) -> Result<(Var, ElboMetrics)> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("ELBO of an empty batch"));
    }
    check_labels(labels, model.classes())?;
    let xv = g.constant(x.clone());
    let f = model.forward_graph(g, params, xv, Sampling::Relaxed(tau), true, rng)?;
    let scores = model.head.scores_var(g, f.logits)?;
    let correct = g
        .value(scores)
        .data()
        .chunks(model.classes())
        .zip(labels)
        .filter(|(s, &y)| argmax(s) == y)
        .count();
    let total = nll_sum(g, scores, labels)?;
    let nll = g.scale(total, 1.0 / n as f64);
    let (loss, kl) = match f.kl {
        Some(kl) => {
            let w = kl_scale * n as f64 / dataset_size.max(1) as f64;
            let scaled = g.scale(kl, w);
            (g.add(nll, scaled)?, g.value(kl).item()?)
        }
        None => (nll, 0.0),
    };
    let metrics = ElboMetrics {
        loss: g.value(loss).item()?,
        nll: g.value(nll).item()?,
        kl,
        accuracy: correct as f64 / n as f64,
    };
    Ok((loss, metrics))
}

#[derive(Debug, Clone)]
pub struct ElboStep {
    pub metrics: ElboMetrics,
    /// Gradients in [`Model::params`] order.
    pub grads: Vec<Vec<Tensor>>,
}

/// Loss and parameter gradients for one minibatch with one noise draw.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<R: rand::Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    tau: Temperature,
    kl_scale: f64,
    dataset_size: usize,
    rng: &mut R,
) -> Result<ElboStep> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let (loss, metrics) = elbo_graph(model, &mut g, &params, x, labels, tau, kl_scale, dataset_size, rng)?;
    let mut grads = g.backward(loss)?;
    let grads = params
        .iter()
        .map(|layer| layer.iter().map(|&v| grads.take(v)).collect())
        .collect();
    Ok(ElboStep { metrics, grads })
}

/// Largest relative error between backprop and central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor of `1e-6` on the denominator, so entries whose
/// true gradient is numerically zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares [`elbo_loss`] gradients with central differences of step `h`,
/// reusing the noise stream `(seed, 0)` for every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    tau: Temperature,
    kl_scale: f64,
    dataset_size: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheck> {
    let step = elbo_loss(model, x, labels, tau, kl_scale, dataset_size, &mut rng::stream(seed, 0))?;
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let shapes: Vec<Vec<(&'static str, usize)>> = model
        .params()
        .iter()
        .map(|l| l.iter().map(|(n, t)| (*n, t.len())).collect())
        .collect();
    for (li, layer) in shapes.iter().enumerate() {
        for (pi, &(name, len)) in layer.iter().enumerate() {
            for e in 0..len {
                let orig = model.params()[li][pi].1.data()[e];
                let mut eval = |v: f64| -> Result<f64> {
                    probe.params_mut()[li][pi].1.data_mut()[e] = v;
                    let mut g = Graph::new();
                    let params = probe.bind(&mut g, false);
                    let (_, m) = elbo_graph(
                        &probe,
                        &mut g,
                        &params,
                        x,
                        labels,
                        tau,
                        kl_scale,
                        dataset_size,
                        &mut rng::stream(seed, 0),
                    )?;
                    Ok(m.loss)
                };
                let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
                probe.params_mut()[li][pi].1.data_mut()[e] = orig;
                let analytic = step.grads[li][pi].data()[e];
                let err = relative_error(analytic, numeric);
                checked += 1;
                if err > worst.0 || !err.is_finite() {
                    worst = (err, format!("layer{li}.{name}[{e}]: analytic {analytic:e}, numeric {numeric:e}"));
                }
            }
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
    })
}

// ---- Adam -------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update of `params` against `grads`.
/// Nothing is modified when any gradient entry is non-finite.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), gr) in params.iter().zip(grads) {
        if p.shape() != gr.shape() {
            return Err(Error::dim(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                gr.shape(),
                p.shape()
            )));
        }
        if !gr.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::dim("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, ((_, p), gr)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(gr.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Flattened `(layer<i>.<name>, tensor)` view of a model's parameters.
pub fn named_params_mut(model: &mut Model) -> Vec<(String, &mut Tensor)> {
    model
        .params_mut()
        .into_iter()
        .enumerate()
        .flat_map(|(i, l)| l.into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
        .collect()
}

// ---- training loop ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub acc: f64,
    pub tau: f64,
    pub wall_ms: u64,
}

/// Runs `schedule` on `model`, writing one JSON line per epoch to `log`.
pub fn train(
    model: &mut Model,
    data: &LabeledDataset,
    schedule: &TrainingSchedule,
    log: &mut dyn Write,
) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training on an empty dataset"));
    }
    check_labels(&data.labels, model.classes())?;
    let mut noise = rng::stream(derive_seed(schedule.seed, tags::TRAIN_NOISE), 0);
    let mut aug_rng = rng::stream(derive_seed(schedule.seed, tags::SHUFFLE), 1);
    let shuffle_seed = derive_seed(schedule.seed, tags::SHUFFLE);
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let tau = anneal(schedule.tau_start, schedule.tau_end, epoch, schedule.epochs)?;
        let (mut nll, mut kl, mut correct, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in batches(data.len(), schedule.batch_size, derive_seed(shuffle_seed, epoch as u64))?
            .into_iter()
            .enumerate()
        {
            let batch = data.select(&idx);
            let x = if schedule.augment && batch.inputs.ndim() == 4 {
                augment_images(&batch.inputs, 2, &mut aug_rng)?
            } else {
                batch.inputs
            };
            // inputs and labels were checked up front, so a domain failure here
            // means the parameters have blown up
            let out = match elbo_loss(model, &x, &batch.labels, tau, schedule.kl_scale, data.len(), &mut noise) {
                Err(Error::Domain { .. }) => return Err(Error::Divergence { epoch, step, loss: f64::NAN }),
                other => other?,
            };
            if !out.metrics.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.metrics.loss,
                });
            }
            let grads: Vec<Tensor> = out.grads.into_iter().flatten().collect();
            adam_step(&mut named_params_mut(model), &grads, &mut state, schedule.learning_rate)?;
            let b = idx.len() as f64;
            nll += out.metrics.nll * b;
            correct += out.metrics.accuracy * b;
            kl += out.metrics.kl;
            steps += 1;
        }
        let n = data.len() as f64;
        let m = EpochMetrics {
            epoch,
            nll: nll / n,
            kl: kl / steps as f64,
            acc: correct / n,
            tau: tau.value(),
            wall_ms: if schedule.record_wall_clock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        serde_json::to_writer(&mut *log, &m)?;
        writeln!(log)?;
        history.push(m);
    }
    Ok(history)
}

// ---- evaluation ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub n: usize,
    pub mc_samples: usize,
    #[serde(skip)]
    pub class_probs: Tensor,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

/// Examples per evaluation chunk; chunk `c` draws from stream `c` of the eval seed.
pub const EVAL_CHUNK: usize = 100;

/// Class probabilities `[N, M]` averaged over `mc_samples` passes.
pub fn predict(model: &Model, inputs: &Tensor, cfg: &EvalConfig, seed: u64) -> Result<Tensor> {
    if cfg.mc_samples == 0 {
        return Err(Error::contract("mc_samples must be >= 1"));
    }
    let n = inputs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let sampling = Sampling::new(cfg.mode, None)?;
    let eval_seed = derive_seed(seed, tags::EVAL);
    let chunks: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(s, e))| {
            let idx: Vec<usize> = (s..e).collect();
            let x = inputs.select_rows(&idx);
            let mut r = rng::stream(eval_seed, c as u64);
            let mut acc: Option<Tensor> = None;
            for _ in 0..cfg.mc_samples {
                let p = model.class_probabilities(&x, sampling, &mut r)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => a.zip_map(&p, |u, v| u + v)?,
                });
            }
            let k = cfg.mc_samples as f64;
            Ok(acc.expect("mc_samples >= 1").map(|v| v / k))
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let m = model.classes();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, m], data)
}

pub fn evaluate(model: &Model, data: &LabeledDataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let probs = predict(model, &data.inputs, cfg, seed)?;
    Ok(report_from_probs(probs, &data.labels, cfg.mc_samples))
}

pub(crate) fn report_from_probs(class_probs: Tensor, labels: &[usize], mc_samples: usize) -> EvalReport {
    let decoded = crate::ecoc::decode(&class_probs);
    let n = labels.len();
    let correct = decoded.iter().zip(labels).filter(|((k, _), &y)| *k == y).count();
    let conf: f64 = decoded.iter().map(|(_, c)| c).sum();
    EvalReport {
        accuracy: correct as f64 / n as f64,
        mean_confidence: conf / n as f64,
        n,
        mc_samples,
        class_probs,
        predictions: decoded.into_iter().map(|(k, _)| k).collect(),
    }
}
