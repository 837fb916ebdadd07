//! White-box attacks with expectation-over-transformation gradients.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::distributions::Temperature;
use crate::error::{Error, Result};
use crate::layers::Sampling;
use crate::model::Model;
use crate::rng::{self, derive_seed, tags, StreamRng};
use crate::tensor::{argmax, Graph, Tensor};
use crate::trainer::{adam_step, check_labels, nll_sum, predict, report_from_probs, AdamState, EvalConfig};

/// Temperature of the relaxed backward path through stochastic layers.
pub const ATTACK_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub eot_samples: usize,
    pub input_bounds: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            steps: 20,
            step_size: 0.01,
            random_start: false,
            eot_samples: 4,
            input_bounds: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config("epsilon must be >= 0 and step_size > 0".into()));
        }
        if self.eot_samples == 0 {
            return Err(Error::Config("eot_samples must be >= 1".into()));
        }
        if !(self.input_bounds.0 < self.input_bounds.1) {
            return Err(Error::Config(format!("empty input bounds {:?}", self.input_bounds)));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.steps >= 1 && self.step_size > self.epsilon {
            w.push(format!(
                "step_size {} exceeds epsilon {}",
                self.step_size, self.epsilon
            ));
        }
        w
    }

    fn clip_box(&self, v: f64) -> f64 {
        v.max(self.input_bounds.0).min(self.input_bounds.1)
    }
}

fn attack_sampling(model: &Model) -> Sampling {
    if model.is_stochastic() {
        Sampling::StraightThrough(Temperature::new(ATTACK_TAU).expect("positive"))
    } else {
        Sampling::Exact
    }
}

/// Gradient of the summed NLL wrt `x` for one forward pass.
fn input_gradient<R: Rng + ?Sized>(model: &Model, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let f = model.forward_graph(&mut g, &params, xv, attack_sampling(model), false, rng)?;
    let scores = model.head.scores_var(&mut g, f.logits)?;
    let loss = nll_sum(&mut g, scores, labels)?;
    Ok(g.backward(loss)?.take(xv))
}

/// Mean input gradient of the NLL over `eot_samples` stochastic passes.
///
/// Stochastic layers sample exactly on the forward path and back-propagate
/// through their `tau = 0.1` relaxations.
pub fn eot_gradient<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eot_samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if eot_samples == 0 {
        return Err(Error::contract("eot_samples must be >= 1"));
    }
    check_labels(labels, model.classes())?;
    let passes = if model.is_stochastic() { eot_samples } else { 1 };
    let mut acc = input_gradient(model, x, labels, rng)?;
    for _ in 1..passes {
        let g = input_gradient(model, x, labels, rng)?;
        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
    }
    if passes > 1 {
        let k = passes as f64;
        acc = acc.map(|v| v / k);
    }
    if !acc.all_finite() {
        return Err(Error::Attack("non-finite input gradient".into()));
    }
    Ok(acc)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn fgsm<R: Rng + ?Sized>(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    let g = eot_gradient(model, x, labels, cfg.eot_samples, rng)?;
    x.zip_map(&g, |xi, gi| cfg.clip_box(xi + cfg.epsilon * sign(gi)))
}

pub fn pgd<R: Rng + ?Sized>(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: &mut R) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Err(Error::Config("PGD needs steps >= 1".into()));
    }
    let eps = cfg.epsilon;
    let lo = x.map(|v| v - eps);
    let hi = x.map(|v| v + eps);
    let project = |v: f64, l: f64, h: f64| cfg.clip_box(v).max(l).min(h);
    let mut adv = if cfg.random_start && eps > 0.0 {
        let mut d = x.clone();
        for (i, v) in d.data_mut().iter_mut().enumerate() {
            let u: f64 = rng.gen_range(-eps..=eps);
            *v = project(*v + u, lo.data()[i], hi.data()[i]);
        }
        d
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let g = eot_gradient(model, &adv, labels, cfg.eot_samples, rng)?;
        for (i, v) in adv.data_mut().iter_mut().enumerate() {
            *v = project(*v + cfg.step_size * sign(g.data()[i]), lo.data()[i], hi.data()[i]);
        }
    }
    Ok(adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwConfig {
    pub c: f64,
    pub steps: usize,
    pub lr: f64,
    pub eot_samples: usize,
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig {
            c: 1.0,
            steps: 100,
            lr: 0.01,
            eot_samples: 4,
        }
    }
}

/// Class-score margins `s_y - max_{j != y} s_j` per example and the input
/// gradient of their sum over examples with positive margin.
fn margin_gradient<R: Rng + ?Sized>(model: &Model, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<(Vec<f64>, Tensor)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let f = model.forward_graph(&mut g, &params, xv, attack_sampling(model), false, rng)?;
    let scores = model.head.scores_var(&mut g, f.logits)?;
    let m = model.classes();
    let mut sel = vec![0.0; labels.len() * m];
    let mut margins = Vec::with_capacity(labels.len());
    for (i, (s, &y)) in g.value(scores).data().chunks(m).zip(labels).enumerate() {
        let mut best = usize::MAX;
        for j in 0..m {
            if j != y && (best == usize::MAX || s[j] > s[best]) {
                best = j;
            }
        }
        let margin = s[y] - s[best];
        margins.push(margin);
        if margin > 0.0 {
            sel[i * m + y] = 1.0;
            sel[i * m + best] = -1.0;
        }
    }
    let sel = g.constant(Tensor::new(vec![labels.len(), m], sel)?);
    let picked = g.mul(scores, sel)?;
    let total = g.sum(picked);
    Ok((margins, g.backward(total)?.take(xv)))
}

/// Fixed-`c` Carlini-Wagner L2 in tanh space on `[0, 1]` inputs.
///
/// Minimizes `||x' - x||^2 + c * max(s_y - max_{j != y} s_j, 0)` with Adam and
/// returns, per example, the smallest successful iterate or else the last one.
pub fn cw_l2<R: Rng + ?Sized>(model: &Model, x: &Tensor, labels: &[usize], cfg: &CwConfig, rng: &mut R) -> Result<Tensor> {
    if cfg.eot_samples == 0 || !(cfg.c >= 0.0) || !(cfg.lr > 0.0) {
        return Err(Error::Config("CW needs eot_samples >= 1, c >= 0 and lr > 0".into()));
    }
    check_labels(labels, model.classes())?;
    let n = labels.len();
    let per = x.len() / n.max(1);
    let mut w = x.map(|v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh());
    let to_x = |w: &Tensor| w.map(|v| 0.5 * (v.tanh() + 1.0));
    let mut best = to_x(&w);
    let mut best_norm = vec![f64::INFINITY; n];
    let mut state = AdamState::default();
    let passes = if model.is_stochastic() { cfg.eot_samples } else { 1 };
    for step in 0..=cfg.steps {
        let adv = to_x(&w);
        let mut margin = vec![0.0; n];
        let mut grad = Tensor::zeros(x.shape());
        for _ in 0..passes {
            let (m, g) = margin_gradient(model, &adv, labels, rng)?;
            for (a, v) in margin.iter_mut().zip(m) {
                *a += v / passes as f64;
            }
            for (a, v) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += v / passes as f64;
            }
        }
        for i in 0..n {
            let d = &adv.data()[i * per..(i + 1) * per];
            let o = &x.data()[i * per..(i + 1) * per];
            let norm2: f64 = d.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum();
            if margin[i] < 0.0 && norm2 < best_norm[i] {
                best_norm[i] = norm2;
                best.data_mut()[i * per..(i + 1) * per].copy_from_slice(d);
            } else if best_norm[i].is_infinite() {
                best.data_mut()[i * per..(i + 1) * per].copy_from_slice(d);
            }
        }
        if step == cfg.steps {
            break;
        }
        let mut gw = grad;
        for (i, gv) in gw.data_mut().iter_mut().enumerate() {
            let a = adv.data()[i];
            let t = w.data()[i].tanh();
            *gv = (2.0 * (a - x.data()[i]) + cfg.c * *gv) * 0.5 * (1.0 - t * t);
        }
        if !gw.all_finite() {
            return Err(Error::Attack("non-finite CW gradient".into()));
        }
        adam_step(&mut [("cw.w".to_string(), &mut w)], &[gw], &mut state, cfg.lr)?;
    }
    Ok(best)
}

// ---- dataset-level harness ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
    Noise,
    Rand,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "cw" => Ok(AttackKind::Cw),
            "noise" => Ok(AttackKind::Noise),
            "rand" => Ok(AttackKind::Rand),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
            AttackKind::Noise => "noise",
            AttackKind::Rand => "rand",
        }
    }
}

pub const HIST_BINS: usize = 20;

/// Counts of `values` in `bins` equal-width bins over `[0, 1]`; 1.0 falls in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub config: serde_json::Value,
    /// For `rand`, the fraction of random inputs with top confidence below the threshold.
    pub accuracy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
    pub n: usize,
    /// Top-class confidence counts over 20 equal bins on `[0, 1]`.
    pub confidences: Vec<u64>,
    #[serde(skip)]
    pub success: Vec<bool>,
    #[serde(skip)]
    pub adversarial: Option<Tensor>,
}

/// Examples per attack chunk; chunk `c` draws from stream `c` of the attack seed.
pub const ATTACK_CHUNK: usize = 50;

fn chunked<F>(data: &LabeledDataset, seed: u64, tag: u64, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &[usize], &mut StreamRng) -> Result<Tensor> + Sync,
{
    let n = data.len();
    let base = derive_seed(seed, tag);
    let chunks: Vec<(usize, usize)> = (0..n).step_by(ATTACK_CHUNK).map(|s| (s, (s + ATTACK_CHUNK).min(n))).collect();
    let parts = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(s, e))| {
            let idx: Vec<usize> = (s..e).collect();
            let sub = data.select(&idx);
            f(&sub.inputs, &sub.labels, &mut rng::stream(base, c as u64))
        })
        .collect::<Result<Vec<Tensor>>>()?;
    Tensor::new(
        data.inputs.shape().to_vec(),
        parts.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

fn norms(x: &Tensor, adv: &Tensor, n: usize) -> Vec<(f64, f64)> {
    let per = x.len() / n.max(1);
    x.data()
        .chunks(per)
        .zip(adv.data().chunks(per))
        .map(|(a, b)| {
            let linf = a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            let l2 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            (linf, l2)
        })
        .collect()
}

/// Asserts `||adv - x||_inf <= eps + 1e-12` and box bounds for every example.
pub fn check_budget(x: &Tensor, adv: &Tensor, cfg: &AttackConfig) -> Result<()> {
    for (i, (a, b)) in x.data().iter().zip(adv.data()).enumerate() {
        if (a - b).abs() > cfg.epsilon + 1e-12 || *b < cfg.input_bounds.0 || *b > cfg.input_bounds.1 {
            return Err(Error::Attack(format!(
                "entry {i}: {b} leaves the budget around {a} (eps {})",
                cfg.epsilon
            )));
        }
    }
    Ok(())
}

fn report(
    kind: AttackKind,
    config: serde_json::Value,
    model: &Model,
    data: &LabeledDataset,
    adv: Tensor,
    eval: &EvalConfig,
    seed: u64,
) -> Result<AttackReport> {
    let probs = predict(model, &adv, eval, seed)?;
    let r = report_from_probs(probs, &data.labels, eval.mc_samples);
    let success: Vec<bool> = r.predictions.iter().zip(&data.labels).map(|(p, y)| p != y).collect();
    let nm = norms(&data.inputs, &adv, data.len());
    let n = data.len() as f64;
    let conf: Vec<f64> = crate::ecoc::decode(&r.class_probs).into_iter().map(|(_, c)| c).collect();
    Ok(AttackReport {
        attack: kind.as_str().into(),
        config,
        accuracy: success.iter().filter(|s| !**s).count() as f64 / n,
        mean_linf: nm.iter().map(|p| p.0).sum::<f64>() / n,
        mean_l2: nm.iter().map(|p| p.1).sum::<f64>() / n,
        n: data.len(),
        confidences: histogram(&conf, HIST_BINS),
        success,
        adversarial: Some(adv),
    })
}

fn config_json<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// FGSM or PGD over a dataset, evaluated with the same seed as benign evaluation.
pub fn gradient_attack(
    model: &Model,
    data: &LabeledDataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<AttackReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("attack on an empty dataset"));
    }
    let adv = match kind {
        AttackKind::Fgsm => chunked(data, seed, tags::ATTACK, |x, y, r| fgsm(model, x, y, cfg, r))?,
        AttackKind::Pgd => chunked(data, seed, tags::ATTACK, |x, y, r| pgd(model, x, y, cfg, r))?,
        other => return Err(Error::Config(format!("{} is not a gradient-sign attack", other.as_str()))),
    };
    check_budget(&data.inputs, &adv, cfg)?;
    report(kind, config_json(cfg)?, model, data, adv, eval, seed)
}

pub fn cw_attack(model: &Model, data: &LabeledDataset, cfg: &CwConfig, eval: &EvalConfig, seed: u64) -> Result<AttackReport> {
    if data.is_empty() {
        return Err(Error::contract("attack on an empty dataset"));
    }
    let adv = chunked(data, seed, tags::ATTACK, |x, y, r| cw_l2(model, x, y, cfg, r))?;
    report(AttackKind::Cw, config_json(cfg)?, model, data, adv, eval, seed)
}

/// Accuracy on `clip(x + U(-amplitude, amplitude))`.
pub fn uniform_noise_eval(
    model: &Model,
    data: &LabeledDataset,
    amplitude: f64,
    bounds: (f64, f64),
    eval: &EvalConfig,
    seed: u64,
) -> Result<AttackReport> {
    if !(amplitude >= 0.0) {
        return Err(Error::Config(format!("noise amplitude {amplitude} < 0")));
    }
    if data.is_empty() {
        return Err(Error::contract("noise evaluation on an empty dataset"));
    }
    let mut r = rng::stream(derive_seed(seed, tags::NOISE_INPUT), 0);
    let mut noisy = data.inputs.clone();
    for v in noisy.data_mut() {
        let u: f64 = r.gen::<f64>() * 2.0 - 1.0;
        *v = (*v + amplitude * u).max(bounds.0).min(bounds.1);
    }
    let cfg = serde_json::json!({ "amplitude": amplitude, "input_bounds": bounds });
    report(AttackKind::Noise, cfg, model, data, noisy, eval, seed)
}

/// Scores a model on uniform random inputs: the fraction whose top-class
/// confidence stays below `threshold`.
pub fn random_input_eval(
    model: &Model,
    n_inputs: usize,
    threshold: f64,
    bounds: (f64, f64),
    eval: &EvalConfig,
    seed: u64,
) -> Result<AttackReport> {
    if n_inputs == 0 {
        return Err(Error::contract("random-input probe needs n_inputs >= 1"));
    }
    let inputs = random_inputs(&model.input_shape, n_inputs, bounds, seed);
    let probs = predict(model, &inputs, eval, seed)?;
    let conf: Vec<f64> = crate::ecoc::decode(&probs).into_iter().map(|(_, c)| c).collect();
    let below = conf.iter().filter(|&&c| c < threshold).count();
    Ok(AttackReport {
        attack: AttackKind::Rand.as_str().into(),
        config: serde_json::json!({ "n_inputs": n_inputs, "threshold": threshold, "input_bounds": bounds }),
        accuracy: below as f64 / n_inputs as f64,
        mean_linf: 0.0,
        mean_l2: 0.0,
        n: n_inputs,
        confidences: histogram(&conf, HIST_BINS),
        success: conf.iter().map(|&c| c >= threshold).collect(),
        adversarial: None,
    })
}

/// `n` inputs of `shape` drawn uniformly from `bounds`.
pub fn random_inputs(shape: &[usize], n: usize, bounds: (f64, f64), seed: u64) -> Tensor {
    let mut r = rng::stream(derive_seed(seed, tags::RANDOM_INPUT), 0);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::from_fn(&full, |_| bounds.0 + (bounds.1 - bounds.0) * r.gen::<f64>())
}

/// Top-class confidence of every row of `class_probs`.
pub fn confidences(class_probs: &Tensor) -> Vec<f64> {
    class_probs
        .data()
        .chunks(class_probs.shape().last().copied().unwrap_or(1).max(1))
        .map(|r| r[argmax(r)])
        .collect()
}
