//! Stochastic LWTA layers with IBP-gated connections, plus deterministic
//! baselines.
//!
//! Every layer builds its forward pass on a [`Graph`] from a slice of bound
//! parameter vars (see [`bind_params`]), so the same code serves training,
//! inference and input-gradient attacks.

mod baseline;
mod conv;
mod dense;
mod gate;
mod output;

pub use baseline::{hard_wta_forward, DenseLayer, HardWtaLayer};
pub use conv::{conv_forward, LwtaConvLayer};
pub use dense::{dense_forward, LwtaDenseLayer};
pub use gate::StickBreakingGate;
pub use output::{output_forward, GatedOutputLayer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{self, Temperature};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argmax, Graph, Tensor, Var};

/// Inference/training regime of a stochastic layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    /// Gumbel-Softmax winners and Concrete gates.
    TrainRelaxed,
    /// Exact Discrete winners and Bernoulli gates.
    InferExact,
    /// Softmax probabilities and gate inclusion probabilities in place of samples.
    InferExpected,
}

impl std::str::FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-relaxed" => Ok(ForwardMode::TrainRelaxed),
            "infer-exact" => Ok(ForwardMode::InferExact),
            "infer-expected" => Ok(ForwardMode::InferExpected),
            other => Err(Error::Config(format!("unknown forward mode `{other}`"))),
        }
    }
}

/// A forward mode together with the temperature it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Relaxed(Temperature),
    Exact,
    Expected,
    /// Exact samples on the forward path, relaxed values on the backward path.
    StraightThrough(Temperature),
}

impl Sampling {
    pub fn new(mode: ForwardMode, tau: Option<Temperature>) -> Result<Self> {
        match (mode, tau) {
            (ForwardMode::TrainRelaxed, Some(t)) => Ok(Sampling::Relaxed(t)),
            (ForwardMode::TrainRelaxed, None) => Err(Error::contract(
                "train-relaxed forward pass requires a temperature",
            )),
            (ForwardMode::InferExact, _) => Ok(Sampling::Exact),
            (ForwardMode::InferExpected, _) => Ok(Sampling::Expected),
        }
    }

    pub fn mode(self) -> ForwardMode {
        match self {
            Sampling::Relaxed(_) => ForwardMode::TrainRelaxed,
            Sampling::Exact | Sampling::StraightThrough(_) => ForwardMode::InferExact,
            Sampling::Expected => ForwardMode::InferExpected,
        }
    }
}

/// Result of one stochastic forward pass through a single layer.
#[derive(Debug, Clone)]
pub struct ForwardSample {
    pub output: Tensor,
    /// Sum of the layer's KL contributions (sticks, gates, winners).
    pub kl_total: f64,
    /// Per-block winner probabilities `[N, K, U]`; `None` for non-competitive layers.
    pub winner_probs: Option<Tensor>,
    pub mode: ForwardMode,
}

/// What a layer contributes to a graph forward pass.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub out: Var,
    pub kl: Option<Var>,
    pub winner_probs: Option<Tensor>,
}

impl LayerOutput {
    fn into_sample(self, g: &Graph, mode: ForwardMode) -> Result<ForwardSample> {
        let kl_total = match self.kl {
            Some(k) => g.value(k).item()?,
            None => 0.0,
        };
        Ok(ForwardSample {
            output: g.value(self.out).clone(),
            kl_total,
            winner_probs: self.winner_probs,
            mode,
        })
    }
}

/// Places parameters on the graph as leaves (`trainable`) or constants.
pub fn bind_params(g: &mut Graph, params: &[(&str, &Tensor)], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|(_, t)| {
            if trainable {
                g.leaf((*t).clone())
            } else {
                g.constant((*t).clone())
            }
        })
        .collect()
}

/// A layer whose units compete in blocks.
pub trait CompetitiveLayer {
    fn blocks(&self) -> usize;
    fn units(&self) -> usize;
    fn forward_sample(
        &self,
        x: &Tensor,
        sampling: Sampling,
        rng: &mut rng::StreamRng,
    ) -> Result<ForwardSample>;
}

/// Mean winner probabilities `[K, U]` over the inputs in `x` and
/// `n_samples` exact gate draws.
pub fn winner_probabilities<L: CompetitiveLayer + ?Sized>(
    layer: &L,
    x: &Tensor,
    rng: &mut rng::StreamRng,
    n_samples: usize,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::contract("winner_probabilities needs n_samples >= 1"));
    }
    if x.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::contract("winner_probabilities on an empty input set"));
    }
    let (k, u) = (layer.blocks(), layer.units());
    let mut acc = vec![0.0; k * u];
    let mut count = 0usize;
    for _ in 0..n_samples {
        let s = layer.forward_sample(x, Sampling::Exact, rng)?;
        let probs = s
            .winner_probs
            .ok_or_else(|| Error::contract("layer did not report winner probabilities"))?;
        for row in probs.data().chunks(k * u) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            count += 1;
        }
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Tensor::new(vec![k, u], acc)
}

// ---- shared sampling helpers ----------------------------------------------

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::uniforms(rng, n)).expect("shape")
}

/// Winner indicators `xi` for block logits `[.., U]`.
pub(crate) fn sample_winners<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let u = *shape.last().ok_or_else(|| Error::dim("winner logits are a scalar"))?;
    match sampling {
        Sampling::Relaxed(tau) => {
            let noise = uniform_tensor(rng, &shape);
            distributions::gumbel_softmax_var(g, logits, tau, &noise)
        }
        Sampling::Expected => Ok(g.softmax(logits)),
        Sampling::Exact => {
            let probs = g.value(logits).softmax_last();
            let mut hard = vec![0.0; probs.len()];
            for (dst, row) in hard.chunks_mut(u).zip(probs.data().chunks(u)) {
                let k = distributions::sample_discrete_index(row, rng::uniform(rng))?;
                dst[k] = 1.0;
            }
            Ok(g.constant(Tensor::new(shape, hard)?))
        }
        Sampling::StraightThrough(tau) => {
            let noise = uniform_tensor(rng, &shape);
            let perturbed = distributions::gumbel_perturb(g, logits, &noise)?;
            let mut hard = vec![0.0; noise.len()];
            for (dst, row) in hard.chunks_mut(u).zip(g.value(perturbed).data().chunks(u)) {
                dst[argmax(row)] = 1.0;
            }
            let scaled = g.scale(perturbed, 1.0 / tau.value());
            let soft = g.softmax(scaled);
            g.straight_through(Tensor::new(shape, hard)?, soft)
        }
    }
}

/// He-style symmetric uniform initialization with the given fan-in.
pub(crate) fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Flattens `[N, ...]` to `[N, rest]`.
pub(crate) fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    match shape.len() {
        2 => Ok(x),
        0 => Err(Error::dim("layer input is a scalar")),
        _ => {
            let n = shape[0];
            let rest = shape[1..].iter().product();
            g.reshape(x, &[n, rest])
        }
    }
}
