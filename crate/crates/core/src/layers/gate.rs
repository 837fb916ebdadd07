use rand::Rng;

use super::{uniform_tensor, Sampling};
use crate::distributions;
use crate::error::{Error, Result};
use crate::rng;
use crate::special::{logit, sigmoid};
use crate::tensor::{Graph, Tensor, Var};

/// Initial posterior inclusion probability of every gated connection.
pub const INITIAL_INCLUSION: f64 = 0.9;

/// Variational state of one IBP-gated weight group.
///
/// Sticks run along the last axis of `gate_logit`: a `[J, K]` gate has `K`
/// sticks, and connection `(j, k)` has prior inclusion probability `pi_k`.
/// The Kumaraswamy parameters are stored as logs so unconstrained updates keep
/// them positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StickBreakingGate {
    pub prior_alpha: f64,
    pub stick_log_a: Tensor,
    pub stick_log_b: Tensor,
    pub gate_logit: Tensor,
}

/// Graph handles for a gate's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GateVars {
    pub logit: Var,
    pub log_a: Var,
    pub log_b: Var,
}

impl StickBreakingGate {
    /// Gate with inclusion probability 0.9 everywhere and sticks at (alpha, 1).
    pub fn new(gate_shape: &[usize], prior_alpha: f64) -> Result<Self> {
        if !(prior_alpha > 0.0) {
            return Err(Error::Config(format!(
                "IBP prior alpha must be > 0, got {prior_alpha}"
            )));
        }
        let k = *gate_shape
            .last()
            .ok_or_else(|| Error::dim("gate shape must have at least one axis"))?;
        Ok(StickBreakingGate {
            prior_alpha,
            stick_log_a: Tensor::full(&[k], prior_alpha.ln()),
            stick_log_b: Tensor::zeros(&[k]),
            gate_logit: Tensor::full(gate_shape, logit(INITIAL_INCLUSION)),
        })
    }

    /// Rebuilds a gate from positive stick parameters.
    pub fn from_parts(
        prior_alpha: f64,
        stick_a: &[f64],
        stick_b: &[f64],
        gate_logit: Tensor,
    ) -> Result<Self> {
        let k = *gate_logit.shape().last().unwrap_or(&0);
        if stick_a.len() != k || stick_b.len() != k {
            return Err(Error::dim(format!(
                "gate of shape {:?} needs {k} sticks, got {} and {}",
                gate_logit.shape(),
                stick_a.len(),
                stick_b.len()
            )));
        }
        if stick_a.iter().chain(stick_b).any(|&v| !(v > 0.0)) || !(prior_alpha > 0.0) {
            return Err(Error::Consistency(
                "stick parameters and alpha must be positive".into(),
            ));
        }
        Ok(StickBreakingGate {
            prior_alpha,
            stick_log_a: Tensor::vector(stick_a.iter().map(|v| v.ln()).collect()),
            stick_log_b: Tensor::vector(stick_b.iter().map(|v| v.ln()).collect()),
            gate_logit,
        })
    }

    pub fn sticks(&self) -> usize {
        self.stick_log_a.len()
    }

    pub fn stick_a(&self) -> Vec<f64> {
        self.stick_log_a.data().iter().map(|v| v.exp()).collect()
    }

    pub fn stick_b(&self) -> Vec<f64> {
        self.stick_log_b.data().iter().map(|v| v.exp()).collect()
    }

    /// Posterior inclusion probabilities `sigmoid(gate_logit)`.
    pub fn inclusion_probs(&self) -> Tensor {
        self.gate_logit.map(sigmoid)
    }

    /// Stick products drawn from the Beta(alpha, 1) prior.
    pub fn sample_prior_pi<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = (0..self.sticks())
            .map(|_| distributions::sample_beta_prior(self.prior_alpha, rng::uniform(rng)))
            .collect();
        distributions::stick_breaking(&u)
    }

    /// Stick products drawn from the Kumaraswamy posterior.
    pub fn sample_posterior_pi<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: Vec<f64> = self
            .stick_a()
            .iter()
            .zip(self.stick_b())
            .map(|(&a, b)| distributions::sample_kumaraswamy(a, b, rng::uniform(rng)))
            .collect();
        distributions::stick_breaking(&u)
    }

    pub(crate) fn params(&self) -> [(&'static str, &Tensor); 3] {
        [
            ("gate_logit", &self.gate_logit),
            ("stick_log_a", &self.stick_log_a),
            ("stick_log_b", &self.stick_log_b),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [
            ("gate_logit", &mut self.gate_logit),
            ("stick_log_a", &mut self.stick_log_a),
            ("stick_log_b", &mut self.stick_log_b),
        ]
    }
}

/// Draws the gate indicators `z` according to `sampling`.
pub(crate) fn sample_gate<R: Rng + ?Sized>(
    g: &mut Graph,
    vars: GateVars,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Var> {
    let shape = g.shape(vars.logit).to_vec();
    match sampling {
        Sampling::Relaxed(tau) => {
            let noise = uniform_tensor(rng, &shape);
            distributions::binary_concrete_var(g, vars.logit, tau, &noise)
        }
        Sampling::Expected => Ok(g.sigmoid(vars.logit)),
        Sampling::Exact => {
            let noise = uniform_tensor(rng, &shape);
            let z = g
                .value(vars.logit)
                .zip_map(&noise, |l, u| if u < sigmoid(l) { 1.0 } else { 0.0 })?;
            Ok(g.constant(z))
        }
        Sampling::StraightThrough(tau) => {
            let noise = uniform_tensor(rng, &shape);
            let perturbed = distributions::logistic_perturb(g, vars.logit, &noise)?;
            let hard = g.value(perturbed).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let scaled = g.scale(perturbed, 1.0 / tau.value());
            let soft = g.sigmoid(scaled);
            g.straight_through(hard, soft)
        }
    }
}

/// Gate and stick KL: `sum KL(Bern(q) || Bern(pi_k)) + sum KL(Kuma || Beta(alpha, 1))`,
/// with `pi` from one reparameterized posterior stick draw.
pub(crate) fn gate_kl<R: Rng + ?Sized>(
    g: &mut Graph,
    vars: GateVars,
    alpha: f64,
    rng: &mut R,
) -> Result<Var> {
    let k = g.value(vars.log_a).len();
    let a = g.exp(vars.log_a);
    let b = g.exp(vars.log_b);
    let noise = rng::uniforms(rng, k);
    let log_v = distributions::kumaraswamy_log_rsample_var(g, a, b, &noise)?;
    let log_pi = distributions::log_stick_breaking_var(g, log_v);
    let pi = g.exp(log_pi);
    let q = g.sigmoid(vars.logit);
    let kl_gate = distributions::kl_bernoulli_var(g, q, pi)?;
    let kl_sticks = distributions::kl_kumaraswamy_beta_var(g, a, b, alpha)?;
    g.add(kl_gate, kl_sticks)
}
