use rand::Rng;

use super::gate::{gate_kl, sample_gate, GateVars};
use super::{
    bind_params, flatten, init_uniform, sample_winners, CompetitiveLayer, ForwardMode,
    ForwardSample, LayerOutput, Sampling, StickBreakingGate,
};
use crate::distributions::{self, Temperature};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Tensor, Var};

/// Dense layer of `K` blocks with `U` competing linear units each, fed by `J`
/// inputs through IBP-gated connections `z[j, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LwtaDenseLayer {
    /// `[J, K, U]`
    pub weight: Tensor,
    /// Gate over `[J, K]` with `K` sticks.
    pub gate: StickBreakingGate,
    /// `[K, U]`
    pub bias: Option<Tensor>,
}

impl LwtaDenseLayer {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        blocks: usize,
        units: usize,
        prior_alpha: f64,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_arch(inputs, blocks, units)?;
        let weight = init_uniform(rng, &[inputs, blocks, units], inputs);
        let gate = StickBreakingGate::new(&[inputs, blocks], prior_alpha)?;
        let bias = bias.then(|| Tensor::zeros(&[blocks, units]));
        Ok(LwtaDenseLayer { weight, gate, bias })
    }

    pub fn from_parts(weight: Tensor, gate: StickBreakingGate, bias: Option<Tensor>) -> Result<Self> {
        let &[j, k, u] = weight.shape() else {
            return Err(Error::dim(format!(
                "dense LWTA weight must be [J, K, U], got {:?}",
                weight.shape()
            )));
        };
        check_arch(j, k, u)?;
        if gate.gate_logit.shape() != [j, k] {
            return Err(Error::dim(format!(
                "gate shape {:?} does not match [{j}, {k}]",
                gate.gate_logit.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [k, u] {
                return Err(Error::dim(format!("bias shape {:?} is not [{k}, {u}]", b.shape())));
            }
        }
        Ok(LwtaDenseLayer { weight, gate, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.blocks() * self.units()
    }

    /// Named parameters in binding order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("weight", &self.weight)];
        out.extend(self.gate.params());
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("weight", &mut self.weight)];
        out.extend(self.gate.params_mut());
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        out
    }

    /// Forward pass on `g` given vars bound in [`Self::params`] order.
    /// The KL term is built only when `with_kl` is set.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        sampling: Sampling,
        with_kl: bool,
        rng: &mut R,
    ) -> Result<LayerOutput> {
        let (j, k, u) = (self.inputs(), self.blocks(), self.units());
        let x = flatten(g, x)?;
        let n = g.shape(x)[0];
        if g.shape(x)[1] != j {
            return Err(Error::dim(format!(
                "dense LWTA layer expects {j} inputs, got shape {:?}",
                g.shape(x)
            )));
        }
        let vars = GateVars {
            logit: params[1],
            log_a: params[2],
            log_b: params[3],
        };
        let z = sample_gate(g, vars, sampling, rng)?;
        let z = g.reshape(z, &[j, k, 1])?;
        let w = g.mul(params[0], z)?;
        let w = g.reshape(w, &[j, k * u])?;
        let mut h = g.matmul(x, w)?;
        if self.bias.is_some() {
            let b = g.reshape(params[4], &[k * u])?;
            h = g.add(h, b)?;
        }
        let h = g.reshape(h, &[n, k, u])?;
        let winner_probs = g.value(h).softmax_last();
        let xi = sample_winners(g, h, sampling, rng)?;
        let out = g.mul(xi, h)?;
        let out = g.reshape(out, &[n, k * u])?;
        let kl = if with_kl {
            let kl_win = distributions::kl_discrete_uniform_var(g, h)?;
            let kl_gate = gate_kl(g, vars, self.gate.prior_alpha, rng)?;
            Some(g.add(kl_win, kl_gate)?)
        } else {
            None
        };
        Ok(LayerOutput {
            out,
            kl,
            winner_probs: Some(winner_probs),
        })
    }
}

fn check_arch(j: usize, k: usize, u: usize) -> Result<()> {
    if j == 0 || k == 0 || u < 2 {
        return Err(Error::Config(format!(
            "LWTA layer needs J >= 1, K >= 1 and U >= 2, got J={j} K={k} U={u}"
        )));
    }
    Ok(())
}

impl CompetitiveLayer for LwtaDenseLayer {
    fn blocks(&self) -> usize {
        self.weight.shape()[1]
    }

    fn units(&self) -> usize {
        self.weight.shape()[2]
    }

    fn forward_sample(&self, x: &Tensor, sampling: Sampling, rng: &mut StreamRng) -> Result<ForwardSample> {
        let mut g = Graph::new();
        let params = bind_params(&mut g, &self.params(), false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &params, xv, sampling, true, rng)?;
        out.into_sample(&g, sampling.mode())
    }
}

/// One stochastic pass of `layer` over `x [N, J]`.
pub fn dense_forward(
    layer: &LwtaDenseLayer,
    x: &Tensor,
    tau: Option<Temperature>,
    mode: ForwardMode,
    rng: &mut StreamRng,
) -> Result<ForwardSample> {
    layer.forward_sample(x, Sampling::new(mode, tau)?, rng)
}
