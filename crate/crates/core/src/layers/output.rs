use rand::Rng;

use super::gate::{gate_kl, sample_gate, GateVars};
use super::{bind_params, flatten, init_uniform, ForwardMode, ForwardSample, LayerOutput, Sampling, StickBreakingGate};
use crate::distributions::Temperature;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Tensor, Var};

/// Linear read-out `y = x (W * z)` with IBP-gated connections.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedOutputLayer {
    /// `[J, C]`
    pub weight: Tensor,
    /// Gate over `[J, C]` with `C` sticks.
    pub gate: StickBreakingGate,
    /// `[C]`
    pub bias: Option<Tensor>,
}

impl GatedOutputLayer {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, prior_alpha: f64, bias: bool, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!("output layer {inputs}x{outputs} is empty")));
        }
        Ok(GatedOutputLayer {
            weight: init_uniform(rng, &[inputs, outputs], inputs),
            gate: StickBreakingGate::new(&[inputs, outputs], prior_alpha)?,
            bias: bias.then(|| Tensor::zeros(&[outputs])),
        })
    }

    pub fn from_parts(weight: Tensor, gate: StickBreakingGate, bias: Option<Tensor>) -> Result<Self> {
        let &[j, c] = weight.shape() else {
            return Err(Error::dim(format!("output weight must be [J, C], got {:?}", weight.shape())));
        };
        if gate.gate_logit.shape() != weight.shape() {
            return Err(Error::dim(format!(
                "gate shape {:?} does not match weight [{j}, {c}]",
                gate.gate_logit.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [c] {
                return Err(Error::dim(format!("bias shape {:?} is not [{c}]", b.shape())));
            }
        }
        Ok(GatedOutputLayer { weight, gate, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

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

    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        sampling: Sampling,
        with_kl: bool,
        rng: &mut R,
    ) -> Result<LayerOutput> {
        let x = flatten(g, x)?;
        if g.shape(x)[1] != self.inputs() {
            return Err(Error::dim(format!(
                "output layer expects {} inputs, got shape {:?}",
                self.inputs(),
                g.shape(x)
            )));
        }
        let vars = GateVars {
            logit: params[1],
            log_a: params[2],
            log_b: params[3],
        };
        let z = sample_gate(g, vars, sampling, rng)?;
        let w = g.mul(params[0], z)?;
        let mut y = g.matmul(x, w)?;
        if self.bias.is_some() {
            y = g.add(y, params[4])?;
        }
        let kl = if with_kl {
            Some(gate_kl(g, vars, self.gate.prior_alpha, rng)?)
        } else {
            None
        };
        Ok(LayerOutput {
            out: y,
            kl,
            winner_probs: None,
        })
    }

    pub fn forward_sample(&self, x: &Tensor, sampling: Sampling, rng: &mut StreamRng) -> Result<ForwardSample> {
        let mut g = Graph::new();
        let params = bind_params(&mut g, &self.params(), false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &params, xv, sampling, true, rng)?;
        out.into_sample(&g, sampling.mode())
    }
}

/// One stochastic pass of `layer` over `x [N, J]`.
pub fn output_forward(
    layer: &GatedOutputLayer,
    x: &Tensor,
    tau: Option<Temperature>,
    mode: ForwardMode,
    rng: &mut StreamRng,
) -> Result<ForwardSample> {
    layer.forward_sample(x, Sampling::new(mode, tau)?, rng)
}
