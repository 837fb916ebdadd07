use rand::Rng;

use super::gate::{gate_kl, sample_gate, GateVars};
use super::{
    bind_params, init_uniform, sample_winners, CompetitiveLayer, ForwardMode, ForwardSample,
    LayerOutput, Sampling, StickBreakingGate,
};
use crate::distributions::{self, Temperature};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Convolutional LWTA layer: `K` blocks of `U` competing feature maps, one
/// gate per block.
#[derive(Debug, Clone, PartialEq)]
pub struct LwtaConvLayer {
    /// `[h, l, C, K * U]`, block-major on the last axis.
    pub kernels: Tensor,
    /// Gate over `[K]`.
    pub gate: StickBreakingGate,
    pub padding: Padding,
    pub units: usize,
}

impl LwtaConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kernel: (usize, usize),
        channels: usize,
        blocks: usize,
        units: usize,
        padding: Padding,
        prior_alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if blocks == 0 || units < 2 || channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Config(format!(
                "conv LWTA layer needs K >= 1, U >= 2 and a nonempty kernel, got K={blocks} U={units}"
            )));
        }
        let fan_in = kernel.0 * kernel.1 * channels;
        let kernels = init_uniform(rng, &[kernel.0, kernel.1, channels, blocks * units], fan_in);
        let gate = StickBreakingGate::new(&[blocks], prior_alpha)?;
        Ok(LwtaConvLayer {
            kernels,
            gate,
            padding,
            units,
        })
    }

    pub fn from_parts(kernels: Tensor, gate: StickBreakingGate, padding: Padding, units: usize) -> Result<Self> {
        let &[_, _, _, f] = kernels.shape() else {
            return Err(Error::dim(format!(
                "conv kernels must be [h, l, C, F], got {:?}",
                kernels.shape()
            )));
        };
        if units < 2 || f % units != 0 || f == 0 {
            return Err(Error::Config(format!("{f} feature maps do not split into blocks of {units}")));
        }
        if gate.gate_logit.shape() != [f / units] {
            return Err(Error::dim(format!(
                "conv gate shape {:?} does not match {} blocks",
                gate.gate_logit.shape(),
                f / units
            )));
        }
        Ok(LwtaConvLayer {
            kernels,
            gate,
            padding,
            units,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernels.shape()[0], self.kernels.shape()[1])
    }

    /// Output shape `[H', L', K * U]` for an input of spatial size `(h, l)`.
    pub fn output_shape(&self, h: usize, l: usize) -> Result<[usize; 3]> {
        let (kh, kl) = self.kernel_size();
        let f = self.kernels.shape()[3];
        match self.padding {
            Padding::Same => Ok([h, l, f]),
            Padding::Valid if kh <= h && kl <= l => Ok([h - kh + 1, l - kl + 1, f]),
            Padding::Valid => Err(Error::dim(format!(
                "kernel {kh}x{kl} larger than input {h}x{l}"
            ))),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("weight", &self.kernels)];
        out.extend(self.gate.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("weight", &mut self.kernels)];
        out.extend(self.gate.params_mut());
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
        let (k, u) = (self.blocks(), self.units);
        let [kh, kl, c, f] = <[usize; 4]>::try_from(self.kernels.shape()).expect("rank 4");
        if g.shape(x).len() != 4 || g.shape(x)[3] != c {
            return Err(Error::dim(format!(
                "conv LWTA layer expects [N, H, L, {c}] input, got {:?}",
                g.shape(x)
            )));
        }
        let n = g.shape(x)[0];
        let vars = GateVars {
            logit: params[1],
            log_a: params[2],
            log_b: params[3],
        };
        let z = sample_gate(g, vars, sampling, rng)?;
        let z = g.reshape(z, &[k, 1])?;
        let w = g.reshape(params[0], &[kh, kl, c, k, u])?;
        let w = g.mul(w, z)?;
        let w = g.reshape(w, &[kh, kl, c, f])?;
        let maps = g.conv2d(x, w, self.padding)?;
        let rows = g.sum_axis(maps, 1)?;
        let sums = g.sum_axis(rows, 1)?;
        let logits = g.reshape(sums, &[n, k, u])?;
        let winner_probs = g.value(logits).softmax_last();
        let xi = sample_winners(g, logits, sampling, rng)?;
        let xi = g.reshape(xi, &[n, 1, 1, f])?;
        let out = g.mul(maps, xi)?;
        let kl = if with_kl {
            let kl_win = distributions::kl_discrete_uniform_var(g, logits)?;
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

impl CompetitiveLayer for LwtaConvLayer {
    fn blocks(&self) -> usize {
        self.kernels.shape()[3] / self.units
    }

    fn units(&self) -> usize {
        self.units
    }

    fn forward_sample(&self, x: &Tensor, sampling: Sampling, rng: &mut StreamRng) -> Result<ForwardSample> {
        let mut g = Graph::new();
        let params = bind_params(&mut g, &self.params(), false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &params, xv, sampling, true, rng)?;
        out.into_sample(&g, sampling.mode())
    }
}

/// One stochastic pass of `layer` over `x [N, H, L, C]`.
pub fn conv_forward(
    layer: &LwtaConvLayer,
    x: &Tensor,
    tau: Option<Temperature>,
    mode: ForwardMode,
    rng: &mut StreamRng,
) -> Result<ForwardSample> {
    layer.forward_sample(x, Sampling::new(mode, tau)?, rng)
}
