use rand::Rng;

use super::{flatten, init_uniform, LayerOutput};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Graph, Tensor, Var};

/// Plain affine layer with an optional relu.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[J, D]`
    pub weight: Tensor,
    /// `[D]`
    pub bias: Tensor,
    pub relu: bool,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, relu: bool, rng: &mut R) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!("dense layer {inputs}x{outputs} is empty")));
        }
        Ok(DenseLayer {
            weight: init_uniform(rng, &[inputs, outputs], inputs),
            bias: Tensor::zeros(&[outputs]),
            relu,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, relu: bool) -> Result<Self> {
        let &[_, d] = weight.shape() else {
            return Err(Error::dim(format!("dense weight must be [J, D], got {:?}", weight.shape())));
        };
        if bias.shape() != [d] {
            return Err(Error::dim(format!("bias shape {:?} is not [{d}]", bias.shape())));
        }
        Ok(DenseLayer { weight, bias, relu })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerOutput> {
        let x = flatten(g, x)?;
        if g.shape(x)[1] != self.inputs() {
            return Err(Error::dim(format!(
                "dense layer expects {} inputs, got shape {:?}",
                self.inputs(),
                g.shape(x)
            )));
        }
        let h = g.matmul(x, params[0])?;
        let h = g.add(h, params[1])?;
        let out = if self.relu { g.relu(h) } else { h };
        Ok(LayerOutput {
            out,
            kl: None,
            winner_probs: None,
        })
    }
}

/// Deterministic LWTA: in each block of `units` only the largest
/// pre-activation passes. Ties go to the lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct HardWtaLayer {
    /// `[J, K * U]`
    pub weight: Tensor,
    pub units: usize,
}

impl HardWtaLayer {
    pub fn new<R: Rng + ?Sized>(inputs: usize, blocks: usize, units: usize, rng: &mut R) -> Result<Self> {
        if inputs == 0 || blocks == 0 || units < 2 {
            return Err(Error::Config(format!(
                "hard WTA layer needs J >= 1, K >= 1 and U >= 2, got J={inputs} K={blocks} U={units}"
            )));
        }
        Ok(HardWtaLayer {
            weight: init_uniform(rng, &[inputs, blocks * units], inputs),
            units,
        })
    }

    pub fn from_parts(weight: Tensor, units: usize) -> Result<Self> {
        let &[_, f] = weight.shape() else {
            return Err(Error::dim(format!("hard WTA weight must be [J, K*U], got {:?}", weight.shape())));
        };
        if units < 2 || f == 0 || f % units != 0 {
            return Err(Error::Config(format!("{f} units do not split into blocks of {units}")));
        }
        Ok(HardWtaLayer { weight, units })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight)]
    }

    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<LayerOutput> {
        let x = flatten(g, x)?;
        let h = g.matmul(x, params[0])?;
        let mask = winner_mask(g.value(h), self.units);
        let mask = g.constant(mask);
        let out = g.mul(h, mask)?;
        Ok(LayerOutput {
            out,
            kl: None,
            winner_probs: None,
        })
    }
}

fn winner_mask(h: &Tensor, units: usize) -> Tensor {
    let mut mask = vec![0.0; h.len()];
    for (dst, block) in mask.chunks_mut(units).zip(h.data().chunks(units)) {
        dst[argmax(block)] = 1.0;
    }
    Tensor::new(h.shape().to_vec(), mask).expect("same shape")
}

/// Hard winner-takes-all over blocks of `units` columns of `x W`.
pub fn hard_wta_forward(w: &Tensor, x: &Tensor, units: usize) -> Result<Tensor> {
    if units == 0 || w.ndim() != 2 || w.shape()[1] % units != 0 {
        return Err(Error::dim(format!(
            "weight {:?} does not split into blocks of {units}",
            w.shape()
        )));
    }
    let h = x.matmul(w)?;
    let mask = winner_mask(&h, units);
    h.zip_map(&mask, |a, m| a * m)
}
