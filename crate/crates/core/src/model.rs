//! Layer stacks with a classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ecoc::{self, CodingMatrix, TransformKind};
use crate::error::{Error, Result};
use crate::layers::{
    bind_params, CompetitiveLayer, DenseLayer, GatedOutputLayer, HardWtaLayer, LayerOutput,
    LwtaConvLayer, LwtaDenseLayer, Sampling,
};
use crate::tensor::{Graph, Padding, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    LwtaDense(LwtaDenseLayer),
    LwtaConv(LwtaConvLayer),
    GatedOutput(GatedOutputLayer),
    Dense(DenseLayer),
    HardWta(HardWtaLayer),
}

/// Architecture entry with its input size left to be inferred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerPlan {
    LwtaDense { blocks: usize, units: usize, bias: bool },
    LwtaConv { kernel: usize, blocks: usize, units: usize, padding: Padding },
    /// Width follows the head.
    GatedOutput { bias: bool },
    /// `outputs: None` sizes the layer to the head.
    Dense { outputs: Option<usize>, relu: bool },
    HardWta { blocks: usize, units: usize },
}

/// Fully resolved layer descriptor, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    LwtaDense { inputs: usize, blocks: usize, units: usize, bias: bool, prior_alpha: f64 },
    LwtaConv { kernel: [usize; 2], channels: usize, blocks: usize, units: usize, padding: Padding, prior_alpha: f64 },
    GatedOutput { inputs: usize, outputs: usize, bias: bool, prior_alpha: f64 },
    Dense { inputs: usize, outputs: usize, relu: bool },
    HardWta { inputs: usize, blocks: usize, units: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    Ecoc { code: CodingMatrix, transform: TransformKind },
    /// Plain softmax over one logit per class.
    Categorical { classes: usize },
}

impl Head {
    pub fn classes(&self) -> usize {
        match self {
            Head::Ecoc { code, .. } => code.classes(),
            Head::Categorical { classes } => *classes,
        }
    }

    /// Number of logits the last layer must emit.
    pub fn logit_width(&self) -> usize {
        match self {
            Head::Ecoc { code, transform } => code.bits() * transform.logits_per_bit(),
            Head::Categorical { classes } => *classes,
        }
    }

    /// Unnormalized class log-scores `[N, M]`; their softmax is the class posterior.
    pub fn scores_var(&self, g: &mut Graph, logits: Var) -> Result<Var> {
        match self {
            Head::Ecoc { code, transform } => ecoc::class_scores_var(g, logits, code, *transform),
            Head::Categorical { .. } => Ok(logits),
        }
    }

    /// Class probabilities `[N, M]` from logits.
    pub fn class_probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        match self {
            Head::Ecoc { code, transform } => {
                ecoc::class_probabilities(&ecoc::bit_probabilities(logits, *transform)?, code)
            }
            Head::Categorical { .. } => Ok(logits.softmax_last()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-example input shape, e.g. `[28, 28, 1]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// Values produced by one graph forward pass.
#[derive(Debug, Clone)]
pub struct ModelForward {
    pub logits: Var,
    pub kl: Option<Var>,
    /// Per layer; `Some([N, K, U])` for competitive layers.
    pub winner_probs: Vec<Option<Tensor>>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::LwtaDense(l) => LayerSpec::LwtaDense {
                inputs: l.inputs(),
                blocks: l.blocks(),
                units: l.units(),
                bias: l.bias.is_some(),
                prior_alpha: l.gate.prior_alpha,
            },
            Layer::LwtaConv(l) => LayerSpec::LwtaConv {
                kernel: [l.kernel_size().0, l.kernel_size().1],
                channels: l.in_channels(),
                blocks: l.blocks(),
                units: l.units(),
                padding: l.padding,
                prior_alpha: l.gate.prior_alpha,
            },
            Layer::GatedOutput(l) => LayerSpec::GatedOutput {
                inputs: l.inputs(),
                outputs: l.outputs(),
                bias: l.bias.is_some(),
                prior_alpha: l.gate.prior_alpha,
            },
            Layer::Dense(l) => LayerSpec::Dense {
                inputs: l.inputs(),
                outputs: l.outputs(),
                relu: l.relu,
            },
            Layer::HardWta(l) => LayerSpec::HardWta {
                inputs: l.inputs(),
                blocks: l.outputs() / l.units,
                units: l.units,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::LwtaDense(_) => "lwta-dense",
            Layer::LwtaConv(_) => "lwta-conv",
            Layer::GatedOutput(_) => "gated-output",
            Layer::Dense(_) => "dense",
            Layer::HardWta(_) => "hard-wta",
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::LwtaDense(l) => l.params(),
            Layer::LwtaConv(l) => l.params(),
            Layer::GatedOutput(l) => l.params(),
            Layer::Dense(l) => l.params(),
            Layer::HardWta(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::LwtaDense(l) => l.params_mut(),
            Layer::LwtaConv(l) => l.params_mut(),
            Layer::GatedOutput(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            Layer::HardWta(l) => l.params_mut(),
        }
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
        match self {
            Layer::LwtaDense(l) => l.forward_graph(g, params, x, sampling, with_kl, rng),
            Layer::LwtaConv(l) => l.forward_graph(g, params, x, sampling, with_kl, rng),
            Layer::GatedOutput(l) => l.forward_graph(g, params, x, sampling, with_kl, rng),
            Layer::Dense(l) => l.forward_graph(g, params, x),
            Layer::HardWta(l) => l.forward_graph(g, params, x),
        }
    }

    pub fn as_competitive(&self) -> Option<&dyn CompetitiveLayer> {
        match self {
            Layer::LwtaDense(l) => Some(l),
            Layer::LwtaConv(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, Layer::LwtaDense(_) | Layer::LwtaConv(_) | Layer::GatedOutput(_))
    }
}

/// Output shape (without the batch axis) of `spec` applied to `input`.
fn layer_output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let flat: usize = input.iter().product();
    let need = |j: usize| {
        if flat == j {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "layer expects {j} inputs but receives shape {input:?}"
            )))
        }
    };
    match *spec {
        LayerSpec::LwtaDense { inputs, blocks, units, .. } => {
            need(inputs)?;
            Ok(vec![blocks * units])
        }
        LayerSpec::GatedOutput { inputs, outputs, .. } | LayerSpec::Dense { inputs, outputs, .. } => {
            need(inputs)?;
            Ok(vec![outputs])
        }
        LayerSpec::HardWta { inputs, blocks, units } => {
            need(inputs)?;
            Ok(vec![blocks * units])
        }
        LayerSpec::LwtaConv { kernel, channels, blocks, units, padding, .. } => {
            let &[h, l, c] = input else {
                return Err(Error::Config(format!(
                    "conv layer needs [H, L, C] input, got {input:?}"
                )));
            };
            if c != channels {
                return Err(Error::Config(format!("conv layer expects {channels} channels, got {c}")));
            }
            match padding {
                Padding::Same => Ok(vec![h, l, blocks * units]),
                Padding::Valid if kernel[0] <= h && kernel[1] <= l => {
                    Ok(vec![h - kernel[0] + 1, l - kernel[1] + 1, blocks * units])
                }
                Padding::Valid => Err(Error::Config(format!(
                    "kernel {kernel:?} larger than input {h}x{l}"
                ))),
            }
        }
    }
}

impl Model {
    /// Fresh model from a plan, resolving each layer's input size in turn.
    pub fn build<R: Rng + ?Sized>(
        input_shape: &[usize],
        plan: &[LayerPlan],
        head: Head,
        prior_alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if plan.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(plan.len());
        for p in plan {
            let flat: usize = shape.iter().product();
            let layer = match *p {
                LayerPlan::LwtaDense { blocks, units, bias } => {
                    Layer::LwtaDense(LwtaDenseLayer::new(flat, blocks, units, prior_alpha, bias, rng)?)
                }
                LayerPlan::LwtaConv { kernel, blocks, units, padding } => {
                    let c = *shape.last().unwrap_or(&0);
                    if shape.len() != 3 {
                        return Err(Error::Config(format!("conv layer needs [H, L, C] input, got {shape:?}")));
                    }
                    Layer::LwtaConv(LwtaConvLayer::new((kernel, kernel), c, blocks, units, padding, prior_alpha, rng)?)
                }
                LayerPlan::GatedOutput { bias } => Layer::GatedOutput(GatedOutputLayer::new(
                    flat,
                    head.logit_width(),
                    prior_alpha,
                    bias,
                    rng,
                )?),
                LayerPlan::Dense { outputs, relu } => {
                    Layer::Dense(DenseLayer::new(flat, outputs.unwrap_or(head.logit_width()), relu, rng)?)
                }
                LayerPlan::HardWta { blocks, units } => Layer::HardWta(HardWtaLayer::new(flat, blocks, units, rng)?),
            };
            shape = layer_output_shape(&layer.spec(), &shape)?;
            layers.push(layer);
        }
        let model = Model {
            input_shape: input_shape.to_vec(),
            layers,
            head,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks that shapes chain from the input to the head.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = layer_output_shape(&l.spec(), &shape)?;
        }
        let width: usize = shape.iter().product();
        if shape.len() != 1 || width != self.head.logit_width() {
            return Err(Error::Config(format!(
                "model emits shape {shape:?} but the head needs {} logits",
                self.head.logit_width()
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::spec).collect(),
            head: self.head.clone(),
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn params(&self) -> Vec<Vec<(&'static str, &Tensor)>> {
        self.layers.iter().map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<Vec<(&'static str, &mut Tensor)>> {
        self.layers.iter_mut().map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().flatten().map(|(_, t)| t.len()).sum()
    }

    pub fn is_stochastic(&self) -> bool {
        self.layers.iter().any(Layer::is_stochastic)
    }

    /// Binds every parameter on `g`, layer by layer.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Vec<Var>> {
        self.layers
            .iter()
            .map(|l| bind_params(g, &l.params(), trainable))
            .collect()
    }

    /// Forward pass of a batch `x [N, ...input_shape]` to logits `[N, W]`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &[Vec<Var>],
        x: Var,
        sampling: Sampling,
        with_kl: bool,
        rng: &mut R,
    ) -> Result<ModelForward> {
        let xs = g.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "model expects [N, {:?}] input, got {:?}",
                self.input_shape, xs
            )));
        }
        let mut h = x;
        let mut kl: Option<Var> = None;
        let mut winner_probs = Vec::with_capacity(self.layers.len());
        for (layer, p) in self.layers.iter().zip(params) {
            let out = layer.forward_graph(g, p, h, sampling, with_kl, rng)?;
            h = out.out;
            kl = match (kl, out.kl) {
                (Some(a), Some(b)) => Some(g.add(a, b)?),
                (a, b) => a.or(b),
            };
            winner_probs.push(out.winner_probs);
        }
        let n = g.shape(h)[0];
        let width = g.value(h).len() / n.max(1);
        let logits = g.reshape(h, &[n, width])?;
        Ok(ModelForward {
            logits,
            kl,
            winner_probs,
        })
    }

    /// Activations entering layer `index` after one pass through the layers before it.
    pub fn layer_input<R: Rng + ?Sized>(&self, x: &Tensor, index: usize, sampling: Sampling, rng: &mut R) -> Result<Tensor> {
        if index >= self.layers.len() {
            return Err(Error::Config(format!(
                "layer index {index} out of range for {} layers",
                self.layers.len()
            )));
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let mut h = g.constant(x.clone());
        for (layer, p) in self.layers[..index].iter().zip(&params) {
            h = layer.forward_graph(&mut g, p, h, sampling, false, rng)?.out;
        }
        Ok(g.value(h).clone())
    }

    /// One stochastic pass to logits `[N, W]` without building KL terms.
    pub fn logits<R: Rng + ?Sized>(&self, x: &Tensor, sampling: Sampling, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, &params, xv, sampling, false, rng)?;
        Ok(g.value(f.logits).clone())
    }

    /// One stochastic pass to class probabilities `[N, M]`.
    pub fn class_probabilities<R: Rng + ?Sized>(&self, x: &Tensor, sampling: Sampling, rng: &mut R) -> Result<Tensor> {
        self.head.class_probabilities(&self.logits(x, sampling, rng)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecoc::{build_code, CodeKind};
    use crate::rng;

    fn plan() -> Vec<LayerPlan> {
        vec![
            LayerPlan::LwtaDense { blocks: 3, units: 2, bias: false },
            LayerPlan::GatedOutput { bias: false },
        ]
    }

    #[test]
    fn build_infers_sizes() {
        let code = build_code(4, 8, CodeKind::Hadamard).unwrap();
        let head = Head::Ecoc { code, transform: TransformKind::SoftmaxPairs };
        let m = Model::build(&[5], &plan(), head, 1.0, &mut rng::stream(0, 0)).unwrap();
        match &m.spec().layers[1] {
            LayerSpec::GatedOutput { inputs, outputs, .. } => assert_eq!((*inputs, *outputs), (6, 16)),
            other => panic!("{other:?}"),
        }
        let x = Tensor::zeros(&[2, 5]);
        let p = m.class_probabilities(&x, Sampling::Exact, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
    }

    #[test]
    fn conv_stack_shapes() {
        let plan = vec![
            LayerPlan::LwtaConv { kernel: 3, blocks: 2, units: 2, padding: Padding::Valid },
            LayerPlan::LwtaDense { blocks: 4, units: 2, bias: true },
            LayerPlan::GatedOutput { bias: true },
        ];
        let m = Model::build(&[6, 6, 1], &plan, Head::Categorical { classes: 3 }, 1.0, &mut rng::stream(2, 0)).unwrap();
        let x = Tensor::full(&[2, 6, 6, 1], 0.5);
        let mut g = Graph::new();
        let params = m.bind(&mut g, true);
        let xv = g.constant(x);
        let f = m
            .forward_graph(&mut g, &params, xv, Sampling::Exact, true, &mut rng::stream(3, 0))
            .unwrap();
        assert_eq!(g.shape(f.logits), &[2, 3]);
        assert!(g.value(f.kl.unwrap()).item().unwrap() >= 0.0);
        assert!(m.validate().is_ok());
        let wrong = Tensor::zeros(&[2, 5, 6, 1]);
        assert!(m.logits(&wrong, Sampling::Exact, &mut rng::stream(4, 0)).is_err());
    }
}
