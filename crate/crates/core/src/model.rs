//! Generator and discriminator architecture descriptions and forward passes.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::piggyback::{compose_filters, FilterTensor};
use crate::run::{LayerParams, RunState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Instance,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kw: usize,
    pub kh: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub norm: Norm,
    /// Per-task full layer, never factorized.
    pub task_specific: bool,
    /// Output of this earlier layer is concatenated (channel axis) after the
    /// previous layer's output to form this layer's input.
    pub skip_from: Option<usize>,
}

impl LayerSpec {
    pub fn filter_shape(&self) -> [usize; 4] {
        [self.kw, self.kh, self.c_in, self.c_out]
    }

    /// Rows of the reshaped 2D filter matrix: `kw * kh * c_in`.
    pub fn fan(&self) -> usize {
        self.kw * self.kh * self.c_in
    }

    pub fn filter_count(&self) -> usize {
        self.fan() * self.c_out
    }

    /// Filters plus one bias per output channel.
    pub fn full_param_count(&self) -> usize {
        self.filter_count() + self.c_out
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        match self.kind {
            LayerKind::Conv => {
                let padded = n + 2 * self.pad;
                (padded >= self.kw && (padded - self.kw).is_multiple_of(self.stride))
                    .then(|| (padded - self.kw) / self.stride + 1)
            }
            LayerKind::Deconv => {
                let full = (n.checked_sub(1)?) * self.stride + self.kw;
                full.checked_sub(2 * self.pad).filter(|&v| v > 0)
            }
        }
    }
}

/// Architecture of one generator/discriminator pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub generator: Vec<LayerSpec>,
    /// Consumes the condition and an image concatenated on the channel axis.
    pub discriminator: Vec<LayerSpec>,
}

#[allow(clippy::too_many_arguments)]
fn layer(
    kind: LayerKind,
    k: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    activation: Activation,
    norm: Norm,
) -> LayerSpec {
    LayerSpec {
        kind,
        kw: k,
        kh: k,
        c_in,
        c_out,
        stride,
        pad,
        activation,
        norm,
        task_specific: false,
        skip_from: None,
    }
}

/// The desk-scale UNet-style reference architecture ("small-unet").
pub fn reference_spec(size: usize) -> Result<ModelSpec> {
    use Activation::*;
    use LayerKind::*;
    if size != 32 {
        return Err(Error::Unsupported(format!("reference spec exists only for size 32, got {size}")));
    }
    let inorm = Norm::Instance;
    let mut generator = vec![
        layer(Conv, 4, 3, 16, 2, 1, LeakyRelu, inorm),
        layer(Conv, 4, 16, 32, 2, 1, LeakyRelu, inorm),
        layer(Conv, 4, 32, 64, 2, 1, LeakyRelu, inorm),
        layer(Deconv, 4, 64, 32, 2, 1, Relu, inorm),
        layer(Deconv, 4, 64, 16, 2, 1, Relu, inorm),
        layer(Deconv, 4, 32, 16, 2, 1, Relu, inorm),
        layer(Conv, 3, 16, 3, 1, 1, Tanh, Norm::None),
    ];
    generator[4].skip_from = Some(1);
    generator[5].skip_from = Some(0);
    generator[6].task_specific = true;
    let discriminator = vec![
        layer(Conv, 4, 6, 16, 2, 1, LeakyRelu, Norm::None),
        layer(Conv, 4, 16, 32, 2, 1, LeakyRelu, inorm),
        layer(Conv, 3, 32, 1, 1, 1, Identity, Norm::None),
    ];
    let spec = ModelSpec {
        name: "small-unet".into(),
        height: size,
        width: size,
        channels: 3,
        generator,
        discriminator,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn spec_by_name(arch: &str) -> Result<ModelSpec> {
    match arch {
        "small-unet" => reference_spec(32),
        other => Err(Error::Unsupported(format!("unknown architecture {other:?}"))),
    }
}

impl ModelSpec {
    /// Checks channel chaining, skip sources, and that spatial extents return
    /// to the input size. Returns the per-layer `(h, w, c)` outputs.
    pub fn validate(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.generator.is_empty() {
            return Err(Error::shape("generator has no layers"));
        }
        let shapes = chain_shapes(&self.generator, (self.height, self.width, self.channels), "generator")?;
        let last = *shapes.last().expect("non-empty");
        if last != (self.height, self.width, self.channels) {
            return Err(Error::shape(format!(
                "generator maps {}x{}x{} to {last:?}",
                self.height, self.width, self.channels
            )));
        }
        if !self.discriminator.is_empty() {
            let d = chain_shapes(
                &self.discriminator,
                (self.height, self.width, 2 * self.channels),
                "discriminator",
            )?;
            if d.last().expect("non-empty").2 != 1 {
                return Err(Error::shape("discriminator must end in a single score channel"));
            }
            if self.discriminator.iter().any(|l| l.task_specific || l.skip_from.is_some()) {
                return Err(Error::shape("discriminator layers take no skip or task-specific flags"));
            }
        }
        Ok(shapes)
    }

    pub fn shared_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.generator.iter().enumerate().filter(|(_, l)| !l.task_specific)
    }

    pub fn generator_param_count(&self) -> usize {
        self.generator.iter().map(LayerSpec::full_param_count).sum()
    }

    pub fn discriminator_param_count(&self) -> usize {
        self.discriminator.iter().map(LayerSpec::full_param_count).sum()
    }

    /// Extents of the discriminator's score map.
    pub fn patch_extent(&self) -> Result<(usize, usize)> {
        let d = chain_shapes(
            &self.discriminator,
            (self.height, self.width, 2 * self.channels),
            "discriminator",
        )?;
        let (h, w, _) = *d.last().ok_or_else(|| Error::shape("empty discriminator"))?;
        Ok((h, w))
    }
}

fn chain_shapes(
    layers: &[LayerSpec],
    input: (usize, usize, usize),
    what: &str,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut outs: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (i, l) in layers.iter().enumerate() {
        let mut c_in = cur.2;
        if let Some(src) = l.skip_from {
            let s = *outs
                .get(src)
                .filter(|_| src + 1 < i)
                .ok_or_else(|| Error::shape(format!("{what} layer {i}: bad skip source {src}")))?;
            if (s.0, s.1) != (cur.0, cur.1) {
                return Err(Error::shape(format!(
                    "{what} layer {i}: skip from {src} has extent {s:?}, input is {cur:?}"
                )));
            }
            c_in += s.2;
        }
        if c_in != l.c_in {
            return Err(Error::shape(format!(
                "{what} layer {i}: expects {} input channels, receives {c_in}",
                l.c_in
            )));
        }
        if l.stride == 0 || l.kw == 0 || l.kh == 0 || l.c_out == 0 {
            return Err(Error::shape(format!("{what} layer {i}: zero kernel, stride or channels")));
        }
        let h = l.out_extent(cur.0);
        // Filter axis 1 pairs with image axis 1.
        let w = LayerSpec { kw: l.kh, ..l.clone() }.out_extent(cur.1);
        let (Some(h), Some(w)) = (h, w) else {
            return Err(Error::NonIntegralExtent(format!("{what} layer {i} on input {cur:?}")));
        };
        cur = (h, w, l.c_out);
        outs.push(cur);
    }
    Ok(outs)
}

/// Graph handles for one layer's resolved filters and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub filters: Var,
    pub bias: Var,
}

fn apply_layer(g: &mut Graph, l: &LayerSpec, w: LayerVars, x: Var) -> Result<Var> {
    let y = match l.kind {
        LayerKind::Conv => g.conv2d(x, w.filters, w.bias, l.stride, l.pad)?,
        LayerKind::Deconv => g.deconv2d(x, w.filters, w.bias, l.stride, l.pad)?,
    };
    let y = match l.norm {
        Norm::None => y,
        Norm::Instance => g.instance_norm(y, INSTANCE_NORM_EPS)?,
    };
    match l.activation {
        Activation::Identity => Ok(y),
        Activation::Relu => g.relu(y),
        Activation::LeakyRelu => g.leaky_relu(y),
        Activation::Tanh => g.tanh(y),
    }
}

fn run_stack(g: &mut Graph, layers: &[LayerSpec], weights: &[LayerVars], input: Var) -> Result<Var> {
    if layers.len() != weights.len() {
        return Err(Error::shape(format!("{} layers but {} weight sets", layers.len(), weights.len())));
    }
    let mut outs: Vec<Var> = Vec::with_capacity(layers.len());
    let mut cur = input;
    for (l, &w) in layers.iter().zip(weights) {
        let x = match l.skip_from {
            Some(src) => g.concat_last_axis(&[cur, outs[src]])?,
            None => cur,
        };
        cur = apply_layer(g, l, w, x)?;
        outs.push(cur);
    }
    Ok(cur)
}

pub fn generator_forward(g: &mut Graph, spec: &ModelSpec, weights: &[LayerVars], image: Var) -> Result<Var> {
    let s = g.value(image).shape();
    if s != [spec.height, spec.width, spec.channels] {
        return Err(Error::shape(format!(
            "image {s:?} does not match spec {}x{}x{}",
            spec.height, spec.width, spec.channels
        )));
    }
    run_stack(g, &spec.generator, weights, image)
}

/// Patch score map for `(condition, image)`.
pub fn discriminator_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    weights: &[LayerVars],
    condition: Var,
    image: Var,
) -> Result<Var> {
    let x = g.concat_last_axis(&[condition, image])?;
    run_stack(g, &spec.discriminator, weights, x)
}

/// A generator with every layer's filters resolved to concrete values.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInstance {
    pub spec: ModelSpec,
    pub task_index: usize,
    pub filters: Vec<FilterTensor>,
    pub biases: Vec<Tensor>,
}

/// Resolves task `n`'s generator: shared layers are composed from the bank
/// prefix they trained against, task-specific layers are loaded directly.
pub fn build_generator(run: &RunState, n: usize) -> Result<GeneratorInstance> {
    let task = run.task(n)?;
    let mut filters = Vec::with_capacity(run.spec.generator.len());
    let mut biases = Vec::with_capacity(run.spec.generator.len());
    for (idx, lspec) in run.spec.generator.iter().enumerate() {
        let (f, b) = match &task.generator[idx] {
            LayerParams::Factorized(p) => {
                let bank = run.bank(idx)?;
                (compose_filters(bank, p)?, p.bias.clone())
            }
            LayerParams::Full(full) => (full.filters.clone(), full.bias.clone()),
            LayerParams::Superseded => {
                let latest = run.tasks.last().ok_or(Error::MissingTask(n))?;
                match &latest.generator[idx] {
                    LayerParams::Full(full) => (full.filters.clone(), full.bias.clone()),
                    _ => return Err(Error::MissingTask(n)),
                }
            }
        };
        if f.shape() != lspec.filter_shape() {
            return Err(Error::shape(format!(
                "layer {idx}: resolved filters {:?}, spec {:?}",
                f.shape(),
                lspec.filter_shape()
            )));
        }
        filters.push(f);
        biases.push(b);
    }
    Ok(GeneratorInstance { spec: run.spec.clone(), task_index: n, filters, biases })
}

impl GeneratorInstance {
    pub fn generate(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let weights: Vec<LayerVars> = self
            .filters
            .iter()
            .zip(&self.biases)
            .map(|(f, b)| LayerVars {
                filters: g.constant(f.tensor().clone()),
                bias: g.constant(b.clone()),
            })
            .collect();
        let x = g.constant(image.clone());
        let y = generator_forward(&mut g, &self.spec, &weights, x)?;
        Ok(g.value(y).clone())
    }
}
