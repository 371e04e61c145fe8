//! Encoder/classifier network with exact analytic gradients.
//!
//! The encoder is a tanh multilayer perceptron over flattened `3×H×W`
//! images. Its last linear layer is ℓ2-normalized to give the embedding `z`,
//! and a bias-free linear classifier maps `z` to identity logits. All
//! parameters live in one flat [`ParameterVector`] whose [`Layout`] names
//! each tensor, which is what clients upload and the server averages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Pre-normalization norms at or below this floor are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Shape of the encoder and classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    /// Config for `3×height×width` images.
    pub fn for_image(
        height: usize,
        width: usize,
        hidden_dims: Vec<usize>,
        embed_dim: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            input_dim: 3 * height * width,
            hidden_dims,
            embed_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "input_dim must be a positive multiple of 3, got {}",
                self.input_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Parameter layout implied by this config.
    pub fn layout(&self) -> Layout {
        let mut builder = LayoutBuilder::default();
        let mut fan_in = self.input_dim;
        let widths = self.hidden_dims.iter().copied().chain([self.embed_dim]);
        for (i, out) in widths.enumerate() {
            builder.push(format!("encoder.{i}.weight"), out, fan_in);
            builder.push(format!("encoder.{i}.bias"), out, 1);
            fan_in = out;
        }
        builder.push("classifier.weight".to_string(), self.num_classes, self.embed_dim);
        builder.finish()
    }
}

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Ordered segment descriptors covering a parameter vector exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
}

#[derive(Default)]
struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize) {
        let len = rows * cols;
        self.segments.push(Segment {
            name,
            rows,
            cols,
            offset: self.offset,
            len,
        });
        self.offset += len;
    }

    fn finish(self) -> Layout {
        Layout {
            segments: self.segments,
        }
    }
}

impl Layout {
    /// Rebuilds a layout from descriptors, checking they tile `[0, total)`.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut offset = 0;
        for s in &segments {
            if s.offset != offset || s.len != s.rows * s.cols {
                return Err(Error::State(format!(
                    "segment {} does not tile the parameter vector",
                    s.name
                )));
            }
            offset += s.len;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Recovers the network shape from the segment names and sizes.
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let arch = Architecture::from_layout(self)?;
        let first = arch.layers.first().expect("architecture has an embedding layer");
        let last = arch.layers.last().expect("architecture has an embedding layer");
        Ok(EncoderConfig {
            input_dim: first.inputs,
            hidden_dims: arch.layers[..arch.layers.len() - 1]
                .iter()
                .map(|l| l.outputs)
                .collect(),
            embed_dim: last.outputs,
            num_classes: arch.classifier.outputs,
        })
    }
}

/// Flat parameters plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::State(format!(
                "parameter length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }
}

/// Gradient of a scalar loss with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) -> Result<()> {
        if other.len() != self.0.len() {
            return Err(Error::Input(format!(
                "gradient length mismatch: {} vs {}",
                self.0.len(),
                other.len()
            )));
        }
        for (g, o) in self.0.iter_mut().zip(other) {
            *g += scale * o;
        }
        Ok(())
    }
}

/// Parameters with their SGD momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ParameterVector,
    pub momentum: Vec<f64>,
    pub step_count: u64,
}

impl ModelState {
    /// Wraps parameters with a zeroed momentum buffer.
    pub fn from_params(params: ParameterVector) -> Self {
        let momentum = vec![0.0; params.len()];
        Self {
            params,
            momentum,
            step_count: 0,
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    /// Input followed by each hidden layer's tanh output.
    activations: Vec<Vec<f64>>,
    /// Embedding layer output before normalization.
    pre_norm: Vec<f64>,
    norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub cache: ForwardCache,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
    outputs: usize,
    inputs: usize,
}

impl Dense {
    fn apply(&self, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &params[self.weight..self.weight + self.outputs * self.inputs];
        let b = &params[self.bias..self.bias + self.outputs];
        for (row, bias) in w.chunks_exact(self.inputs).zip(b) {
            out.push(bias + dot(row, input));
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Classifier {
    weight: usize,
    outputs: usize,
    inputs: usize,
}

struct Architecture {
    /// Hidden layers followed by the embedding layer.
    layers: Vec<Dense>,
    classifier: Classifier,
}

impl Architecture {
    fn from_layout(layout: &Layout) -> Result<Self> {
        let segs = &layout.segments;
        let bad = |msg: &str| Error::State(format!("unrecognized parameter layout: {msg}"));
        let (cls, enc) = segs.split_last().ok_or_else(|| bad("empty"))?;
        if cls.name != "classifier.weight" || enc.is_empty() || enc.len() % 2 != 0 {
            return Err(bad("expected encoder weight/bias pairs then classifier.weight"));
        }
        let mut layers = Vec::with_capacity(enc.len() / 2);
        let mut expected_in = None;
        for (i, pair) in enc.chunks_exact(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            if w.name != format!("encoder.{i}.weight")
                || b.name != format!("encoder.{i}.bias")
                || b.rows != w.rows
                || b.cols != 1
            {
                return Err(bad(&format!("layer {i}")));
            }
            if expected_in.is_some_and(|d| d != w.cols) {
                return Err(bad(&format!("layer {i} input width")));
            }
            expected_in = Some(w.rows);
            layers.push(Dense {
                weight: w.offset,
                bias: b.offset,
                outputs: w.rows,
                inputs: w.cols,
            });
        }
        if expected_in != Some(cls.cols) {
            return Err(bad("classifier input width"));
        }
        Ok(Self {
            layers,
            classifier: Classifier {
                weight: cls.offset,
                outputs: cls.rows,
                inputs: cls.cols,
            },
        })
    }

    fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Xavier-uniform weights, zero biases, zero momentum.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.total_len()];
    for seg in layout.segments() {
        if seg.is_bias() {
            continue;
        }
        let bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
        for v in &mut values[seg.range()] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(ModelState::from_params(ParameterVector::new(values, layout)?))
}

/// Embedding and logits for one input.
pub fn forward(state: &ModelState, x: &[f64]) -> Result<ForwardOutput> {
    let arch = Architecture::from_layout(&state.params.layout)?;
    forward_with(&arch, &state.params.values, x)
}

/// Forward pass over a batch, checking the layout once.
pub fn forward_batch<X: AsRef<[f64]>>(state: &ModelState, xs: &[X]) -> Result<Vec<ForwardOutput>> {
    let arch = Architecture::from_layout(&state.params.layout)?;
    xs.iter()
        .map(|x| forward_with(&arch, &state.params.values, x.as_ref()))
        .collect()
}

/// Embeddings only; no activation cache is kept.
pub fn embed_batch<X: AsRef<[f64]>>(params: &ParameterVector, xs: &[X]) -> Result<Vec<Vec<f64>>> {
    let arch = Architecture::from_layout(&params.layout)?;
    xs.iter()
        .map(|x| forward_with(&arch, &params.values, x.as_ref()).map(|o| o.embedding))
        .collect()
}

fn forward_with(arch: &Architecture, params: &[f64], x: &[f64]) -> Result<ForwardOutput> {
    if x.len() != arch.input_dim() {
        return Err(Error::Input(format!(
            "input length {} does not match encoder input_dim {}",
            x.len(),
            arch.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite input value".into()));
    }
    let (hidden, embed_layer) = arch.layers.split_at(arch.layers.len() - 1);
    let mut activations = Vec::with_capacity(hidden.len() + 1);
    activations.push(x.to_vec());
    let mut buf = Vec::new();
    for layer in hidden {
        layer.apply(params, activations.last().unwrap(), &mut buf);
        activations.push(buf.iter().map(|v| v.tanh()).collect());
    }
    let mut pre_norm = Vec::new();
    embed_layer[0].apply(params, activations.last().unwrap(), &mut pre_norm);
    let norm = dot(&pre_norm, &pre_norm).sqrt();
    let embedding: Vec<f64> = if norm > NORM_FLOOR {
        pre_norm.iter().map(|v| v / norm).collect()
    } else {
        // degenerate activations map to a fixed unit direction
        let d = pre_norm.len();
        vec![1.0 / (d as f64).sqrt(); d]
    };

    let cls = arch.classifier;
    let w = &params[cls.weight..cls.weight + cls.outputs * cls.inputs];
    let logits: Vec<f64> = w.chunks_exact(cls.inputs).map(|row| dot(row, &embedding)).collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(ForwardOutput {
        embedding,
        logits,
        cache: ForwardCache {
            activations,
            pre_norm,
            norm,
        },
    })
}

/// Gradient of a scalar loss given its gradients with respect to each
/// sample's embedding and logits.
pub fn backward(
    state: &ModelState,
    outputs: &[ForwardOutput],
    upstream_embeddings: &[Vec<f64>],
    upstream_logits: &[Vec<f64>],
) -> Result<GradientVector> {
    let arch = Architecture::from_layout(&state.params.layout)?;
    let params = &state.params.values;
    if outputs.len() != upstream_embeddings.len() || outputs.len() != upstream_logits.len() {
        return Err(Error::Input(format!(
            "batch size mismatch: {} outputs, {} embedding grads, {} logit grads",
            outputs.len(),
            upstream_embeddings.len(),
            upstream_logits.len()
        )));
    }
    let cls = arch.classifier;
    let mut grad = vec![0.0; params.len()];
    for ((out, g_embed), g_logits) in outputs.iter().zip(upstream_embeddings).zip(upstream_logits) {
        let cache = &out.cache;
        if g_embed.len() != cls.inputs
            || g_logits.len() != cls.outputs
            || out.embedding.len() != cls.inputs
            || cache.activations.len() != arch.layers.len()
        {
            return Err(Error::Input("upstream or cache shape does not match model".into()));
        }

        // classifier
        let mut g_z = g_embed.clone();
        let w_cls = &params[cls.weight..cls.weight + cls.outputs * cls.inputs];
        let dw_cls = &mut grad[cls.weight..cls.weight + cls.outputs * cls.inputs];
        for (c, &gl) in g_logits.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            let row = &w_cls[c * cls.inputs..(c + 1) * cls.inputs];
            let drow = &mut dw_cls[c * cls.inputs..(c + 1) * cls.inputs];
            for j in 0..cls.inputs {
                drow[j] += gl * out.embedding[j];
                g_z[j] += gl * row[j];
            }
        }

        // ℓ2 normalization: z = h / |h|, constant below the floor
        let mut g_act: Vec<f64> = if cache.norm > NORM_FLOOR {
            let proj = dot(&out.embedding, &g_z);
            g_z.iter()
                .zip(&out.embedding)
                .map(|(g, z)| (g - z * proj) / cache.norm)
                .collect()
        } else {
            vec![0.0; g_z.len()]
        };

        for (depth, layer) in arch.layers.iter().enumerate().rev() {
            // g_act is the gradient w.r.t. this layer's pre-activation here
            let input = &cache.activations[depth];
            let (dw, rest) = grad.split_at_mut(layer.bias);
            let dw = &mut dw[layer.weight..layer.weight + layer.outputs * layer.inputs];
            let db = &mut rest[..layer.outputs];
            for (o, &g) in g_act.iter().enumerate() {
                db[o] += g;
                if g != 0.0 {
                    for (d, x) in dw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                        *d += g * x;
                    }
                }
            }
            if depth == 0 {
                break;
            }
            let w = &params[layer.weight..layer.weight + layer.outputs * layer.inputs];
            let mut g_in = vec![0.0; layer.inputs];
            for (o, &g) in g_act.iter().enumerate() {
                if g != 0.0 {
                    for (gi, wv) in g_in.iter_mut().zip(&w[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *gi += g * wv;
                    }
                }
            }
            // through tanh of the previous layer
            for (gi, a) in g_in.iter_mut().zip(input) {
                *gi *= 1.0 - a * a;
            }
            g_act = g_in;
        }
        debug_assert_eq!(cache.pre_norm.len(), cls.inputs);
    }
    Ok(GradientVector(grad))
}

/// SGD with heavy-ball momentum and L2 weight decay.
pub fn sgd_step(
    state: &ModelState,
    grad: &GradientVector,
    lr: f64,
    momentum_coef: f64,
    weight_decay: f64,
) -> Result<ModelState> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    if grad.len() != state.params.len() {
        return Err(Error::Input(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            state.params.len()
        )));
    }
    if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
    }
    let mut next = state.clone();
    for ((p, v), g) in next
        .params
        .values
        .iter_mut()
        .zip(next.momentum.iter_mut())
        .zip(&grad.0)
    {
        *v = momentum_coef * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    next.step_count += 1;
    Ok(next)
}

/// Fraction of steps spent warming up.
pub const ONE_CYCLE_WARMUP: f64 = 0.3;
/// Initial learning rate is `max_lr / ONE_CYCLE_INITIAL_DIV`.
pub const ONE_CYCLE_INITIAL_DIV: f64 = 25.0;
/// Final learning rate is `max_lr / ONE_CYCLE_FINAL_DIV`.
pub const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

/// One-cycle learning rate: linear warmup for the first 30% of steps, then
/// cosine annealing down to `max_lr / 1e4` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Input(format!(
            "step {step} out of range for {total_steps} total steps"
        )));
    }
    if max_lr.is_nan() || max_lr <= 0.0 {
        return Err(Error::Input(format!("max_lr must be positive, got {max_lr}")));
    }
    let initial = max_lr / ONE_CYCLE_INITIAL_DIV;
    let last = max_lr / ONE_CYCLE_FINAL_DIV;
    let peak = (ONE_CYCLE_WARMUP * total_steps as f64).floor() as usize;
    if step <= peak {
        if peak == 0 {
            return Ok(max_lr);
        }
        let t = step as f64 / peak as f64;
        return Ok(initial + (max_lr - initial) * t);
    }
    let t = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
    Ok(last + (max_lr - last) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
