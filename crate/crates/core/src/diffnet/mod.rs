//! Small conditional velocity network with a hand-written vector-Jacobian
//! product.
//!
//! The network input is the concatenation of the sample `x`, a sinusoidal
//! embedding of the time `t`, and a learned embedding row for the condition
//! `c`. A stack of dense layers with a smooth activation follows, and a final
//! linear layer maps back to the sample dimension.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] records where each
//! block sits. Gradients share the same layout.

mod adam;

pub use adam::{adam_step, AdamState};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::util::{ensure_finite, rng_from_seed};
use crate::{Error, Point, Result, VelocityField};

/// Highest angular frequency used by the time embedding.
const MAX_TIME_FREQUENCY: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                1.0 - y * y
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Architecture of a velocity network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Sample dimension `D`.
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub num_conditions: usize,
    pub cond_embed_dim: usize,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_conditions: usize) -> Self {
        NetSpec {
            input_dim,
            hidden_widths,
            time_embed_dim: 16,
            num_conditions,
            cond_embed_dim: 8,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, value) in [
            ("input_dim", self.input_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("num_conditions", self.num_conditions),
            ("cond_embed_dim", self.cond_embed_dim),
        ] {
            if value == 0 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.hidden_widths.is_empty() {
            problems.push("hidden_widths must be non-empty".to_string());
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            problems.push("hidden_widths entries must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Width of the concatenated `[x, time embedding, condition embedding]` input.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.cond_embed_dim
    }

    pub fn layout(&self) -> Layout {
        let cond_table_len = self.num_conditions * self.cond_embed_dim;
        let mut offset = cond_table_len;
        let mut layers = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.feature_dim();
        for &fan_out in self.hidden_widths.iter().chain(std::iter::once(&self.input_dim)) {
            let weight_offset = offset;
            let bias_offset = weight_offset + fan_in * fan_out;
            offset = bias_offset + fan_out;
            layers.push(DenseLayer {
                fan_in,
                fan_out,
                weight_offset,
                bias_offset,
            });
            fan_in = fan_out;
        }
        Layout {
            cond_table_len,
            layers,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of one dense layer inside the flat parameter vector. Weights are
/// stored row-major as `fan_out × fan_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Parameter layout: the condition table first, then each dense layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub cond_table_len: usize,
    pub layers: Vec<DenseLayer>,
    pub total: usize,
}

/// Flat parameters of a velocity network together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: NetSpec,
    layout: Layout,
    values: Vec<f64>,
}

/// Gradient with respect to a [`ParamVector`], in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Draws initial parameters: weights are `N(0, 2/fan_in)`, biases are zero,
/// and condition-table entries are `N(0, 1)`.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = rng_from_seed(seed);
    let mut values = vec![0.0; layout.total];
    for v in &mut values[..layout.cond_table_len] {
        *v = rng.sample(StandardNormal);
    }
    for layer in &layout.layers {
        let std = (2.0 / layer.fan_in as f64).sqrt();
        for v in &mut values[layer.weight_offset..layer.bias_offset] {
            let z: f64 = rng.sample(StandardNormal);
            *v = std * z;
        }
    }
    Ok(ParamVector {
        spec: spec.clone(),
        layout,
        values,
    })
}

/// Sinusoidal embedding of `t`: sines then cosines at geometrically spaced
/// frequencies in `[1, 64]`, plus `t` itself when `dim` is odd.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let frac = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = MAX_TIME_FREQUENCY.powf(frac);
        out[k] = (omega * t).sin();
        out[half + k] = (omega * t).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = t;
    }
    out
}

/// Per-layer inputs and pre-activations recorded by the forward pass.
struct Tape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ParamVector {
    /// Wraps raw values; fails if the length disagrees with the layout or a
    /// value is non-finite.
    pub fn from_values(spec: NetSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if values.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter vector has {} values, spec implies {}",
                values.len(),
                layout.total
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector {
            spec,
            layout,
            values,
        })
    }

    /// All-zero parameters; the resulting network outputs zero everywhere.
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        Self::from_values(spec.clone(), vec![0.0; spec.param_count()])
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean distance between two parameter vectors of the same layout.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        crate::util::squared_distance(&self.values, &other.values).sqrt()
    }

    fn check_inputs(&self, x: &[f64], t: f64, c: usize) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Input(format!(
                "x has dimension {}, network expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        if c >= self.spec.num_conditions {
            return Err(Error::Input(format!(
                "condition id {c} out of range (network has {} conditions)",
                self.spec.num_conditions
            )));
        }
        if !t.is_finite() {
            return Err(Error::Input("t is not finite".into()));
        }
        ensure_finite(x, "x")
    }

    fn features(&self, x: &[f64], t: f64, c: usize) -> Vec<f64> {
        let spec = &self.spec;
        let mut h = Vec::with_capacity(spec.feature_dim());
        h.extend_from_slice(x);
        h.extend(time_embedding(t, spec.time_embed_dim));
        let row = c * spec.cond_embed_dim;
        h.extend_from_slice(&self.values[row..row + spec.cond_embed_dim]);
        h
    }

    fn run(&self, x: &[f64], t: f64, c: usize, record: bool) -> Tape {
        let last = self.layout.layers.len() - 1;
        let mut h = self.features(x, t, c);
        let mut tape = Tape {
            inputs: Vec::new(),
            pre_activations: Vec::new(),
            output: Vec::new(),
        };
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let w = &self.values[layer.weight_offset..layer.bias_offset];
            let b = &self.values[layer.bias_offset..layer.bias_offset + layer.fan_out];
            let z: Vec<f64> = w
                .chunks_exact(layer.fan_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            if record {
                tape.inputs.push(std::mem::replace(&mut h, next));
                tape.pre_activations.push(z);
            } else {
                h = next;
            }
        }
        tape.output = h;
        tape
    }

    /// Evaluates `v(x, t, c)`.
    pub fn forward_velocity(&self, x: &[f64], t: f64, c: usize) -> Result<Point> {
        self.check_inputs(x, t, c)?;
        Ok(self.run(x, t, c, false).output)
    }

    /// Gradient of `<upstream, v(x, t, c)>` with respect to the parameters.
    pub fn backward(&self, x: &[f64], t: f64, c: usize, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros(self.len());
        self.backward_accumulate(x, t, c, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but adds into an existing buffer.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        t: f64,
        c: usize,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_inputs(x, t, c)?;
        if upstream.len() != self.spec.input_dim {
            return Err(Error::Input(format!(
                "upstream has dimension {}, network output is {}",
                upstream.len(),
                self.spec.input_dim
            )));
        }
        if grads.len() != self.len() {
            return Err(Error::Input(format!(
                "gradient buffer has length {}, parameters have {}",
                grads.len(),
                self.len()
            )));
        }
        let tape = self.run(x, t, c, true);
        self.pullback(&tape, c, upstream, &mut grads.values);
        Ok(())
    }

    /// Forward pass followed immediately by the VJP for `upstream_of(v)`.
    /// Returns the velocity that was differentiated.
    pub(crate) fn forward_backward<F>(
        &self,
        x: &[f64],
        t: f64,
        c: usize,
        grads: &mut [f64],
        upstream_of: F,
    ) -> Result<Point>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        self.check_inputs(x, t, c)?;
        let tape = self.run(x, t, c, true);
        let upstream = upstream_of(&tape.output)?;
        self.pullback(&tape, c, &upstream, grads);
        Ok(tape.output)
    }

    fn pullback(&self, tape: &Tape, c: usize, upstream: &[f64], grads: &mut [f64]) {
        let last = self.layout.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layout.layers.iter().enumerate().rev() {
            if l != last {
                for (d, &z) in delta.iter_mut().zip(&tape.pre_activations[l]) {
                    *d *= self.spec.activation.derivative(z);
                }
            }
            let input = &tape.inputs[l];
            let (before_bias, bias_and_rest) = grads.split_at_mut(layer.bias_offset);
            let gw = &mut before_bias[layer.weight_offset..];
            for (j, &d) in delta.iter().enumerate() {
                bias_and_rest[j] += d;
                if d != 0.0 {
                    let row = &mut gw[j * layer.fan_in..(j + 1) * layer.fan_in];
                    for (g, &h) in row.iter_mut().zip(input) {
                        *g += d * h;
                    }
                }
            }
            let w = &self.values[layer.weight_offset..layer.bias_offset];
            let mut upstream_input = vec![0.0; layer.fan_in];
            for (j, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &w[j * layer.fan_in..(j + 1) * layer.fan_in];
                    for (u, &wv) in upstream_input.iter_mut().zip(row) {
                        *u += d * wv;
                    }
                }
            }
            delta = upstream_input;
        }
        let cond_start = self.spec.input_dim + self.spec.time_embed_dim;
        let row = c * self.spec.cond_embed_dim;
        for (k, d) in delta[cond_start..].iter().enumerate() {
            grads[row + k] += d;
        }
    }
}

impl VelocityField for ParamVector {
    fn dim(&self) -> usize {
        self.spec.input_dim
    }

    fn num_conditions(&self) -> usize {
        self.spec.num_conditions
    }

    fn velocity(&self, x: &[f64], t: f64, c: usize) -> Result<Point> {
        self.forward_velocity(x, t, c)
    }
}
