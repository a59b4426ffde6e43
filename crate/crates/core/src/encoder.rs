//! ReLU multilayer perceptron used as the embedding function.
//!
//! Forward passes return a [`ForwardTrace`] that [`MlpEncoder::backward`]
//! consumes. Every parameter mutation gives the encoder a fresh state id, so
//! a trace recorded before an update is rejected instead of silently
//! producing gradients for the wrong weights.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

static NEXT_STATE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_state_id() -> u64 {
    NEXT_STATE_ID.fetch_add(1, Ordering::Relaxed)
}

pub const CHECKPOINT_MAGIC: &str = "lsdml-encoder v1";

/// Affine layer `y = x · W + b` with `W` stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weights)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<LayerGradient>,
}

impl ParameterGradients {
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.is_finite() && g.bias.iter().all(|b| b.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, g| {
            g.bias
                .iter()
                .fold(m.max(g.weights.max_abs()), |m, b| m.max(b.abs()))
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    state_id: u64,
    /// Input of each layer (the batch itself for layer 0, ReLU output afterwards).
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of every hidden layer.
    hidden_pre: Vec<Matrix>,
    output_shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layers: Vec<Layer>,
    state_id: u64,
}

impl MlpEncoder {
    /// Glorot-uniform weights and zero biases. `dims` is `[input, hidden.., output]`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::OutOfRange(format!(
                "encoder dims {dims:?}: need at least input and output, all nonzero"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(fan_in, fan_out, |_, _| {
                        rng.uniform_range(-limit, limit)
                    }),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            state_id: fresh_state_id(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::OutOfRange("encoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Dimension {
                    context: "layer bias",
                    expected: l.fan_out(),
                    actual: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::Dimension {
                    context: "layer chain",
                    expected: layers[i - 1].fan_out(),
                    actual: l.fan_in(),
                });
            }
        }
        Ok(Self {
            layers,
            state_id: fresh_state_id(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access. Invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.state_id = fresh_state_id();
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "encoder input width",
                expected: self.input_dim(),
                actual: inputs.cols(),
            });
        }
        Ok(())
    }

    /// Embeddings only, no trace.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let last = self.layers.len() - 1;
        let mut x = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.apply(&x)?;
            if l < last {
                relu_in_place(&mut x);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.check_input(inputs)?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut x = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = layer.apply(&x)?;
            layer_inputs.push(x);
            if l < last {
                let mut act = pre.clone();
                relu_in_place(&mut act);
                hidden_pre.push(pre);
                x = act;
            } else {
                x = pre;
            }
        }
        let trace = ForwardTrace {
            state_id: self.state_id,
            layer_inputs,
            hidden_pre,
            output_shape: x.shape(),
        };
        Ok((x, trace))
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embeddings: &Matrix,
    ) -> Result<ParameterGradients> {
        if trace.state_id != self.state_id {
            return Err(Error::StaleTrace(
                "encoder parameters changed since forward",
            ));
        }
        if trace.layer_inputs.len() != self.layers.len() {
            return Err(Error::StaleTrace("layer count differs"));
        }
        if grad_embeddings.shape() != trace.output_shape {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: trace.output_shape.0 * trace.output_shape.1,
                actual: grad_embeddings.rows() * grad_embeddings.cols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_embeddings.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &trace.layer_inputs[l];
            let weights = input.t_matmul(&delta)?;
            let mut bias = vec![0.0; delta.cols()];
            for row in delta.iter_rows() {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            grads.push(LayerGradient { weights, bias });
            if l > 0 {
                let mut prev = delta.matmul_t(&self.layers[l].weights)?;
                let pre = &trace.hidden_pre[l - 1];
                for (d, &p) in prev.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = prev;
            }
        }
        grads.reverse();
        Ok(ParameterGradients { layers: grads })
    }

    pub fn snapshot(&self, epoch: usize) -> TeacherSnapshot {
        TeacherSnapshot {
            encoder: self.clone(),
            epoch,
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "layers {}", self.layers.len())?;
        for layer in &self.layers {
            writeln!(w, "layer {} {}", layer.fan_in(), layer.fan_out())?;
            for row in layer.weights.iter_rows() {
                write_floats(&mut w, row)?;
            }
            write_floats(&mut w, &layer.bias)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R, origin: &Path) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };

        let (n, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(parse_err(n, format!("bad header {magic:?}")));
        }
        let (n, count) = next("layer count")?;
        let count: usize = count
            .strip_prefix("layers ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| parse_err(n, "expected `layers <count>`".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, head) = next("layer header")?;
            let dims: Vec<usize> = head
                .strip_prefix("layer ")
                .map(|r| {
                    r.split_whitespace()
                        .filter_map(|t| t.parse().ok())
                        .collect()
                })
                .unwrap_or_default();
            let [fan_in, fan_out] = dims[..] else {
                return Err(parse_err(n, "expected `layer <fan_in> <fan_out>`".into()));
            };
            let mut data = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in {
                let (n, row) = next("weight row")?;
                data.extend(parse_floats(&row, fan_out, n, origin)?);
            }
            let (n, row) = next("bias row")?;
            let bias = parse_floats(&row, fan_out, n, origin)?;
            layers.push(Layer {
                weights: Matrix::from_vec(fan_in, fan_out, data)?,
                bias,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f), path)
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

fn write_floats<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for x in xs {
        if !first {
            w.write_all(b" ")?;
        }
        first = false;
        write!(w, "{x:e}")?;
    }
    w.write_all(b"\n")
}

fn parse_floats(line: &str, expected: usize, n: usize, origin: &Path) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: n,
            msg: e.to_string(),
        })?;
    if vals.len() != expected {
        return Err(Error::Schema {
            path: origin.to_path_buf(),
            line: n,
            msg: format!("expected {expected} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Frozen copy of the student parameters, taken at the start of an epoch.
/// Only exposes inference.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    encoder: MlpEncoder,
    epoch: usize,
}

impl TeacherSnapshot {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.encoder.embed(inputs)
    }

    pub fn layers(&self) -> &[Layer] {
        self.encoder.layers()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay: `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Leaves the encoder untouched on error.
    pub fn step(&mut self, enc: &mut MlpEncoder, grads: &ParameterGradients) -> Result<()> {
        if grads.layers.len() != enc.layers.len() {
            return Err(Error::Dimension {
                context: "gradient layer count",
                expected: enc.layers.len(),
                actual: grads.layers.len(),
            });
        }
        for (l, g) in enc.layers.iter().zip(&grads.layers) {
            if l.weights.shape() != g.weights.shape() || l.bias.len() != g.bias.len() {
                return Err(Error::Dimension {
                    context: "gradient shape",
                    expected: l.weights.as_slice().len() + l.bias.len(),
                    actual: g.weights.as_slice().len() + g.bias.len(),
                });
            }
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite parameter gradient".into()));
        }
        if self.m.is_empty() {
            for l in &enc.layers {
                self.m.push(vec![0.0; l.weights.as_slice().len()]);
                self.m.push(vec![0.0; l.bias.len()]);
            }
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let layers = enc.layers_mut();
        let params = layers.iter_mut().zip(&grads.layers).flat_map(|(l, g)| {
            [
                (l.weights.as_mut_slice(), g.weights.as_slice()),
                (l.bias.as_mut_slice(), g.bias.as_slice()),
            ]
        });
        for ((theta, grad), (m, v)) in params.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..theta.len() {
                let g = grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[k]);
            }
        }
        Ok(())
    }
}
