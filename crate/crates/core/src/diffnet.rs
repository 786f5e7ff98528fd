//! Minimal dense feed-forward network with hand-written backprop.
//!
//! The network maps a design vector to a single scalar. Hidden layers use a
//! rectifier, the output layer is affine. Parameters live in one flat
//! buffer (per layer: row-major `out x in` weights, then `out` biases) so
//! that gradients and optimizer state share the same layout.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const CHECKPOINT_MAGIC: &str = "rankmbo-densenet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`; the rectifier's subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
    activation: Activation,
}

/// Dense network `R^d -> R`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Activations saved by [`DenseNet::forward_tape`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[0]` is the input batch, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    /// Network outputs for the taped batch.
    pub fn outputs(&self) -> Vec<f64> {
        self.activations
            .last()
            .expect("tape holds at least the input")
            .column(0)
            .to_vec()
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

impl DenseNet {
    /// Builds a network with the given hidden widths and He-uniform weights
    /// drawn from a seeded generator. Biases start at zero.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        if dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut net = DenseNet {
            params: vec![0.0; count_params(&dims)],
            dims,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<LayerSpec> = net.layer_specs().collect();
        for spec in specs {
            let bound = (6.0 / spec.inputs as f64).sqrt();
            let n = spec.inputs * spec.outputs;
            for w in &mut net.params[spec.weight_offset..spec.weight_offset + n] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit `(weights, bias)` pairs, where weights
    /// are `out x in`. The last layer must have a single output.
    pub fn from_layers(layers: Vec<(Array2<f64>, Vec<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut dims = vec![layers[0].0.ncols()];
        for (w, b) in &layers {
            if w.ncols() != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch {
                    expected: *dims.last().unwrap(),
                    actual: w.ncols(),
                });
            }
            if b.len() != w.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w.nrows(),
                    actual: b.len(),
                });
            }
            dims.push(w.nrows());
        }
        if *dims.last().unwrap() != 1 {
            return Err(Error::invalid("output layer must have exactly one unit"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut params = Vec::with_capacity(count_params(&dims));
        for (w, b) in &layers {
            params.extend(w.iter().copied());
            params.extend_from_slice(b);
        }
        let net = DenseNet { dims, params };
        net.check_finite()?;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Layer widths from input to output, e.g. `[d, 64, 64, 1]`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `true` for every weight entry, `false` for biases. Used to restrict
    /// weight decay to weights.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for spec in self.layer_specs() {
            let n = spec.inputs * spec.outputs;
            mask[spec.weight_offset..spec.weight_offset + n].fill(true);
        }
        mask
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layer_weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let spec = self.spec(layer);
        ArrayView2::from_shape(
            (spec.outputs, spec.inputs),
            &self.params[spec.weight_offset..spec.weight_offset + spec.outputs * spec.inputs],
        )
        .expect("layer layout is consistent")
    }

    pub fn layer_bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let spec = self.spec(layer);
        ArrayView1::from(&self.params[spec.bias_offset..spec.bias_offset + spec.outputs])
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteGradient(
                "network parameters contain non-finite values".into(),
            ))
        }
    }

    /// Returns the network computing `a * self(x) + b`.
    pub fn affine_output(&self, a: f64, b: f64) -> DenseNet {
        let mut out = self.clone();
        let spec = self.spec(self.num_layers() - 1);
        for w in &mut out.params[spec.weight_offset..spec.weight_offset + spec.inputs] {
            *w *= a;
        }
        let bias = &mut out.params[spec.bias_offset];
        *bias = a * *bias + b;
        out
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x.len())?;
        let mut act = x.to_vec();
        for spec in self.layer_specs() {
            let w = &self.params[spec.weight_offset..spec.weight_offset + spec.inputs * spec.outputs];
            let b = &self.params[spec.bias_offset..spec.bias_offset + spec.outputs];
            act = (0..spec.outputs)
                .map(|o| {
                    let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
                    let z = b[o] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
                    spec.activation.apply(z)
                })
                .collect();
        }
        Ok(act[0])
    }

    /// Forward pass over a batch of designs (rows).
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.forward_tape(inputs)?.outputs())
    }

    /// Forward pass that keeps every intermediate for [`DenseNet::backward`].
    pub fn forward_tape(&self, inputs: ArrayView2<'_, f64>) -> Result<Tape> {
        self.check_input(inputs.ncols())?;
        if inputs.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        let mut pre = Vec::with_capacity(self.num_layers());
        activations.push(inputs.to_owned());
        for (l, spec) in self.layer_specs().enumerate() {
            let mut z = activations[l].dot(&self.layer_weights(l).t());
            z += &self.layer_bias(l);
            let a = z.mapv(|v| spec.activation.apply(v));
            pre.push(z);
            activations.push(a);
        }
        Ok(Tape { activations, pre })
    }

    /// Parameter gradient of `sum_i output_grads[i] * f(x_i)` from a taped
    /// forward pass. The result uses the same flat layout as [`Self::params`].
    pub fn backward(&self, tape: &Tape, output_grads: &[f64]) -> Result<Vec<f64>> {
        if output_grads.len() != tape.batch_size() {
            return Err(Error::DimensionMismatch {
                expected: tape.batch_size(),
                actual: output_grads.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = Array2::from_shape_vec((output_grads.len(), 1), output_grads.to_vec()).expect("column shape");
        for l in (0..self.num_layers()).rev() {
            let spec = self.spec(l);
            let gw = delta.t().dot(&tape.activations[l]);
            let gb = delta.sum_axis(Axis(0));
            let n = spec.inputs * spec.outputs;
            grads[spec.weight_offset..spec.weight_offset + n]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            grads[spec.bias_offset..spec.bias_offset + spec.outputs]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if l > 0 {
                let prev = self.spec(l - 1);
                let mut back = delta.dot(&self.layer_weights(l));
                back.zip_mut_with(&tape.pre[l - 1], |d, &z| *d *= prev.activation.derivative(z));
                delta = back;
            }
        }
        Ok(grads)
    }

    /// Gradient of `sum_i output_grads[i] * f(inputs_i)` with respect to the
    /// parameters.
    pub fn grad_params(&self, inputs: ArrayView2<'_, f64>, output_grads: &[f64]) -> Result<Vec<f64>> {
        if output_grads.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: output_grads.len(),
            });
        }
        let tape = self.forward_tape(inputs)?;
        self.backward(&tape, output_grads)
    }

    /// Gradient of the output with respect to a single input design.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        // forward, keeping pre-activations
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        let mut act = x.to_vec();
        for spec in self.layer_specs() {
            let w = &self.params[spec.weight_offset..spec.weight_offset + spec.inputs * spec.outputs];
            let b = &self.params[spec.bias_offset..spec.bias_offset + spec.outputs];
            let z: Vec<f64> = (0..spec.outputs)
                .map(|o| {
                    let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
                    b[o] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            act = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
        }
        let mut delta = vec![1.0];
        for l in (0..self.num_layers()).rev() {
            let spec = self.spec(l);
            let w = &self.params[spec.weight_offset..spec.weight_offset + spec.inputs * spec.outputs];
            let mut back = vec![0.0; spec.inputs];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[o * spec.inputs..(o + 1) * spec.inputs];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            if l > 0 {
                let act = self.spec(l - 1).activation;
                for (b, &z) in back.iter_mut().zip(&pre[l - 1]) {
                    *b *= act.derivative(z);
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    /// Serializes to the versioned text checkpoint format:
    ///
    /// ```text
    /// rankmbo-densenet 1
    /// dims d h1 ... 1
    /// w <row of layer 0 weights>     (one line per output unit)
    /// b <layer 0 biases>
    /// ...
    /// ```
    ///
    /// Floats use Rust's shortest round-trip formatting, so a reload is exact.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        s.push_str("dims");
        for d in &self.dims {
            write!(s, " {d}").unwrap();
        }
        s.push('\n');
        for l in 0..self.num_layers() {
            for row in self.layer_weights(l).rows() {
                s.push('w');
                for v in row {
                    write!(s, " {v}").unwrap();
                }
                s.push('\n');
            }
            s.push('b');
            for v in self.layer_bias(l) {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        Self::parse_checkpoint(text).map_err(|msg| Error::Format {
            path: "<checkpoint>".into(),
            msg,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    fn parse_checkpoint(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty checkpoint")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err("missing checkpoint magic".into());
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or("missing checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let dims_line = lines.next().ok_or("missing dims line")?;
        let mut parts = dims_line.split_whitespace();
        if parts.next() != Some("dims") {
            return Err("expected dims line".into());
        }
        let dims: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| format!("bad dimension {p:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if dims.len() < 2 {
            return Err("need at least input and output dims".into());
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            let mut w = Array2::zeros((outputs, inputs));
            for o in 0..outputs {
                let row = parse_row(lines.next(), 'w', inputs)?;
                w.row_mut(o).assign(&Array1::from(row));
            }
            let b = parse_row(lines.next(), 'b', outputs)?;
            layers.push((w, b));
        }
        DenseNet::from_layers(layers).map_err(|e| e.to_string())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }

    fn spec(&self, layer: usize) -> LayerSpec {
        self.layer_specs().nth(layer).expect("layer index in range")
    }

    fn layer_specs(&self) -> impl Iterator<Item = LayerSpec> + '_ {
        let last = self.dims.len() - 2;
        let mut offset = 0;
        self.dims.windows(2).enumerate().map(move |(l, pair)| {
            let (inputs, outputs) = (pair[0], pair[1]);
            let spec = LayerSpec {
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
                activation: if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            };
            offset += inputs * outputs + outputs;
            spec
        })
    }
}

fn count_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

fn parse_row(line: Option<&str>, tag: char, len: usize) -> std::result::Result<Vec<f64>, String> {
    let line = line.ok_or_else(|| format!("truncated checkpoint, expected '{tag}' row"))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag.encode_utf8(&mut [0; 4])) {
        return Err(format!("expected '{tag}' row, got {line:?}"));
    }
    let row: Vec<f64> = parts
        .map(|p| p.parse().map_err(|_| format!("bad number {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if row.len() != len {
        return Err(format!("'{tag}' row has {} values, expected {len}", row.len()));
    }
    Ok(row)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient, applied only where the decay mask is set.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam moments and step counter for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    decay_mask: Option<Vec<bool>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            decay_mask: None,
        }
    }

    /// Restricts weight decay to entries where `mask` is true.
    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.m.len(), "decay mask length");
        self.decay_mask = Some(mask);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step: `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("gradient entry {i}")));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let decays = self.decay_mask.as_ref().is_none_or(|m| m[i]);
            if decays && weight_decay != 0.0 {
                params[i] -= lr * weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear(w: &[f64], b: f64) -> DenseNet {
        DenseNet::from_layers(vec![(
            Array2::from_shape_vec((1, w.len()), w.to_vec()).unwrap(),
            vec![b],
        )])
        .unwrap()
    }

    /// Plain matrix-multiply forward pass, independent of the flat layout.
    fn oracle_forward(layers: &[(Array2<f64>, Vec<f64>)], x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = vec![0.0; w.nrows()];
            for o in 0..w.nrows() {
                z[o] = b[o];
                for i in 0..w.ncols() {
                    z[o] += w[[o, i]] * a[i];
                }
            }
            if l + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a[0]
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::from_layers(vec![
            (Array2::zeros((4, 3)), vec![0.0; 4]),
            (Array2::zeros((1, 4)), vec![0.0]),
        ])
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), 0.0);
    }

    #[test]
    fn affine_layer() {
        let net = linear(&[2.0, 3.0], 1.0);
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(net.grad_input(&[0.3, -7.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(net.grad_input(&[100.0, 4.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn constant_net_has_zero_input_gradient() {
        let net = DenseNet::from_layers(vec![
            (Array2::zeros((5, 2)), vec![0.5; 5]),
            (Array2::zeros((1, 5)), vec![3.0]),
        ])
        .unwrap();
        assert_eq!(net.grad_input(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_matmul_oracle() {
        let net = DenseNet::new(4, &[6, 5], 7).unwrap();
        let layers: Vec<_> = (0..net.num_layers())
            .map(|l| (net.layer_weights(l).to_owned(), net.layer_bias(l).to_vec()))
            .collect();
        let x = [0.5, 0.5, 0.5, 0.5];
        let expected = oracle_forward(&layers, &x);
        assert!((net.forward(&x).unwrap() - expected).abs() < 1e-12);
        let batch = array![[0.5, 0.5, 0.5, 0.5], [1.0, -1.0, 2.0, 0.0]];
        let out = net.forward_batch(batch.view()).unwrap();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[1] - oracle_forward(&layers, &[1.0, -1.0, 2.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = DenseNet::new(3, &[4], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(net.grad_input(&[1.0, 2.0]).is_err());
        let batch = Array2::zeros((2, 3));
        assert!(net.grad_params(batch.view(), &[1.0]).is_err());
    }

    #[test]
    fn linear_parameter_gradient() {
        let net = linear(&[2.0, 3.0], 1.0);
        let x = array![[0.7, -1.5]];
        let g = net.grad_params(x.view(), &[1.0]).unwrap();
        assert_eq!(g, vec![0.7, -1.5, 1.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = DenseNet::new(3, &[8, 8], 1).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let g = net.grad_params(x.view(), &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_params_is_linear_in_output_grads() {
        let net = DenseNet::new(3, &[8], 2).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let g1 = net.grad_params(x.view(), &[1.0, 0.0]).unwrap();
        let g2 = net.grad_params(x.view(), &[0.0, 1.0]).unwrap();
        let g = net.grad_params(x.view(), &[2.0, -3.0]).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - (2.0 * g1[i] - 3.0 * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = DenseNet::new(5, &[16, 16], 3).unwrap();
        let x = [0.1, -0.4, 2.0, 0.0, 1.3];
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn affine_output_scales_prediction() {
        let net = DenseNet::new(3, &[8, 4], 11).unwrap();
        let shifted = net.affine_output(3.0, -5.0);
        let x = [0.2, 0.9, -1.1];
        let expected = 3.0 * net.forward(&x).unwrap() - 5.0;
        assert!((shifted.forward(&x).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = DenseNet::new(3, &[7, 5], 99).unwrap();
        let text = net.to_checkpoint_string();
        assert!(text.starts_with("rankmbo-densenet 1\ndims 3 7 5 1\n"));
        let back = DenseNet::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(DenseNet::from_checkpoint_str("").is_err());
        assert!(DenseNet::from_checkpoint_str("rankmbo-densenet 2\ndims 1 1\nw 1\nb 0\n").is_err());
        assert!(DenseNet::from_checkpoint_str("rankmbo-densenet 1\ndims 2 1\nw 1\nb 0\n").is_err());
        assert!(DenseNet::from_checkpoint_str("rankmbo-densenet 1\ndims 1 1\nw 1\n").is_err());
    }

    #[test]
    fn weight_mask_excludes_biases() {
        let net = DenseNet::new(2, &[3], 0).unwrap();
        let mask = net.weight_mask();
        // layer 0: 6 weights + 3 biases, layer 1: 3 weights + 1 bias
        let expected = [vec![true; 6], vec![false; 3], vec![true; 3], vec![false; 1]].concat();
        assert_eq!(mask, expected);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[4.0, -0.25]).unwrap();
        assert!((p[0] + 0.01 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.01 * 0.25 / (0.25 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_match_recurrence() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: 0.0,
        };
        let mut adam = AdamState::new(cfg, 1);
        let mut p = vec![1.0];
        adam.step(&mut p, &[2.0]).unwrap();
        adam.step(&mut p, &[-1.0]).unwrap();

        // hand-evaluated recurrence
        let m1 = 0.1 * 2.0;
        let v1 = 0.001 * 4.0;
        let p1 = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.001_f64).sqrt() + eps);
        let m2 = 0.9 * m1 - 0.1;
        let v2 = 0.999 * v1 + 0.001 * 1.0;
        let p2 = p1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001_f64)).sqrt() + eps);
        assert!((p[0] - p2).abs() < 1e-12, "{} vs {}", p[0], p2);
    }

    #[test]
    fn adam_decay_respects_mask() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, 2).with_decay_mask(vec![true, false]);
        let mut p = vec![2.0, 2.0];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            adam.step(&mut p, &[1.0, f64::NAN]),
            Err(Error::NonFiniteGradient(_))
        ));
        assert!(adam.step(&mut p, &[1.0]).is_err());
    }
}
