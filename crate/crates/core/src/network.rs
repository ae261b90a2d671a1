//! Fully-connected networks, Adam, and stepped learning-rate schedules.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Tanh,
    LeakyRelu(f64),
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => f.write_str("tanh"),
            Activation::LeakyRelu(a) => write!(f, "leaky_relu:{a}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "tanh" => Ok(Activation::Tanh),
            None if s == "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            Some(("leaky_relu", a)) => a
                .parse()
                .map(Activation::LeakyRelu)
                .map_err(|_| Error::Parse(format!("bad leaky_relu slope {a:?}"))),
            _ => Err(Error::Parse(format!("unknown activation {s:?}"))),
        }
    }
}

/// Layer widths from input to output; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::structure("an MLP needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::structure("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn to_line(&self) -> String {
        let widths: Vec<String> = self.layer_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "mlp widths={} activation={} seed={}",
            widths.join(","),
            self.activation,
            self.init_seed
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let mut fields = line.split_whitespace();
        if fields.next() != Some("mlp") {
            return Err(Error::Parse(format!("expected an mlp header, got {line:?}")));
        }
        let (mut widths, mut activation, mut seed) = (None, None, None);
        for field in fields {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field {field:?}")))?;
            match k {
                "widths" => {
                    widths = Some(
                        v.split(',')
                            .map(|w| w.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| Error::Parse(format!("widths: {e}")))?,
                    )
                }
                "activation" => activation = Some(v.parse()?),
                "seed" => {
                    seed = Some(v.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?)
                }
                _ => return Err(Error::Parse(format!("unknown header field {k:?}"))),
            }
        }
        match (widths, activation, seed) {
            (Some(w), Some(a), Some(s)) => Ok(MlpSpec::new(w, a, s)),
            _ => Err(Error::Parse(format!("incomplete mlp header {line:?}"))),
        }
    }
}

/// Weights are stored `out x in`, biases have length `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    spec: MlpSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl MlpNetwork {
    /// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn from_parameters(
        spec: MlpSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::structure(format!(
                "expected {layers} weight/bias pairs, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for (k, w) in spec.layer_widths.windows(2).enumerate() {
            if weights[k].dim() != (w[1], w[0]) || biases[k].len() != w[1] {
                return Err(Error::structure(format!("layer {k} has the wrong shape")));
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Parameters in layer order: each weight matrix row-major, then its bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flat_params_into(&mut out);
        out
    }

    /// Appends [`MlpNetwork::flat_params`] to `out`.
    pub fn flat_params_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            match w.as_slice() {
                Some(ws) => out.extend_from_slice(ws),
                None => out.extend(w.iter()),
            }
            out.extend(b.iter());
        }
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::structure(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (wp, tail) = rest.split_at(w.len());
            match w.as_slice_mut() {
                Some(ws) => ws.copy_from_slice(wp),
                None => w.iter_mut().zip(wp).for_each(|(dst, &src)| *dst = src),
            }
            let (bp, tail) = tail.split_at(b.len());
            b.iter_mut().zip(bp).for_each(|(dst, &src)| *dst = src);
            rest = tail;
        }
        Ok(())
    }

    /// Zeroes the final layer so the network computes the zero function.
    pub fn zero_output_layer(&mut self) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Registers the parameters as differentiable leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, true)
    }

    /// Registers the parameters as constants (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut layers = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            // Stored transposed so a batch `B x in` multiplies directly.
            let wt = w.t().to_owned();
            let bias = b.clone().insert_axis(Axis(0));
            let (wn, bn) = if trainable {
                (g.variable(wt), g.variable(bias))
            } else {
                (g.constant(wt), g.constant(bias))
            };
            layers.push((wn, bn));
        }
        BoundMlp {
            layers,
            activation: self.spec.activation,
            input_width: self.spec.input_width(),
        }
    }

    /// Forward pass of a single input vector; returns the `1 x 1` output node.
    pub fn forward(&self, g: &mut Graph, x: &[f64]) -> Result<NodeId> {
        if x.len() != self.spec.input_width() {
            return Err(Error::structure(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.spec.input_width()
            )));
        }
        let bound = self.bind(g);
        let input = g.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
        bound.forward(g, input)
    }

    /// Plain evaluation on a batch of rows; returns the first output column.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(inputs.clone());
        let y = bound.forward(&mut g, x)?;
        Ok(g.value(y).column(0).to_owned())
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        let inputs = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        Ok(self.predict(&inputs)?[0])
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", self.spec.to_line())?;
        for v in self.flat_params() {
            writeln!(out, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let spec = MlpSpec::from_line(header.trim())?;
        let mut net = MlpNetwork::init(spec)?;
        let mut params = Vec::with_capacity(net.param_count());
        let mut line = String::new();
        while params.len() < net.param_count() {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Parse(format!(
                    "checkpoint ended after {} of {} values",
                    params.len(),
                    net.param_count()
                )));
            }
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad parameter value {:?}", line.trim())))?;
            params.push(v);
        }
        net.set_flat_params(&params)?;
        Ok(net)
    }
}

/// Network parameters registered on one graph; may be applied any number
/// of times with shared parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(NodeId, NodeId)>,
    activation: Activation,
    input_width: usize,
}

impl BoundMlp {
    /// `x` is `B x in`; returns `B x out`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if g.shape(x).1 != self.input_width {
            return Err(Error::structure(format!(
                "input has {} columns, network expects {}",
                g.shape(x).1,
                self.input_width
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if k < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::LeakyRelu(alpha) => g.leaky_relu(h, alpha)?,
                };
            }
        }
        Ok(h)
    }

    /// Gradient in the same order as [`MlpNetwork::flat_params`].
    pub fn gradient(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        self.gradient_into(g, &mut out);
        out
    }

    pub fn gradient_into(&self, g: &Graph, out: &mut Vec<f64>) {
        for &(w, b) in &self.layers {
            // Leaf holds W^T; transpose back to the stored out x in layout.
            let (rows, cols) = g.shape(w);
            match g.grad_ref(w) {
                Some(gw) => {
                    out.reserve(rows * cols);
                    for o in 0..cols {
                        out.extend(gw.column(o).iter());
                    }
                }
                None => out.resize(out.len() + rows * cols, 0.0),
            }
            match g.grad_ref(b) {
                Some(gb) => out.extend(gb.iter()),
                None => out.resize(out.len() + g.shape(b).1, 0.0),
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::structure(format!(
                "adam state has {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::domain(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter {i} (step {})",
                self.t + 1
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut MlpNetwork, grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut params = net.flat_params();
    state.step(&mut params, grads, lr)?;
    net.set_flat_params(&params)
}

/// Piecewise-constant learning rate: `(rate, epochs)` stages in order.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    stages: Vec<(f64, usize)>,
}

impl LrSchedule {
    pub fn new(stages: Vec<(f64, usize)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::structure("a schedule needs at least one stage"));
        }
        if let Some(&(lr, _)) = stages.iter().find(|(lr, _)| !(*lr > 0.0) || !lr.is_finite()) {
            return Err(Error::domain(format!("learning rates must be positive, got {lr}")));
        }
        Ok(Self { stages })
    }

    pub fn constant(lr: f64, epochs: usize) -> Result<Self> {
        Self::new(vec![(lr, epochs)])
    }

    /// `1e-3, 1e-4, 1e-5, 1e-6`, each held for `epochs_per_stage` epochs.
    pub fn annealed(epochs_per_stage: usize) -> Self {
        Self {
            stages: [1e-3, 1e-4, 1e-5, 1e-6]
                .iter()
                .map(|&lr| (lr, epochs_per_stage))
                .collect(),
        }
    }

    pub fn stages(&self) -> &[(f64, usize)] {
        &self.stages
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn rate_at(&self, epoch: usize) -> Result<f64> {
        let mut end = 0;
        for &(lr, n) in &self.stages {
            end += n;
            if epoch < end {
                return Ok(lr);
            }
        }
        Err(Error::structure(format!(
            "epoch {epoch} is outside a schedule of {} epochs",
            self.total_epochs()
        )))
    }
}

impl fmt::Display for LrSchedule {
    /// `lr:epochs` stages joined by commas, e.g. `0.001:50,0.0001:50`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|(lr, n)| format!("{lr:e}:{n}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let stages = s
            .split(',')
            .map(|part| {
                let (lr, n) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("schedule stage {part:?} is not lr:epochs")))?;
                let lr: f64 = lr
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad learning rate {lr:?}")))?;
                let n: usize = n
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad epoch count {n:?}")))?;
                Ok((lr, n))
            })
            .collect::<Result<Vec<_>>>()?;
        LrSchedule::new(stages)
    }
}

/// Deterministic child seed for stream `stream` of `base` (splitmix64 mix).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spec(widths: &[usize], seed: u64) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), Activation::Tanh, seed)
    }

    #[test]
    fn init_zero_biases_and_shapes() {
        let net = MlpNetwork::init(spec(&[1, 4, 1], 7)).unwrap();
        assert!(net.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));

        let net = MlpNetwork::init(MlpSpec::new(
            vec![2, 256, 256, 1],
            Activation::LeakyRelu(0.2),
            0,
        ))
        .unwrap();
        let shapes: Vec<_> = net.weights().iter().map(|w| w.dim()).collect();
        assert_eq!(shapes, vec![(256, 2), (256, 256), (1, 256)]);
        assert_eq!(net.param_count(), 66_817);
        assert_eq!(net.flat_params().len(), 66_817);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpNetwork::init(spec(&[3, 16, 1], 11)).unwrap();
        let b = MlpNetwork::init(spec(&[3, 16, 1], 11)).unwrap();
        let pa = a.flat_params();
        assert!(pa
            .iter()
            .zip(b.flat_params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.weights()[0].iter().all(|w| w.abs() <= bound));
        let c = MlpNetwork::init(spec(&[3, 16, 1], 12)).unwrap();
        assert_ne!(pa, c.flat_params());
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpNetwork::init(spec(&[], 0)).is_err());
        assert!(MlpNetwork::init(spec(&[2], 0)).is_err());
        assert!(MlpNetwork::init(spec(&[2, 0, 1], 0)).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = MlpNetwork::init(spec(&[2, 8, 1], 3)).unwrap();
        net.set_flat_params(&vec![0.0; net.param_count()]).unwrap();
        let mut g = Graph::new();
        let y = net.forward(&mut g, &[0.4, -1.3]).unwrap();
        assert_eq!(g.scalar(y), 0.0);
    }

    #[test]
    fn one_wide_tanh_at_origin() {
        let net = MlpNetwork::from_parameters(
            spec(&[1, 1, 1], 0),
            vec![array![[1.0]], array![[1.0]]],
            vec![array![0.0], array![0.0]],
        )
        .unwrap();
        assert_eq!(net.predict_one(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let net = MlpNetwork::init(spec(&[2, 4, 1], 0)).unwrap();
        let mut g = Graph::new();
        assert!(matches!(net.forward(&mut g, &[1.0]), Err(Error::Structure(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = MlpNetwork::init(spec(&[3, 10, 10, 1], 5)).unwrap();
        let x = [0.3, -0.7, 0.9];
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let xin = g.variable(Array2::from_shape_vec((1, 3), x.to_vec()).unwrap());
        let y = bound.forward(&mut g, xin).unwrap();
        g.backward(y).unwrap();
        let analytic = g.grad(xin);
        let fd = finite_difference_gradient(|p| net.predict_one(p), &x, 1e-5).unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-4 * f.abs().max(1e-3), "{a} vs {f}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = MlpNetwork::init(MlpSpec::new(vec![2, 6, 5, 1], Activation::LeakyRelu(0.2), 9))
            .unwrap();
        let x = array![[0.3, -0.4], [0.8, 0.1], [-0.5, -0.9]];
        let y = array![[1.0], [-0.5], [0.25]];
        let loss = |n: &MlpNetwork| -> Result<f64> {
            let p = n.predict(&x)?;
            Ok(p.iter().zip(y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0)
        };
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let xi = g.constant(x.clone());
        let yi = g.constant(y.clone());
        let out = bound.forward(&mut g, xi).unwrap();
        let d = g.sub(out, yi).unwrap();
        let sq = g.square(d).unwrap();
        let l = g.mean(sq).unwrap();
        g.backward(l).unwrap();
        let analytic = bound.gradient(&g);
        let p0 = net.flat_params();
        let mut probe = net.clone();
        let fd = finite_difference_gradient(
            |p| {
                probe.set_flat_params(p)?;
                loss(&probe)
            },
            &p0,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-4 * f.abs().max(1e-2), "{a} vs {f}");
        }
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut net = MlpNetwork::init(spec(&[1, 4, 1], 7)).unwrap();
        let before = net.flat_params();
        let mut st = AdamState::new(net.param_count());
        adam_step(&mut net, &vec![0.0; before.len()], &mut st, 1e-3).unwrap();
        assert_eq!(net.flat_params(), before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1 * 0.5, v = 0.001 * 0.25; bias-corrected m_hat = 0.5,
        // v_hat = 0.25, so the step is lr * 0.5 / (0.5 + 1e-8).
        let mut st = AdamState::new(1);
        let mut p = [1.0];
        st.step(&mut p, &[0.5], 1e-3).unwrap();
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0] - 1.0, -1e-3, epsilon = 1e-10);
        assert!(st.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_nan() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        assert!(matches!(
            st.step(&mut p, &[f64::NAN, 0.0], 1e-3),
            Err(Error::Training(_))
        ));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_lookup() {
        let s = LrSchedule::annealed(50);
        assert_eq!(s.total_epochs(), 200);
        assert_eq!(s.rate_at(0).unwrap(), 1e-3);
        assert_eq!(s.rate_at(50).unwrap(), 1e-4);
        assert_eq!(s.rate_at(199).unwrap(), 1e-6);
        assert!(s.rate_at(200).is_err());
        let rates: Vec<f64> = (0..200).map(|e| s.rate_at(e).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn schedule_text_round_trip() {
        let s = LrSchedule::annealed(500);
        let back: LrSchedule = s.to_string().parse().unwrap();
        assert_eq!(back, s);
        assert!("0.001".parse::<LrSchedule>().is_err());
        assert!("-1:10".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = MlpNetwork::init(MlpSpec::new(vec![2, 5, 1], Activation::LeakyRelu(0.2), 4))
            .unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = MlpNetwork::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        let truncated = &buf[..buf.len() / 2];
        assert!(MlpNetwork::read_checkpoint(&mut &truncated[..]).is_err());
    }

    #[test]
    fn adam_fits_a_toy_quadratic() {
        // Loss must never go up over 200 full-batch steps in at least 95 of 100 seeds.
        let xs: Vec<f64> = (0..10).map(|i| -1.0 + 2.0 * i as f64 / 9.0).collect();
        let x = Array2::from_shape_vec((10, 1), xs.clone()).unwrap();
        let y = Array2::from_shape_vec((10, 1), xs.iter().map(|v| v * v).collect()).unwrap();
        let mut monotone = 0;
        for seed in 0..100 {
            let mut net = MlpNetwork::init(spec(&[1, 8, 1], seed)).unwrap();
            let mut st = AdamState::new(net.param_count());
            let mut last = f64::INFINITY;
            let mut ok = true;
            for _ in 0..200 {
                let mut g = Graph::new();
                let b = net.bind(&mut g);
                let xi = g.constant(x.clone());
                let yi = g.constant(y.clone());
                let out = b.forward(&mut g, xi).unwrap();
                let d = g.sub(out, yi).unwrap();
                let sq = g.square(d).unwrap();
                let l = g.mean(sq).unwrap();
                let lv = g.scalar(l);
                if lv > last {
                    ok = false;
                }
                last = lv;
                g.backward(l).unwrap();
                adam_step(&mut net, &b.gradient(&g), &mut st, 1e-3).unwrap();
            }
            monotone += ok as usize;
        }
        assert!(monotone >= 95, "monotone in {monotone}/100 seeds");
    }
}
