//! The four property tasks and the losses that enforce them.
//!
//! A penalized model is trained on `L = L1 + lambda * L2`, where `L1` is the
//! mean absolute prediction error. Under the discriminative route (PIL) a
//! single network is penalized by a finite-difference test of the property.
//! Under the generative route (PAL) the prediction is a property-satisfying
//! generator plus an unconstrained residual network, and `L2` is the mean
//! absolute residual output.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::{derive_seed, Activation, BoundMlp, MlpNetwork, MlpSpec};

/// Above this many points the separability penalty samples `n` random
/// pairs instead of enumerating all `n (n - 1) / 2`.
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PropertyKind {
    Separability,
    Rotation,
    Positivity,
    TimeIndependence,
}

impl PropertyKind {
    pub const ALL: [PropertyKind; 4] = [
        PropertyKind::Separability,
        PropertyKind::Rotation,
        PropertyKind::Positivity,
        PropertyKind::TimeIndependence,
    ];

    pub fn key(self) -> &'static str {
        match self {
            PropertyKind::Separability => "separability",
            PropertyKind::Rotation => "rotation",
            PropertyKind::Positivity => "positivity",
            PropertyKind::TimeIndependence => "time-independence",
        }
    }

    /// Number of network inputs (`r, t` for time independence).
    pub fn input_dim(self) -> usize {
        match self {
            PropertyKind::Positivity => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PropertyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PropertyKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::Parse(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Paradigm {
    Pil,
    Pal,
}

impl Paradigm {
    pub fn key(self) -> &'static str {
        match self {
            Paradigm::Pil => "pil",
            Paradigm::Pal => "pal",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pil" => Ok(Paradigm::Pil),
            "pal" => Ok(Paradigm::Pal),
            _ => Err(Error::Parse(format!("unknown paradigm {s:?}"))),
        }
    }
}

/// Ground truth `f0 = f_plus + f_minus` for one property.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropertyTask {
    pub kind: PropertyKind,
}

impl PropertyTask {
    pub fn new(kind: PropertyKind) -> Self {
        Self { kind }
    }

    pub fn input_dim(&self) -> usize {
        self.kind.input_dim()
    }

    pub fn truth(&self, x: &[f64]) -> f64 {
        self.satisfying_part(x) + self.violating_part(x)
    }

    /// `f_plus`, the component that has the property.
    pub fn satisfying_part(&self, x: &[f64]) -> f64 {
        match self.kind {
            PropertyKind::Separability => x[0] * x[0] + x[1] * x[1],
            PropertyKind::Rotation => 0.5 * (x[0] * x[0] + x[1] * x[1]),
            PropertyKind::Positivity => x[0].sin().sin(),
            PropertyKind::TimeIndependence => x[0] * x[0],
        }
    }

    /// `f_minus`, the residual that violates it.
    pub fn violating_part(&self, x: &[f64]) -> f64 {
        match self.kind {
            PropertyKind::Separability => x[0] * x[1],
            PropertyKind::Rotation => 0.32 * x[0],
            PropertyKind::Positivity | PropertyKind::TimeIndependence => 0.0,
        }
    }

    pub fn default_domain(&self) -> Domain {
        Domain::cube(self.input_dim(), -1.0, 1.0).expect("valid unit box")
    }
}

/// Axis-aligned sampling box.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    bounds: Vec<(f64, f64)>,
}

impl Domain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::structure("a domain needs at least one dimension"));
        }
        if let Some(&(lo, hi)) = bounds
            .iter()
            .find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(Error::structure(format!("degenerate interval [{lo}, {hi}]")));
        }
        Ok(Self { bounds })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi); dim])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// Regular grid with `per_axis` points per axis, endpoints included,
    /// first coordinate varying slowest.
    pub fn grid(&self, per_axis: usize) -> Array2<f64> {
        let axes: Vec<Vec<f64>> = self
            .bounds
            .iter()
            .map(|&(lo, hi)| {
                (0..per_axis)
                    .map(|i| {
                        if per_axis == 1 {
                            0.5 * (lo + hi)
                        } else {
                            lo + (hi - lo) * i as f64 / (per_axis - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let total = per_axis.pow(self.dim() as u32);
        let mut out = Array2::zeros((total, self.dim()));
        for (row, mut dst) in out.rows_mut().into_iter().enumerate() {
            let mut rem = row;
            for d in (0..self.dim()).rev() {
                dst[d] = axes[d][rem % per_axis];
                rem /= per_axis;
            }
        }
        out
    }
}

/// Noise-free supervised samples `labels[i] = f0(inputs[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Array1<f64>,
    pub seed: u64,
    pub domain: Domain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` as a new (unseeded) batch.
    pub fn select(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        (
            self.inputs.select(ndarray::Axis(0), idx),
            self.labels.select(ndarray::Axis(0), idx),
        )
    }
}

/// `n` i.i.d. uniform samples over `domain`, labelled by the task oracle.
pub fn generate_dataset(task: &PropertyTask, n: usize, seed: u64, domain: &Domain) -> Result<Dataset> {
    if task.kind == PropertyKind::TimeIndependence {
        return Err(Error::structure(
            "time-independence data comes from the n-body simulator",
        ));
    }
    if n < 2 {
        return Err(Error::structure(format!("need at least 2 samples, got {n}")));
    }
    if domain.dim() != task.input_dim() {
        return Err(Error::structure(format!(
            "domain has {} dimensions, task needs {}",
            domain.dim(),
            task.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = domain.dim();
    let mut inputs = Array2::zeros((n, dim));
    for mut row in inputs.rows_mut() {
        for (d, &(lo, hi)) in domain.bounds().iter().enumerate() {
            row[d] = rng.random_range(lo..hi);
        }
    }
    let labels = inputs
        .rows()
        .into_iter()
        .map(|r| task.truth(r.as_slice().expect("standard layout")))
        .collect();
    Ok(Dataset {
        inputs,
        labels,
        seed,
        domain: domain.clone(),
    })
}

/// Hidden widths and activation shared by every network of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetworkShape {
    pub fn for_task(kind: PropertyKind) -> Self {
        match kind {
            PropertyKind::TimeIndependence => Self {
                hidden: vec![200, 200],
                activation: Activation::Tanh,
            },
            _ => Self {
                hidden: vec![256, 256],
                activation: Activation::LeakyRelu(0.2),
            },
        }
    }

    fn spec(&self, inputs: usize, seed: u64) -> MlpSpec {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(inputs);
        widths.extend(&self.hidden);
        widths.push(1);
        MlpSpec::new(widths, self.activation, seed)
    }
}

/// Names and input widths of the networks of a (paradigm, task) pair.
fn layout(paradigm: Paradigm, kind: PropertyKind) -> Result<Vec<(&'static str, usize)>> {
    use PropertyKind::*;
    Ok(match (paradigm, kind) {
        (Paradigm::Pil, Positivity) => {
            return Err(Error::NotApplicable(
                "positivity has no known discriminator, so PIL cannot be built for it".into(),
            ))
        }
        (Paradigm::Pil, _) => vec![("f", kind.input_dim())],
        (Paradigm::Pal, Separability) => vec![("f1", 1), ("f2", 1), ("f12", 2)],
        (Paradigm::Pal, Rotation) => vec![("f1", 1), ("f2", 2)],
        (Paradigm::Pal, Positivity) => vec![("f1", 1), ("f2", 1)],
        (Paradigm::Pal, TimeIndependence) => vec![("f1", 1), ("f2", 2)],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyModel {
    pub paradigm: Paradigm,
    pub kind: PropertyKind,
    pub lambda: f64,
    networks: Vec<(String, MlpNetwork)>,
}

impl PropertyModel {
    pub fn new(
        paradigm: Paradigm,
        kind: PropertyKind,
        lambda: f64,
        shape: &NetworkShape,
        seed: u64,
    ) -> Result<Self> {
        let networks = layout(paradigm, kind)?
            .into_iter()
            .enumerate()
            .map(|(k, (name, inputs))| {
                let net = MlpNetwork::init(shape.spec(inputs, derive_seed(seed, k as u64)))?;
                Ok((name.to_string(), net))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_networks(paradigm, kind, lambda, networks)
    }

    pub fn from_networks(
        paradigm: Paradigm,
        kind: PropertyKind,
        lambda: f64,
        networks: Vec<(String, MlpNetwork)>,
    ) -> Result<Self> {
        let expected = layout(paradigm, kind)?;
        if networks.len() != expected.len() {
            return Err(Error::structure(format!(
                "{paradigm} {kind} needs {} networks, got {}",
                expected.len(),
                networks.len()
            )));
        }
        for ((name, inputs), (got_name, net)) in expected.iter().zip(&networks) {
            if name != got_name || net.spec().input_width() != *inputs || net.spec().output_width() != 1 {
                return Err(Error::structure(format!(
                    "network {got_name:?} does not fit slot {name:?} ({inputs} -> 1)"
                )));
            }
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::domain(format!("penalty coefficient must be >= 0, got {lambda}")));
        }
        Ok(Self {
            paradigm,
            kind,
            lambda,
            networks,
        })
    }

    pub fn networks(&self) -> &[(String, MlpNetwork)] {
        &self.networks
    }

    pub fn network(&self, name: &str) -> Option<&MlpNetwork> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn network_mut(&mut self, name: &str) -> Option<&mut MlpNetwork> {
        self.networks.iter_mut().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    pub fn param_count(&self) -> usize {
        self.networks.iter().map(|(_, n)| n.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, n) in &self.networks {
            n.flat_params_into(&mut out);
        }
        out
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
        for (_, net) in &mut self.networks {
            let (head, tail) = rest.split_at(net.param_count());
            net.set_flat_params(head)?;
            rest = tail;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, true)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        BoundModel {
            paradigm: self.paradigm,
            kind: self.kind,
            nets: self
                .networks
                .iter()
                .map(|(_, n)| if trainable { n.bind(g) } else { n.bind_frozen(g) })
                .collect(),
        }
    }

    fn eval_with(
        &self,
        inputs: &Array2<f64>,
        f: impl FnOnce(&BoundModel, &mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(inputs.clone());
        let y = f(&bound, &mut g, x)?;
        Ok(g.value(y).column(0).to_owned())
    }

    /// Full prediction on a batch of input rows.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array1<f64>> {
        self.eval_with(inputs, |b, g, x| b.predict(g, x))
    }

    /// PhyGen output on a batch (PAL only).
    pub fn phygen(&self, inputs: &Array2<f64>) -> Result<Array1<f64>> {
        self.eval_with(inputs, |b, g, x| b.phygen(g, x))
    }

    /// Blackbox output on a batch (PAL only).
    pub fn blackbox(&self, inputs: &Array2<f64>) -> Result<Array1<f64>> {
        self.eval_with(inputs, |b, g, x| b.blackbox(g, x))
    }

    /// PhyGen output at a single point.
    pub fn phygen_at(&self, x: &[f64]) -> Result<f64> {
        let inputs = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        Ok(self.phygen(&inputs)?[0])
    }

    /// `(L1, L2)` over a whole dataset with frozen parameters.
    pub fn evaluate_losses(&self, data: &Dataset, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let terms = total_loss(&mut g, &bound, &data.inputs, &data.labels, self.lambda, rng)?;
        Ok((g.scalar(terms.l1), g.scalar(terms.l2)))
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "model paradigm={} task={} lambda={:e} networks={}",
            self.paradigm,
            self.kind,
            self.lambda,
            self.networks.len()
        )?;
        for (name, net) in &self.networks {
            writeln!(out, "net {name}")?;
            net.write_checkpoint(out)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("model") {
            return Err(Error::Parse("expected a model header".into()));
        }
        let (mut paradigm, mut kind, mut lambda, mut count) = (None, None, None, None);
        for field in fields {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field {field:?}")))?;
            match k {
                "paradigm" => paradigm = Some(v.parse::<Paradigm>()?),
                "task" => kind = Some(v.parse::<PropertyKind>()?),
                "lambda" => {
                    lambda = Some(v.parse::<f64>().map_err(|_| Error::Parse(format!("lambda {v:?}")))?)
                }
                "networks" => {
                    count = Some(v.parse::<usize>().map_err(|_| Error::Parse(format!("networks {v:?}")))?)
                }
                _ => return Err(Error::Parse(format!("unknown header field {k:?}"))),
            }
        }
        let (Some(paradigm), Some(kind), Some(lambda), Some(count)) = (paradigm, kind, lambda, count)
        else {
            return Err(Error::Parse(format!("incomplete model header {:?}", header.trim())));
        };
        let mut networks = Vec::with_capacity(count);
        for _ in 0..count {
            let mut line = String::new();
            input.read_line(&mut line)?;
            let name = line
                .trim()
                .strip_prefix("net ")
                .ok_or_else(|| Error::Parse(format!("expected a net line, got {:?}", line.trim())))?
                .to_string();
            networks.push((name, MlpNetwork::read_checkpoint(input)?));
        }
        Self::from_networks(paradigm, kind, lambda, networks)
    }
}

/// A model whose parameters live on one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub paradigm: Paradigm,
    pub kind: PropertyKind,
    nets: Vec<BoundMlp>,
}

impl BoundModel {
    pub fn nets(&self) -> &[BoundMlp] {
        &self.nets
    }

    fn require_pal(&self, what: &str) -> Result<()> {
        if self.paradigm == Paradigm::Pal {
            Ok(())
        } else {
            Err(Error::structure(format!("{what} exists only for PAL models")))
        }
    }

    /// `B x 1` prediction: the single network for PIL, PhyGen + Blackbox for PAL.
    pub fn predict(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.paradigm {
            Paradigm::Pil => self.nets[0].forward(g, x),
            Paradigm::Pal => {
                let p = self.phygen(g, x)?;
                let b = self.blackbox(g, x)?;
                g.add(p, b)
            }
        }
    }

    /// The property-satisfying component.
    pub fn phygen(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.require_pal("PhyGen")?;
        match self.kind {
            PropertyKind::Separability => {
                let x1 = g.column(x, 0)?;
                let x2 = g.column(x, 1)?;
                let a = self.nets[0].forward(g, x1)?;
                let b = self.nets[1].forward(g, x2)?;
                g.add(a, b)
            }
            PropertyKind::Rotation => {
                let sq = g.square(x)?;
                let r2 = g.sum_rows(sq)?;
                let r = g.sqrt(r2)?;
                self.nets[0].forward(g, r)
            }
            PropertyKind::Positivity => {
                let inner = self.nets[0].forward(g, x)?;
                self.nets[0].forward(g, inner)
            }
            PropertyKind::TimeIndependence => {
                let r = g.column(x, 0)?;
                self.nets[0].forward(g, r)
            }
        }
    }

    /// The unconstrained residual component.
    pub fn blackbox(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.require_pal("Blackbox")?;
        self.nets.last().expect("PAL has a blackbox").forward(g, x)
    }

    /// Gradient over all networks, in [`PropertyModel::flat_params`] order.
    pub fn gradient(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        self.gradient_into(g, &mut out);
        out
    }

    /// Appends [`BoundModel::gradient`] to `out`.
    pub fn gradient_into(&self, g: &Graph, out: &mut Vec<f64>) {
        for net in &self.nets {
            net.gradient_into(g, out);
        }
    }
}

fn column_constant(g: &mut Graph, v: &Array1<f64>) -> NodeId {
    g.constant(v.clone().insert_axis(ndarray::Axis(1)))
}

/// Mean absolute error between a `B x 1` prediction and labels.
pub fn mae(g: &mut Graph, pred: NodeId, labels: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, labels)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `L1`: mean absolute error of the model prediction.
pub fn prediction_loss(
    g: &mut Graph,
    model: &BoundModel,
    inputs: &Array2<f64>,
    labels: &Array1<f64>,
) -> Result<NodeId> {
    if inputs.nrows() == 0 || inputs.nrows() != labels.len() {
        return Err(Error::structure(format!(
            "{} input rows against {} labels",
            inputs.nrows(),
            labels.len()
        )));
    }
    let x = g.constant(inputs.clone());
    let y = column_constant(g, labels);
    let pred = model.predict(g, x)?;
    mae(g, pred, y)
}

/// Index pairs `(i, j)` for the separability stencil: every `j > i` when
/// `n <= EXHAUSTIVE_PAIR_LIMIT`, otherwise `n` uniformly drawn pairs.
pub fn separability_pairs(n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::structure("the separability penalty needs at least 2 points"));
    }
    if n <= EXHAUSTIVE_PAIR_LIMIT {
        return Ok((0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect());
    }
    Ok((0..n)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect())
}

/// Mean over `pairs` of `|f(a_i, b_i) + f(a_j, b_j) - f(a_i, b_j) - f(a_j, b_i)|`.
pub fn pil_penalty_separability(
    g: &mut Graph,
    net: &BoundMlp,
    inputs: &Array2<f64>,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    if inputs.ncols() != 2 {
        return Err(Error::structure("separability needs two input columns"));
    }
    if pairs.is_empty() {
        return Err(Error::structure("no pairs to evaluate"));
    }
    let mut cross = Array2::zeros((2 * pairs.len(), 2));
    for (k, &(i, j)) in pairs.iter().enumerate() {
        cross[[2 * k, 0]] = inputs[[i, 0]];
        cross[[2 * k, 1]] = inputs[[j, 1]];
        cross[[2 * k + 1, 0]] = inputs[[j, 0]];
        cross[[2 * k + 1, 1]] = inputs[[i, 1]];
    }
    let x = g.constant(inputs.clone());
    let fx = net.forward(g, x)?;
    let xc = g.constant(cross);
    let fc = net.forward(g, xc)?;

    let is: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let js: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let evens: Vec<usize> = (0..pairs.len()).map(|k| 2 * k).collect();
    let odds: Vec<usize> = (0..pairs.len()).map(|k| 2 * k + 1).collect();
    let fi = g.gather_rows(fx, &is)?;
    let fj = g.gather_rows(fx, &js)?;
    let fij = g.gather_rows(fc, &evens)?;
    let fji = g.gather_rows(fc, &odds)?;
    let diag = g.add(fi, fj)?;
    let off = g.add(fij, fji)?;
    let stencil = g.sub(diag, off)?;
    let a = g.abs(stencil)?;
    g.mean(a)
}

/// Rotates each row of a 2-column array by the matching angle.
pub fn rotate_points(inputs: &Array2<f64>, angles: &[f64]) -> Result<Array2<f64>> {
    if inputs.ncols() != 2 || angles.len() != inputs.nrows() {
        return Err(Error::structure(format!(
            "need one angle per 2-d point, got {} angles for {:?}",
            angles.len(),
            inputs.dim()
        )));
    }
    let mut out = Array2::zeros(inputs.dim());
    for (k, &alpha) in angles.iter().enumerate() {
        let (s, c) = alpha.sin_cos();
        let (x, y) = (inputs[[k, 0]], inputs[[k, 1]]);
        out[[k, 0]] = c * x - s * y;
        out[[k, 1]] = s * x + c * y;
    }
    Ok(out)
}

/// One uniform angle in `[0, 2 pi)` per point.
pub fn sample_angles(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
}

/// Mean of `|f(x) - f(R(alpha) x)|` over points and their angles.
pub fn pil_penalty_rotation(
    g: &mut Graph,
    net: &BoundMlp,
    inputs: &Array2<f64>,
    angles: &[f64],
) -> Result<NodeId> {
    let rotated = rotate_points(inputs, angles)?;
    let x = g.constant(inputs.clone());
    let xr = g.constant(rotated);
    let fx = net.forward(g, x)?;
    let fr = net.forward(g, xr)?;
    mae(g, fx, fr)
}

/// Mean absolute Blackbox output.
pub fn pal_blackbox_penalty(g: &mut Graph, model: &BoundModel, inputs: &Array2<f64>) -> Result<NodeId> {
    model.require_pal("the Blackbox penalty")?;
    let x = g.constant(inputs.clone());
    let b = model.blackbox(g, x)?;
    let a = g.abs(b)?;
    g.mean(a)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: NodeId,
    pub l2: NodeId,
    pub total: NodeId,
}

/// `L1 + lambda * L2` with the paradigm's penalty. With `lambda = 0` the
/// penalty is still evaluated for reporting but is left out of `total`.
pub fn total_loss(
    g: &mut Graph,
    model: &BoundModel,
    inputs: &Array2<f64>,
    labels: &Array1<f64>,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    if model.kind == PropertyKind::TimeIndependence {
        return Err(Error::structure("time-independence uses the n-body loss"));
    }
    let (l1, l2) = match (model.paradigm, model.kind) {
        (Paradigm::Pal, _) => {
            if inputs.nrows() == 0 || inputs.nrows() != labels.len() {
                return Err(Error::structure(format!(
                    "{} input rows against {} labels",
                    inputs.nrows(),
                    labels.len()
                )));
            }
            let x = g.constant(inputs.clone());
            let y = column_constant(g, labels);
            let p = model.phygen(g, x)?;
            let b = model.blackbox(g, x)?;
            let pred = g.add(p, b)?;
            let l1 = mae(g, pred, y)?;
            let a = g.abs(b)?;
            (l1, g.mean(a)?)
        }
        (Paradigm::Pil, PropertyKind::Separability) => {
            let l1 = prediction_loss(g, model, inputs, labels)?;
            let pairs = separability_pairs(inputs.nrows(), rng)?;
            (l1, pil_penalty_separability(g, &model.nets[0], inputs, &pairs)?)
        }
        (Paradigm::Pil, PropertyKind::Rotation) => {
            let l1 = prediction_loss(g, model, inputs, labels)?;
            let angles = sample_angles(inputs.nrows(), rng);
            (l1, pil_penalty_rotation(g, &model.nets[0], inputs, &angles)?)
        }
        (Paradigm::Pil, kind) => {
            return Err(Error::NotApplicable(format!("no PIL penalty for {kind}")))
        }
    };
    let total = if lambda == 0.0 {
        l1
    } else {
        let weighted = g.scale(l2, lambda)?;
        g.add(l1, weighted)?
    };
    Ok(LossTerms { l1, l2, total })
}
