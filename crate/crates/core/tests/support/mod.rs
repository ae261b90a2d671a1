//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use physaug::autodiff::{Graph, Op};
use physaug::nbody::{nbody_loss, simulate, NBodyLossWeights, NBodySimConfig, NBodyState};
use physaug::network::Activation;
use physaug::properties::{total_loss, NetworkShape, Paradigm, PropertyKind, PropertyModel};
use physaug::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// One evaluation of a scalar objective.
pub struct Eval {
    pub value: f64,
    /// Which side of every `abs` / `leaky_relu` kink each input lies on.
    pub branches: Vec<bool>,
    pub grad: Vec<f64>,
}

pub fn branches(g: &Graph) -> Vec<bool> {
    let mut out = Vec::new();
    for node in g.nodes() {
        if matches!(node.op(), Op::Abs | Op::LeakyRelu(_)) {
            out.extend(g.value(node.parents()[0]).iter().map(|&v| v > 0.0));
        }
    }
    out
}

pub enum Outcome {
    /// Relative error `|a - n| / max(|a|, |n|)` over the whole gradient.
    Checked(f64),
    /// A probe crossed a kink; the instance must be redrawn.
    Kink,
}

/// Compares the analytic gradient of `eval` at `p` with central differences.
pub fn fd_check<F>(p: &[f64], h: f64, mut eval: F) -> Result<Outcome>
where
    F: FnMut(&[f64], bool) -> Result<Eval>,
{
    let base = eval(p, true)?;
    let mut probe = p.to_vec();
    let mut fd = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let plus = eval(&probe, false)?;
        probe[i] = p[i] - h;
        let minus = eval(&probe, false)?;
        probe[i] = p[i];
        if plus.branches != base.branches || minus.branches != base.branches {
            return Ok(Outcome::Kink);
        }
        fd.push((plus.value - minus.value) / (2.0 * h));
    }
    Ok(Outcome::Checked(relative_error(&base.grad, &fd)))
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Every op the tape supports, with argument shapes drawn per instance.
pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "tanh", "leaky_relu", "sin", "abs", "square", "sqrt",
    "scale", "sum", "mean", "dot", "matvec", "matmul", "transpose", "sum_rows", "concat_cols",
    "column", "gather_rows",
];

/// A random instance of one op: the op and its inputs.
pub struct OpInstance {
    pub op: Op,
    pub inputs: Vec<Array2<f64>>,
    pub weight_seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Broadcast-compatible partner shape for `(r, c)`.
fn partner(rng: &mut ChaCha8Rng, r: usize, c: usize) -> (usize, usize) {
    match rng.random_range(0..4) {
        0 => (1, 1),
        1 => (r, 1),
        2 => (1, c),
        _ => (r, c),
    }
}

pub fn draw_op(name: &str, rng: &mut ChaCha8Rng) -> OpInstance {
    let r = rng.random_range(1..5);
    let c = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let full = |rng: &mut ChaCha8Rng| uniform(rng, (r, c), -2.0, 2.0);
    let (op, inputs) = match name {
        "add" | "sub" | "mul" => {
            let b = partner(rng, r, c);
            let (a, b) = if rng.random_bool(0.5) { ((r, c), b) } else { (b, (r, c)) };
            let op = match name {
                "add" => Op::Add,
                "sub" => Op::Sub,
                _ => Op::Mul,
            };
            (op, vec![uniform(rng, a, -2.0, 2.0), uniform(rng, b, -2.0, 2.0)])
        }
        "div" => {
            let b = partner(rng, r, c);
            (Op::Div, vec![full(rng), away_from_zero(rng, b, 0.3, 2.0)])
        }
        "neg" => (Op::Neg, vec![full(rng)]),
        "tanh" => (Op::Tanh, vec![full(rng)]),
        "leaky_relu" => {
            let alpha = rng.random_range(0.0..0.5);
            (Op::LeakyRelu(alpha), vec![away_from_zero(rng, (r, c), 0.01, 2.0)])
        }
        "sin" => (Op::Sin, vec![uniform(rng, (r, c), -4.0, 4.0)]),
        "abs" => (Op::Abs, vec![away_from_zero(rng, (r, c), 0.01, 2.0)]),
        "square" => (Op::Square, vec![full(rng)]),
        "sqrt" => (Op::Sqrt, vec![uniform(rng, (r, c), 0.1, 3.0)]),
        "scale" => (Op::Scale(rng.random_range(-3.0..3.0)), vec![full(rng)]),
        "sum" => (Op::Sum, vec![full(rng)]),
        "mean" => (Op::Mean, vec![full(rng)]),
        "dot" => (Op::Dot, vec![full(rng), full(rng)]),
        "matvec" => (Op::MatVec, vec![full(rng), uniform(rng, (c, 1), -2.0, 2.0)]),
        "matmul" => (Op::MatMul, vec![full(rng), uniform(rng, (c, k), -2.0, 2.0)]),
        "transpose" => (Op::Transpose, vec![full(rng)]),
        "sum_rows" => (Op::SumRows, vec![full(rng)]),
        "concat_cols" => (Op::ConcatCols, vec![full(rng), uniform(rng, (r, k), -2.0, 2.0)]),
        "column" => (Op::Column(rng.random_range(0..c)), vec![full(rng)]),
        "gather_rows" => {
            let n = rng.random_range(1..7);
            let idx = (0..n).map(|_| rng.random_range(0..r)).collect();
            (Op::GatherRows(idx), vec![full(rng)])
        }
        other => panic!("unknown op {other}"),
    };
    OpInstance {
        op,
        inputs,
        weight_seed: rng.random(),
    }
}

/// Checks `sum(W * op(inputs))` for a fixed random `W`, differentiating with
/// respect to every input.
pub fn check_op(inst: &OpInstance, h: f64) -> Result<Outcome> {
    let shapes: Vec<(usize, usize)> = inst.inputs.iter().map(|a| a.dim()).collect();
    let p: Vec<f64> = inst.inputs.iter().flat_map(|a| a.iter().copied()).collect();
    fd_check(&p, h, |q, want_grad| {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &s in &shapes {
            let n = s.0 * s.1;
            let a = Array2::from_shape_vec(s, q[offset..offset + n].to_vec()).expect("shape");
            vars.push(g.variable(a));
            offset += n;
        }
        let out = g.apply(inst.op.clone(), &vars)?;
        let mut wrng = ChaCha8Rng::seed_from_u64(inst.weight_seed);
        let w = g.constant(uniform(&mut wrng, g.shape(out), -1.0, 1.0));
        let root = g.dot(out, w)?;
        let mut grad = Vec::new();
        if want_grad {
            g.backward(root)?;
            for &v in &vars {
                grad.extend(g.grad(v).iter().copied());
            }
        }
        Ok(Eval {
            value: g.scalar(root),
            branches: branches(&g),
            grad,
        })
    })
}

/// Small network shape used for full-model checks.
pub fn small_shape(kind: PropertyKind) -> NetworkShape {
    NetworkShape {
        hidden: vec![6, 6],
        activation: match kind {
            PropertyKind::TimeIndependence => Activation::Tanh,
            _ => Activation::LeakyRelu(0.2),
        },
    }
}

/// Every (task, paradigm) pair with a loss.
pub const MODEL_CASES: &[(PropertyKind, Paradigm)] = &[
    (PropertyKind::Separability, Paradigm::Pal),
    (PropertyKind::Separability, Paradigm::Pil),
    (PropertyKind::Rotation, Paradigm::Pal),
    (PropertyKind::Rotation, Paradigm::Pil),
    (PropertyKind::Positivity, Paradigm::Pal),
    (PropertyKind::TimeIndependence, Paradigm::Pal),
    (PropertyKind::TimeIndependence, Paradigm::Pil),
];

/// Reference target for the n-body loss checks.
pub struct NBodyTarget {
    pub init: NBodyState,
    pub final_state: NBodyState,
    pub config: NBodySimConfig,
}

impl NBodyTarget {
    pub fn reference() -> Self {
        let config = NBodySimConfig::reference();
        let init = physaug::nbody::reference_initial_state();
        let final_state = simulate(&config, &init).expect("reference rollout").last().clone();
        Self {
            init,
            final_state,
            config,
        }
    }
}

/// Checks the training loss of a freshly drawn small model with respect to
/// all of its parameters.
pub fn check_model(
    kind: PropertyKind,
    paradigm: Paradigm,
    seed: u64,
    target: &NBodyTarget,
    h: f64,
) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = rng.random_range(0.1..2.0);
    let mut model = PropertyModel::new(paradigm, kind, lambda, &small_shape(kind), rng.random())?;
    let p = model.flat_params();
    let penalty_seed: u64 = rng.random();
    let n = 8;
    let task = physaug::properties::PropertyTask::new(kind);
    let inputs = uniform(&mut rng, (n, kind.input_dim()), -1.0, 1.0);
    let labels: Array1<f64> = inputs.rows().into_iter().map(|x| task.truth(&x.to_vec())).collect();
    let weights = NBodyLossWeights::for_paradigm(paradigm);

    fd_check(&p, h, |q, want_grad| {
        model.set_flat_params(q)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let root = if kind == PropertyKind::TimeIndependence {
            let c = &target.config;
            nbody_loss(&mut g, &bound, &weights, &target.init, &target.final_state, c.n_steps, c.dt)?.total
        } else {
            let mut prng = ChaCha8Rng::seed_from_u64(penalty_seed);
            total_loss(&mut g, &bound, &inputs, &labels, lambda, &mut prng)?.total
        };
        let mut grad = Vec::new();
        if want_grad {
            g.backward(root)?;
            grad = bound.gradient(&g);
        }
        Ok(Eval {
            value: g.scalar(root),
            branches: branches(&g),
            grad,
        })
    })
}

/// Worst relative error over `instances` accepted draws; kinked draws are
/// replaced. Returns `(worst, redrawn)`.
pub fn worst_case<F>(instances: usize, seed: u64, mut check: F) -> Result<(f64, usize)>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Outcome>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut accepted, mut redrawn) = (0.0f64, 0, 0);
    while accepted < instances {
        match check(&mut rng)? {
            Outcome::Checked(e) => {
                worst = worst.max(e);
                accepted += 1;
            }
            Outcome::Kink => {
                redrawn += 1;
                assert!(redrawn <= 10 * instances, "too many kinked draws");
            }
        }
    }
    Ok((worst, redrawn))
}
