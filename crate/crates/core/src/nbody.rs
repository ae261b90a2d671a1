//! Planar N-body dynamics with a scalar pairwise force law.
//!
//! Body `i` pushes body `j` with `f(r_ij) (x_i - x_j) / r_ij`, all masses
//! are 1, and time is advanced with explicit Euler:
//! `z[l + 1] = z[l] + F(z[l]) dt` on the stacked state
//! `z = [x_1 .. x_N, v_1 .. v_N]`.
//!
//! [`simulate`] is the plain-`f64` reference integrator. [`learned_rollout`]
//! runs the same scheme on the autodiff tape with the force magnitude
//! supplied by a [`PairForce`], so endpoint losses can be differentiated
//! through all steps.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::network::BoundMlp;
use crate::properties::{mae, BoundModel, Paradigm, PropertyKind};

pub type Vec2 = [f64; 2];

pub const TRAJECTORY_CSV_HEADER: &str = "step,t,body,px,py,vx,vy";

/// Scalar force magnitude as a function of separation.
#[derive(Clone, Copy)]
pub enum ForceLaw {
    /// `coefficient * r^exponent`
    Power { coefficient: f64, exponent: f64 },
    Custom(fn(f64) -> f64),
}

impl ForceLaw {
    /// `f(r) = r^2`
    pub fn square() -> Self {
        ForceLaw::Power {
            coefficient: 1.0,
            exponent: 2.0,
        }
    }

    pub fn zero() -> Self {
        ForceLaw::Power {
            coefficient: 0.0,
            exponent: 0.0,
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            ForceLaw::Power {
                coefficient,
                exponent,
            } => {
                if coefficient == 0.0 {
                    0.0
                } else if exponent == 2.0 {
                    coefficient * r * r
                } else {
                    coefficient * r.powf(exponent)
                }
            }
            ForceLaw::Custom(f) => f(r),
        }
    }
}

impl PartialEq for ForceLaw {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                ForceLaw::Power {
                    coefficient: a,
                    exponent: p,
                },
                ForceLaw::Power {
                    coefficient: b,
                    exponent: q,
                },
            ) => a == b && p == q,
            _ => false,
        }
    }
}

impl fmt::Display for ForceLaw {
    /// `square`, `zero`, or `power:<coefficient>:<exponent>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            l if l == ForceLaw::square() => f.write_str("square"),
            ForceLaw::Power { coefficient, .. } if coefficient == 0.0 => f.write_str("zero"),
            ForceLaw::Power {
                coefficient,
                exponent,
            } => write!(f, "power:{coefficient}:{exponent}"),
            ForceLaw::Custom(_) => f.write_str("custom"),
        }
    }
}

impl std::str::FromStr for ForceLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ForceLaw::square()),
            "zero" => Ok(ForceLaw::zero()),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                let num = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad force law {s:?}")))
                };
                match parts.as_slice() {
                    ["power", c, p] => Ok(ForceLaw::Power {
                        coefficient: num(c)?,
                        exponent: num(p)?,
                    }),
                    _ => Err(Error::Parse(format!("unknown force law {s:?}"))),
                }
            }
        }
    }
}

impl fmt::Debug for ForceLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForceLaw::Power {
                coefficient,
                exponent,
            } => write!(f, "{coefficient} * r^{exponent}"),
            ForceLaw::Custom(_) => f.write_str("custom"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBodyState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub time: f64,
}

impl NBodyState {
    pub fn new(positions: Vec<Vec2>, velocities: Vec<Vec2>, time: f64) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::structure(format!(
                "{} positions but {} velocities",
                positions.len(),
                velocities.len()
            )));
        }
        let finite = positions
            .iter()
            .chain(&velocities)
            .all(|v| v[0].is_finite() && v[1].is_finite())
            && time.is_finite();
        if !finite {
            return Err(Error::domain("state components must be finite"));
        }
        Ok(Self {
            positions,
            velocities,
            time,
        })
    }

    pub fn n_bodies(&self) -> usize {
        self.positions.len()
    }

    /// `[x_1 .. x_N, v_1 .. v_N]` flattened to `4N` numbers.
    pub fn to_z(&self) -> Vec<f64> {
        self.positions
            .iter()
            .chain(&self.velocities)
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn from_z(z: &[f64], time: f64) -> Result<Self> {
        if z.len() % 4 != 0 {
            return Err(Error::structure(format!("state vector of length {}", z.len())));
        }
        let n = z.len() / 4;
        let pairs: Vec<Vec2> = z.chunks(2).map(|c| [c[0], c[1]]).collect();
        Self::new(pairs[..n].to_vec(), pairs[n..].to_vec(), time)
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.velocities
            .iter()
            .fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]])
    }

    pub fn center_of_mass(&self) -> Vec2 {
        let n = self.n_bodies() as f64;
        let s = self
            .positions
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    fn positions_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_bodies(), 2), |(i, k)| self.positions[i][k])
    }

    fn velocities_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_bodies(), 2), |(i, k)| self.velocities[i][k])
    }
}

#[derive(Clone, Debug)]
pub struct NBodySimConfig {
    pub n_bodies: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub force_law: ForceLaw,
    pub mass: f64,
}

impl NBodySimConfig {
    /// Five unit-mass bodies, `f(r) = r^2`, 50 steps of `dt = 0.02`.
    pub fn reference() -> Self {
        Self {
            n_bodies: 5,
            dt: 0.02,
            n_steps: 50,
            force_law: ForceLaw::square(),
            mass: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::domain(format!("dt must be positive, got {}", self.dt)));
        }
        if self.mass != 1.0 {
            return Err(Error::domain(format!("bodies have unit mass, got {}", self.mass)));
        }
        if self.n_bodies < 2 {
            return Err(Error::structure("need at least two bodies"));
        }
        Ok(())
    }

    pub fn t_final(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// Initial condition of the reference five-body experiment.
pub fn reference_initial_state() -> NBodyState {
    NBodyState {
        positions: vec![
            [1.62, -0.61],
            [-0.53, -1.07],
            [0.87, -2.30],
            [1.74, -0.76],
            [0.32, -0.25],
        ],
        velocities: vec![
            [2.92, -4.12],
            [-0.64, -0.77],
            [2.27, -2.20],
            [-0.34, -1.76],
            [0.08, 1.17],
        ],
        time: 0.0,
    }
}

/// Unordered body pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn body_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn pair_force(xi: Vec2, xj: Vec2, f: &ForceLaw) -> Option<Vec2> {
    let d = [xi[0] - xj[0], xi[1] - xj[1]];
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if r == 0.0 {
        return None;
    }
    let s = f.eval(r) / r;
    Some([s * d[0], s * d[1]])
}

/// Force on body `j` exerted by body `i`.
pub fn pairwise_force(xi: Vec2, xj: Vec2, f: &ForceLaw) -> Result<Vec2> {
    pair_force(xi, xj, f).ok_or_else(|| Error::domain("coincident particles have no pair direction"))
}

fn accelerations(state: &NBodyState, f: &ForceLaw, step: usize) -> Result<Vec<Vec2>> {
    let n = state.n_bodies();
    let mut acc = vec![[0.0; 2]; n];
    for (i, j) in body_pairs(n) {
        let fij = pair_force(state.positions[i], state.positions[j], f)
            .ok_or(Error::Singularity { step, i, j })?;
        // Equal and opposite: +f_ij on j, -f_ij on i.
        acc[j][0] += fij[0];
        acc[j][1] += fij[1];
        acc[i][0] -= fij[0];
        acc[i][1] -= fij[1];
    }
    Ok(acc)
}

/// `dz/dt` in the stacked layout of [`NBodyState::to_z`].
pub fn dynamics_rhs(state: &NBodyState, f: &ForceLaw) -> Result<Vec<f64>> {
    if state.n_bodies() < 2 {
        return Err(Error::structure("need at least two bodies"));
    }
    let acc = accelerations(state, f, 0)?;
    Ok(state
        .velocities
        .iter()
        .chain(&acc)
        .flat_map(|v| v.iter().copied())
        .collect())
}

fn euler_step(state: &NBodyState, f: &ForceLaw, dt: f64, step: usize) -> Result<NBodyState> {
    let acc = accelerations(state, f, step)?;
    let positions = state
        .positions
        .iter()
        .zip(&state.velocities)
        .map(|(x, v)| [x[0] + dt * v[0], x[1] + dt * v[1]])
        .collect();
    let velocities = state
        .velocities
        .iter()
        .zip(&acc)
        .map(|(v, a)| [v[0] + dt * a[0], v[1] + dt * a[1]])
        .collect();
    Ok(NBodyState {
        positions,
        velocities,
        time: (step + 1) as f64 * dt,
    })
}

#[derive(Clone, Debug)]
pub struct NBodyTrajectory {
    pub states: Vec<NBodyState>,
    pub config: NBodySimConfig,
}

impl NBodyTrajectory {
    pub fn initial(&self) -> &NBodyState {
        &self.states[0]
    }

    pub fn last(&self) -> &NBodyState {
        self.states.last().expect("trajectory has the initial state")
    }

    /// Smallest and largest pair separation over every state.
    pub fn distance_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for s in &self.states {
            for (i, j) in body_pairs(s.n_bodies()) {
                let (a, b) = (s.positions[i], s.positions[j]);
                let r = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        (lo, hi)
    }

    /// Mean over steps after the initial one of the mean absolute position
    /// error against `other`.
    pub fn position_mae(&self, other: &NBodyTrajectory) -> Result<f64> {
        if self.states.len() != other.states.len() {
            return Err(Error::structure(format!(
                "trajectories have {} and {} states",
                self.states.len(),
                other.states.len()
            )));
        }
        let per_step: Vec<f64> = self
            .states
            .iter()
            .zip(&other.states)
            .skip(1)
            .map(|(a, b)| {
                let n = a.n_bodies() as f64 * 2.0;
                a.positions
                    .iter()
                    .zip(&b.positions)
                    .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs())
                    .sum::<f64>()
                    / n
            })
            .collect();
        if per_step.is_empty() {
            return Ok(0.0);
        }
        Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
    }

    /// One row per (step, body), 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
        for (step, s) in self.states.iter().enumerate() {
            for (body, (p, v)) in s.positions.iter().zip(&s.velocities).enumerate() {
                writeln!(
                    out,
                    "{step},{:.16e},{body},{:.16e},{:.16e},{:.16e},{:.16e}",
                    s.time, p[0], p[1], v[0], v[1]
                )?;
            }
        }
        Ok(())
    }
}

/// Parses a trajectory CSV back into states.
pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Vec<NBodyState>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != TRAJECTORY_CSV_HEADER {
        return Err(Error::Parse("missing trajectory header".into()));
    }
    let mut states: Vec<NBodyState> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Parse(format!("row {} has {} columns", n + 1, cols.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Parse(format!("row {}: bad integer {s:?}", n + 1)))
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}: bad number {s:?}", n + 1)))
        };
        let (step, t, body) = (int(cols[0])?, num(cols[1])?, int(cols[2])?);
        let p = [num(cols[3])?, num(cols[4])?];
        let v = [num(cols[5])?, num(cols[6])?];
        if step == states.len() {
            states.push(NBodyState {
                positions: Vec::new(),
                velocities: Vec::new(),
                time: t,
            });
        }
        let s = states
            .get_mut(step)
            .filter(|s| s.positions.len() == body)
            .ok_or_else(|| Error::Parse(format!("row {}: out-of-order step/body", n + 1)))?;
        s.positions.push(p);
        s.velocities.push(v);
    }
    Ok(states)
}

/// Forward-Euler rollout of `config.n_steps` steps from `init`.
pub fn simulate(config: &NBodySimConfig, init: &NBodyState) -> Result<NBodyTrajectory> {
    config.validate()?;
    if init.n_bodies() != config.n_bodies {
        return Err(Error::structure(format!(
            "config has {} bodies, initial state {}",
            config.n_bodies,
            init.n_bodies()
        )));
    }
    let mut states = Vec::with_capacity(config.n_steps + 1);
    let mut first = init.clone();
    first.time = 0.0;
    states.push(first);
    for step in 0..config.n_steps {
        let next = euler_step(&states[step], &config.force_law, config.dt, step)?;
        states.push(next);
    }
    Ok(NBodyTrajectory {
        states,
        config: config.clone(),
    })
}

/// Force magnitude for a column of pair separations at one time.
pub struct ForceEval {
    pub magnitude: NodeId,
    /// Time-dependent residual (PAL Blackbox output), when the force has one.
    pub residual: Option<NodeId>,
}

pub trait PairForce {
    /// `r` is a `K x 1` column of separations; returns `K x 1` magnitudes.
    fn magnitude(&self, g: &mut Graph, r: NodeId, t: f64) -> Result<ForceEval>;
}

fn time_column(g: &mut Graph, r: NodeId, t: f64) -> Result<NodeId> {
    let rows = g.shape(r).0;
    let tc = g.constant(Array2::from_elem((rows, 1), t));
    g.concat_cols(r, tc)
}

impl PairForce for BoundModel {
    fn magnitude(&self, g: &mut Graph, r: NodeId, t: f64) -> Result<ForceEval> {
        if self.kind != PropertyKind::TimeIndependence {
            return Err(Error::structure(format!(
                "a {} model does not parameterize a pair force",
                self.kind
            )));
        }
        let rt = time_column(g, r, t)?;
        match self.paradigm {
            Paradigm::Pil => Ok(ForceEval {
                magnitude: self.nets()[0].forward(g, rt)?,
                residual: None,
            }),
            Paradigm::Pal => {
                let base = self.nets()[0].forward(g, r)?;
                let residual = self.nets()[1].forward(g, rt)?;
                Ok(ForceEval {
                    magnitude: g.add(base, residual)?,
                    residual: Some(residual),
                })
            }
        }
    }
}

/// Exact `r^2` law, optionally plus a learned residual `f2(r, t)`.
pub struct SquareLaw {
    pub residual: Option<BoundMlp>,
}

impl PairForce for SquareLaw {
    fn magnitude(&self, g: &mut Graph, r: NodeId, t: f64) -> Result<ForceEval> {
        let base = g.square(r)?;
        match &self.residual {
            None => Ok(ForceEval {
                magnitude: base,
                residual: None,
            }),
            Some(net) => {
                let rt = time_column(g, r, t)?;
                let res = net.forward(g, rt)?;
                Ok(ForceEval {
                    magnitude: g.add(base, res)?,
                    residual: Some(res),
                })
            }
        }
    }
}

/// Tape record of a differentiable rollout.
#[derive(Clone, Debug)]
pub struct LearnedRollout {
    pub dt: f64,
    pub pairs: Vec<(usize, usize)>,
    /// `N x 2` positions, one per state (`n_steps + 1`).
    pub positions: Vec<NodeId>,
    pub velocities: Vec<NodeId>,
    /// `K x 1` separations used at each step (`n_steps`).
    pub distances: Vec<NodeId>,
    pub magnitudes: Vec<NodeId>,
    pub residuals: Vec<NodeId>,
}

impl LearnedRollout {
    pub fn n_steps(&self) -> usize {
        self.distances.len()
    }

    pub fn state(&self, g: &Graph, step: usize) -> NBodyState {
        let p = g.value(self.positions[step]);
        let v = g.value(self.velocities[step]);
        NBodyState {
            positions: p.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            velocities: v.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
            time: step as f64 * self.dt,
        }
    }

    pub fn trajectory(&self, g: &Graph, config: &NBodySimConfig) -> NBodyTrajectory {
        NBodyTrajectory {
            states: (0..self.positions.len()).map(|l| self.state(g, l)).collect(),
            config: config.clone(),
        }
    }
}

/// Euler rollout on the tape, with the force magnitude at step `l`
/// evaluated at time `l * dt`.
pub fn learned_rollout(
    g: &mut Graph,
    force: &impl PairForce,
    init: &NBodyState,
    n_steps: usize,
    dt: f64,
) -> Result<LearnedRollout> {
    let n = init.n_bodies();
    if n < 2 {
        return Err(Error::structure("need at least two bodies"));
    }
    if !(dt > 0.0) {
        return Err(Error::domain(format!("dt must be positive, got {dt}")));
    }
    let pairs = body_pairs(n);
    // Row k of `sel` maps positions to x_i - x_j for pair k; `-sel^T`
    // scatters pair forces back as +F on j and -F on i.
    let mut sel = Array2::zeros((pairs.len(), n));
    for (k, &(i, j)) in pairs.iter().enumerate() {
        sel[[k, i]] = 1.0;
        sel[[k, j]] = -1.0;
    }
    let scatter = sel.t().mapv(|v: f64| -v);
    let sel = g.constant(sel);
    let scatter = g.constant(scatter);

    let mut pos = g.constant(init.positions_array());
    let mut vel = g.constant(init.velocities_array());
    let mut out = LearnedRollout {
        dt,
        pairs: pairs.clone(),
        positions: vec![pos],
        velocities: vec![vel],
        distances: Vec::with_capacity(n_steps),
        magnitudes: Vec::with_capacity(n_steps),
        residuals: Vec::new(),
    };

    for step in 0..n_steps {
        let t = step as f64 * dt;
        let diff = g.matmul(sel, pos)?;
        let sq = g.square(diff)?;
        let r2 = g.sum_rows(sq)?;
        if let Some(k) = g.value(r2).iter().position(|&v| v == 0.0) {
            let (i, j) = pairs[k];
            return Err(Error::Singularity { step, i, j });
        }
        let r = g.sqrt(r2)?;
        let eval = force.magnitude(g, r, t)?;
        let per_r = g.div(eval.magnitude, r)?;
        let fvec = g.mul(diff, per_r)?;
        let acc = g.matmul(scatter, fvec)?;

        let dx = g.scale(vel, dt)?;
        let dv = g.scale(acc, dt)?;
        let next_pos = g.add(pos, dx)?;
        let next_vel = g.add(vel, dv)?;
        pos = next_pos;
        vel = next_vel;

        out.positions.push(pos);
        out.velocities.push(vel);
        out.distances.push(r);
        out.magnitudes.push(eval.magnitude);
        if let Some(res) = eval.residual {
            out.residuals.push(res);
        }
    }
    Ok(out)
}

/// Norm used by the adjacent-block time penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimePenaltyNorm {
    Mae,
    Mse,
}

impl fmt::Display for TimePenaltyNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimePenaltyNorm::Mae => "mae",
            TimePenaltyNorm::Mse => "mse",
        })
    }
}

impl std::str::FromStr for TimePenaltyNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(TimePenaltyNorm::Mae),
            "mse" => Ok(TimePenaltyNorm::Mse),
            _ => Err(Error::Parse(format!("unknown time penalty norm {s:?}"))),
        }
    }
}

/// How the learned force is pushed towards time independence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PenaltyMode {
    /// Mean absolute residual output over all pairs and steps.
    Residual,
    /// Mean difference between neighbouring blocks on the same separations.
    AdjacentBlocks(TimePenaltyNorm),
}

/// Weights of the N-body objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NBodyLossWeights {
    pub position: f64,
    pub velocity: f64,
    pub penalty: f64,
    pub time_norm: TimePenaltyNorm,
}

impl NBodyLossWeights {
    pub fn for_paradigm(paradigm: Paradigm) -> Self {
        Self {
            position: 1.0,
            velocity: 0.25,
            penalty: match paradigm {
                Paradigm::Pal => 1.0,
                Paradigm::Pil => 0.1,
            },
            time_norm: TimePenaltyNorm::Mae,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NBodyLossTerms {
    /// `w_pos * position MAE + w_vel * velocity MAE` at the final state.
    pub fit: NodeId,
    pub penalty: NodeId,
    pub total: NodeId,
    pub rollout: LearnedRollout,
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Endpoint loss of a learned rollout plus the time-independence penalty.
pub fn rollout_loss(
    g: &mut Graph,
    force: &impl PairForce,
    mode: PenaltyMode,
    weights: &NBodyLossWeights,
    init: &NBodyState,
    target_final: &NBodyState,
    n_steps: usize,
    dt: f64,
) -> Result<NBodyLossTerms> {
    let horizon = n_steps as f64 * dt;
    if (target_final.time - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::structure(format!(
            "target is at t = {}, rollout ends at t = {horizon}",
            target_final.time
        )));
    }
    if target_final.n_bodies() != init.n_bodies() {
        return Err(Error::structure("target and initial state differ in body count"));
    }
    if n_steps == 0 {
        return Err(Error::structure("rollout needs at least one step"));
    }
    let rollout = learned_rollout(g, force, init, n_steps, dt)?;

    let tp = g.constant(target_final.positions_array());
    let tv = g.constant(target_final.velocities_array());
    let pos_err = mae(g, *rollout.positions.last().expect("n_steps >= 1"), tp)?;
    let vel_err = mae(g, *rollout.velocities.last().expect("n_steps >= 1"), tv)?;
    let wp = g.scale(pos_err, weights.position)?;
    let wv = g.scale(vel_err, weights.velocity)?;
    let fit = g.add(wp, wv)?;

    let penalty = match mode {
        PenaltyMode::Residual => {
            if rollout.residuals.is_empty() {
                return Err(Error::structure("force has no residual to penalize"));
            }
            let per_step = rollout
                .residuals
                .clone()
                .into_iter()
                .map(|res| {
                    let a = g.abs(res)?;
                    g.mean(a)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(g, &per_step)?
        }
        PenaltyMode::AdjacentBlocks(norm) => {
            if n_steps < 2 {
                return Err(Error::structure("adjacent-block penalty needs two blocks"));
            }
            let mut per_step = Vec::with_capacity(n_steps - 1);
            for l in 0..n_steps - 1 {
                let next = force.magnitude(g, rollout.distances[l], (l + 1) as f64 * dt)?;
                let d = g.sub(next.magnitude, rollout.magnitudes[l])?;
                let e = match norm {
                    TimePenaltyNorm::Mae => g.abs(d)?,
                    TimePenaltyNorm::Mse => g.square(d)?,
                };
                per_step.push(g.mean(e)?);
            }
            mean_of(g, &per_step)?
        }
    };
    let weighted = g.scale(penalty, weights.penalty)?;
    let total = g.add(fit, weighted)?;
    Ok(NBodyLossTerms {
        fit,
        penalty,
        total,
        rollout,
    })
}

/// [`rollout_loss`] with the penalty implied by the model's paradigm.
pub fn nbody_loss(
    g: &mut Graph,
    model: &BoundModel,
    weights: &NBodyLossWeights,
    init: &NBodyState,
    target_final: &NBodyState,
    n_steps: usize,
    dt: f64,
) -> Result<NBodyLossTerms> {
    let mode = match model.paradigm {
        Paradigm::Pal => PenaltyMode::Residual,
        Paradigm::Pil => PenaltyMode::AdjacentBlocks(weights.time_norm),
    };
    rollout_loss(g, model, mode, weights, init, target_final, n_steps, dt)
}

/// Learned force magnitude on a grid of separations, averaged over the
/// block times `l * dt` of a rollout of `n_steps` steps.
pub fn learned_force_curve(
    force: &impl PairForce,
    g: &mut Graph,
    r: &[f64],
    n_steps: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    let rc = g.constant(Array2::from_shape_vec((r.len(), 1), r.to_vec()).expect("column"));
    let mut acc = vec![0.0; r.len()];
    for l in 0..n_steps {
        let eval = force.magnitude(g, rc, l as f64 * dt)?;
        for (a, v) in acc.iter_mut().zip(g.value(eval.magnitude).column(0)) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|v| v / n_steps as f64).collect())
}

/// Positions of a state as a row-major `N x 2` array.
pub fn positions_matrix(state: &NBodyState) -> Array2<f64> {
    state.positions_array()
}

/// Mean over bodies of each coordinate.
pub fn mean_position(p: &Array2<f64>) -> Vec2 {
    let m = p.mean_axis(Axis(0)).expect("non-empty");
    [m[0], m[1]]
}
