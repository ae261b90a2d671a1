//! Training runs, lambda sweeps, evaluation, manifests, and CSV outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nbody::{
    learned_force_curve, learned_rollout, nbody_loss, reference_initial_state, simulate, ForceLaw,
    NBodyLossWeights, NBodySimConfig, NBodyTrajectory, PairForce, TimePenaltyNorm,
};
use crate::network::{derive_seed, AdamState, LrSchedule};
use crate::properties::{
    generate_dataset, total_loss, Dataset, NetworkShape, Paradigm, PropertyKind, PropertyModel,
    PropertyTask,
};

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "PHYSAUG_WORKERS";

pub const DEFAULT_BATCH_SIZE: usize = 8;
/// Batch size of the 2000-epoch positivity reference run.
pub const POSITIVITY_BATCH_SIZE: usize = 32;
pub const DEFAULT_TIME_LIMIT_SECS: f64 = 600.0;

/// Penalty coefficients of the reference lambda sweep.
pub const REFERENCE_LAMBDAS: [f64; 13] = [
    0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0,
];

pub const HISTORY_CSV_HEADER: &str = "lambda,seed,epoch,L1,L2";
pub const SUMMARY_CSV_HEADER: &str = "metric,value";
pub const FORCE_CURVE_CSV_HEADER: &str = "r,f_learned,f_true";

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// N-body settings for the time-independence task.
#[derive(Clone, Debug, PartialEq)]
pub struct NBodyTrainConfig {
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub time_norm: TimePenaltyNorm,
    pub steps: usize,
    pub dt: f64,
    pub force: ForceLaw,
}

impl Default for NBodyTrainConfig {
    fn default() -> Self {
        let sim = NBodySimConfig::reference();
        Self {
            position_weight: 1.0,
            velocity_weight: 0.25,
            time_norm: TimePenaltyNorm::Mae,
            steps: sim.n_steps,
            dt: sim.dt,
            force: sim.force_law,
        }
    }
}

impl NBodyTrainConfig {
    pub fn sim_config(&self) -> NBodySimConfig {
        NBodySimConfig {
            n_bodies: reference_initial_state().n_bodies(),
            dt: self.dt,
            n_steps: self.steps,
            force_law: self.force,
            mass: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: PropertyKind,
    pub paradigm: Paradigm,
    /// Penalty coefficient (the time-penalty weight for the n-body task).
    pub lambda: f64,
    pub seed: u64,
    pub samples: usize,
    /// Minibatch size; 0 trains on the full dataset each step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub time_limit_secs: f64,
    pub nbody: NBodyTrainConfig,
}

impl TrainConfig {
    /// Reference settings for a (task, paradigm) pair.
    pub fn reference(task: PropertyKind, paradigm: Paradigm) -> Self {
        let (lambda, schedule) = match (task, paradigm) {
            (PropertyKind::Positivity, _) => (0.2, LrSchedule::annealed(500)),
            (PropertyKind::TimeIndependence, Paradigm::Pal) => {
                (1.0, LrSchedule::constant(1e-3, 2000).expect("valid"))
            }
            (PropertyKind::TimeIndependence, Paradigm::Pil) => {
                (0.1, LrSchedule::constant(1e-4, 2000).expect("valid"))
            }
            _ => (0.2, LrSchedule::annealed(50)),
        };
        Self {
            task,
            paradigm,
            lambda,
            seed: 0,
            samples: 1000,
            batch_size: match task {
                PropertyKind::Positivity => POSITIVITY_BATCH_SIZE,
                _ => DEFAULT_BATCH_SIZE,
            },
            schedule,
            time_limit_secs: DEFAULT_TIME_LIMIT_SECS,
            nbody: NBodyTrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Manifest(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.task != PropertyKind::TimeIndependence && self.samples < 2 {
            return Err(Error::Manifest(format!("need at least 2 samples, got {}", self.samples)));
        }
        if !(self.time_limit_secs > 0.0) {
            return Err(Error::Manifest("time_limit_secs must be positive".into()));
        }
        if self.paradigm == Paradigm::Pil && self.task == PropertyKind::Positivity {
            return Err(Error::NotApplicable(
                "positivity has no known discriminator, so PIL cannot be built for it".into(),
            ));
        }
        self.nbody.sim_config().validate()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let task = PropertyTask::new(self.task);
        generate_dataset(&task, self.samples, derive_seed(self.seed, STREAM_DATA), &task.default_domain())
    }

    fn fresh_model(&self) -> Result<PropertyModel> {
        let mut model = PropertyModel::new(
            self.paradigm,
            self.task,
            self.lambda,
            &NetworkShape::for_task(self.task),
            derive_seed(self.seed, STREAM_INIT),
        )?;
        if self.task == PropertyKind::TimeIndependence && self.paradigm == Paradigm::Pal {
            // The residual starts as the zero function.
            model.network_mut("f2").expect("PAL residual").zero_output_layer();
        }
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    /// Per-epoch mean of the minibatch losses.
    pub history: Vec<EpochRecord>,
    /// Losses of the final parameters on the whole training set.
    pub final_l1: f64,
    pub final_l2: f64,
    pub model: PropertyModel,
    pub wall_time_secs: f64,
    /// Set when the wall-clock cap stopped training early.
    pub aborted: Option<String>,
}

impl RunResult {
    pub fn epochs_completed(&self) -> usize {
        self.history.len()
    }
}

struct Optimizer {
    params: Vec<f64>,
    grad: Vec<f64>,
    adam: AdamState,
}

impl Optimizer {
    fn new(model: &PropertyModel) -> Self {
        let params = model.flat_params();
        let n = params.len();
        Self {
            params,
            grad: Vec::with_capacity(n),
            adam: AdamState::new(n),
        }
    }
}

fn check_finite(epoch: usize, l1: f64, l2: f64) -> Result<()> {
    if l1.is_finite() && l2.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite loss at epoch {epoch}: L1={l1} L2={l2}")))
    }
}

/// Trains one model. Deterministic for a given config.
pub fn train(config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let mut model = config.fresh_model()?;
    let mut opt = Optimizer::new(&model);
    let mut history = Vec::with_capacity(config.schedule.total_epochs());
    let mut aborted = None;

    let (final_l1, final_l2) = if config.task == PropertyKind::TimeIndependence {
        let oracle = simulate(&config.nbody.sim_config(), &reference_initial_state())?;
        let weights = nbody_weights(config);
        for epoch in 0..config.schedule.total_epochs() {
            let lr = config.schedule.rate_at(epoch)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let terms = nbody_loss(
                &mut g,
                &bound,
                &weights,
                oracle.initial(),
                oracle.last(),
                config.nbody.steps,
                config.nbody.dt,
            )?;
            let (l1, l2) = (g.scalar(terms.fit), g.scalar(terms.penalty));
            check_finite(epoch, l1, l2)?;
            g.backward(terms.total)?;
            step(&mut model, &mut opt, &bound, &g, lr)?;
            history.push(EpochRecord { epoch, l1, l2 });
            if let Some(msg) = over_time(config, &start, epoch) {
                aborted = Some(msg);
                break;
            }
        }
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let terms = nbody_loss(
            &mut g,
            &bound,
            &weights,
            oracle.initial(),
            oracle.last(),
            config.nbody.steps,
            config.nbody.dt,
        )?;
        (g.scalar(terms.fit), g.scalar(terms.penalty))
    } else {
        let data = config.dataset()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = match config.batch_size {
            0 => data.len(),
            b => b.min(data.len()),
        };
        for epoch in 0..config.schedule.total_epochs() {
            let lr = config.schedule.rate_at(epoch)?;
            order.shuffle(&mut rng);
            let (mut s1, mut s2, mut count) = (0.0, 0.0, 0usize);
            for chunk in order.chunks(batch) {
                // A trailing singleton cannot form a separability pair.
                if chunk.len() < 2 {
                    continue;
                }
                let (x, y) = data.select(chunk);
                let mut g = Graph::new();
                let bound = model.bind(&mut g);
                let terms = total_loss(&mut g, &bound, &x, &y, config.lambda, &mut rng)?;
                let (l1, l2) = (g.scalar(terms.l1), g.scalar(terms.l2));
                check_finite(epoch, l1, l2)?;
                g.backward(terms.total)?;
                step(&mut model, &mut opt, &bound, &g, lr)?;
                s1 += l1;
                s2 += l2;
                count += 1;
            }
            let n = count.max(1) as f64;
            history.push(EpochRecord {
                epoch,
                l1: s1 / n,
                l2: s2 / n,
            });
            if let Some(msg) = over_time(config, &start, epoch) {
                aborted = Some(msg);
                break;
            }
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EVAL));
        model.evaluate_losses(&data, &mut eval_rng)?
    };

    Ok(RunResult {
        config: config.clone(),
        history,
        final_l1,
        final_l2,
        model,
        wall_time_secs: start.elapsed().as_secs_f64(),
        aborted,
    })
}

fn nbody_weights(config: &TrainConfig) -> NBodyLossWeights {
    NBodyLossWeights {
        position: config.nbody.position_weight,
        velocity: config.nbody.velocity_weight,
        penalty: config.lambda,
        time_norm: config.nbody.time_norm,
    }
}

fn step(
    model: &mut PropertyModel,
    opt: &mut Optimizer,
    bound: &crate::properties::BoundModel,
    g: &Graph,
    lr: f64,
) -> Result<()> {
    opt.grad.clear();
    bound.gradient_into(g, &mut opt.grad);
    opt.adam.step(&mut opt.params, &opt.grad, lr)?;
    model.set_flat_params(&opt.params)
}

fn over_time(config: &TrainConfig, start: &Instant, epoch: usize) -> Option<String> {
    let elapsed = start.elapsed().as_secs_f64();
    (elapsed > config.time_limit_secs).then(|| {
        format!(
            "wall-clock cap of {}s exceeded after epoch {epoch} ({elapsed:.1}s)",
            config.time_limit_secs
        )
    })
}

/// Reads the worker count from [`WORKERS_ENV`], defaulting to 1.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Manifest(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Debug)]
pub struct SweepResult {
    pub lambdas: Vec<f64>,
    /// One entry per lambda, in input order.
    pub runs: Vec<Result<RunResult>>,
}

/// One independent [`train`] per lambda, run on up to `workers` threads.
pub fn lambda_sweep(base: &TrainConfig, lambdas: &[f64], workers: usize) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Manifest("the lambda list is empty".into()));
    }
    let configs: Vec<TrainConfig> = lambdas
        .iter()
        .map(|&lambda| TrainConfig {
            lambda,
            ..base.clone()
        })
        .collect();
    let runs = run_parallel(&configs, workers);
    Ok(SweepResult {
        lambdas: lambdas.to_vec(),
        runs,
    })
}

/// Trains every config, preserving input order in the output.
pub fn run_parallel(configs: &[TrainConfig], workers: usize) -> Vec<Result<RunResult>> {
    let workers = workers.max(1).min(configs.len().max(1));
    if workers == 1 {
        return configs.iter().map(train).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunResult>>> = (0..configs.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let r = train(&configs[i]);
                done.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Decomposition quality on the evaluation grid. Component errors are
/// `None` for PIL models, which have no decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionReport {
    pub phygen_mae: Option<f64>,
    pub blackbox_mae: Option<f64>,
    pub fit_mae: f64,
    /// Least-squares slope of the Blackbox against `x1` (rotation only).
    pub blackbox_slope: Option<f64>,
}

/// 64 x 64 grid for two inputs, 256 points for one.
pub fn evaluation_grid(task: &PropertyTask) -> Array2<f64> {
    let per_axis = if task.input_dim() == 1 { 256 } else { 64 };
    task.default_domain().grid(per_axis)
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Compares the trained components with the known decomposition.
pub fn evaluate_decomposition(
    model: &PropertyModel,
    task: &PropertyTask,
    grid: &Array2<f64>,
) -> Result<DecompositionReport> {
    if model.kind != task.kind || task.kind == PropertyKind::TimeIndependence {
        return Err(Error::structure(format!(
            "cannot evaluate a {} model on the {} task",
            model.kind, task.kind
        )));
    }
    if grid.ncols() != task.input_dim() {
        return Err(Error::structure("grid width does not match the task"));
    }
    let fit = model.predict(grid)?.to_vec();
    let parts = match model.paradigm {
        Paradigm::Pil => None,
        Paradigm::Pal => Some((model.phygen(grid)?.to_vec(), model.blackbox(grid)?.to_vec())),
    };
    score_decomposition(task, grid, &fit, parts.as_ref().map(|(p, b)| (p.as_slice(), b.as_slice())))
}

/// Scores raw model outputs on `grid`: the full prediction and, for PAL,
/// the `(PhyGen, Blackbox)` outputs.
pub fn score_decomposition(
    task: &PropertyTask,
    grid: &Array2<f64>,
    fit: &[f64],
    parts: Option<(&[f64], &[f64])>,
) -> Result<DecompositionReport> {
    let n = grid.nrows();
    if fit.len() != n || parts.is_some_and(|(p, b)| p.len() != n || b.len() != n) {
        return Err(Error::structure("one output per grid point is required"));
    }
    let rows: Vec<Vec<f64>> = grid.rows().into_iter().map(|r| r.to_vec()).collect();
    let truth: Vec<f64> = rows.iter().map(|x| task.truth(x)).collect();
    let fit_mae = mean_abs_diff(fit, &truth);
    let Some((p, b)) = parts else {
        return Ok(DecompositionReport {
            phygen_mae: None,
            blackbox_mae: None,
            fit_mae,
            blackbox_slope: None,
        });
    };
    let sat: Vec<f64> = rows.iter().map(|x| task.satisfying_part(x)).collect();
    let vio: Vec<f64> = rows.iter().map(|x| task.violating_part(x)).collect();
    let (phygen_mae, blackbox_mae, slope) = match task.kind {
        PropertyKind::Separability => (
            mean_abs_diff(&centered(p), &centered(&sat)),
            mean_abs_diff(&centered(b), &centered(&vio)),
            None,
        ),
        PropertyKind::Rotation => {
            let x1 = grid.column(0);
            let xm = x1.mean().expect("non-empty grid");
            let bm = b.iter().sum::<f64>() / b.len() as f64;
            let sxy: f64 = x1.iter().zip(b).map(|(x, y)| (x - xm) * (y - bm)).sum();
            let sxx: f64 = x1.iter().map(|x| (x - xm).powi(2)).sum();
            (mean_abs_diff(p, &sat), mean_abs_diff(b, &vio), Some(sxy / sxx))
        }
        _ => (mean_abs_diff(p, &sat), mean_abs_diff(b, &vio), None),
    };
    Ok(DecompositionReport {
        phygen_mae: Some(phygen_mae),
        blackbox_mae: Some(blackbox_mae),
        fit_mae,
        blackbox_slope: slope,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForceSample {
    pub r: f64,
    pub learned: f64,
    pub truth: f64,
}

#[derive(Clone, Debug)]
pub struct NBodyReport {
    pub trajectory_mae: f64,
    pub force_curve: Vec<ForceSample>,
    pub force_mae: f64,
    /// `force_mae` divided by the mean true force over the curve.
    pub force_relative_mae: f64,
    pub learned: NBodyTrajectory,
}

pub const FORCE_CURVE_POINTS: usize = 101;

/// Rolls the learned force out against the oracle and tabulates the force
/// law over the separations the oracle visits.
pub fn evaluate_nbody(model: &PropertyModel, oracle: &NBodyTrajectory) -> Result<NBodyReport> {
    if model.kind != PropertyKind::TimeIndependence {
        return Err(Error::structure(format!("{} model has no force law", model.kind)));
    }
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    evaluate_pair_force(&bound, &mut g, oracle)
}

/// [`evaluate_nbody`] for any force whose parameters live on `g`.
pub fn evaluate_pair_force(
    force: &impl PairForce,
    g: &mut Graph,
    oracle: &NBodyTrajectory,
) -> Result<NBodyReport> {
    let cfg = &oracle.config;
    let ro = learned_rollout(g, force, oracle.initial(), cfg.n_steps, cfg.dt)?;
    let learned = ro.trajectory(g, cfg);
    let trajectory_mae = learned.position_mae(oracle)?;

    let (lo, hi) = oracle.distance_range();
    let rs: Vec<f64> = (0..FORCE_CURVE_POINTS)
        .map(|k| lo + (hi - lo) * k as f64 / (FORCE_CURVE_POINTS - 1) as f64)
        .collect();
    let f = learned_force_curve(force, g, &rs, cfg.n_steps, cfg.dt)?;
    let force_curve: Vec<ForceSample> = rs
        .iter()
        .zip(&f)
        .map(|(&r, &learned)| ForceSample {
            r,
            learned,
            truth: cfg.force_law.eval(r),
        })
        .collect();
    let n = force_curve.len() as f64;
    let force_mae = force_curve.iter().map(|s| (s.learned - s.truth).abs()).sum::<f64>() / n;
    let mean_true = force_curve.iter().map(|s| s.truth.abs()).sum::<f64>() / n;
    Ok(NBodyReport {
        trajectory_mae,
        force_curve,
        force_mae,
        force_relative_mae: force_mae / mean_true,
        learned,
    })
}

/// Writes `contents` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} has no file name", path.display()))))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(contents)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn history_csv(results: &[&RunResult]) -> String {
    let mut out = format!("{HISTORY_CSV_HEADER}\n");
    for r in results {
        for h in &r.history {
            writeln!(
                out,
                "{},{},{},{:.16e},{:.16e}",
                r.config.lambda, r.config.seed, h.epoch, h.l1, h.l2
            )
            .expect("string write");
        }
    }
    out
}

/// Ordered `metric,value` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, metric: &str, value: impl ToString) {
        self.rows.push((metric.to_string(), value.to_string()));
    }

    pub fn push_f64(&mut self, metric: &str, value: f64) {
        self.push(metric, format!("{value:.16e}"));
    }

    pub fn get(&self, metric: &str) -> Option<&str> {
        self.rows.iter().find(|(m, _)| m == metric).map(|(_, v)| v.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for (m, v) in &self.rows {
            writeln!(out, "{m},{v}").expect("string write");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SUMMARY_CSV_HEADER) {
            return Err(Error::Parse("missing metric,value header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (m, v) = line
                .split_once(',')
                .filter(|(m, v)| !m.is_empty() && !v.is_empty() && !v.contains(','))
                .ok_or_else(|| Error::Parse(format!("summary row {} is malformed: {line:?}", n + 1)))?;
            rows.push((m.to_string(), v.to_string()));
        }
        Ok(Self { rows })
    }
}

/// Run identity, final losses, and evaluation metrics.
pub fn run_summary(result: &RunResult) -> Result<Summary> {
    let c = &result.config;
    let mut s = Summary::default();
    s.push("task", c.task);
    s.push("paradigm", c.paradigm);
    s.push("lambda", c.lambda);
    s.push("seed", c.seed);
    s.push("epochs_completed", result.epochs_completed());
    s.push("aborted", u8::from(result.aborted.is_some()));
    s.push_f64("final_L1", result.final_l1);
    s.push_f64("final_L2", result.final_l2);
    if c.task == PropertyKind::TimeIndependence {
        let oracle = simulate(&c.nbody.sim_config(), &reference_initial_state())?;
        let rep = evaluate_nbody(&result.model, &oracle)?;
        push_nbody_metrics(&mut s, &rep);
    } else {
        let task = PropertyTask::new(c.task);
        let rep = evaluate_decomposition(&result.model, &task, &evaluation_grid(&task))?;
        push_decomposition_metrics(&mut s, &rep);
    }
    Ok(s)
}

pub fn push_decomposition_metrics(s: &mut Summary, rep: &DecompositionReport) {
    s.push_f64("fit_mae", rep.fit_mae);
    if let Some(v) = rep.phygen_mae {
        s.push_f64("phygen_mae", v);
    }
    if let Some(v) = rep.blackbox_mae {
        s.push_f64("blackbox_mae", v);
    }
    if let Some(v) = rep.blackbox_slope {
        s.push_f64("blackbox_slope", v);
    }
}

pub fn push_nbody_metrics(s: &mut Summary, rep: &NBodyReport) {
    s.push_f64("trajectory_mae", rep.trajectory_mae);
    s.push_f64("force_mae", rep.force_mae);
    s.push_f64("force_relative_mae", rep.force_relative_mae);
}

pub fn force_curve_csv(curve: &[ForceSample]) -> String {
    let mut out = format!("{FORCE_CURVE_CSV_HEADER}\n");
    for p in curve {
        writeln!(out, "{:.16e},{:.16e},{:.16e}", p.r, p.learned, p.truth).expect("string write");
    }
    out
}

/// Plain-text experiment description: one `key = value` per line, `#`
/// comments, blank lines ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub train: TrainConfig,
    /// Sweep values; empty when the manifest describes a single run.
    pub lambdas: Vec<f64>,
}

pub const MANIFEST_KEYS: [&str; 15] = [
    "task",
    "paradigm",
    "lambda",
    "seed",
    "samples",
    "batch_size",
    "schedule",
    "time_limit_secs",
    "lambdas",
    "nbody.position_weight",
    "nbody.velocity_weight",
    "nbody.time_norm",
    "nbody.steps",
    "nbody.dt",
    "nbody.force",
];

fn manifest_err(key: &str, value: &str, what: impl std::fmt::Display) -> Error {
    Error::Manifest(format!("{key} = {value:?}: {what}"))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| manifest_err(key, value, e))
}

/// Splits `key = value` lines, rejecting unknown keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("line {}: expected key = value", n + 1)))?;
        pairs.push(parse_pair(k, v)?);
    }
    Ok(pairs)
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Manifest(format!("override {s:?} is not key=value")))?;
    parse_pair(k, v)
}

fn parse_pair(k: &str, v: &str) -> Result<(String, String)> {
    let (k, v) = (k.trim(), v.trim());
    if !MANIFEST_KEYS.contains(&k) {
        return Err(Error::Manifest(format!("unknown key {k:?}")));
    }
    Ok((k.to_string(), v.to_string()))
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Builds a manifest from ordered pairs; later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut latest: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !MANIFEST_KEYS.contains(&k.as_str()) {
                return Err(Error::Manifest(format!("unknown key {k:?}")));
            }
            latest.insert(k, v);
        }
        let get = |k: &str| latest.get(k).copied();
        let task: PropertyKind = parse_value(
            "task",
            get("task").ok_or_else(|| Error::Manifest("missing key \"task\"".into()))?,
        )?;
        let paradigm: Paradigm = parse_value(
            "paradigm",
            get("paradigm").ok_or_else(|| Error::Manifest("missing key \"paradigm\"".into()))?,
        )?;
        let mut train = TrainConfig::reference(task, paradigm);
        let mut lambdas = Vec::new();
        for (&k, &v) in &latest {
            match k {
                "task" | "paradigm" => {}
                "lambda" => train.lambda = parse_value(k, v)?,
                "seed" => train.seed = parse_value(k, v)?,
                "samples" => train.samples = parse_value(k, v)?,
                "batch_size" => train.batch_size = parse_value(k, v)?,
                "schedule" => train.schedule = parse_value(k, v)?,
                "time_limit_secs" => train.time_limit_secs = parse_value(k, v)?,
                "lambdas" => {
                    lambdas = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_value::<f64>(k, s))
                        .collect::<Result<_>>()?
                }
                "nbody.position_weight" => train.nbody.position_weight = parse_value(k, v)?,
                "nbody.velocity_weight" => train.nbody.velocity_weight = parse_value(k, v)?,
                "nbody.time_norm" => train.nbody.time_norm = parse_value(k, v)?,
                "nbody.steps" => train.nbody.steps = parse_value(k, v)?,
                "nbody.dt" => train.nbody.dt = parse_value(k, v)?,
                "nbody.force" => train.nbody.force = parse_value(k, v)?,
                _ => unreachable!("keys are checked above"),
            }
        }
        if lambdas.iter().any(|l: &f64| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Manifest("lambdas must be finite and >= 0".into()));
        }
        let m = Self { train, lambdas };
        m.train.validate().map_err(|e| match e {
            Error::Manifest(_) => e,
            other => Error::Manifest(other.to_string()),
        })?;
        Ok(m)
    }

    /// Every key in canonical order; parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(out, "{k} = {v}").expect("string write");
        };
        kv("task", t.task.to_string());
        kv("paradigm", t.paradigm.to_string());
        kv("lambda", t.lambda.to_string());
        kv("seed", t.seed.to_string());
        kv("samples", t.samples.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("schedule", t.schedule.to_string());
        kv("time_limit_secs", t.time_limit_secs.to_string());
        if !self.lambdas.is_empty() {
            let l: Vec<String> = self.lambdas.iter().map(f64::to_string).collect();
            kv("lambdas", l.join(","));
        }
        kv("nbody.position_weight", t.nbody.position_weight.to_string());
        kv("nbody.velocity_weight", t.nbody.velocity_weight.to_string());
        kv("nbody.time_norm", t.nbody.time_norm.to_string());
        kv("nbody.steps", t.nbody.steps.to_string());
        kv("nbody.dt", t.nbody.dt.to_string());
        kv("nbody.force", t.nbody.force.to_string());
        out
    }
}

/// Directory name for one sweep point.
pub fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

/// Writes history, summary, checkpoint, manifest, and (n-body) force curve
/// and learned trajectory into `dir`.
pub fn write_run(dir: &Path, result: &RunResult, lambdas: &[f64]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let manifest = Manifest {
        train: result.config.clone(),
        lambdas: lambdas.to_vec(),
    };
    put("manifest.txt", manifest.to_text().as_bytes())?;
    put("history.csv", history_csv(&[result]).as_bytes())?;
    let mut ckpt = Vec::new();
    result.model.write_checkpoint(&mut ckpt)?;
    put("model.ckpt", &ckpt)?;
    let summary = run_summary(result)?;
    if result.config.task == PropertyKind::TimeIndependence {
        let oracle = simulate(&result.config.nbody.sim_config(), &reference_initial_state())?;
        let rep = evaluate_nbody(&result.model, &oracle)?;
        put("force_curve.csv", force_curve_csv(&rep.force_curve).as_bytes())?;
        let mut traj = Vec::new();
        rep.learned.write_csv(&mut traj)?;
        put("trajectory.csv", &traj)?;
    }
    put("summary.csv", summary.to_csv().as_bytes())?;
    Ok(written)
}

/// One row of a consolidated report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dir: PathBuf,
    pub task: String,
    pub paradigm: String,
    pub lambda: f64,
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Directories that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

const IDENTITY_COLUMNS: [&str; 4] = ["task", "paradigm", "lambda", "seed"];

fn read_row(dir: &Path) -> Result<ReportRow> {
    let text = fs::read_to_string(dir.join("summary.csv"))?;
    let summary = Summary::parse_csv(&text)?;
    let field = |m: &str| {
        summary
            .get(m)
            .ok_or_else(|| Error::Parse(format!("summary lacks {m:?}")))
    };
    let lambda = field("lambda")?
        .parse::<f64>()
        .map_err(|_| Error::Parse("bad lambda".into()))?;
    let seed = field("seed")?
        .parse::<u64>()
        .map_err(|_| Error::Parse("bad seed".into()))?;
    Ok(ReportRow {
        dir: dir.to_path_buf(),
        task: field("task")?.to_string(),
        paradigm: field("paradigm")?.to_string(),
        lambda,
        seed,
        summary,
    })
}

/// Collects run summaries. Each directory is either a run directory or a
/// sweep directory whose `lambda_*` subdirectories are runs.
pub fn build_report(dirs: &[PathBuf]) -> Report {
    let mut report = Report::default();
    let mut runs = Vec::new();
    for d in dirs {
        if !d.join("summary.csv").exists() {
            let mut subs: Vec<PathBuf> = fs::read_dir(d)
                .map(|it| {
                    it.filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| {
                            p.is_dir()
                                && p.file_name()
                                    .is_some_and(|n| n.to_string_lossy().starts_with("lambda_"))
                        })
                        .collect()
                })
                .unwrap_or_default();
            if !subs.is_empty() {
                subs.sort();
                runs.extend(subs);
                continue;
            }
        }
        runs.push(d.clone());
    }
    for d in runs {
        match read_row(&d) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.skipped.push((d, e.to_string())),
        }
    }
    report.rows.sort_by(|a, b| {
        (&a.task, &a.paradigm)
            .cmp(&(&b.task, &b.paradigm))
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.seed.cmp(&b.seed))
            .then(a.dir.cmp(&b.dir))
    });
    report
}

impl Report {
    /// Identity columns, then every other metric in first-seen order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = IDENTITY_COLUMNS.iter().map(|s| s.to_string()).collect();
        for row in &self.rows {
            for (m, _) in &row.summary.rows {
                if !cols.contains(m) {
                    cols.push(m.clone());
                }
            }
        }
        cols
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let cols = self.columns();
        self.rows
            .iter()
            .map(|r| {
                cols.iter()
                    .map(|c| r.summary.get(c).unwrap_or("").to_string())
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns().join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Aligned table followed by the skipped-runs section.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let cells = self.cells();
        let widths: Vec<usize> = (0..cols.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([cols[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |vals: &[String]| {
            vals.iter()
                .zip(&widths)
                .map(|(v, w)| format!("{v:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&cols);
        out.push('\n');
        for r in &cells {
            out.push_str(&line(r));
            out.push('\n');
        }
        out.push_str(&format!("\nskipped runs: {}\n", self.skipped.len()));
        for (d, why) in &self.skipped {
            out.push_str(&format!("  {}: {why}\n", d.display()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(task: PropertyKind, paradigm: Paradigm) -> TrainConfig {
        let mut c = TrainConfig::reference(task, paradigm);
        c.samples = 40;
        c.batch_size = 20;
        c.schedule = LrSchedule::new(vec![(1e-3, 2), (1e-4, 1)]).unwrap();
        c
    }

    #[test]
    fn reference_configs() {
        let c = TrainConfig::reference(PropertyKind::Separability, Paradigm::Pal);
        assert_eq!((c.lambda, c.samples, c.schedule.total_epochs()), (0.2, 1000, 200));
        let c = TrainConfig::reference(PropertyKind::Positivity, Paradigm::Pal);
        assert_eq!(c.schedule.total_epochs(), 2000);
        let c = TrainConfig::reference(PropertyKind::TimeIndependence, Paradigm::Pil);
        assert_eq!((c.lambda, c.schedule.rate_at(0).unwrap()), (0.1, 1e-4));
    }

    #[test]
    fn train_is_deterministic() {
        let c = quick(PropertyKind::Rotation, Paradigm::Pil);
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.len(), 3);
        let mut other = c.clone();
        other.seed = 1;
        assert_ne!(train(&other).unwrap().history, a.history);
    }

    #[test]
    fn zero_lambda_trains_without_penalty() {
        let mut c = quick(PropertyKind::Separability, Paradigm::Pal);
        c.lambda = 0.0;
        let r = train(&c).unwrap();
        assert!(r.final_l2.is_finite());
    }

    #[test]
    fn pil_positivity_is_rejected() {
        let c = quick(PropertyKind::Positivity, Paradigm::Pil);
        assert!(matches!(train(&c), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn singleton_sweep_matches_train() {
        let c = quick(PropertyKind::Separability, Paradigm::Pal);
        let s = lambda_sweep(&c, &[0.2], 1).unwrap();
        let direct = train(&c).unwrap();
        let swept = s.runs[0].as_ref().unwrap();
        assert_eq!(swept.history, direct.history);
        assert_eq!(swept.model, direct.model);
        assert!(lambda_sweep(&c, &[], 1).is_err());
    }

    #[test]
    fn parallel_sweep_matches_serial() {
        let c = quick(PropertyKind::Rotation, Paradigm::Pal);
        let serial = lambda_sweep(&c, &[0.1, 1.0, 10.0], 1).unwrap();
        let parallel = lambda_sweep(&c, &[0.1, 1.0, 10.0], 3).unwrap();
        for (a, b) in serial.runs.iter().zip(&parallel.runs) {
            assert_eq!(a.as_ref().unwrap().history, b.as_ref().unwrap().history);
        }
    }

    #[test]
    fn time_cap_aborts_with_partial_result() {
        let mut c = quick(PropertyKind::Separability, Paradigm::Pal);
        c.time_limit_secs = 1e-9;
        let r = train(&c).unwrap();
        assert_eq!(r.history.len(), 1);
        assert!(r.aborted.is_some());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "task = rotation\nparadigm = pal\nlambda = 0.5 # comment\n\nlambdas = 0.1, 1\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.train.lambda, 0.5);
        assert_eq!(m.lambdas, vec![0.1, 1.0]);
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(matches!(Manifest::parse("task = rotation\nparadigm = pal\nfoo = 1\n"), Err(Error::Manifest(_))));
        assert!(matches!(Manifest::parse("paradigm = pal\n"), Err(Error::Manifest(_))));
        assert!(matches!(Manifest::parse("task = rotation\nparadigm = pal\nlambda = x\n"), Err(Error::Manifest(_))));
        assert!(parse_override("nope=1").is_err());
    }

    #[test]
    fn decomposition_report_shapes() {
        let task = PropertyTask::new(PropertyKind::Rotation);
        let grid = evaluation_grid(&task);
        assert_eq!(grid.dim(), (4096, 2));
        assert_eq!(evaluation_grid(&PropertyTask::new(PropertyKind::Positivity)).dim(), (256, 1));
        let pil = train(&quick(PropertyKind::Rotation, Paradigm::Pil)).unwrap();
        let rep = evaluate_decomposition(&pil.model, &task, &grid).unwrap();
        assert!(rep.phygen_mae.is_none() && rep.blackbox_mae.is_none());
        let wrong = PropertyTask::new(PropertyKind::Separability);
        assert!(evaluate_decomposition(&pil.model, &wrong, &grid).is_err());
    }

    #[test]
    fn summary_csv_round_trip() {
        let mut s = Summary::default();
        s.push("task", "rotation");
        s.push_f64("final_L1", 0.25);
        let back = Summary::parse_csv(&s.to_csv()).unwrap();
        assert_eq!(back, s);
        assert!(Summary::parse_csv("metric,value\nbroken\n").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"x\n").unwrap();
        write_atomic(&p, b"y\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "y\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
