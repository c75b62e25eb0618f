//! Backward sweep of per-step regressions.
//!
//! Step `i` fits a network `U_i` to the one-step target
//! `U_{i+1}(X_{i+1}) - dt f(t_i, X_{i+1}, U_{i+1}(X_{i+1}), Z, I)` where
//! `Z` is the gradient of the frozen next network (optionally multiplied by
//! `sigma(X_i)^T`) and `I` the Monte-Carlo nonlocal term. Targets are plain
//! numbers per sample, so no gradient ever flows into `U_{i+1}`.
//!
//! In the linear case `f = f(t, x)` each step can instead regress the
//! pathwise aggregate `g(X_N) - dt sum_{n >= i} f(t_n, X_n)` on `X_i`
//! directly, see [`run_ds_linear`].

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{init_network, Activation, AdamState, Network, OutputScale, Scratch, Standardization};
use crate::oracles::finite_difference_gradient;
use crate::par;
use crate::problem::{DriverKind, GradientConvention, ProblemSpec, Terminal, TimeGrid};
use crate::rng::RngStream;
use crate::simulate::{atom_cap, simulate_paths_from, PathBatch, SimOptions};

const CACHE_TAG: u64 = 0x4D41_524B;
const INIT_TAG: u64 = 0x494E_4954;
const BATCH_TAG: u64 = 0x4241_5443;
const BIAS_TAG: u64 = 0x4249_4153;
const TERMINAL_STEP: u64 = u64::MAX;

/// A member of the backward sequence: the analytic terminal condition or a
/// trained network.
#[derive(Clone)]
pub enum StepFunction {
    Terminal(Terminal),
    Network(Network),
}

impl std::fmt::Debug for StepFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepFunction::Terminal(_) => f.write_str("Terminal"),
            StepFunction::Network(n) => f.debug_tuple("Network").field(n).finish(),
        }
    }
}

const TERMINAL_FD_STEP: f64 = 1e-6;

/// Evaluation handle owning whatever scratch space the function needs.
pub struct Evaluator<'a> {
    func: &'a StepFunction,
    scratch: Option<Scratch>,
}

impl<'a> Evaluator<'a> {
    pub fn new(func: &'a StepFunction) -> Self {
        let scratch = match func {
            StepFunction::Network(n) => Some(n.scratch()),
            StepFunction::Terminal(_) => None,
        };
        Self { func, scratch }
    }

    pub fn value(&mut self, x: &[f64]) -> f64 {
        match (self.func, &mut self.scratch) {
            (StepFunction::Network(n), Some(s)) => n.value_with(x, s),
            (StepFunction::Terminal(t), _) => (t.value)(x),
            _ => unreachable!("network evaluator without scratch"),
        }
    }

    pub fn value_and_gradient(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        match (self.func, &mut self.scratch) {
            (StepFunction::Network(n), Some(s)) => n.value_and_gradient_with(x, s, grad),
            (StepFunction::Terminal(t), _) => {
                match &t.gradient {
                    Some(g) => g(x, grad),
                    None => {
                        let v = finite_difference_gradient(|y| (t.value)(y), x, TERMINAL_FD_STEP);
                        grad.copy_from_slice(&v);
                    }
                }
                (t.value)(x)
            }
            _ => unreachable!("network evaluator without scratch"),
        }
    }
}

/// Marks drawn once from `nu / nu(R^d)` and reused for every path and
/// gradient iteration of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkCache {
    dim: usize,
    marks: Vec<f64>,
    weights: Vec<f64>,
    total_intensity: f64,
}

impl MarkCache {
    pub fn draw(spec: &ProblemSpec, size: usize, stream: &RngStream) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidParameter("mark cache must be non-empty".into()));
        }
        let measure = &spec.jump_measure;
        let total_intensity = measure.total_intensity();
        let d = spec.dim;
        let mut marks = Vec::with_capacity(size * d);
        let mut weights = Vec::with_capacity(size);
        if total_intensity > 0.0 {
            let mut rng = stream.generator();
            for _ in 0..size {
                let z = measure.sample_mark(&mut rng);
                weights.push(measure.weight(&z));
                marks.extend_from_slice(&z);
            }
        }
        Ok(Self {
            dim: d,
            marks,
            weights,
            total_intensity,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_intensity(&self) -> f64 {
        self.total_intensity
    }

    pub fn mark(&self, k: usize) -> &[f64] {
        &self.marks[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

fn nonlocal_with(
    spec: &ProblemSpec,
    eval: &mut Evaluator<'_>,
    x_prev: &[f64],
    xc_next: &[f64],
    cache: &MarkCache,
    shifted: &mut [f64],
) -> f64 {
    if cache.is_empty() || cache.total_intensity == 0.0 {
        return 0.0;
    }
    let base = eval.value(xc_next);
    let mut sum = 0.0;
    for k in 0..cache.len() {
        spec.jump_coeff.eval(x_prev, cache.mark(k), shifted);
        for (s, x) in shifted.iter_mut().zip(xc_next) {
            *s += x;
        }
        sum += cache.weight(k) * (eval.value(shifted) - base);
    }
    cache.total_intensity * sum / cache.len() as f64
}

/// `nu(R^d)/M sum_k rho(z_k) [U(xc + gamma(x_prev, z_k)) - U(xc)]` over the cache.
pub fn mc_integral_operator(
    spec: &ProblemSpec,
    u_next: &StepFunction,
    x_prev: &[f64],
    xc_next: &[f64],
    cache: &MarkCache,
) -> f64 {
    let mut eval = Evaluator::new(u_next);
    let mut shifted = vec![0.0; spec.dim];
    nonlocal_with(spec, &mut eval, x_prev, xc_next, cache, &mut shifted)
}

/// Spatial argument handed to the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverState {
    /// `X_{i+1}`, as in the loss.
    Next,
    /// `X_i`
    Current,
}

/// Where the training states `X_i` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSampling {
    /// `X_i` drawn afresh from the problem's initial law at every `t_i`.
    Auxiliary,
    /// `X_i` from the forward scheme started at `t_0`.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub mark_cache_size: usize,
    pub warm_start: bool,
    /// Initial rate of warm-started steps; `None` means `learning_rate`.
    pub warm_learning_rate: Option<f64>,
    pub driver_state: DriverState,
    pub state_sampling: StateSampling,
    /// `None` means two hidden layers of width `d + 10`.
    pub widths: Option<Vec<usize>>,
    pub activation: Activation,
    /// Inputs scaled to the sampling box.
    pub standardize: bool,
    /// Outputs scaled to the first batch's targets.
    pub scale_outputs: bool,
    /// Train `U_N` on `|g(X_N) - U(X_N)|^2` instead of using `g` directly.
    pub fit_terminal: bool,
    pub mark_cap: usize,
    /// Fresh networks get random instead of zero biases.
    pub random_biases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::regulator()
    }
}

impl TrainConfig {
    /// Batch 6000, 10^4 iterations, rate 0.01 cut tenfold at 2000/4000/7000;
    /// softplus, zero initial biases, unscaled outputs.
    pub fn basket() -> Self {
        Self {
            batch_size: 6000,
            iterations: 10_000,
            learning_rate: 0.01,
            decay_steps: vec![2000, 4000, 7000],
            decay_factor: 0.1,
            activation: Activation::Softplus,
            scale_outputs: false,
            random_biases: false,
            warm_learning_rate: None,
            ..Self::regulator()
        }
    }

    /// Batch 10^4, 1.2 10^4 iterations, rate 0.1 (0.01 for warm-started
    /// steps) cut tenfold at 3000/6000/9000; sigmoid, random initial biases,
    /// scaled outputs.
    pub fn regulator() -> Self {
        Self {
            batch_size: 10_000,
            iterations: 12_000,
            learning_rate: 0.1,
            decay_steps: vec![3000, 6000, 9000],
            decay_factor: 0.1,
            mark_cache_size: 10_000,
            warm_start: true,
            warm_learning_rate: Some(0.01),
            driver_state: DriverState::Next,
            state_sampling: StateSampling::Auxiliary,
            widths: None,
            activation: Activation::Sigmoid,
            standardize: true,
            scale_outputs: true,
            fit_terminal: false,
            mark_cap: crate::simulate::DEFAULT_MARK_CAP,
            random_biases: true,
        }
    }

    /// Batch size, iterations and decay points divided by `factor`, initial
    /// learning rate multiplied by `sqrt(factor)`.
    /// Divides batch size, iterations and decay points by `factor` and
    /// multiplies the learning rate by `factor^exponent`.
    pub fn scaled_down(&self, factor: usize, exponent: f64) -> Self {
        let f = factor.max(1);
        Self {
            batch_size: (self.batch_size / f).max(1),
            iterations: (self.iterations / f).max(1),
            learning_rate: self.learning_rate * (f as f64).powf(exponent),
            decay_steps: self.decay_steps.iter().map(|s| s / f as u64).collect(),
            ..self.clone()
        }
    }

    pub fn hidden_widths(&self, d: usize) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| vec![d + 10, d + 10])
    }

    fn schedule(&self) -> Vec<(u64, f64)> {
        self.decay_steps.iter().map(|s| (*s, self.decay_factor)).collect()
    }

    /// `mark_cap`, raised to [`atom_cap`] of the expected jumps per interval.
    fn sim_options(&self, spec: &ProblemSpec, dt: f64) -> SimOptions {
        SimOptions {
            mark_cap: self.mark_cap.max(atom_cap(spec.jump_measure.total_intensity() * dt)),
            ..SimOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::config("training", "batch_size and iterations must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        if self.warm_learning_rate.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::config("training.warm_learning_rate", "must be positive"));
        }
        if self.mark_cache_size == 0 {
            return Err(Error::config("training.mark_cache_size", "must be positive"));
        }
        Ok(())
    }
}

/// Fresh network for `spec`, standardized to the sampling box and with
/// random biases if requested.
pub fn fresh_network(spec: &ProblemSpec, cfg: &TrainConfig, stream: &RngStream) -> Result<Network> {
    let mut net = init_network(spec.dim, &cfg.hidden_widths(spec.dim), cfg.activation, stream)?;
    if cfg.random_biases {
        net = net.with_random_biases(&stream.derive(BIAS_TAG));
    }
    if cfg.standardize {
        let (mid, half) = spec.initial_law.box_geometry();
        net.with_standardization(Standardization::from_box(&mid, &half))
    } else {
        Ok(net)
    }
}

/// One-step regression targets for the step out of local index `j` of
/// `batch`.
pub fn semilinear_target(
    spec: &ProblemSpec,
    u_next: &StepFunction,
    batch: &PathBatch,
    j: usize,
    cache: &MarkCache,
    driver_state: DriverState,
) -> Result<Vec<f64>> {
    let d = spec.dim;
    let dt = batch.grid().dt();
    let t = batch.time(j);
    let kind = spec.driver.kind();
    let needs_gradient = matches!(kind, DriverKind::Semilinear { .. });
    let needs_nonlocal = matches!(kind, DriverKind::Semilinear { uses_nonlocal: true });

    struct Buffers<'a> {
        eval: Evaluator<'a>,
        grad: Vec<f64>,
        z: Vec<f64>,
        sigma: Vec<f64>,
        shifted: Vec<f64>,
    }

    par::try_map_with(
        batch.paths(),
        || Buffers {
            eval: Evaluator::new(u_next),
            grad: vec![0.0; d],
            z: vec![0.0; d],
            sigma: vec![0.0; d * d],
            shifted: vec![0.0; d],
        },
        |m, b| {
            let x = batch.state(m, j);
            let x_next = batch.state(m, j + 1);
            let y = if needs_gradient {
                b.eval.value_and_gradient(x_next, &mut b.grad)
            } else {
                b.eval.value(x_next)
            };
            if matches!(kind, DriverKind::Zero) {
                return if y.is_finite() {
                    Ok(y)
                } else {
                    Err(Error::NonFiniteTarget { path: m })
                };
            }
            if needs_gradient {
                match spec.gradient_convention {
                    GradientConvention::Gradient => b.z.copy_from_slice(&b.grad),
                    GradientConvention::SigmaTransposeGradient => {
                        (spec.diffusion)(x, &mut b.sigma);
                        for k in 0..d {
                            b.z[k] = (0..d).map(|r| b.sigma[r * d + k] * b.grad[r]).sum();
                        }
                    }
                }
            }
            let w = if needs_nonlocal {
                nonlocal_with(spec, &mut b.eval, x, batch.continuous(m, j), cache, &mut b.shifted)
            } else {
                0.0
            };
            let state = match driver_state {
                DriverState::Next => x_next,
                DriverState::Current => x,
            };
            let target = y - dt * spec.f(t, state, y, &b.z, w);
            if target.is_finite() {
                Ok(target)
            } else {
                Err(Error::NonFiniteTarget { path: m })
            }
        },
    )
}

/// Where per-iteration training batches come from.
#[derive(Debug, Clone, Copy)]
pub enum BatchSource<'a> {
    /// A new batch every iteration.
    Fresh {
        grid: &'a TimeGrid,
        step: usize,
        sampling: StateSampling,
    },
    /// The same batch every iteration; `step` is the local interval index.
    Fixed { batch: &'a PathBatch, step: usize },
}

fn one_step_batch(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    step: usize,
    sampling: StateSampling,
    paths: usize,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<(PathBatch, usize)> {
    match sampling {
        StateSampling::Auxiliary => {
            let local = TimeGrid::new(grid.time(step + 1) - grid.time(step), 1)?;
            let b = simulate_paths_from(spec, &spec.initial_law, grid.time(step), &local, paths, stream, opts)?;
            Ok((b, 0))
        }
        StateSampling::Forward => {
            let upto = TimeGrid::new(grid.time(step + 1), step + 1)?;
            let b = simulate_paths_from(spec, &spec.initial_law, 0.0, &upto, paths, stream, opts)?;
            Ok((b, step))
        }
    }
}

fn flatten_states(batch: &PathBatch, j: usize) -> Vec<f64> {
    (0..batch.paths())
        .flat_map(|m| batch.state(m, j).iter().copied())
        .collect()
}

/// Adam on `mean |U(x) - y|^2` with a fresh `(inputs, targets)` pair per
/// iteration. Returns the per-iteration loss trace.
fn fit<F>(net: &mut Network, cfg: &TrainConfig, step: usize, mut data: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut adam = AdamState::new(net.param_count(), cfg.learning_rate, cfg.schedule());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (inputs, targets) = data(it)?;
        if it == 0 && cfg.scale_outputs && net.output_scale().is_none() {
            *net = net.clone().with_output_scale(OutputScale::from_targets(&targets))?;
        }
        let (loss, grad) = net.mse_loss_and_gradient(&inputs, &targets)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            trace.push(loss);
            return Err(Error::Diverged {
                step,
                iteration: it,
                trace,
            });
        }
        trace.push(loss);
        adam.adam_step(net.params_mut(), &grad)?;
    }
    Ok(trace)
}

/// Fits `U_i` against the frozen `u_next`. `init` is the starting network.
pub fn train_step(
    spec: &ProblemSpec,
    u_next: &StepFunction,
    source: BatchSource<'_>,
    cfg: &TrainConfig,
    init: Network,
    stream: &RngStream,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    let step = match source {
        BatchSource::Fresh { step, .. } | BatchSource::Fixed { step, .. } => step,
    };
    let cache = MarkCache::draw(spec, cfg.mark_cache_size, &stream.derive(CACHE_TAG))?;
    let dt = match source {
        BatchSource::Fresh { grid, .. } => grid.dt(),
        BatchSource::Fixed { batch, .. } => batch.grid().dt(),
    };
    let opts = cfg.sim_options(spec, dt);
    let mut net = init;
    let fixed_inputs = match source {
        BatchSource::Fixed { batch, step } => Some((
            flatten_states(batch, step),
            semilinear_target(spec, u_next, batch, step, &cache, cfg.driver_state)?,
        )),
        BatchSource::Fresh { .. } => None,
    };
    let trace = fit(&mut net, cfg, step, |it| match (&source, &fixed_inputs) {
        (_, Some((x, y))) => Ok((x.clone(), y.clone())),
        (BatchSource::Fresh { grid, step, sampling }, None) => {
            let bs = stream.derive(BATCH_TAG).derive(it as u64);
            let (batch, j) = one_step_batch(spec, grid, *step, *sampling, cfg.batch_size, &bs, &opts)?;
            let y = semilinear_target(spec, u_next, &batch, j, &cache, cfg.driver_state)?;
            Ok((flatten_states(&batch, j), y))
        }
        (BatchSource::Fixed { .. }, None) => unreachable!("fixed batch precomputed"),
    })?;
    Ok((net, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionMeta {
    pub seed: u64,
    pub stream: u64,
    pub config_hash: String,
    pub horizon: f64,
    pub steps: usize,
}

/// Backward sequence `U_0, ..., U_{N-1}` plus the terminal function.
#[derive(Debug, Clone)]
pub struct DSSolution {
    pub networks: Vec<Option<Network>>,
    pub terminal: StepFunction,
    pub traces: Vec<Option<Vec<f64>>>,
    pub meta: SolutionMeta,
}

impl DSSolution {
    pub fn steps(&self) -> usize {
        self.networks.len()
    }

    pub fn network(&self, i: usize) -> Result<&Network> {
        self.networks
            .get(i)
            .ok_or(Error::OutOfRange {
                index: i,
                limit: self.steps(),
            })?
            .as_ref()
            .ok_or(Error::Untrained(i))
    }

    pub fn trace(&self, i: usize) -> Result<&[f64]> {
        self.traces
            .get(i)
            .ok_or(Error::OutOfRange {
                index: i,
                limit: self.steps(),
            })?
            .as_deref()
            .ok_or(Error::Untrained(i))
    }

    /// One `step_NNNN.json` per trained step, `loss_NNNN.csv` traces and
    /// `manifest.json` with `extra` embedded under `config`.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut trained = Vec::new();
        for (i, net) in self.networks.iter().enumerate() {
            if let Some(net) = net {
                net.save(&dir.join(format!("step_{i:04}.json")))?;
                trained.push(i);
            }
        }
        if let StepFunction::Network(n) = &self.terminal {
            n.save(&dir.join("terminal.json"))?;
        }
        for (i, tr) in self.traces.iter().enumerate() {
            if let Some(tr) = tr {
                let path = dir.join(format!("loss_{i:04}.csv"));
                fs::write(&path, crate::harness::loss_trace_csv(tr, false)).map_err(|e| Error::io(&path, e))?;
            }
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            trained_steps: trained,
            terminal_network: matches!(self.terminal, StepFunction::Network(_)),
            config: extra.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reload; the analytic terminal is taken from `spec`.
    pub fn load(dir: &Path, spec: &ProblemSpec) -> Result<(Self, serde_json::Value)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let n = manifest.meta.steps;
        let mut networks = vec![None; n];
        let mut traces = vec![None; n];
        for &i in &manifest.trained_steps {
            if i >= n {
                return Err(Error::OutOfRange { index: i, limit: n });
            }
            networks[i] = Some(Network::load(&dir.join(format!("step_{i:04}.json")))?);
            let tp = dir.join(format!("loss_{i:04}.csv"));
            if tp.exists() {
                let text = fs::read_to_string(&tp).map_err(|e| Error::io(&tp, e))?;
                traces[i] = Some(crate::harness::parse_loss_trace(&text)?);
            }
        }
        let terminal = if manifest.terminal_network {
            StepFunction::Network(Network::load(&dir.join("terminal.json"))?)
        } else {
            StepFunction::Terminal(spec.terminal.clone())
        };
        Ok((
            Self {
                networks,
                terminal,
                traces,
                meta: manifest.meta,
            },
            manifest.config,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: SolutionMeta,
    trained_steps: Vec<usize>,
    terminal_network: bool,
    config: serde_json::Value,
}

fn meta_for(grid: &TimeGrid, stream: &RngStream, config_hash: &str) -> SolutionMeta {
    SolutionMeta {
        seed: stream.seed,
        stream: stream.stream,
        config_hash: config_hash.to_string(),
        horizon: grid.horizon(),
        steps: grid.steps(),
    }
}

fn fit_terminal(spec: &ProblemSpec, grid: &TimeGrid, cfg: &TrainConfig, stream: &RngStream) -> Result<Network> {
    let mut net = fresh_network(spec, cfg, &stream.derive(INIT_TAG).derive(TERMINAL_STEP))?;
    let opts = cfg.sim_options(spec, grid.dt());
    fit(&mut net, cfg, grid.steps(), |it| {
        let bs = stream.derive(BATCH_TAG).derive(TERMINAL_STEP).derive(it as u64);
        let (batch, j) = match cfg.state_sampling {
            StateSampling::Auxiliary => {
                let g = TimeGrid::new(grid.dt(), 1)?;
                let b = simulate_paths_from(spec, &spec.initial_law, grid.horizon(), &g, cfg.batch_size, &bs, &opts)?;
                (b, 0)
            }
            StateSampling::Forward => {
                let b = simulate_paths_from(spec, &spec.initial_law, 0.0, grid, cfg.batch_size, &bs, &opts)?;
                (b, grid.steps())
            }
        };
        let x = flatten_states(&batch, j);
        let y = (0..batch.paths()).map(|m| spec.g(batch.state(m, j))).collect();
        Ok((x, y))
    })
    .map(|_| net)
}

/// Full backward induction `i = N-1, ..., 0`.
pub fn run_ds(spec: &ProblemSpec, grid: &TimeGrid, cfg: &TrainConfig, stream: &RngStream) -> Result<DSSolution> {
    run_ds_tagged(spec, grid, cfg, stream, "")
}

pub fn run_ds_tagged(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    stream: &RngStream,
    config_hash: &str,
) -> Result<DSSolution> {
    cfg.validate()?;
    let n = grid.steps();
    let terminal = if cfg.fit_terminal {
        StepFunction::Network(fit_terminal(spec, grid, cfg, stream)?)
    } else {
        StepFunction::Terminal(spec.terminal.clone())
    };
    let mut networks: Vec<Option<Network>> = vec![None; n];
    let mut traces: Vec<Option<Vec<f64>>> = vec![None; n];
    for i in (0..n).rev() {
        let step_stream = stream.derive(i as u64);
        let next = match networks.get(i + 1).and_then(|n| n.as_ref()) {
            Some(net) => StepFunction::Network(net.clone()),
            None => terminal.clone(),
        };
        let fresh = fresh_network(spec, cfg, &stream.derive(INIT_TAG).derive(i as u64))?;
        let (init, step_cfg) = match &next {
            StepFunction::Network(prev) if cfg.warm_start && prev.same_architecture(&fresh) => {
                let rate = cfg.warm_learning_rate.unwrap_or(cfg.learning_rate);
                (
                    prev.clone(),
                    Cow::Owned(TrainConfig {
                        learning_rate: rate,
                        ..cfg.clone()
                    }),
                )
            }
            _ => (fresh, Cow::Borrowed(cfg)),
        };
        let source = BatchSource::Fresh {
            grid,
            step: i,
            sampling: cfg.state_sampling,
        };
        let (net, trace) = train_step(spec, &next, source, &step_cfg, init, &step_stream)?;
        networks[i] = Some(net);
        traces[i] = Some(trace);
    }
    Ok(DSSolution {
        networks,
        terminal,
        traces,
        meta: meta_for(grid, stream, config_hash),
    })
}

fn linear_batch(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    step: usize,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let opts = cfg.sim_options(spec, grid.dt());
    let n = grid.steps();
    let dt = grid.dt();
    let (batch, first) = match cfg.state_sampling {
        StateSampling::Auxiliary => {
            let rest = TimeGrid::new(grid.horizon() - grid.time(step), n - step)?;
            let b = simulate_paths_from(
                spec,
                &spec.initial_law,
                grid.time(step),
                &rest,
                cfg.batch_size,
                stream,
                &opts,
            )?;
            (b, 0)
        }
        StateSampling::Forward => (
            simulate_paths_from(spec, &spec.initial_law, 0.0, grid, cfg.batch_size, stream, &opts)?,
            step,
        ),
    };
    let last = batch.steps();
    let zero = vec![0.0; spec.dim];
    let targets = par::try_map_indexed(batch.paths(), |m| {
        let mut h = spec.g(batch.state(m, last));
        if !matches!(spec.driver.kind(), DriverKind::Zero) {
            for k in first..last {
                h -= dt * spec.f(grid.time(step + k - first), batch.state(m, k), 0.0, &zero, 0.0);
            }
        }
        if h.is_finite() {
            Ok(h)
        } else {
            Err(Error::NonFiniteTarget { path: m })
        }
    })?;
    Ok((flatten_states(&batch, first), targets))
}

/// Regresses `H_i = g(X_N) - dt sum_{n=i}^{N-1} f(t_n, X_n)` on `X_i`.
pub fn run_ds_linear(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    step: usize,
    stream: &RngStream,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    if let DriverKind::Semilinear { .. } = spec.driver.kind() {
        return Err(Error::NonlinearDriver("the aggregate regression needs f = f(t, x)"));
    }
    if step >= grid.steps() {
        return Err(Error::OutOfRange {
            index: step,
            limit: grid.steps(),
        });
    }
    let mut net = fresh_network(spec, cfg, &stream.derive(INIT_TAG).derive(step as u64))?;
    let step_stream = stream.derive(step as u64);
    let trace = fit(&mut net, cfg, step, |it| {
        linear_batch(spec, grid, step, cfg, &step_stream.derive(BATCH_TAG).derive(it as u64))
    })?;
    Ok((net, trace))
}

/// Linear-case solution holding only `U_step`.
pub fn run_ds_linear_solution(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    step: usize,
    stream: &RngStream,
    config_hash: &str,
) -> Result<DSSolution> {
    let (net, trace) = run_ds_linear(spec, grid, cfg, step, stream)?;
    let n = grid.steps();
    let mut networks = vec![None; n];
    let mut traces = vec![None; n];
    networks[step] = Some(net);
    traces[step] = Some(trace);
    Ok(DSSolution {
        networks,
        terminal: StepFunction::Terminal(spec.terminal.clone()),
        traces,
        meta: meta_for(grid, stream, config_hash),
    })
}

/// `U_i` at each point; `i = N` evaluates the terminal function.
pub fn evaluate_solution(sol: &DSSolution, i: usize, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if i > sol.steps() {
        return Err(Error::OutOfRange {
            index: i,
            limit: sol.steps(),
        });
    }
    if i == sol.steps() {
        let mut eval = Evaluator::new(&sol.terminal);
        return Ok(points.iter().map(|p| eval.value(p)).collect());
    }
    let net = sol.network(i)?;
    points.iter().map(|p| net.forward(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{
        make_regulator_problem, Driver, InitialLaw, JumpCoefficient, JumpMeasureSpec, RegulatorParams,
    };
    use std::sync::Arc;

    fn quadratic_terminal() -> StepFunction {
        StepFunction::Terminal(Terminal {
            value: Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
            gradient: Some(Arc::new(|x: &[f64], o: &mut [f64]| {
                for (g, v) in o.iter_mut().zip(x) {
                    *g = 2.0 * v;
                }
            })),
        })
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            iterations: 50,
            learning_rate: 0.01,
            decay_steps: vec![],
            mark_cache_size: 200,
            widths: Some(vec![6]),
            activation: Activation::Softplus,
            ..TrainConfig::regulator()
        }
    }

    #[test]
    fn constant_function_has_zero_nonlocal_term() {
        let spec = make_regulator_problem(&RegulatorParams::paper(2), 2).unwrap();
        let cache = MarkCache::draw(&spec, 500, &RngStream::new(1, 0)).unwrap();
        let mut net = Network::zeros(2, &[3], Activation::Sigmoid).unwrap();
        let last = net.param_count() - 1;
        net.params_mut()[last] = 4.2;
        let v = mc_integral_operator(&spec, &StepFunction::Network(net), &[0.3, 0.1], &[1.0, -1.0], &cache);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn linear_function_nonlocal_term_is_direct_sum() {
        let spec = make_regulator_problem(&RegulatorParams::paper(3), 3).unwrap();
        let cache = MarkCache::draw(&spec, 1000, &RngStream::new(2, 0)).unwrap();
        let w = [0.5, -1.0, 2.0];
        let lin = StepFunction::Terminal(Terminal {
            value: Arc::new(move |x: &[f64]| 0.3 + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()),
            gradient: None,
        });
        let got = mc_integral_operator(&spec, &lin, &[0.0; 3], &[0.2, 0.4, -0.1], &cache);
        let mean_dot: f64 = (0..cache.len())
            .map(|k| cache.mark(k).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / cache.len() as f64;
        assert!((got - cache.total_intensity() * mean_dot).abs() < 1e-10);
    }

    #[test]
    fn zero_driver_target_is_next_value() {
        let spec = ProblemSpec::new("bm", 1)
            .with_diagonal_vol(vec![1.0])
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let batch = crate::simulate::simulate_euler(&spec, &grid, 20, &RngStream::new(0, 0)).unwrap();
        let cache = MarkCache::draw(&spec, 1, &RngStream::new(0, 1)).unwrap();
        let y = semilinear_target(&spec, &quadratic_terminal(), &batch, 0, &cache, DriverState::Next).unwrap();
        for m in 0..20 {
            assert_eq!(y[m], batch.state(m, 1)[0].powi(2));
        }
    }

    #[test]
    fn regulator_target_by_hand() {
        let params = RegulatorParams::paper(1);
        let spec = make_regulator_problem(&params, 1).unwrap();
        let grid = TimeGrid::new(0.1, 1).unwrap();
        let batch = crate::simulate::simulate_euler(&spec, &grid, 50, &RngStream::new(3, 0)).unwrap();
        let cache = MarkCache::draw(&spec, 10, &RngStream::new(0, 1)).unwrap();
        let th = params.control_costs[0];
        for (state, pick) in [(DriverState::Next, 1usize), (DriverState::Current, 0usize)] {
            let y = semilinear_target(&spec, &quadratic_terminal(), &batch, 0, &cache, state).unwrap();
            for m in 0..50 {
                let x1 = batch.state(m, 1)[0];
                let xs = batch.state(m, pick)[0];
                let expected = x1 * x1 - 0.1 * ((2.0 * x1).powi(2) / (4.0 * th) - xs * xs);
                assert!((y[m] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_transpose_convention_scales_gradient() {
        // f = z^2 with sigma = 0.5: z = 0.5 * 2x
        let spec = ProblemSpec::new("s", 1)
            .with_diagonal_vol(vec![0.5])
            .with_driver(Driver::semilinear(|_, _, _, z, _| z[0] * z[0], false))
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(0.2, 1).unwrap();
        let batch = crate::simulate::simulate_euler(&spec, &grid, 10, &RngStream::new(1, 0)).unwrap();
        let cache = MarkCache::draw(&spec, 1, &RngStream::new(0, 1)).unwrap();
        let y = semilinear_target(&spec, &quadratic_terminal(), &batch, 0, &cache, DriverState::Next).unwrap();
        for m in 0..10 {
            let x1 = batch.state(m, 1)[0];
            assert!((y[m] - (x1 * x1 - 0.2 * x1 * x1)).abs() < 1e-12);
        }
    }

    #[test]
    fn nonlocal_driver_uses_cache() {
        // f = w with gamma = z and U = x^2: I = nu * E[(xc+z)^2 - xc^2]
        let spec = ProblemSpec::new("j", 1)
            .with_jumps(
                JumpMeasureSpec::atoms(1, vec![2.0], vec![vec![0.5]]).unwrap(),
                JumpCoefficient::Additive,
            )
            .with_driver(Driver::semilinear(|_, _, _, _, w| w, true))
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(0.1, 1).unwrap();
        let batch = crate::simulate::simulate_euler(&spec, &grid, 10, &RngStream::new(2, 0)).unwrap();
        let cache = MarkCache::draw(&spec, 5, &RngStream::new(0, 1)).unwrap();
        let y = semilinear_target(&spec, &quadratic_terminal(), &batch, 0, &cache, DriverState::Next).unwrap();
        for m in 0..10 {
            let x1 = batch.state(m, 1)[0];
            let xc = batch.continuous(m, 0)[0];
            let i = 2.0 * ((xc + 0.5).powi(2) - xc * xc);
            assert!((y[m] - (x1 * x1 - 0.1 * i)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let spec = ProblemSpec::new("c", 2)
            .with_terminal(|_| 1.7, None)
            .with_initial_law(InitialLaw::cube(2, -1.0, 1.0));
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            iterations: 3000,
            learning_rate: 0.05,
            decay_steps: vec![2000, 2500],
            ..small_cfg()
        };
        let sol = run_ds(&spec, &grid, &cfg, &RngStream::new(5, 0)).unwrap();
        let trace = sol.trace(0).unwrap();
        assert!(*trace.last().unwrap() < 1e-6, "final loss {}", trace.last().unwrap());
        let v = evaluate_solution(&sol, 0, &[vec![0.0, 0.0], vec![0.9, -0.9]]).unwrap();
        assert!(v.iter().all(|x| (x - 1.7).abs() < 1e-3), "{v:?}");
        assert_eq!(evaluate_solution(&sol, 1, &[vec![3.0, 3.0]]).unwrap(), vec![1.7]);
        assert!(evaluate_solution(&sol, 2, &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn fixed_batch_source_reuses_targets() {
        let spec = ProblemSpec::new("c", 1)
            .with_diagonal_vol(vec![0.3])
            .with_terminal(|x| x[0], None)
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(0.5, 1).unwrap();
        let batch = crate::simulate::simulate_euler(&spec, &grid, 128, &RngStream::new(1, 0)).unwrap();
        let init = fresh_network(&spec, &small_cfg(), &RngStream::new(0, 0)).unwrap();
        let next = StepFunction::Terminal(spec.terminal.clone());
        let (_, trace) = train_step(
            &spec,
            &next,
            BatchSource::Fixed { batch: &batch, step: 0 },
            &small_cfg(),
            init,
            &RngStream::new(0, 2),
        )
        .unwrap();
        assert_eq!(trace.len(), 50);
        assert!(trace[49] < trace[0]);
    }

    #[test]
    fn linear_run_rejects_semilinear_driver() {
        let spec = make_regulator_problem(&RegulatorParams::paper(1), 1).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let err = run_ds_linear(&spec, &grid, &small_cfg(), 0, &RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::NonlinearDriver(_)));
    }

    #[test]
    fn linear_constant_aggregate() {
        // f = 1, g = 0 gives H_0 = -T on every path
        let spec = ProblemSpec::new("h", 1)
            .with_diagonal_vol(vec![0.5])
            .with_driver(Driver::linear(|_, _| 1.0))
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(0.8, 4).unwrap();
        let cfg = TrainConfig {
            iterations: 3000,
            learning_rate: 0.05,
            decay_steps: vec![1000, 2000],
            ..small_cfg()
        };
        let (net, trace) = run_ds_linear(&spec, &grid, &cfg, 0, &RngStream::new(7, 0)).unwrap();
        assert!(*trace.last().unwrap() < 1e-6, "{:?}", &trace[trace.len() - 5..]);
        for x in [-0.8, 0.0, 0.7] {
            assert!((net.forward(&[x]).unwrap() + 0.8).abs() < 1e-3);
        }
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let spec = ProblemSpec::new("d", 1)
            .with_terminal(|x| 1e200 * x[0].exp(), None)
            .with_initial_law(InitialLaw::cube(1, 100.0, 101.0));
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let err = run_ds(&spec, &grid, &small_cfg(), &RngStream::new(0, 0)).unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteTarget { .. } | Error::Diverged { .. }),
            "{err}"
        );
    }

    #[test]
    fn warm_learning_rate_applies_to_warm_started_steps() {
        let spec = make_regulator_problem(&RegulatorParams::paper(1), 1).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let drift = |cfg: &TrainConfig| {
            let sol = run_ds(&spec, &grid, cfg, &RngStream::new(4, 0)).unwrap();
            let (a, b) = (sol.network(0).unwrap().params(), sol.network(1).unwrap().params());
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        // 50 Adam updates move each parameter by at most about 50 times the rate
        let frozen = drift(&TrainConfig {
            warm_learning_rate: Some(1e-12),
            ..small_cfg()
        });
        assert!(frozen < 1e-9, "{frozen}");
        assert!(drift(&small_cfg()) > 1e-3);
        let bad = TrainConfig {
            warm_learning_rate: Some(0.0),
            ..small_cfg()
        };
        assert!(run_ds(&spec, &grid, &bad, &RngStream::new(4, 0)).is_err());
    }

    #[test]
    fn identical_seed_identical_solution() {
        let spec = make_regulator_problem(&RegulatorParams::paper(1), 1).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let a = run_ds(&spec, &grid, &small_cfg(), &RngStream::new(3, 0)).unwrap();
        let b = run_ds(&spec, &grid, &small_cfg(), &RngStream::new(3, 0)).unwrap();
        assert_eq!(a.networks, b.networks);
        assert_eq!(a.traces, b.traces);
        let c = run_ds(&spec, &grid, &small_cfg(), &RngStream::new(4, 0)).unwrap();
        assert_ne!(a.networks, c.networks);
    }

    #[test]
    fn terminal_fit_option_trains_terminal_network() {
        let spec = ProblemSpec::new("t", 1)
            .with_terminal(|x| 0.5 * x[0], None)
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0));
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let cfg = TrainConfig {
            fit_terminal: true,
            iterations: 400,
            learning_rate: 0.02,
            ..small_cfg()
        };
        let sol = run_ds(&spec, &grid, &cfg, &RngStream::new(1, 0)).unwrap();
        assert!(matches!(sol.terminal, StepFunction::Network(_)));
        let v = evaluate_solution(&sol, 1, &[vec![0.5]]).unwrap()[0];
        assert!((v - 0.25).abs() < 0.05, "{v}");
    }

    #[test]
    fn save_and_load_round_trip() {
        let spec = make_regulator_problem(&RegulatorParams::paper(1), 1).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let sol = run_ds(&spec, &grid, &small_cfg(), &RngStream::new(3, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        sol.save(dir.path(), &serde_json::json!({"k": 1})).unwrap();
        let (back, extra) = DSSolution::load(dir.path(), &spec).unwrap();
        assert_eq!(extra, serde_json::json!({"k": 1}));
        assert_eq!(back.networks, sol.networks);
        assert_eq!(back.meta, sol.meta);
        for i in 0..2 {
            let a = back.trace(i).unwrap();
            let b = sol.trace(i).unwrap();
            assert_eq!(a.len(), b.len());
        }
    }
}
