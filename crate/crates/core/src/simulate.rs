//! Forward simulation of the jump diffusion.
//!
//! Every path records, per grid interval, the continuous Euler part
//! `Xc_{i+1} = X_i + b dt + sigma dW`, the compensated jump part `XJ_{i+1}`,
//! the Brownian increment, the jump marks, and the compensated count
//! increment `dM_i`. Paths are generated independently from per-path
//! substreams so a batch is a pure function of its [`RngStream`].

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::par;
use crate::problem::{
    make_regulator_problem, BasketParams, InitialLaw, JumpCoefficient, ProblemSpec, RegulatorParams, TimeGrid,
};
use crate::rng::{RngStream, INITIAL_INTERVAL};

pub const DEFAULT_MARK_CAP: usize = 64;
pub const DEFAULT_COMPENSATOR_SAMPLES: usize = 10_000;

const COMPENSATOR_TAG: u64 = 0xC0_4E_5A_70;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Maximum number of jumps stored per path and interval.
    pub mark_cap: usize,
    /// Marks used for the compensator when `gamma^X` is not linear in `z`.
    pub compensator_samples: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mark_cap: DEFAULT_MARK_CAP,
            compensator_samples: DEFAULT_COMPENSATOR_SAMPLES,
        }
    }
}

/// Simulated trajectories on a uniform grid starting at `start_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    dim: usize,
    paths: usize,
    grid: TimeGrid,
    start_time: f64,
    states: Vec<f64>,
    continuous: Vec<f64>,
    jump_parts: Vec<f64>,
    brownian: Vec<f64>,
    mark_offsets: Vec<usize>,
    marks: Vec<f64>,
    compensated: Vec<f64>,
}

impl PathBatch {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    /// Absolute time of local grid index `i`.
    pub fn time(&self, i: usize) -> f64 {
        self.start_time + self.grid.time(i)
    }

    /// `X[m][i]`, `i` in `0..=steps`.
    pub fn state(&self, m: usize, i: usize) -> &[f64] {
        let n = self.steps() + 1;
        let o = (m * n + i) * self.dim;
        &self.states[o..o + self.dim]
    }

    fn cell(&self, m: usize, i: usize) -> usize {
        m * self.steps() + i
    }

    /// `Xc[m][i+1]`, the continuous part of the step out of `i`.
    pub fn continuous(&self, m: usize, i: usize) -> &[f64] {
        let o = self.cell(m, i) * self.dim;
        &self.continuous[o..o + self.dim]
    }

    /// `XJ[m][i+1]`, the compensated jump part of the step out of `i`.
    pub fn jump_part(&self, m: usize, i: usize) -> &[f64] {
        let o = self.cell(m, i) * self.dim;
        &self.jump_parts[o..o + self.dim]
    }

    pub fn brownian(&self, m: usize, i: usize) -> &[f64] {
        let o = self.cell(m, i) * self.dim;
        &self.brownian[o..o + self.dim]
    }

    pub fn jump_count(&self, m: usize, i: usize) -> usize {
        let c = self.cell(m, i);
        (self.mark_offsets[c + 1] - self.mark_offsets[c]) / self.dim
    }

    pub fn marks(&self, m: usize, i: usize) -> std::slice::ChunksExact<'_, f64> {
        let c = self.cell(m, i);
        self.marks[self.mark_offsets[c]..self.mark_offsets[c + 1]].chunks_exact(self.dim)
    }

    /// `dM[m][i]`: rho-weighted jump count minus its compensator.
    pub fn compensated(&self, m: usize, i: usize) -> f64 {
        self.compensated[self.cell(m, i)]
    }

    /// Columnar dump `path,step,coord,value` of the states.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,step,coord,value")?;
        for m in 0..self.paths {
            for i in 0..=self.steps() {
                for (k, v) in self.state(m, i).iter().enumerate() {
                    writeln!(out, "{m},{i},{k},{}", crate::harness::fmt9(*v))?;
                }
            }
        }
        Ok(())
    }

    fn assemble(dim: usize, grid: TimeGrid, start_time: f64, records: Vec<PathRecord>) -> Self {
        let paths = records.len();
        let n = grid.steps();
        let mut batch = PathBatch {
            dim,
            paths,
            grid,
            start_time,
            states: Vec::with_capacity(paths * (n + 1) * dim),
            continuous: Vec::with_capacity(paths * n * dim),
            jump_parts: Vec::with_capacity(paths * n * dim),
            brownian: Vec::with_capacity(paths * n * dim),
            mark_offsets: Vec::with_capacity(paths * n + 1),
            marks: Vec::new(),
            compensated: Vec::with_capacity(paths * n),
        };
        batch.mark_offsets.push(0);
        for r in records {
            batch.states.extend_from_slice(&r.states);
            batch.continuous.extend_from_slice(&r.continuous);
            batch.jump_parts.extend_from_slice(&r.jump_parts);
            batch.brownian.extend_from_slice(&r.brownian);
            let base = batch.marks.len();
            batch.mark_offsets.extend(r.mark_offsets[1..].iter().map(|o| o + base));
            batch.marks.extend_from_slice(&r.marks);
            batch.compensated.extend_from_slice(&r.compensated);
        }
        batch
    }
}

struct PathRecord {
    states: Vec<f64>,
    continuous: Vec<f64>,
    jump_parts: Vec<f64>,
    brownian: Vec<f64>,
    mark_offsets: Vec<usize>,
    marks: Vec<f64>,
    compensated: Vec<f64>,
}

impl PathRecord {
    fn new(dim: usize, steps: usize) -> Self {
        Self {
            states: Vec::with_capacity((steps + 1) * dim),
            continuous: Vec::with_capacity(steps * dim),
            jump_parts: Vec::with_capacity(steps * dim),
            brownian: Vec::with_capacity(steps * dim),
            mark_offsets: vec![0],
            marks: Vec::new(),
            compensated: Vec::with_capacity(steps),
        }
    }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let p = Poisson::new(mean).expect("positive finite poisson mean");
    p.sample(rng) as usize
}

/// `int gamma^X(x, z) nu(dz)` and `int rho dnu`, exact when the jump
/// coefficient is linear in the mark and the measure has moments, else by
/// Monte Carlo over marks drawn once per batch.
#[derive(Debug, Clone)]
pub struct Compensator {
    first_moment: Option<Vec<f64>>,
    sample_marks: Vec<Vec<f64>>,
    total_intensity: f64,
    weight_integral: f64,
}

impl Compensator {
    pub fn new(spec: &ProblemSpec, stream: &RngStream, samples: usize) -> Self {
        let measure = &spec.jump_measure;
        let total = measure.total_intensity();
        let first_moment = if spec.jump_coeff.is_linear_in_mark() {
            measure.mean_vector().ok()
        } else {
            None
        };
        let need_samples = total > 0.0 && (first_moment.is_none() || !measure.is_unweighted());
        let sample_marks = if need_samples {
            let mut rng = stream.derive(COMPENSATOR_TAG).generator();
            (0..samples.max(1)).map(|_| measure.sample_mark(&mut rng)).collect()
        } else {
            Vec::new()
        };
        let weight_integral = if measure.is_unweighted() {
            total
        } else if sample_marks.is_empty() {
            0.0
        } else {
            total * sample_marks.iter().map(|z| measure.weight(z)).sum::<f64>() / sample_marks.len() as f64
        };
        Self {
            first_moment,
            sample_marks,
            total_intensity: total,
            weight_integral,
        }
    }

    pub fn weight_integral(&self) -> f64 {
        self.weight_integral
    }

    pub fn jump_integral(&self, coeff: &JumpCoefficient, x: &[f64], out: &mut [f64]) {
        if self.total_intensity == 0.0 {
            out.fill(0.0);
            return;
        }
        match (&self.first_moment, coeff) {
            (Some(m1), JumpCoefficient::Additive) => out.copy_from_slice(m1),
            (Some(m1), JumpCoefficient::Multiplicative) => {
                for ((o, xi), mi) in out.iter_mut().zip(x).zip(m1) {
                    *o = xi * mi;
                }
            }
            _ => {
                out.fill(0.0);
                let mut tmp = vec![0.0; x.len()];
                for z in &self.sample_marks {
                    coeff.eval(x, z, &mut tmp);
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
                let scale = self.total_intensity / self.sample_marks.len() as f64;
                out.iter_mut().for_each(|o| *o *= scale);
            }
        }
    }
}

fn mat_vec(a: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * d..(i + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

/// Euler scheme on `grid`, starting at absolute time `start_time` from
/// draws of `law`.
pub fn simulate_euler_from(
    spec: &ProblemSpec,
    law: &InitialLaw,
    start_time: f64,
    grid: &TimeGrid,
    paths: usize,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<PathBatch> {
    if paths == 0 {
        return Err(Error::InvalidParameter("batch needs at least one path".into()));
    }
    let d = spec.dim;
    if law.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "initial law has dimension {}, problem {d}",
            law.dim()
        )));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let comp = Compensator::new(spec, stream, opts.compensator_samples);
    let measure = &spec.jump_measure;
    let jump_rate = measure.total_intensity() * dt;

    let records = par::try_map_indexed(paths, |m| {
        let mut rec = PathRecord::new(d, n);
        let mut x = vec![0.0; d];
        law.sample(&mut stream.substream(m as u32, INITIAL_INTERVAL), &mut x);
        rec.states.extend_from_slice(&x);

        let mut drift = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        let mut dw = vec![0.0; d];
        let mut diffusion = vec![0.0; d];
        let mut gamma = vec![0.0; d];
        let mut compensator = vec![0.0; d];
        let mut xj = vec![0.0; d];
        for i in 0..n {
            let mut rng = stream.substream(m as u32, i as u32);
            (spec.drift)(&x, &mut drift);
            (spec.diffusion)(&x, &mut sigma);
            for w in dw.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *w = sqrt_dt * e;
            }
            mat_vec(&sigma, &dw, &mut diffusion);

            let count = poisson_count(jump_rate, &mut rng);
            if count > opts.mark_cap {
                return Err(Error::MarkOverflow {
                    path: m,
                    step: i,
                    count,
                    cap: opts.mark_cap,
                });
            }
            xj.fill(0.0);
            let mut weighted = 0.0;
            for _ in 0..count {
                let z = measure.sample_mark(&mut rng);
                spec.jump_coeff.eval(&x, &z, &mut gamma);
                for (a, g) in xj.iter_mut().zip(&gamma) {
                    *a += g;
                }
                weighted += measure.weight(&z);
                rec.marks.extend_from_slice(&z);
            }
            rec.mark_offsets.push(rec.marks.len());
            comp.jump_integral(&spec.jump_coeff, &x, &mut compensator);
            for (a, c) in xj.iter_mut().zip(&compensator) {
                *a -= dt * c;
            }

            for k in 0..d {
                let xc = x[k] + drift[k] * dt + diffusion[k];
                rec.continuous.push(xc);
                x[k] = xc + xj[k];
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step: i + 1, path: m });
            }
            rec.jump_parts.extend_from_slice(&xj);
            rec.brownian.extend_from_slice(&dw);
            rec.compensated.push(weighted - dt * comp.weight_integral());
            rec.states.extend_from_slice(&x);
        }
        Ok(rec)
    })?;
    Ok(PathBatch::assemble(d, *grid, start_time, records))
}

/// Euler paths from the problem's initial law on `[0, T]`.
pub fn simulate_euler(spec: &ProblemSpec, grid: &TimeGrid, paths: usize, stream: &RngStream) -> Result<PathBatch> {
    simulate_euler_from(
        spec,
        &spec.initial_law,
        0.0,
        grid,
        paths,
        stream,
        &SimOptions::default(),
    )
}

/// Jump storage needed for Poisson(`mean`) counts beyond any realistic
/// fluctuation: mean plus twelve standard deviations.
pub fn atom_cap(mean: f64) -> usize {
    (mean + 12.0 * mean.sqrt() + 12.0).ceil() as usize
}

/// Exact paths of the basket model: per interval the log-price moves by
/// `(r - sigma_i^2/2 - h0_i l0 - h1_i l_i) dt + sigma_i (L dW)_i
///  + ln(1+h0_i) dN0 + ln(1+h1_i) dN_i`.
/// `mark_cap` is raised to [`atom_cap`] of the expected jump count.
pub fn simulate_basket_exact_from(
    params: &BasketParams,
    law: &InitialLaw,
    start_time: f64,
    grid: &TimeGrid,
    paths: usize,
    stream: &RngStream,
    mark_cap: usize,
) -> Result<PathBatch> {
    let d = params.dim();
    params.validate(d)?;
    if paths == 0 {
        return Err(Error::InvalidParameter("batch needs at least one path".into()));
    }
    if law.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "initial law has dimension {}, problem {d}",
            law.dim()
        )));
    }
    let chol = params.cholesky()?;
    let n = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let h0 = &params.systematic_jumps;
    let h1 = &params.idiosyncratic_jumps;
    let l0 = params.systematic_intensity;
    let li = &params.idiosyncratic_intensities;
    let log_drift: Vec<f64> = (0..d)
        .map(|k| (params.rate - 0.5 * params.vols[k].powi(2) - h0[k] * l0 - h1[k] * li[k]) * dt)
        .collect();
    let log_h0: Vec<f64> = h0.iter().map(|h| h.ln_1p()).collect();
    let log_h1: Vec<f64> = h1.iter().map(|h| h.ln_1p()).collect();
    let total_intensity = l0 + li.iter().sum::<f64>();
    let mark_cap = mark_cap.max(atom_cap(total_intensity * dt));

    let records = par::try_map_indexed(paths, |m| {
        let mut rec = PathRecord::new(d, n);
        let mut x = vec![0.0; d];
        law.sample(&mut stream.substream(m as u32, INITIAL_INTERVAL), &mut x);
        rec.states.extend_from_slice(&x);
        let mut dw = vec![0.0; d];
        let mut corr = vec![0.0; d];
        for i in 0..n {
            let mut rng = stream.substream(m as u32, i as u32);
            for w in dw.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *w = sqrt_dt * e;
            }
            mat_vec(&chol, &dw, &mut corr);
            let n0 = poisson_count(l0 * dt, &mut rng);
            let mut total = n0;
            let mut idio = vec![0usize; d];
            for k in 0..d {
                idio[k] = poisson_count(li[k] * dt, &mut rng);
                total += idio[k];
            }
            if total > mark_cap {
                return Err(Error::MarkOverflow {
                    path: m,
                    step: i,
                    count: total,
                    cap: mark_cap,
                });
            }
            for _ in 0..n0 {
                rec.marks.extend_from_slice(h0);
            }
            for k in 0..d {
                for _ in 0..idio[k] {
                    let start = rec.marks.len();
                    rec.marks.resize(start + d, 0.0);
                    rec.marks[start + k] = h1[k];
                }
            }
            rec.mark_offsets.push(rec.marks.len());
            for k in 0..d {
                let xc = x[k] + params.rate * x[k] * dt + params.vols[k] * x[k] * corr[k];
                let log_inc =
                    log_drift[k] + params.vols[k] * corr[k] + log_h0[k] * n0 as f64 + log_h1[k] * idio[k] as f64;
                let next = x[k] * log_inc.exp();
                rec.continuous.push(xc);
                rec.jump_parts.push(next - xc);
                x[k] = next;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step: i + 1, path: m });
            }
            rec.brownian.extend_from_slice(&dw);
            rec.compensated.push(total as f64 - total_intensity * dt);
            rec.states.extend_from_slice(&x);
        }
        Ok(rec)
    })?;
    Ok(PathBatch::assemble(d, *grid, start_time, records))
}

/// Exact basket paths on `[0, T]` from draws of `initial`.
pub fn simulate_basket_exact(
    params: &BasketParams,
    grid: &TimeGrid,
    paths: usize,
    stream: &RngStream,
    initial: &InitialLaw,
) -> Result<PathBatch> {
    simulate_basket_exact_from(params, initial, 0.0, grid, paths, stream, DEFAULT_MARK_CAP)
}

/// Exact law when the problem carries one, Euler otherwise.
pub fn simulate_paths_from(
    spec: &ProblemSpec,
    law: &InitialLaw,
    start_time: f64,
    grid: &TimeGrid,
    paths: usize,
    stream: &RngStream,
    opts: &SimOptions,
) -> Result<PathBatch> {
    match &spec.dynamics {
        crate::problem::Dynamics::ExactBasket(p) => {
            simulate_basket_exact_from(p, law, start_time, grid, paths, stream, opts.mark_cap)
        }
        crate::problem::Dynamics::Euler => simulate_euler_from(spec, law, start_time, grid, paths, stream, opts),
    }
}

/// One step of the regulator's auxiliary process on `[t_from, t_to]`,
/// started from `xi ~ Uniform([-a, a]^d)`. With zero drift, constant
/// diffusion and additive jumps the Euler step is exact.
pub fn simulate_regulator_interval(
    params: &RegulatorParams,
    t_from: f64,
    t_to: f64,
    paths: usize,
    stream: &RngStream,
) -> Result<PathBatch> {
    if !(t_from < t_to) {
        return Err(Error::InvalidParameter(format!("empty interval [{t_from}, {t_to}]")));
    }
    let spec = make_regulator_problem(params, params.dim())?;
    let grid = TimeGrid::new(t_to - t_from, 1)?;
    simulate_euler_from(
        &spec,
        &params.domain(),
        t_from,
        &grid,
        paths,
        stream,
        &SimOptions::default(),
    )
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Refinement factor between the finest probed grid and the reference grid.
pub const PROBE_REFERENCE_FACTOR: usize = 16;

/// RMS terminal error of Euler on each grid in `steps_list` against a
/// reference Euler solution on a grid `PROBE_REFERENCE_FACTOR` times finer
/// than the finest probed one. All grids see the same Brownian path and the
/// same jump times and marks.
pub fn strong_error_probe(
    spec: &ProblemSpec,
    steps_list: &[usize],
    paths: usize,
    stream: &RngStream,
) -> Result<Vec<(usize, f64)>> {
    if spec.dim != 1 {
        return Err(Error::InvalidParameter("strong error probe is one-dimensional".into()));
    }
    let &finest = steps_list
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidParameter("empty grid list".into()))?;
    if steps_list.windows(2).any(|w| w[0] >= w[1]) || steps_list[0] == 0 {
        return Err(Error::InvalidParameter(
            "grid list must be increasing and positive".into(),
        ));
    }
    if steps_list.iter().any(|n| finest % n != 0) {
        return Err(Error::InvalidParameter("every grid must divide the finest".into()));
    }
    let reference = finest * PROBE_REFERENCE_FACTOR;
    let horizon = 1.0;
    let comp = Compensator::new(spec, stream, DEFAULT_COMPENSATOR_SAMPLES);
    let measure = &spec.jump_measure;

    let errors = par::map_indexed(paths, |m| {
        let mut x0 = [0.0];
        spec.initial_law
            .sample(&mut stream.substream(m as u32, INITIAL_INTERVAL), &mut x0);
        let mut rng = stream.substream(m as u32, 0);
        let fine_dt = horizon / reference as f64;
        let dw: Vec<f64> = (0..reference)
            .map(|_| fine_dt.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut jrng = stream.substream(m as u32, 1);
        let count = poisson_count(measure.total_intensity() * horizon, &mut jrng);
        let jumps: Vec<(f64, Vec<f64>)> = (0..count)
            .map(|_| (jrng.random::<f64>() * horizon, measure.sample_mark(&mut jrng)))
            .collect();

        let run = |n: usize| -> f64 {
            let dt = horizon / n as f64;
            let ratio = reference / n;
            let mut x = x0[0];
            let (mut b, mut s, mut g, mut c) = ([0.0], [0.0], [0.0], [0.0]);
            for j in 0..n {
                let w: f64 = dw[j * ratio..(j + 1) * ratio].iter().sum();
                (spec.drift)(&[x], &mut b);
                (spec.diffusion)(&[x], &mut s);
                let mut jump = 0.0;
                for (t, z) in &jumps {
                    let idx = ((t / dt) as usize).min(n - 1);
                    if idx == j {
                        spec.jump_coeff.eval(&[x], z, &mut g);
                        jump += g[0];
                    }
                }
                comp.jump_integral(&spec.jump_coeff, &[x], &mut c);
                x += b[0] * dt + s[0] * w + jump - dt * c[0];
            }
            x
        };
        let exact = run(reference);
        steps_list
            .iter()
            .map(|&n| (run(n) - exact).powi(2))
            .collect::<Vec<f64>>()
    });

    Ok(steps_list
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mse = errors.iter().map(|e| e[k]).sum::<f64>() / paths as f64;
            (n, mse.sqrt())
        })
        .collect())
}
