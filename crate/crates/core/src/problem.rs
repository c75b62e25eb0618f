//! Problem data: time grid, jump measure, coefficient bundle, and the two
//! shipped instances (jump-diffusion basket call, stochastic linear
//! regulator with Gamma jumps).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_i`; the last grid point returns the horizon itself.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }
}

pub type MarkSampler = Arc<dyn Fn(&mut dyn rand::RngCore) -> Vec<f64> + Send + Sync>;
pub type MarkWeight = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum MarkLaw {
    /// Independent compound Poisson streams, one per coordinate; stream `i`
    /// jumps at rate `intensities[i]` by `Gamma(shapes[i], rates[i]) e_i`.
    ProductGamma {
        intensities: Vec<f64>,
        shapes: Vec<f64>,
        rates: Vec<f64>,
    },
    /// Finitely many Poisson streams with deterministic jump vectors.
    Atoms {
        intensities: Vec<f64>,
        marks: Vec<Vec<f64>>,
    },
    /// Arbitrary finite measure given by its mass and a sampler of the
    /// normalized law. No closed-form moments.
    Custom { total_intensity: f64, sampler: MarkSampler },
}

impl fmt::Debug for MarkLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarkLaw::ProductGamma {
                intensities,
                shapes,
                rates,
            } => f
                .debug_struct("ProductGamma")
                .field("intensities", intensities)
                .field("shapes", shapes)
                .field("rates", rates)
                .finish(),
            MarkLaw::Atoms { intensities, marks } => f
                .debug_struct("Atoms")
                .field("intensities", intensities)
                .field("marks", marks)
                .finish(),
            MarkLaw::Custom { total_intensity, .. } => f
                .debug_struct("Custom")
                .field("total_intensity", total_intensity)
                .finish_non_exhaustive(),
        }
    }
}

/// Finite jump measure `nu` on R^d with the weight `rho` used by the
/// nonlocal operator and the compensated count increments.
#[derive(Clone)]
pub struct JumpMeasureSpec {
    dim: usize,
    law: MarkLaw,
    weight: Option<MarkWeight>,
}

impl fmt::Debug for JumpMeasureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JumpMeasureSpec")
            .field("dim", &self.dim)
            .field("law", &self.law)
            .field("weighted", &self.weight.is_some())
            .finish()
    }
}

fn check_nonneg(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        Some(x) => Err(Error::InvalidParameter(format!(
            "{name} must be finite and >= 0, got {x}"
        ))),
        None => Ok(()),
    }
}

fn check_pos(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        Some(x) => Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {x}"
        ))),
        None => Ok(()),
    }
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{name} has length {}, expected {d}",
            v.len()
        )));
    }
    Ok(())
}

impl JumpMeasureSpec {
    pub fn none(dim: usize) -> Self {
        Self {
            dim,
            law: MarkLaw::Atoms {
                intensities: vec![],
                marks: vec![],
            },
            weight: None,
        }
    }

    pub fn product_gamma(intensities: Vec<f64>, shapes: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let dim = intensities.len();
        check_len("shapes", &shapes, dim)?;
        check_len("rates", &rates, dim)?;
        check_nonneg("intensities", &intensities)?;
        check_pos("shapes", &shapes)?;
        check_pos("rates", &rates)?;
        Ok(Self {
            dim,
            law: MarkLaw::ProductGamma {
                intensities,
                shapes,
                rates,
            },
            weight: None,
        })
    }

    pub fn atoms(dim: usize, intensities: Vec<f64>, marks: Vec<Vec<f64>>) -> Result<Self> {
        if intensities.len() != marks.len() {
            return Err(Error::ShapeMismatch("one intensity per atom required".into()));
        }
        check_nonneg("intensities", &intensities)?;
        for m in &marks {
            check_len("atom", m, dim)?;
            if m.iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidParameter("atom at the origin".into()));
            }
        }
        Ok(Self {
            dim,
            law: MarkLaw::Atoms { intensities, marks },
            weight: None,
        })
    }

    pub fn custom(dim: usize, total_intensity: f64, sampler: MarkSampler) -> Result<Self> {
        check_nonneg("total intensity", &[total_intensity])?;
        Ok(Self {
            dim,
            law: MarkLaw::Custom {
                total_intensity,
                sampler,
            },
            weight: None,
        })
    }

    pub fn with_weight(mut self, weight: MarkWeight) -> Self {
        self.weight = Some(weight);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn law(&self) -> &MarkLaw {
        &self.law
    }

    pub fn total_intensity(&self) -> f64 {
        match &self.law {
            MarkLaw::ProductGamma { intensities, .. } | MarkLaw::Atoms { intensities, .. } => intensities.iter().sum(),
            MarkLaw::Custom { total_intensity, .. } => *total_intensity,
        }
    }

    pub fn weight(&self, z: &[f64]) -> f64 {
        self.weight.as_ref().map_or(1.0, |w| w(z))
    }

    pub fn is_unweighted(&self) -> bool {
        self.weight.is_none()
    }

    fn pick(intensities: &[f64], rng: &mut dyn rand::RngCore) -> usize {
        let total: f64 = intensities.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (k, l) in intensities.iter().enumerate() {
            if u < *l {
                return k;
            }
            u -= l;
        }
        intensities.iter().rposition(|l| *l > 0.0).unwrap_or(0)
    }

    /// One draw from `nu / nu(R^d)`. Must not be called on the null measure.
    pub fn sample_mark(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        match &self.law {
            MarkLaw::ProductGamma {
                intensities,
                shapes,
                rates,
            } => {
                let k = Self::pick(intensities, rng);
                let mut z = vec![0.0; self.dim];
                let gamma = Gamma::new(shapes[k], 1.0 / rates[k]).expect("validated gamma parameters");
                let mut v = 0.0;
                while v == 0.0 {
                    v = gamma.sample(rng);
                }
                z[k] = v;
                z
            }
            MarkLaw::Atoms { intensities, marks } => marks[Self::pick(intensities, rng)].clone(),
            MarkLaw::Custom { sampler, .. } => sampler(rng),
        }
    }

    /// `int z_coord^k nu(dz)` for `k` in {1, 2}.
    pub fn moment(&self, coordinate: usize, k: u32) -> Result<f64> {
        if coordinate >= self.dim {
            return Err(Error::OutOfRange {
                index: coordinate,
                limit: self.dim,
            });
        }
        if !(k == 1 || k == 2) {
            return Err(Error::InvalidParameter(format!("moment order {k} not in {{1, 2}}")));
        }
        match &self.law {
            MarkLaw::ProductGamma {
                intensities,
                shapes,
                rates,
            } => {
                let (l, a, b) = (intensities[coordinate], shapes[coordinate], rates[coordinate]);
                Ok(match k {
                    1 => l * a / b,
                    _ => l * a * (a + 1.0) / (b * b),
                })
            }
            MarkLaw::Atoms { intensities, marks } => Ok(intensities
                .iter()
                .zip(marks)
                .map(|(l, z)| l * z[coordinate].powi(k as i32))
                .sum()),
            MarkLaw::Custom { .. } => Err(Error::UnsupportedMeasure("custom sampler has no closed-form moments")),
        }
    }

    /// First-moment vector `int z nu(dz)`.
    pub fn mean_vector(&self) -> Result<Vec<f64>> {
        (0..self.dim).map(|i| self.moment(i, 1)).collect()
    }
}

/// Exact moment of a jump measure; see [`JumpMeasureSpec::moment`].
pub fn nu_moment(spec: &JumpMeasureSpec, coordinate: usize, k: u32) -> Result<f64> {
    spec.moment(coordinate, k)
}

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Send + Sync>;
pub type GeneralJump = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// The jump coefficient `gamma^X(x, z)`.
#[derive(Clone)]
pub enum JumpCoefficient {
    /// `gamma(x, z) = z`
    Additive,
    /// `gamma(x, z) = x * z` componentwise
    Multiplicative,
    General(GeneralJump),
}

impl JumpCoefficient {
    pub fn eval(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            JumpCoefficient::Additive => out.copy_from_slice(z),
            JumpCoefficient::Multiplicative => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(z) {
                    *o = a * b;
                }
            }
            JumpCoefficient::General(g) => g(x, z, out),
        }
    }

    /// Linear in `z`, so the compensator follows from the first moment.
    pub fn is_linear_in_mark(&self) -> bool {
        !matches!(self, JumpCoefficient::General(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    /// `f = 0`
    Zero,
    /// `f = f(t, x)`
    Linear,
    /// Depends on `(y, z)`, and on the nonlocal term `w` when flagged.
    Semilinear { uses_nonlocal: bool },
}

#[derive(Clone)]
pub struct Driver {
    func: DriverFn,
    kind: DriverKind,
}

impl Driver {
    pub fn zero() -> Self {
        Self {
            func: Arc::new(|_, _, _, _, _| 0.0),
            kind: DriverKind::Zero,
        }
    }

    pub fn linear(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            func: Arc::new(move |t, x, _, _, _| f(t, x)),
            kind: DriverKind::Linear,
        }
    }

    pub fn semilinear(
        f: impl Fn(f64, &[f64], f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        uses_nonlocal: bool,
    ) -> Self {
        Self {
            func: Arc::new(f),
            kind: DriverKind::Semilinear { uses_nonlocal },
        }
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], w: f64) -> f64 {
        (self.func)(t, x, y, z, w)
    }
}

/// Terminal condition `g`, with its gradient when one is available.
#[derive(Clone)]
pub struct Terminal {
    pub value: ScalarField,
    pub gradient: Option<VectorField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    Point(Vec<f64>),
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl InitialLaw {
    pub fn cube(dim: usize, lower: f64, upper: f64) -> Self {
        InitialLaw::Uniform {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn sample(&self, rng: &mut dyn rand::RngCore, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::Uniform { lower, upper } => {
                for ((o, lo), hi) in out.iter_mut().zip(lower).zip(upper) {
                    *o = lo + (hi - lo) * rng.random::<f64>();
                }
            }
        }
    }

    /// Midpoint and half-width per coordinate (zero width for a point).
    pub fn box_geometry(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            InitialLaw::Point(x) => (x.clone(), vec![0.0; x.len()]),
            InitialLaw::Uniform { lower, upper } => (
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect(),
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (b - a)).collect(),
            ),
        }
    }
}

/// Which gradient the driver's `z` argument receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientConvention {
    /// `z = D_x u`
    Gradient,
    /// `z = sigma(x)^T D_x u`
    SigmaTransposeGradient,
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    Euler,
    /// Closed-form asset law of the basket model.
    ExactBasket(BasketParams),
}

/// One PIDE / FBSDEJ instance. Immutable after construction; all
/// coefficients are pure and shareable across threads.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub drift: VectorField,
    /// Row-major `d x d`.
    pub diffusion: VectorField,
    pub jump_coeff: JumpCoefficient,
    pub jump_measure: JumpMeasureSpec,
    pub driver: Driver,
    pub terminal: Terminal,
    pub initial_law: InitialLaw,
    pub gradient_convention: GradientConvention,
    pub dynamics: Dynamics,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("jump_measure", &self.jump_measure)
            .field("driver", &self.driver.kind)
            .field("initial_law", &self.initial_law)
            .field("gradient_convention", &self.gradient_convention)
            .field("dynamics", &self.dynamics)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Zero coefficients, no jumps, `g = 0`, start at the origin.
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            drift: Arc::new(|_, out| out.fill(0.0)),
            diffusion: Arc::new(|_, out| out.fill(0.0)),
            jump_coeff: JumpCoefficient::Additive,
            jump_measure: JumpMeasureSpec::none(dim),
            driver: Driver::zero(),
            terminal: Terminal {
                value: Arc::new(|_| 0.0),
                gradient: Some(Arc::new(|_, out| out.fill(0.0))),
            },
            initial_law: InitialLaw::Point(vec![0.0; dim]),
            gradient_convention: GradientConvention::SigmaTransposeGradient,
            dynamics: Dynamics::Euler,
        }
    }

    pub fn with_drift(mut self, b: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(b);
        self
    }

    pub fn with_diffusion(mut self, s: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(s);
        self
    }

    /// Constant diagonal diffusion.
    pub fn with_diagonal_vol(self, vols: Vec<f64>) -> Self {
        let d = self.dim;
        self.with_diffusion(move |_, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = vols[i];
            }
        })
    }

    pub fn with_jumps(mut self, measure: JumpMeasureSpec, coeff: JumpCoefficient) -> Self {
        self.jump_measure = measure;
        self.jump_coeff = coeff;
        self
    }

    pub fn with_driver(mut self, driver: Driver) -> Self {
        self.driver = driver;
        self
    }

    pub fn with_terminal(
        mut self,
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: Option<VectorField>,
    ) -> Self {
        self.terminal = Terminal {
            value: Arc::new(g),
            gradient: grad,
        };
        self
    }

    pub fn with_initial_law(mut self, law: InitialLaw) -> Self {
        self.initial_law = law;
        self
    }

    pub fn with_gradient_convention(mut self, c: GradientConvention) -> Self {
        self.gradient_convention = c;
        self
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        (self.terminal.value)(x)
    }

    pub fn f(&self, t: f64, x: &[f64], y: f64, z: &[f64], w: f64) -> f64 {
        self.driver.eval(t, x, y, z, w)
    }
}

fn broadcast_check(name: &str, v: &[f64], d: usize) -> Result<()> {
    check_len(name, v, d)
}

/// Parameters of the correlated jump-diffusion basket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketParams {
    pub rate: f64,
    pub correlation: f64,
    pub vols: Vec<f64>,
    pub strike: f64,
    pub systematic_jumps: Vec<f64>,
    pub idiosyncratic_jumps: Vec<f64>,
    pub systematic_intensity: f64,
    pub idiosyncratic_intensities: Vec<f64>,
    pub maturity: f64,
}

impl BasketParams {
    /// `r = 0.05`, pairwise correlation 0.2, vols 0.1, strike 1.2, jump
    /// sizes 0.1, intensities 10, maturity 1.
    pub fn paper(d: usize) -> Self {
        Self {
            rate: 0.05,
            correlation: 0.2,
            vols: vec![0.1; d],
            strike: 1.2,
            systematic_jumps: vec![0.1; d],
            idiosyncratic_jumps: vec![0.1; d],
            systematic_intensity: 10.0,
            idiosyncratic_intensities: vec![10.0; d],
            maturity: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.vols.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        broadcast_check("vols", &self.vols, d)?;
        broadcast_check("systematic_jumps", &self.systematic_jumps, d)?;
        broadcast_check("idiosyncratic_jumps", &self.idiosyncratic_jumps, d)?;
        broadcast_check("idiosyncratic_intensities", &self.idiosyncratic_intensities, d)?;
        check_nonneg("vols", &self.vols)?;
        check_nonneg("intensities", &self.idiosyncratic_intensities)?;
        check_nonneg("systematic intensity", &[self.systematic_intensity])?;
        check_pos("maturity", &[self.maturity])?;
        if self
            .systematic_jumps
            .iter()
            .chain(&self.idiosyncratic_jumps)
            .any(|h| !(h.is_finite() && *h > -1.0))
        {
            return Err(Error::InvalidParameter("relative jump sizes must exceed -1".into()));
        }
        self.cholesky().map(|_| ())
    }

    /// Lower Cholesky factor of the equicorrelation matrix, row-major.
    pub fn cholesky(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        let rho = self.correlation;
        let c = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
        let chol = c.cholesky().ok_or(Error::NotPositiveDefinite(rho))?;
        let l = chol.l();
        Ok((0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| l[(i, j)])
            .collect())
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.maturity).exp()
    }

    /// Discounted call payoff on the arithmetic basket mean.
    pub fn payoff(&self, s: &[f64]) -> f64 {
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        self.discount() * (mean - self.strike).max(0.0)
    }

    /// Systematic stream first, then one idiosyncratic stream per asset.
    pub fn jump_measure(&self) -> Result<JumpMeasureSpec> {
        let d = self.dim();
        let mut intensities = vec![self.systematic_intensity];
        let mut marks = vec![self.systematic_jumps.clone()];
        for i in 0..d {
            intensities.push(self.idiosyncratic_intensities[i]);
            let mut z = vec![0.0; d];
            z[i] = self.idiosyncratic_jumps[i];
            marks.push(z);
        }
        // zero-size jumps are dropped rather than stored as atoms at the origin
        let (intensities, marks): (Vec<_>, Vec<_>) = intensities
            .into_iter()
            .zip(marks)
            .filter(|(_, z)| z.iter().any(|v| *v != 0.0))
            .unzip();
        JumpMeasureSpec::atoms(d, intensities, marks)
    }
}

pub fn make_basket_problem(params: &BasketParams, d: usize) -> Result<ProblemSpec> {
    params.validate(d)?;
    let chol = params.cholesky()?;
    let measure = params.jump_measure()?;
    let r = params.rate;
    let vols = params.vols.clone();
    let payoff_params = params.clone();
    Ok(ProblemSpec::new("basket", d)
        .with_drift(move |x, out| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = r * xi;
            }
        })
        .with_diffusion(move |x, out| {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = vols[i] * x[i] * chol[i * d + j];
                }
            }
        })
        .with_jumps(measure, JumpCoefficient::Multiplicative)
        .with_terminal(move |x| payoff_params.payoff(x), None)
        .with_initial_law(InitialLaw::cube(d, 0.0, 2.0))
        .with_exact_basket(params.clone()))
}

impl ProblemSpec {
    fn with_exact_basket(mut self, p: BasketParams) -> Self {
        self.dynamics = Dynamics::ExactBasket(p);
        self
    }
}

/// Parameters of the stochastic linear regulator with Gamma jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorParams {
    pub vols: Vec<f64>,
    pub terminal_weights: Vec<f64>,
    pub control_costs: Vec<f64>,
    pub intensities: Vec<f64>,
    pub shapes: Vec<f64>,
    pub rates: Vec<f64>,
    /// Training domain is `[-half_width, half_width]^d`.
    pub half_width: f64,
    pub maturity: f64,
}

impl RegulatorParams {
    pub fn paper(d: usize) -> Self {
        Self {
            vols: vec![0.1; d],
            terminal_weights: vec![1.0; d],
            control_costs: vec![0.5; d],
            intensities: vec![10.0; d],
            shapes: vec![0.4; d],
            rates: vec![4.0; d],
            half_width: 2.0,
            maturity: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.vols.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        for (name, v) in [
            ("vols", &self.vols),
            ("terminal_weights", &self.terminal_weights),
            ("control_costs", &self.control_costs),
            ("intensities", &self.intensities),
            ("shapes", &self.shapes),
            ("rates", &self.rates),
        ] {
            broadcast_check(name, v, d)?;
        }
        check_nonneg("vols", &self.vols)?;
        check_nonneg("intensities", &self.intensities)?;
        check_pos("terminal_weights", &self.terminal_weights)?;
        check_pos("control_costs", &self.control_costs)?;
        check_pos("shapes", &self.shapes)?;
        check_pos("rates", &self.rates)?;
        check_pos("half_width", &[self.half_width])?;
        check_pos("maturity", &[self.maturity])
    }

    pub fn jump_measure(&self) -> Result<JumpMeasureSpec> {
        JumpMeasureSpec::product_gamma(self.intensities.clone(), self.shapes.clone(), self.rates.clone())
    }

    pub fn domain(&self) -> InitialLaw {
        InitialLaw::cube(self.dim(), -self.half_width, self.half_width)
    }
}

/// The regulator's driver `sum_i (z_i^2 / (4 theta_i) - x_i^2)` with `z = D_x u`.
pub fn make_regulator_problem(params: &RegulatorParams, d: usize) -> Result<ProblemSpec> {
    params.validate(d)?;
    let measure = params.jump_measure()?;
    let theta = params.control_costs.clone();
    let w = params.terminal_weights.clone();
    let wg = w.clone();
    Ok(ProblemSpec::new("regulator", d)
        .with_diagonal_vol(params.vols.clone())
        .with_jumps(measure, JumpCoefficient::Additive)
        .with_driver(Driver::semilinear(
            move |_, x, _, z, _| {
                x.iter()
                    .zip(z)
                    .zip(&theta)
                    .map(|((xi, zi), th)| zi * zi / (4.0 * th) - xi * xi)
                    .sum()
            },
            false,
        ))
        .with_terminal(
            move |x| x.iter().zip(&w).map(|(xi, r)| r * xi * xi).sum(),
            Some(Arc::new(move |x, out| {
                for ((o, xi), r) in out.iter_mut().zip(x).zip(&wg) {
                    *o = 2.0 * r * xi;
                }
            })),
        )
        .with_initial_law(params.domain())
        .with_gradient_convention(GradientConvention::Gradient))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficients {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Coefficients {
    fn expand(&self, name: &str, d: usize) -> Result<Vec<f64>> {
        match self {
            Coefficients::Scalar(v) => Ok(vec![*v; d]),
            Coefficients::Vector(v) if v.len() == d => Ok(v.clone()),
            Coefficients::Vector(v) => Err(Error::config(
                format!("problem.{name}"),
                format!("expected {d} entries, found {}", v.len()),
            )),
        }
    }
}

impl From<f64> for Coefficients {
    fn from(v: f64) -> Self {
        Coefficients::Scalar(v)
    }
}

fn basket_defaults() -> BasketConfig {
    BasketConfig {
        dim: 4,
        rate: 0.05,
        correlation: 0.2,
        vol: 0.1.into(),
        strike: 1.2,
        systematic_jump: 0.1.into(),
        idiosyncratic_jump: 0.1.into(),
        systematic_intensity: 10.0,
        idiosyncratic_intensity: 10.0.into(),
        maturity: 1.0,
        domain_lower: 0.0,
        domain_upper: 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasketConfig {
    pub dim: usize,
    pub rate: f64,
    pub correlation: f64,
    pub vol: Coefficients,
    pub strike: f64,
    pub systematic_jump: Coefficients,
    pub idiosyncratic_jump: Coefficients,
    pub systematic_intensity: f64,
    pub idiosyncratic_intensity: Coefficients,
    pub maturity: f64,
    pub domain_lower: f64,
    pub domain_upper: f64,
}

impl Default for BasketConfig {
    fn default() -> Self {
        basket_defaults()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulatorConfig {
    pub dim: usize,
    pub vol: Coefficients,
    pub terminal_weight: Coefficients,
    pub control_cost: Coefficients,
    pub intensity: Coefficients,
    pub shape: Coefficients,
    pub rate: Coefficients,
    pub half_width: f64,
    pub maturity: f64,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            vol: 0.1.into(),
            terminal_weight: 1.0.into(),
            control_cost: 0.5.into(),
            intensity: 10.0.into(),
            shape: 0.4.into(),
            rate: 4.0.into(),
            half_width: 2.0,
            maturity: 1.0,
        }
    }
}

/// JSON problem block: `{"problem": "basket" | "regulator", "dim": d, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum ProblemConfig {
    Basket(BasketConfig),
    Regulator(RegulatorConfig),
}

impl ProblemConfig {
    pub fn dim(&self) -> usize {
        match self {
            ProblemConfig::Basket(c) => c.dim,
            ProblemConfig::Regulator(c) => c.dim,
        }
    }

    pub fn maturity(&self) -> f64 {
        match self {
            ProblemConfig::Basket(c) => c.maturity,
            ProblemConfig::Regulator(c) => c.maturity,
        }
    }

    pub fn basket_params(&self) -> Option<Result<BasketParams>> {
        let ProblemConfig::Basket(c) = self else { return None };
        let d = c.dim;
        Some((|| {
            Ok(BasketParams {
                rate: c.rate,
                correlation: c.correlation,
                vols: c.vol.expand("vol", d)?,
                strike: c.strike,
                systematic_jumps: c.systematic_jump.expand("systematic_jump", d)?,
                idiosyncratic_jumps: c.idiosyncratic_jump.expand("idiosyncratic_jump", d)?,
                systematic_intensity: c.systematic_intensity,
                idiosyncratic_intensities: c.idiosyncratic_intensity.expand("idiosyncratic_intensity", d)?,
                maturity: c.maturity,
            })
        })())
    }

    pub fn regulator_params(&self) -> Option<Result<RegulatorParams>> {
        let ProblemConfig::Regulator(c) = self else { return None };
        let d = c.dim;
        Some((|| {
            Ok(RegulatorParams {
                vols: c.vol.expand("vol", d)?,
                terminal_weights: c.terminal_weight.expand("terminal_weight", d)?,
                control_costs: c.control_cost.expand("control_cost", d)?,
                intensities: c.intensity.expand("intensity", d)?,
                shapes: c.shape.expand("shape", d)?,
                rates: c.rate.expand("rate", d)?,
                half_width: c.half_width,
                maturity: c.maturity,
            })
        })())
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        match self {
            ProblemConfig::Basket(c) => {
                let params = self.basket_params().expect("basket variant")?;
                let mut spec = make_basket_problem(&params, c.dim)?;
                if !(c.domain_lower < c.domain_upper) {
                    return Err(Error::config("problem.domain_lower", "must be below domain_upper"));
                }
                spec.initial_law = InitialLaw::cube(c.dim, c.domain_lower, c.domain_upper);
                Ok(spec)
            }
            ProblemConfig::Regulator(c) => {
                let params = self.regulator_params().expect("regulator variant")?;
                make_regulator_problem(&params, c.dim)
            }
        }
    }
}
