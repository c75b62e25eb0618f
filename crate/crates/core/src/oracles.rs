//! Reference values independent of the trained networks.

use crate::error::{Error, Result};
use crate::par;
use crate::problem::{BasketParams, DriverKind, InitialLaw, ProblemSpec, RegulatorParams, TimeGrid};
use crate::rng::RngStream;
use crate::simulate::{simulate_basket_exact_from, simulate_paths_from, SimOptions, DEFAULT_MARK_CAP};

/// Paths per simulated block in [`mc_basket_price`].
const BASKET_BLOCK: usize = 1 << 14;

pub const ODE_STEPS: usize = 10_000;
pub const BLOW_UP: f64 = 1e6;
pub const INNER_PATHS: usize = 100_000;

/// Discounted basket call price at `spot` with its standard error, from
/// `m` exact terminal samples.
pub fn mc_basket_price(
    params: &BasketParams,
    d: usize,
    m: usize,
    stream: &RngStream,
    spot: &[f64],
) -> Result<(f64, f64)> {
    params.validate(d)?;
    if params.dim() != d || spot.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "basket of dimension {d}, spot of length {}",
            spot.len()
        )));
    }
    if m < 1000 {
        return Err(Error::InvalidParameter(format!("need at least 1000 samples, got {m}")));
    }
    let grid = TimeGrid::new(params.maturity, 1)?;
    let law = InitialLaw::Point(spot.to_vec());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut done = 0;
    let mut block = 0u64;
    while done < m {
        let n = BASKET_BLOCK.min(m - done);
        let batch = simulate_basket_exact_from(params, &law, 0.0, &grid, n, &stream.derive(block), DEFAULT_MARK_CAP)?;
        let payoffs = par::map_indexed(n, |p| params.payoff(batch.state(p, 1)));
        sum += par::sum_scalars(n, |p| payoffs[p]);
        sum_sq += par::sum_scalars(n, |p| payoffs[p] * payoffs[p]);
        done += n;
        block += 1;
    }
    let mean = sum / m as f64;
    let var = ((sum_sq - m as f64 * mean * mean) / (m as f64 - 1.0)).max(0.0);
    Ok((mean, (var / m as f64).sqrt()))
}

/// Coefficients of `u(t, x) = sum_i a_i(t) x_i^2 + b(t)` for the regulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorClosedForm {
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    /// `sigma_i^2 + int z_i^2 nu(dz)`
    pub diffusivity: Vec<f64>,
    pub kappa: Vec<f64>,
    pub horizon: f64,
}

impl RegulatorClosedForm {
    pub fn new(params: &RegulatorParams) -> Result<Self> {
        let d = params.dim();
        params.validate(d)?;
        let measure = params.jump_measure()?;
        let horizon = params.maturity;
        let mut diffusivity = Vec::with_capacity(d);
        let mut kappa = Vec::with_capacity(d);
        for i in 0..d {
            diffusivity.push(params.vols[i].powi(2) + measure.moment(i, 2)?);
            let (r, sq) = (params.terminal_weights[i], params.control_costs[i].sqrt());
            kappa.push((r - sq) / (r + sq) * (-2.0 * horizon / sq).exp());
        }
        Ok(Self {
            theta: params.control_costs.clone(),
            rho: params.terminal_weights.clone(),
            diffusivity,
            kappa,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    fn exp_term(&self, i: usize, t: f64) -> f64 {
        self.kappa[i] * (2.0 * t / self.theta[i].sqrt()).exp()
    }

    fn check_pole(&self, i: usize, t: f64) -> Result<f64> {
        let e = self.exp_term(i, t);
        if (1.0 - e).abs() < 1e-12 {
            return Err(Error::Pole(t));
        }
        Ok(e)
    }

    /// `a_i(T) = rho_i` is returned exactly.
    pub fn a(&self, i: usize, t: f64) -> Result<f64> {
        if t == self.horizon {
            return Ok(self.rho[i]);
        }
        let e = self.check_pole(i, t)?;
        Ok(self.theta[i].sqrt() * (1.0 + e) / (1.0 - e))
    }

    pub fn a_prime(&self, i: usize, t: f64) -> Result<f64> {
        let e = self.check_pole(i, t)?;
        let sq = self.theta[i].sqrt();
        Ok(sq * 2.0 * (2.0 / sq) * e / (1.0 - e).powi(2))
    }

    /// `a' - (a^2/theta - 1)`
    pub fn riccati_residual(&self, i: usize, t: f64) -> Result<f64> {
        let a = self.a(i, t)?;
        Ok(self.a_prime(i, t)? - (a * a / self.theta[i] - 1.0))
    }

    /// `b(t) = sum_i sqrt(theta_i) D_i [(T - t) + sqrt(theta_i) ln((1 - k_i e^{2t/sqrt(theta_i)}) / (1 - k_i e^{2T/sqrt(theta_i)}))]`.
    pub fn b(&self, t: f64) -> Result<f64> {
        if t == self.horizon {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for i in 0..self.dim() {
            let sq = self.theta[i].sqrt();
            let num = 1.0 - self.check_pole(i, t)?;
            let den = 1.0 - self.check_pole(i, self.horizon)?;
            sum += sq * self.diffusivity[i] * ((self.horizon - t) + sq * (num / den).ln());
        }
        Ok(sum)
    }

    /// `b` with `e^{2t}` in the logarithm and no second `sqrt(theta_i)`
    /// factor, i.e. the formula taken literally.
    pub fn b_literal(&self, t: f64) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.dim() {
            let num = 1.0 - self.kappa[i] * (2.0 * t).exp();
            let den = 1.0 - self.kappa[i] * (2.0 * self.horizon).exp();
            if num.abs() < 1e-12 || den.abs() < 1e-12 {
                return Err(Error::Pole(t));
            }
            sum += self.theta[i].sqrt() * self.diffusivity[i] * ((self.horizon - t) + (num / den).ln());
        }
        Ok(sum)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_args(t, x)?;
        let mut v = self.b(t)?;
        for (i, xi) in x.iter().enumerate() {
            v += self.a(i, t)? * xi * xi;
        }
        Ok(v)
    }

    pub fn value_literal(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_args(t, x)?;
        let mut v = self.b_literal(t)?;
        for (i, xi) in x.iter().enumerate() {
            v += self.a(i, t)? * xi * xi;
        }
        Ok(v)
    }

    fn check_args(&self, t: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "point of length {} in dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }
}

pub fn regulator_value_closed_form(params: &RegulatorParams, t: f64, x: &[f64]) -> Result<f64> {
    RegulatorClosedForm::new(params)?.value(t, x)
}

/// `(a_1, ..., a_d, b)` at `t`, integrated backward from `T` with RK4.
pub fn regulator_coefficients_ode(params: &RegulatorParams, t: f64, steps: usize) -> Result<(Vec<f64>, f64)> {
    let cf = RegulatorClosedForm::new(params)?;
    if !(0.0..=cf.horizon).contains(&t) {
        return Err(Error::InvalidParameter(format!("t = {t} outside [0, {}]", cf.horizon)));
    }
    if steps == 0 {
        return Err(Error::InvalidParameter("ODE needs at least one step".into()));
    }
    let d = cf.dim();
    // state (a, b) in reversed time s = T - t: da/ds = 1 - a^2/theta, db/ds = sum a D
    let rhs = |y: &[f64], out: &mut [f64]| {
        let mut db = 0.0;
        for i in 0..d {
            out[i] = 1.0 - y[i] * y[i] / cf.theta[i];
            db += y[i] * cf.diffusivity[i];
        }
        out[d] = db;
    };
    let mut y: Vec<f64> = cf.rho.iter().copied().chain(std::iter::once(0.0)).collect();
    if t == cf.horizon {
        return Ok((y[..d].to_vec(), 0.0));
    }
    let h = (cf.horizon - t) / steps as f64;
    let n = d + 1;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for s in 0..steps {
        rhs(&y, &mut k1);
        for j in 0..n {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        rhs(&tmp, &mut k2);
        for j in 0..n {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        rhs(&tmp, &mut k3);
        for j in 0..n {
            tmp[j] = y[j] + h * k3[j];
        }
        rhs(&tmp, &mut k4);
        for j in 0..n {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if y[..d].iter().any(|a| !a.is_finite() || a.abs() > BLOW_UP) {
            return Err(Error::BlowUp(cf.horizon - (s + 1) as f64 * h));
        }
    }
    let b = y[d];
    y.truncate(d);
    Ok((y, b))
}

pub fn regulator_value_ode_with_steps(params: &RegulatorParams, t: f64, x: &[f64], steps: usize) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point of length {} in dimension {}",
            x.len(),
            params.dim()
        )));
    }
    let (a, b) = regulator_coefficients_ode(params, t, steps)?;
    Ok(a.iter().zip(x).map(|(ai, xi)| ai * xi * xi).sum::<f64>() + b)
}

/// `u(t, x)` from the Riccati system with [`ODE_STEPS`] RK4 steps.
pub fn regulator_value_ode(params: &RegulatorParams, t: f64, x: &[f64]) -> Result<f64> {
    regulator_value_ode_with_steps(params, t, x, ODE_STEPS)
}

/// Mean and standard error of `H_i` started from each point at `t_i`.
pub fn bruteforce_conditional_expectation_1d(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    step: usize,
    points: &[f64],
    inner_paths: usize,
    stream: &RngStream,
) -> Result<Vec<(f64, f64)>> {
    if spec.dim != 1 {
        return Err(Error::InvalidParameter("brute-force oracle is one-dimensional".into()));
    }
    if let DriverKind::Semilinear { .. } = spec.driver.kind() {
        return Err(Error::NonlinearDriver("brute-force oracle needs f = f(t, x)"));
    }
    if step >= grid.steps() {
        return Err(Error::OutOfRange {
            index: step,
            limit: grid.steps(),
        });
    }
    if inner_paths < 2 {
        return Err(Error::InvalidParameter("need at least two inner paths".into()));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let rest = TimeGrid::new(grid.horizon() - grid.time(step), n - step)?;
    let opts = SimOptions::default();
    points
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let law = InitialLaw::Point(vec![x]);
            let batch = simulate_paths_from(
                spec,
                &law,
                grid.time(step),
                &rest,
                inner_paths,
                &stream.derive(k as u64),
                &opts,
            )?;
            let h = par::map_indexed(inner_paths, |m| {
                let mut h = spec.g(batch.state(m, n - step));
                for j in 0..n - step {
                    h -= dt * spec.f(grid.time(step + j), batch.state(m, j), 0.0, &[0.0], 0.0);
                }
                h
            });
            let mean = par::sum_scalars(inner_paths, |m| h[m]) / inner_paths as f64;
            let var = par::sum_scalars(inner_paths, |m| (h[m] - mean).powi(2)) / (inner_paths as f64 - 1.0);
            Ok((mean, (var / inner_paths as f64).sqrt()))
        })
        .collect()
}

/// Central differences with step `h max(1, |x_k|)` in coordinate `k`.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            let hk = h * x[k].abs().max(1.0);
            y[k] = x[k] + hk;
            let up = f(&y);
            y[k] = x[k] - hk;
            let down = f(&y);
            y[k] = x[k];
            (up - down) / (2.0 * hk)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_basket_problem, Driver};

    #[test]
    fn deterministic_basket_is_mean_spot() {
        let p = BasketParams {
            strike: 0.0,
            vols: vec![0.0; 3],
            systematic_jumps: vec![0.0; 3],
            idiosyncratic_jumps: vec![0.0; 3],
            ..BasketParams::paper(3)
        };
        let (price, se) = mc_basket_price(&p, 3, 1000, &RngStream::new(0, 0), &[0.5, 1.0, 1.5]).unwrap();
        assert!((price - 1.0).abs() < 1e-12, "{price}");
        assert!(se < 1e-12);
    }

    #[test]
    fn basket_price_rejects_small_samples() {
        let p = BasketParams::paper(2);
        assert!(mc_basket_price(&p, 2, 999, &RngStream::new(0, 0), &[1.0, 1.0]).is_err());
        assert!(mc_basket_price(&p, 2, 1000, &RngStream::new(0, 0), &[1.0]).is_err());
    }

    #[test]
    fn standard_error_halves_with_four_times_samples() {
        let p = BasketParams::paper(4);
        let s = RngStream::new(11, 0);
        let (_, se1) = mc_basket_price(&p, 4, 20_000, &s, &[1.0; 4]).unwrap();
        let (_, se4) = mc_basket_price(&p, 4, 80_000, &s.derive(1), &[1.0; 4]).unwrap();
        let ratio = se1 / se4;
        assert!((ratio - 2.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn basket_price_matches_problem_payoff_average() {
        let p = BasketParams::paper(2);
        let spec = make_basket_problem(&p, 2).unwrap();
        let (price, se) = mc_basket_price(&p, 2, 50_000, &RngStream::new(3, 0), &[1.3, 1.3]).unwrap();
        assert!(price > spec.g(&[1.3, 1.3]) - 3.0 * se);
    }

    #[test]
    fn closed_form_terminal_values_are_exact() {
        let p = RegulatorParams::paper(3);
        let cf = RegulatorClosedForm::new(&p).unwrap();
        for i in 0..3 {
            assert_eq!(cf.a(i, 1.0).unwrap(), 1.0);
        }
        assert_eq!(cf.b(1.0).unwrap(), 0.0);
        assert_eq!(regulator_value_closed_form(&p, 1.0, &[1.0, -2.0, 0.5]).unwrap(), 5.25);
        assert_eq!(regulator_value_ode(&p, 1.0, &[1.0, -2.0, 0.5]).unwrap(), 5.25);
    }

    #[test]
    fn riccati_residual_is_tiny() {
        let cf = RegulatorClosedForm::new(&RegulatorParams::paper(1)).unwrap();
        for k in 0..100 {
            let t = k as f64 / 100.0;
            assert!(cf.riccati_residual(0, t).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn b_matches_quadrature_of_a() {
        let cf = RegulatorClosedForm::new(&RegulatorParams::paper(2)).unwrap();
        // b(t) = int_t^T sum a_i D_i ds by composite Simpson
        let t = 0.25;
        let n = 2000;
        let h = (1.0 - t) / n as f64;
        let integrand = |s: f64| (0..2).map(|i| cf.a(i, s).unwrap() * cf.diffusivity[i]).sum::<f64>();
        let mut q = integrand(t) + integrand(1.0);
        for k in 1..n {
            q += if k % 2 == 1 { 4.0 } else { 2.0 } * integrand(t + k as f64 * h);
        }
        q *= h / 3.0;
        assert!((cf.b(t).unwrap() - q).abs() < 1e-6);
    }

    #[test]
    fn closed_form_agrees_with_ode() {
        use rand::Rng;
        let p = RegulatorParams::paper(3);
        let cf = RegulatorClosedForm::new(&p).unwrap();
        let mut rng = RngStream::new(0, 0).generator();
        for _ in 0..100 {
            let t: f64 = rng.random();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = cf.value(t, &x).unwrap();
            let b = regulator_value_ode(&p, t, &x).unwrap();
            assert!((a - b).abs() / b.abs() < 1e-4);
        }
    }

    #[test]
    fn ode_step_halving() {
        let p = RegulatorParams::paper(4);
        let a = regulator_value_ode_with_steps(&p, 0.0, &[1.0; 4], ODE_STEPS).unwrap();
        let b = regulator_value_ode_with_steps(&p, 0.0, &[1.0; 4], 2 * ODE_STEPS).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn no_noise_means_no_b() {
        let p = RegulatorParams {
            vols: vec![0.0; 2],
            intensities: vec![0.0; 2],
            ..RegulatorParams::paper(2)
        };
        let (a, b) = regulator_coefficients_ode(&p, 0.3, 1000).unwrap();
        assert_eq!(b, 0.0);
        let v = regulator_value_ode(&p, 0.3, &[1.0, 2.0]).unwrap();
        assert!((v - (a[0] + 4.0 * a[1])).abs() < 1e-12);
    }

    #[test]
    fn regulator_reference_values() {
        // u(0, 1) for one coordinate: a(0) + b(0)
        let v1 = regulator_value_ode(&RegulatorParams::paper(1), 0.0, &[1.0]).unwrap();
        assert!((v1 - 1.008200).abs() < 1e-5, "{v1}");
        let v4 = regulator_value_ode(&RegulatorParams::paper(4), 0.0, &[1.0; 4]).unwrap();
        assert!((v4 - 4.032800).abs() < 1e-5, "{v4}");
        let cf = RegulatorClosedForm::new(&RegulatorParams::paper(4)).unwrap();
        let lit = cf.value_literal(0.0, &[1.0; 4]).unwrap();
        assert!((lit - v4).abs() > 1e-3);
    }

    #[test]
    fn ode_rejects_bad_arguments() {
        let p = RegulatorParams::paper(1);
        assert!(regulator_value_ode(&p, -0.1, &[1.0]).is_err());
        assert!(regulator_value_ode(&p, 0.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn finite_differences_on_polynomials() {
        let g = finite_difference_gradient(|x| 3.0 * x[0] - 2.0 * x[1] + 1.0, &[5.0, -7.0], 0.3);
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
        let q = finite_difference_gradient(|x| x[0] * x[0], &[1.0], 1e-4);
        assert!((q[0] - 2.0).abs() < 1e-7);
    }

    fn brownian(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, vol: f64) -> ProblemSpec {
        ProblemSpec::new("bm", 1)
            .with_diagonal_vol(vec![vol])
            .with_terminal(g, None)
            .with_initial_law(InitialLaw::cube(1, -1.0, 1.0))
    }

    #[test]
    fn bruteforce_martingale() {
        let spec = brownian(|x| x[0], 0.5);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let out = bruteforce_conditional_expectation_1d(&spec, &grid, 1, &[-1.0, 0.3], 10_000, &RngStream::new(0, 0))
            .unwrap();
        for ((m, se), x) in out.iter().zip([-1.0, 0.3]) {
            assert!((m - x).abs() < 3.0 * se + 1e-12, "{m} {se}");
        }
    }

    #[test]
    fn bruteforce_constant_driver() {
        let spec = brownian(|_| 0.0, 0.5).with_driver(Driver::linear(|_, _| 1.0));
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let out = bruteforce_conditional_expectation_1d(&spec, &grid, 1, &[0.0], 100, &RngStream::new(0, 0)).unwrap();
        assert!((out[0].0 + 0.75).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_second_moment() {
        let spec = brownian(|x| x[0] * x[0], 0.5);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let out =
            bruteforce_conditional_expectation_1d(&spec, &grid, 2, &[0.7], 20_000, &RngStream::new(1, 0)).unwrap();
        let exact = 0.49 + 0.25 * 0.5;
        assert!((out[0].0 - exact).abs() < 3.0 * out[0].1, "{:?}", out[0]);
    }

    #[test]
    fn bruteforce_rejects_bad_input() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let s = RngStream::new(0, 0);
        let two = ProblemSpec::new("x", 2);
        assert!(bruteforce_conditional_expectation_1d(&two, &grid, 0, &[0.0], 10, &s).is_err());
        let nl = brownian(|x| x[0], 1.0).with_driver(Driver::semilinear(|_, _, y, _, _| y, false));
        assert!(matches!(
            bruteforce_conditional_expectation_1d(&nl, &grid, 0, &[0.0], 10, &s),
            Err(Error::NonlinearDriver(_))
        ));
        let ok = brownian(|x| x[0], 1.0);
        assert!(bruteforce_conditional_expectation_1d(&ok, &grid, 2, &[0.0], 10, &s).is_err());
    }
}
