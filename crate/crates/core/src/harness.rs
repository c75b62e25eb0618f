//! Experiment configs, multi-seed runs, reports and CSV artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deep_split::{
    evaluate_solution, run_ds_linear_solution, run_ds_tagged, DSSolution, DriverState, StateSampling, TrainConfig,
};
use crate::error::{Error, Result};
use crate::neural::Activation;
use crate::oracles::{mc_basket_price, regulator_coefficients_ode, ODE_STEPS};
use crate::par;
use crate::problem::{ProblemConfig, ProblemSpec, TimeGrid};
use crate::rng::RngStream;
use crate::simulate::{simulate_paths_from, SimOptions};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DEEPSPLIT_OUT";
pub const DEFAULT_OUT_DIR: &str = "deepsplit-out";

const ORACLE_STREAM: u64 = 0x4F52_4143;
const DOMAIN_STREAM: u64 = 0x444F_4D41;
const DUMP_STREAM: u64 = 0x4455_4D50;
const TREND_WINDOW: usize = 100;

/// Decimal with 9 significant digits; scientific outside `[1e-5, 1e9)`.
pub fn fmt9(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0.00000000".into()
        } else {
            "0.00000000".into()
        };
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci.split_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    if (-5..9).contains(&exp) {
        format!("{v:.*}", (8 - exp) as usize)
    } else {
        sci
    }
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(what, format!("not a number: {s:?}")))
}

/// Serde adapters writing floats as 9-digit decimal strings.
mod num9 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::fmt9(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => s.serialize_some(&super::super::fmt9(*x)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| s.parse().map_err(serde::de::Error::custom))
                .transpose()
        }
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&super::super::fmt9(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| s.parse().map_err(serde::de::Error::custom))
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Batch size, iterations and decay points divided by 10, learning rate
    /// times `sqrt(10)` (basket) or divided by it (regulator); 3 seeds.
    Desk,
    /// Full hyperparameters; 10 seeds.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Regress `g(X_N) - dt sum f(t_n, X_n)` on `X_0` directly.
    Linear,
    /// Full backward sweep.
    Semilinear,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Defaults: 1 for the basket, 10 for the regulator.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Defaults to two hidden layers of width `d + 10`.
    pub widths: Option<Vec<usize>>,
    /// Defaults: softplus for the basket, sigmoid for the regulator.
    pub activation: Option<Activation>,
    pub standardize: bool,
    pub scale_outputs: Option<bool>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            widths: None,
            activation: None,
            standardize: true,
            scale_outputs: None,
        }
    }
}

/// Unset keys take the problem's default hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub method: Option<Method>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub decay_steps: Option<Vec<u64>>,
    pub decay_factor: Option<f64>,
    pub mark_cache_size: Option<usize>,
    pub warm_start: Option<bool>,
    pub warm_learning_rate: Option<f64>,
    pub driver_state: Option<DriverState>,
    pub state_sampling: Option<StateSampling>,
    pub fit_terminal: Option<bool>,
    pub mark_cap: Option<usize>,
    pub random_biases: Option<bool>,
    /// Divides batch size, iterations and decay points.
    pub scale_down: Option<usize>,
    /// The learning rate is multiplied by `scale_down^learning_rate_exponent`.
    /// Defaults: 0.5 for the basket, -0.5 for the regulator.
    pub learning_rate_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub base: u64,
    pub count: usize,
    pub parallel: bool,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            base: 0,
            count: 10,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Defaults to `(1, ..., 1)`.
    pub eval_point: Option<Vec<f64>>,
    /// Monte-Carlo oracle sample count (basket).
    pub oracle_samples: usize,
    pub oracle_seed: u64,
    /// Uniform domain points for the average relative error (regulator).
    pub domain_samples: usize,
    /// Forward paths written to `paths.csv`; 0 disables the dump.
    pub dump_paths: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            eval_point: None,
            oracle_samples: 1_000_000,
            oracle_seed: 0,
            domain_samples: 10_000,
            dump_paths: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

/// Everything needed to run, after defaults are filled in.
#[derive(Clone)]
pub struct Experiment {
    pub spec: ProblemSpec,
    pub grid: TimeGrid,
    pub train: TrainConfig,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub eval_point: Vec<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Desk => {
                self.training.scale_down = Some(10);
                self.seeds.count = 3;
                self.report.oracle_samples = 100_000;
            }
            Preset::Paper => {
                self.training.scale_down = Some(1);
                self.seeds.count = 10;
                self.report.oracle_samples = 1_000_000;
            }
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    fn is_basket(&self) -> bool {
        matches!(self.problem, ProblemConfig::Basket(_))
    }

    pub fn eval_point(&self) -> Vec<f64> {
        self.report
            .eval_point
            .clone()
            .unwrap_or_else(|| vec![1.0; self.problem.dim()])
    }

    pub fn resolve(&self) -> Result<Experiment> {
        let spec = self.problem.build()?;
        let d = spec.dim;
        let steps = self.grid.steps.unwrap_or(if self.is_basket() { 1 } else { 10 });
        let grid =
            TimeGrid::new(self.problem.maturity(), steps).map_err(|e| Error::config("grid.steps", e.to_string()))?;
        let t = &self.training;
        let base = if self.is_basket() {
            TrainConfig::basket()
        } else {
            TrainConfig::regulator()
        };
        let mut train = TrainConfig {
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            iterations: t.iterations.unwrap_or(base.iterations),
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            decay_steps: t.decay_steps.clone().unwrap_or(base.decay_steps.clone()),
            decay_factor: t.decay_factor.unwrap_or(base.decay_factor),
            mark_cache_size: t.mark_cache_size.unwrap_or(base.mark_cache_size),
            warm_start: t.warm_start.unwrap_or(base.warm_start),
            warm_learning_rate: t.warm_learning_rate.or(base.warm_learning_rate),
            driver_state: t.driver_state.unwrap_or(base.driver_state),
            state_sampling: t.state_sampling.unwrap_or(base.state_sampling),
            widths: self.network.widths.clone(),
            activation: self.network.activation.unwrap_or(base.activation),
            standardize: self.network.standardize,
            scale_outputs: self.network.scale_outputs.unwrap_or(base.scale_outputs),
            fit_terminal: t.fit_terminal.unwrap_or(base.fit_terminal),
            mark_cap: t.mark_cap.unwrap_or(base.mark_cap),
            random_biases: t.random_biases.unwrap_or(base.random_biases),
        };
        if let Some(f) = t.scale_down {
            if f == 0 {
                return Err(Error::config("training.scale_down", "must be positive"));
            }
            let exponent = t
                .learning_rate_exponent
                .unwrap_or(if self.is_basket() { 0.5 } else { -0.5 });
            train = train.scaled_down(f, exponent);
        }
        train.validate()?;
        if train.widths.as_ref().is_some_and(|w| w.contains(&0)) {
            return Err(Error::config("network.widths", "widths must be positive"));
        }
        let method = t.method.unwrap_or(if self.is_basket() {
            Method::Linear
        } else {
            Method::Semilinear
        });
        if self.seeds.count == 0 {
            return Err(Error::config("seeds.count", "need at least one seed"));
        }
        let eval_point = self.eval_point();
        if eval_point.len() != d {
            return Err(Error::config("report.eval_point", format!("expected {d} coordinates")));
        }
        Ok(Experiment {
            spec,
            grid,
            train,
            method,
            seeds: (0..self.seeds.count as u64).map(|k| self.seeds.base + k).collect(),
            eval_point,
        })
    }

    fn oracle_key(&self) -> String {
        let mut key = serde_json::json!({
            "problem": serde_json::to_value(&self.problem).expect("problem serializes"),
            "eval_point": self.eval_point().iter().map(|v| fmt9(*v)).collect::<Vec<_>>(),
        });
        if self.is_basket() {
            key["oracle_samples"] = self.report.oracle_samples.into();
            key["oracle_seed"] = self.report.oracle_seed.into();
        } else {
            key["ode_steps"] = ODE_STEPS.into();
        }
        hash_json(&key)
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub key: String,
    pub method: String,
    #[serde(with = "num9")]
    pub value: f64,
    #[serde(with = "num9::opt")]
    pub standard_error: Option<f64>,
    pub samples: Option<usize>,
}

fn oracle_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("oracles").join(format!("{key}.json"))
}

/// Oracle value at the evaluation point, read from `cache_dir` when present
/// and written there otherwise.
pub fn compute_oracle(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<OracleValue> {
    let key = cfg.oracle_key();
    if let Some(dir) = cache_dir {
        let path = oracle_path(dir, &key);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
    }
    let x = cfg.eval_point();
    let value = match &cfg.problem {
        ProblemConfig::Basket(_) => {
            let params = cfg.problem.basket_params().expect("basket variant")?;
            let m = cfg.report.oracle_samples;
            let (v, se) = mc_basket_price(
                &params,
                params.dim(),
                m,
                &RngStream::new(cfg.report.oracle_seed, ORACLE_STREAM),
                &x,
            )?;
            OracleValue {
                key: key.clone(),
                method: "monte_carlo".into(),
                value: v,
                standard_error: Some(se),
                samples: Some(m),
            }
        }
        ProblemConfig::Regulator(_) => {
            let params = cfg.problem.regulator_params().expect("regulator variant")?;
            OracleValue {
                key: key.clone(),
                method: "riccati_ode".into(),
                value: crate::oracles::regulator_value_ode(&params, 0.0, &x)?,
                standard_error: None,
                samples: None,
            }
        }
    };
    // callers see the cached precision whether or not the cache was hit
    let value: OracleValue = serde_json::from_str(&serde_json::to_string(&value)?)?;
    if let Some(dir) = cache_dir {
        let path = oracle_path(dir, &key);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(dir, e))?;
        fs::write(&path, serde_json::to_string_pretty(&value)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEstimate {
    pub seed: u64,
    #[serde(with = "num9::opt")]
    pub estimate: Option<f64>,
    #[serde(with = "num9::opt")]
    pub domain_error_pct: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub dim: usize,
    pub steps: usize,
    pub method: Method,
    #[serde(with = "num9::vec")]
    pub eval_point: Vec<f64>,
    pub seeds: Vec<SeedEstimate>,
    #[serde(with = "num9::opt")]
    pub mean: Option<f64>,
    #[serde(with = "num9::opt")]
    pub std: Option<f64>,
    pub oracle: Option<OracleValue>,
    #[serde(with = "num9::opt")]
    pub relative_error_pct: Option<f64>,
    #[serde(with = "num9::opt")]
    pub domain_error_pct: Option<f64>,
    pub failed: bool,
    pub config_hash: String,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.estimate).collect()
    }
}

/// Mean and unbiased standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Percent relative error `100 |a - b| / |b|`.
pub fn relative_error_pct(a: f64, b: f64) -> f64 {
    100.0 * (a - b).abs() / b.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds_per_seed: Vec<f64>,
    pub total_seconds: f64,
}

pub struct SeedRun {
    pub seed: u64,
    pub solution: Result<DSSolution>,
    pub seconds: f64,
}

/// Trains one solution per seed.
pub fn train_seeds(cfg: &ExperimentConfig, exp: &Experiment) -> Vec<SeedRun> {
    let hash = cfg.hash();
    let one = |seed: u64| {
        let start = Instant::now();
        let stream = RngStream::new(seed, 0);
        let solution = match exp.method {
            Method::Linear => run_ds_linear_solution(&exp.spec, &exp.grid, &exp.train, 0, &stream, &hash),
            Method::Semilinear => run_ds_tagged(&exp.spec, &exp.grid, &exp.train, &stream, &hash),
        };
        SeedRun {
            seed,
            solution,
            seconds: start.elapsed().as_secs_f64(),
        }
    };
    if cfg.seeds.parallel {
        par::map_indexed(exp.seeds.len(), |k| one(exp.seeds[k]))
    } else {
        exp.seeds.iter().map(|s| one(*s)).collect()
    }
}

fn domain_error(cfg: &ExperimentConfig, exp: &Experiment, sol: &DSSolution) -> Result<Option<f64>> {
    let Some(params) = cfg.problem.regulator_params() else {
        return Ok(None);
    };
    let params = params?;
    let m = cfg.report.domain_samples;
    if m == 0 {
        return Ok(None);
    }
    let (a, b) = regulator_coefficients_ode(&params, 0.0, ODE_STEPS)?;
    let mut rng = RngStream::new(cfg.report.oracle_seed, DOMAIN_STREAM).generator();
    let law = params.domain();
    let mut points = vec![vec![0.0; exp.spec.dim]; m];
    for p in &mut points {
        law.sample(&mut rng, p);
    }
    let est = evaluate_solution(sol, 0, &points)?;
    let sum = par::sum_scalars(m, |k| {
        let u: f64 = a.iter().zip(&points[k]).map(|(ai, x)| ai * x * x).sum::<f64>() + b;
        ((est[k] - u) / u).abs()
    });
    Ok(Some(100.0 * sum / m as f64))
}

/// Aggregates per-seed solutions into a report.
pub fn build_report(
    cfg: &ExperimentConfig,
    exp: &Experiment,
    runs: &[(u64, std::result::Result<&DSSolution, String>)],
    oracle: Option<OracleValue>,
) -> Result<RunReport> {
    let mut seeds = Vec::with_capacity(runs.len());
    for (seed, sol) in runs {
        let entry = match sol {
            Ok(sol) => SeedEstimate {
                seed: *seed,
                estimate: Some(evaluate_solution(sol, 0, std::slice::from_ref(&exp.eval_point))?[0]),
                domain_error_pct: domain_error(cfg, exp, sol)?,
                error: None,
            },
            Err(msg) => SeedEstimate {
                seed: *seed,
                estimate: None,
                domain_error_pct: None,
                error: Some(msg.clone()),
            },
        };
        seeds.push(entry);
    }
    let estimates: Vec<f64> = seeds.iter().filter_map(|s| s.estimate).collect();
    let stats = mean_std(&estimates);
    let domain: Vec<f64> = seeds.iter().filter_map(|s| s.domain_error_pct).collect();
    Ok(RunReport {
        problem: exp.spec.name.clone(),
        dim: exp.spec.dim,
        steps: exp.grid.steps(),
        method: exp.method,
        eval_point: exp.eval_point.clone(),
        mean: stats.map(|s| s.0),
        std: stats.map(|s| s.1),
        relative_error_pct: match (&stats, &oracle) {
            (Some((m, _)), Some(o)) => Some(relative_error_pct(*m, o.value)),
            _ => None,
        },
        domain_error_pct: mean_std(&domain).map(|s| s.0),
        oracle,
        failed: seeds.iter().any(|s| s.error.is_some()),
        seeds,
        config_hash: cfg.hash(),
    })
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed:04}"))
}

/// Runs every seed, writes the artifacts under `out` and returns the report.
///
/// Layout: `config.json`, `report.json`, `timing.json`, `seed_NNNN/` solution
/// directories, `oracles/<key>.json` and optionally `paths.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let exp = cfg.resolve()?;
    let started = Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    let config_value = serde_json::to_value(cfg)?;
    let runs = train_seeds(cfg, &exp);
    for run in &runs {
        if let Ok(sol) = &run.solution {
            sol.save(&seed_dir(out, run.seed), &config_value)?;
        }
    }
    let oracle = compute_oracle(cfg, Some(out))?;
    let views: Vec<_> = runs
        .iter()
        .map(|r| (r.seed, r.solution.as_ref().map_err(|e| e.to_string())))
        .collect();
    let report = build_report(cfg, &exp, &views, Some(oracle))?;
    write_report(out, &report)?;
    if cfg.report.dump_paths > 0 {
        dump_paths(&exp, cfg.report.dump_paths, &out.join("paths.csv"))?;
    }
    let timing = Timing {
        seconds_per_seed: runs.iter().map(|r| r.seconds).collect(),
        total_seconds: started.elapsed().as_secs_f64(),
    };
    let tp = out.join("timing.json");
    fs::write(&tp, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&tp, e))?;
    Ok(report)
}

pub fn write_report(out: &Path, report: &RunReport) -> Result<()> {
    let path = out.join("report.json");
    fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))
}

/// Rebuilds the report from the persisted solutions and cached oracle.
pub fn regenerate_report(out: &Path) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(&out.join("config.json"))?;
    let exp = cfg.resolve()?;
    let mut sols = Vec::new();
    for &seed in &exp.seeds {
        let dir = seed_dir(out, seed);
        sols.push((seed, DSSolution::load(&dir, &exp.spec).map(|s| s.0)));
    }
    let oracle = compute_oracle(&cfg, Some(out))?;
    let views: Vec<_> = sols
        .iter()
        .map(|(s, r)| (*s, r.as_ref().map_err(|e| e.to_string())))
        .collect();
    build_report(&cfg, &exp, &views, Some(oracle))
}

fn dump_paths(exp: &Experiment, paths: usize, file: &Path) -> Result<()> {
    let batch = simulate_paths_from(
        &exp.spec,
        &exp.spec.initial_law,
        0.0,
        &exp.grid,
        paths,
        &RngStream::new(exp.seeds[0], DUMP_STREAM),
        &SimOptions::default(),
    )?;
    let mut buf = Vec::new();
    batch.write_csv(&mut buf).map_err(|e| Error::io(file, e))?;
    fs::write(file, buf).map_err(|e| Error::io(file, e))
}

/// Loads a solution directory together with the experiment it came from.
pub fn load_solution(dir: &Path) -> Result<(DSSolution, ExperimentConfig)> {
    let manifest = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let cfg: ExperimentConfig = serde_json::from_value(value["config"].clone())?;
    let spec = cfg.problem.build()?;
    let (sol, _) = DSSolution::load(dir, &spec)?;
    Ok((sol, cfg))
}

/// `iteration,loss` rows plus a `trend` footer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTraceCsv {
    pub losses: Vec<f64>,
    /// Mean of the last 100 losses over the mean of the first 100.
    pub trend: Option<f64>,
}

impl LossTraceCsv {
    pub fn from_trace(trace: &[f64]) -> Self {
        let w = TREND_WINDOW.min(trace.len());
        let trend = (w > 0).then(|| {
            let head = trace[..w].iter().sum::<f64>() / w as f64;
            let tail = trace[trace.len() - w..].iter().sum::<f64>() / w as f64;
            tail / head
        });
        Self {
            losses: trace.to_vec(),
            trend,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{}", fmt9(*l));
        }
        if let Some(t) = self.trend {
            let _ = writeln!(s, "trend,{}", fmt9(t));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("iteration,loss") {
            return Err(Error::config("loss trace", "missing header"));
        }
        let mut losses = Vec::new();
        let mut trend = None;
        for line in lines {
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| Error::config("loss trace", format!("malformed row {line:?}")))?;
            if a == "trend" {
                trend = Some(parse_num(b, "loss trace")?);
            } else {
                let i: usize = a
                    .parse()
                    .map_err(|_| Error::config("loss trace", format!("bad iteration {a:?}")))?;
                if i != losses.len() {
                    return Err(Error::config("loss trace", format!("iteration {i} out of order")));
                }
                losses.push(parse_num(b, "loss trace")?);
            }
        }
        Ok(Self { losses, trend })
    }
}

pub fn loss_trace_csv(trace: &[f64], footer: bool) -> String {
    let mut csv = LossTraceCsv::from_trace(trace);
    if !footer {
        csv.trend = None;
    }
    csv.to_csv()
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<f64>> {
    Ok(LossTraceCsv::parse(text)?.losses)
}

pub fn emit_loss_trace(sol: &DSSolution, step: usize) -> Result<String> {
    Ok(LossTraceCsv::from_trace(sol.trace(step)?).to_csv())
}

/// Slice `(x, estimate[, oracle])` along one axis through `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCsv {
    pub rows: Vec<(f64, f64, Option<f64>)>,
}

impl SliceCsv {
    pub fn to_csv(&self) -> String {
        let with_oracle = self.rows.iter().any(|r| r.2.is_some());
        let mut s = String::from(if with_oracle {
            "x,estimate,oracle\n"
        } else {
            "x,estimate\n"
        });
        for (x, e, o) in &self.rows {
            match o {
                Some(o) if with_oracle => {
                    let _ = writeln!(s, "{},{},{}", fmt9(*x), fmt9(*e), fmt9(*o));
                }
                _ if with_oracle => {
                    let _ = writeln!(s, "{},{},", fmt9(*x), fmt9(*e));
                }
                _ => {
                    let _ = writeln!(s, "{},{}", fmt9(*x), fmt9(*e));
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let cols = match lines.next() {
            Some("x,estimate") => 2,
            Some("x,estimate,oracle") => 3,
            _ => return Err(Error::config("slice", "missing header")),
        };
        let rows = lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != cols {
                    return Err(Error::config("slice", format!("malformed row {line:?}")));
                }
                let o = if cols == 3 && !f[2].is_empty() {
                    Some(parse_num(f[2], "slice")?)
                } else {
                    None
                };
                Ok((parse_num(f[0], "slice")?, parse_num(f[1], "slice")?, o))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Largest `|estimate - oracle| / |oracle|` over rows with an oracle.
    pub fn max_relative_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|(_, e, o)| o.map(|o| (e - o).abs() / o.abs()))
            .reduce(f64::max)
    }
}

/// Slice oracle source.
pub enum SliceOracle<'a> {
    None,
    Function(&'a dyn Fn(&[f64]) -> Result<f64>),
}

pub fn emit_slice(
    sol: &DSSolution,
    axis: usize,
    range: (f64, f64),
    resolution: usize,
    anchor: &[f64],
    oracle: SliceOracle<'_>,
) -> Result<SliceCsv> {
    if axis >= anchor.len() {
        return Err(Error::OutOfRange {
            index: axis,
            limit: anchor.len(),
        });
    }
    if resolution < 2 {
        return Err(Error::InvalidParameter("slice resolution must be at least 2".into()));
    }
    let (a, b) = range;
    let xs: Vec<f64> = (0..resolution)
        .map(|k| {
            if k + 1 == resolution {
                b
            } else {
                a + (b - a) * k as f64 / (resolution - 1) as f64
            }
        })
        .collect();
    let points: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut p = anchor.to_vec();
            p[axis] = *x;
            p
        })
        .collect();
    let est = evaluate_solution(sol, 0, &points)?;
    let mut rows = Vec::with_capacity(resolution);
    for ((x, e), p) in xs.iter().zip(est).zip(&points) {
        let o = match &oracle {
            SliceOracle::None => None,
            SliceOracle::Function(f) => Some(f(p)?),
        };
        rows.push((*x, e, o));
    }
    Ok(SliceCsv { rows })
}

pub type PointOracle = Box<dyn Fn(&[f64]) -> Result<f64>>;

/// Default slice oracle for a stored experiment: the Riccati solution for
/// the regulator, Monte-Carlo prices with `mc_samples` paths for the basket
/// when `mc_samples > 0`.
pub fn slice_oracle_for(cfg: &ExperimentConfig, mc_samples: usize) -> Result<Option<PointOracle>> {
    match &cfg.problem {
        ProblemConfig::Regulator(_) => {
            let params = cfg.problem.regulator_params().expect("regulator variant")?;
            let (a, b) = regulator_coefficients_ode(&params, 0.0, ODE_STEPS)?;
            Ok(Some(Box::new(move |x: &[f64]| {
                Ok(a.iter().zip(x).map(|(ai, xi)| ai * xi * xi).sum::<f64>() + b)
            })))
        }
        ProblemConfig::Basket(_) if mc_samples > 0 => {
            let params = cfg.problem.basket_params().expect("basket variant")?;
            let seed = cfg.report.oracle_seed;
            Ok(Some(Box::new(move |x: &[f64]| {
                let s = RngStream::new(seed, ORACLE_STREAM);
                Ok(mc_basket_price(&params, params.dim(), mc_samples, &s, x)?.0)
            })))
        }
        ProblemConfig::Basket(_) => Ok(None),
    }
}

/// Default output directory: `$DEEPSPLIT_OUT` or `deepsplit-out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Report summary lines keyed by field name, 9 significant digits.
pub fn summary(report: &RunReport) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    let opt = |v: Option<f64>| v.map(fmt9).unwrap_or_else(|| "-".into());
    m.insert("mean", opt(report.mean));
    m.insert("std", opt(report.std));
    m.insert("oracle", opt(report.oracle.as_ref().map(|o| o.value)));
    m.insert("relative_error_pct", opt(report.relative_error_pct));
    m.insert("domain_error_pct", opt(report.domain_error_pct));
    m.insert("seeds", report.seeds.len().to_string());
    m.insert("failed", report.failed.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt9(1.0), "1.00000000");
        assert_eq!(fmt9(0.0915), "0.0915000000");
        assert_eq!(fmt9(-4.74396), "-4.74396000");
        assert_eq!(fmt9(123456789.4), "123456789");
        assert_eq!(fmt9(9.9999999999), "10.0000000");
        assert_eq!(fmt9(1.5e-7), "1.50000000e-7");
        assert_eq!(fmt9(2.0e12), "2.00000000e12");
        assert_eq!(fmt9(0.0), "0.00000000");
        for v in [1.0 / 3.0, 2.0e-9, 12345.678901, -0.000123456789] {
            let back: f64 = fmt9(v).parse().unwrap();
            assert!(((back - v) / v).abs() < 5e-9);
            assert_eq!(fmt9(back), fmt9(v));
        }
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[2.0]), Some((2.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[]), None);
        assert!((relative_error_pct(0.093935, 0.09150) - 2.661202).abs() < 1e-5);
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = ExperimentConfig::from_json(r#"{"problem": {"problem": "regulator", "dim": 2}}"#).unwrap();
        let exp = cfg.resolve().unwrap();
        assert_eq!(exp.grid.steps(), 10);
        assert_eq!(exp.train.batch_size, 10_000);
        assert_eq!(exp.train.iterations, 12_000);
        assert_eq!(exp.method, Method::Semilinear);
        assert_eq!(exp.seeds.len(), 10);
        assert_eq!(exp.eval_point, vec![1.0, 1.0]);

        let err = ExperimentConfig::from_json(r#"{"problem": {"problem": "basket", "strik": 1.0}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.starts_with("problem"), "{path}"),
            other => panic!("{other}"),
        }
        let err = ExperimentConfig::from_json(r#"{"problem": {"problem": "basket"}, "training": {"iterations": "x"}}"#)
            .unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "training.iterations"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn desk_preset_scales() {
        let mut cfg = ExperimentConfig::from_json(r#"{"problem": {"problem": "basket"}}"#).unwrap();
        let h0 = cfg.hash();
        cfg.apply_preset(Preset::Desk);
        assert_ne!(cfg.hash(), h0);
        let exp = cfg.resolve().unwrap();
        assert_eq!(exp.train.batch_size, 600);
        assert_eq!(exp.train.iterations, 1000);
        assert_eq!(exp.train.decay_steps, vec![200, 400, 700]);
        assert!((exp.train.learning_rate - 0.01 * 10f64.sqrt()).abs() < 1e-15);
        assert!(!exp.train.scale_outputs && !exp.train.random_biases);
        assert_eq!(exp.seeds.len(), 3);
        assert_eq!(exp.method, Method::Linear);
        assert_eq!(exp.grid.steps(), 1);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn desk_regulator_learning_rate_exponent() {
        let json = |extra: &str| format!(r#"{{"problem": {{"problem": "regulator", "dim": 2}}{extra}}}"#);
        let resolve = |text: String| {
            let mut cfg = ExperimentConfig::from_json(&text).unwrap();
            cfg.apply_preset(Preset::Desk);
            cfg.resolve().unwrap().train
        };
        let plain = resolve(json(""));
        assert!((plain.learning_rate - 0.1 / 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(plain.warm_learning_rate, Some(0.01));
        assert_eq!(plain.iterations, 1200);
        assert!(plain.random_biases && plain.scale_outputs);
        let boosted = resolve(json(
            r#", "training": {"learning_rate_exponent": 0.5, "random_biases": false}, "network": {"scale_outputs": false}"#,
        ));
        assert!((boosted.learning_rate - 0.1 * 10f64.sqrt()).abs() < 1e-15);
        assert_eq!(boosted.warm_learning_rate, Some(0.01));
        assert!(!boosted.random_biases && !boosted.scale_outputs);
    }

    #[test]
    fn loss_trace_round_trip() {
        let trace: Vec<f64> = (0..250).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let csv = LossTraceCsv::from_trace(&trace);
        let text = csv.to_csv();
        assert_eq!(text.lines().count(), 252);
        assert!(csv.trend.unwrap() < 1.0);
        let back = LossTraceCsv::parse(&text).unwrap();
        assert_eq!(back.to_csv(), text);
        assert!(LossTraceCsv::parse("nope\n").is_err());
    }

    #[test]
    fn slice_round_trip() {
        let s = SliceCsv {
            rows: vec![(-2.0, 1.0, Some(1.1)), (2.0, 3.0, None)],
        };
        let text = s.to_csv();
        assert_eq!(SliceCsv::parse(&text).unwrap().to_csv(), text);
        let plain = SliceCsv {
            rows: vec![(0.0, 1.0, None)],
        };
        assert_eq!(plain.to_csv(), "x,estimate\n0.00000000,1.00000000\n");
        assert!((s.max_relative_error().unwrap() - 0.1 / 1.1).abs() < 1e-12);
    }
}
