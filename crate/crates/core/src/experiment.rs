//! Seeded Monte Carlo experiments over the estimators, with per-replication
//! records, error summaries and a CLT histogram for `α̂`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{aj_alpha, robust_sigma, truncated_rv, ThresholdSpec};
use crate::error::{invalid, Error, Result};
use crate::gmm::{
    asymptotic_covariance_with_step, scaling_factor, single_param_estimator, solve_gmm, BaselineInit, GmmOptions,
    ScalingMode, Target,
};
use crate::levy_sim::{simulate_increments, IncrementBatch, SimModelSpec};
use crate::moments::{default_moment_set, splice_moment_set, unit_gap_bump, MomentFunction, MomentFunctionSet};
use crate::rng::sub_seed;
use crate::theta::ThetaParams;

/// Largest tolerated share of failed solver runs.
pub const MAX_FAILURE_RATE: f64 = 0.2;
/// Stream index of path seeds in [`sub_seed`].
const PATH_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UChoice {
    Practical,
    Theory { tau: f64, sigma_bound: f64, eta: f64 },
    Fixed(f64),
}

impl UChoice {
    pub fn resolve(&self, n: usize) -> Result<f64> {
        match *self {
            UChoice::Practical => Ok(scaling_factor(n, ScalingMode::Practical)?.u),
            UChoice::Theory { tau, sigma_bound, eta } => {
                Ok(scaling_factor(n, ScalingMode::Theory { tau, sigma_bound, eta })?.u)
            }
            UChoice::Fixed(u) if u > 0.0 && u.is_finite() => Ok(u),
            UChoice::Fixed(u) => Err(invalid("u", format!("{u} must be positive"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentSetChoice {
    /// The four-function benchmark set.
    Benchmark,
    /// `f₁` with the unit-gap bump and its dilation spliced.
    UnitGap,
}

impl MomentSetChoice {
    pub fn build(self) -> Result<MomentFunctionSet> {
        match self {
            MomentSetChoice::Benchmark => Ok(default_moment_set()),
            MomentSetChoice::UnitGap => splice_moment_set(MomentFunction::gauss_complement(10.0), &unit_gap_bump()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSelection {
    pub gmm: bool,
    pub single: bool,
    pub aj: bool,
    pub trv: bool,
}

impl Default for EstimatorSelection {
    fn default() -> Self {
        Self { gmm: true, single: false, aj: true, trv: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: SimModelSpec,
    pub n: usize,
    pub h: f64,
    pub horizon: f64,
    pub u: UChoice,
    pub moment_set: MomentSetChoice,
    /// Index into the moment set of the function used by the single-parameter estimator.
    pub single_function: usize,
    pub replications: usize,
    pub base_seed: u64,
    /// `None` uses the global rayon pool.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub estimators: EstimatorSelection,
    pub gmm: GmmOptions,
    pub histogram_bins: usize,
    pub histogram_range: f64,
}

impl ExperimentConfig {
    /// Horizon-one experiment for `model` sampled at step `h`.
    pub fn new(model: SimModelSpec, h: f64, replications: usize, base_seed: u64) -> Self {
        let n = (1.0 / h).round() as usize;
        Self {
            model,
            n,
            h,
            horizon: n as f64 * h,
            u: UChoice::Practical,
            moment_set: MomentSetChoice::Benchmark,
            single_function: 2,
            replications,
            base_seed,
            workers: None,
            output_dir: None,
            estimators: EstimatorSelection::default(),
            gmm: GmmOptions::default(),
            histogram_bins: 16,
            histogram_range: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.replications < 1 {
            return Err(invalid("replications", "must be at least 1"));
        }
        if self.n < 2 {
            return Err(invalid("n", "must be at least 2"));
        }
        if !(self.h > 0.0) {
            return Err(invalid("h", "must be positive"));
        }
        if (self.n as f64 * self.h - self.horizon).abs() > 1e-9 {
            return Err(invalid("horizon", format!("n·h = {} differs from T = {}", self.n as f64 * self.h, self.horizon)));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        if self.histogram_bins == 0 || !(self.histogram_range > 0.0) {
            return Err(invalid("histogram", "needs at least one bin and a positive range"));
        }
        if let Some(dir) = &self.output_dir {
            fs::create_dir_all(dir)?;
            let probe = dir.join(".write_probe");
            fs::write(&probe, b"")?;
            fs::remove_file(probe)?;
        }
        self.gmm.validate()
    }

    pub fn path_seed(&self, replication: usize) -> u64 {
        sub_seed(self.base_seed, PATH_STREAM, replication as u64)
    }
}

/// One replication. Absent estimates are empty fields in the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub gmm_status: Option<String>,
    pub gmm_sigma_sq: Option<f64>,
    pub gmm_alpha: Option<f64>,
    pub gmm_r_plus: Option<f64>,
    pub gmm_r_minus: Option<f64>,
    pub gmm_alpha_sd: Option<f64>,
    pub gmm_iterations: Option<usize>,
    pub gmm_residual: Option<f64>,
    pub single_alpha: Option<f64>,
    pub single_alpha_sd: Option<f64>,
    pub aj_alpha: Option<f64>,
    pub trv_sigma_sq: Option<f64>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn empty(replication: usize, seed: u64) -> Self {
        Self {
            replication,
            seed,
            gmm_status: None,
            gmm_sigma_sq: None,
            gmm_alpha: None,
            gmm_r_plus: None,
            gmm_r_minus: None,
            gmm_alpha_sd: None,
            gmm_iterations: None,
            gmm_residual: None,
            single_alpha: None,
            single_alpha_sd: None,
            aj_alpha: None,
            trv_sigma_sq: None,
            error: None,
        }
    }

    fn note(&mut self, what: &str, e: &Error) {
        let msg = format!("{what}: {e}");
        self.error = Some(match self.error.take() {
            Some(prev) => format!("{prev}; {msg}"),
            None => msg,
        });
    }

    pub fn gmm_failed(&self) -> bool {
        !matches!(self.gmm_status.as_deref(), Some("Converged") | Some("Boundary"))
    }
}

/// Median absolute error and quartiles of the signed error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub mae: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
    /// Asymptotic SD of `α̂` used for standardization.
    pub asymptotic_sd: f64,
    /// Kolmogorov–Smirnov distance of the standardized errors to `N(0, 1)`.
    pub ks_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub replications: usize,
    pub n: usize,
    pub h: f64,
    pub u: f64,
    pub truth: ThetaParams,
    pub gmm_failures: usize,
    pub single_failures: usize,
    pub failure_rate: f64,
    pub summaries: Vec<ErrorSummary>,
    pub histogram: Option<Histogram>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl McReport {
    pub fn summary(&self, estimator: &str, parameter: &str) -> Option<&ErrorSummary> {
        self.summaries
            .iter()
            .find(|s| s.estimator == estimator && s.parameter == parameter)
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize_errors(estimator: &str, parameter: &str, truth: f64, estimates: &[f64]) -> Option<ErrorSummary> {
    if estimates.is_empty() {
        return None;
    }
    let mut err: Vec<f64> = estimates.iter().map(|e| e - truth).collect();
    err.sort_by(f64::total_cmp);
    let mut abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    Some(ErrorSummary {
        estimator: estimator.into(),
        parameter: parameter.into(),
        truth,
        mae: quantile(&abs, 0.5),
        q25: quantile(&err, 0.25),
        median: quantile(&err, 0.5),
        q75: quantile(&err, 0.75),
        count: estimates.len(),
    })
}

/// Error summaries from the records alone; GMM entries use successful solves only.
pub fn summarize(records: &[ReplicationRecord], truth: &ThetaParams) -> Vec<ErrorSummary> {
    let c = truth.components.first();
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| !r.gmm_failed()).collect();
    let pick = |f: &dyn Fn(&ReplicationRecord) -> Option<f64>, rs: &[&ReplicationRecord]| -> Vec<f64> {
        rs.iter().filter_map(|r| f(r)).collect()
    };
    let all: Vec<&ReplicationRecord> = records.iter().collect();
    let mut out = Vec::new();
    out.extend(summarize_errors("gmm", "sigma_sq", truth.sigma_sq, &pick(&|r| r.gmm_sigma_sq, &ok)));
    out.extend(summarize_errors("trv", "sigma_sq", truth.sigma_sq, &pick(&|r| r.trv_sigma_sq, &all)));
    if let Some(c) = c {
        out.extend(summarize_errors("gmm", "alpha", c.alpha, &pick(&|r| r.gmm_alpha, &ok)));
        out.extend(summarize_errors("gmm", "r_plus", c.r_plus, &pick(&|r| r.gmm_r_plus, &ok)));
        out.extend(summarize_errors("gmm", "r_minus", c.r_minus, &pick(&|r| r.gmm_r_minus, &ok)));
        out.extend(summarize_errors("single", "alpha", c.alpha, &pick(&|r| r.single_alpha, &all)));
        out.extend(summarize_errors("aj", "alpha", c.alpha, &pick(&|r| r.aj_alpha, &all)));
    }
    out
}

/// Histogram of standardized errors plus the KS distance to `N(0, 1)`.
pub fn clt_histogram(errors: &[f64], sd: f64, bins: usize, range: f64) -> Option<Histogram> {
    if errors.is_empty() || !(sd > 0.0) {
        return None;
    }
    let mut z: Vec<f64> = errors.iter().map(|e| e / sd).collect();
    z.sort_by(f64::total_cmp);
    let width = 2.0 * range / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| -range + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    let (mut below, mut above) = (0, 0);
    for &v in &z {
        if v < -range {
            below += 1;
        } else if v >= range {
            above += 1;
        } else {
            counts[(((v + range) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let normal = Normal::standard();
    let m = z.len() as f64;
    let ks_distance = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = normal.cdf(v);
            (cdf - i as f64 / m).abs().max(((i + 1) as f64 / m - cdf).abs())
        })
        .fold(0.0, f64::max);
    Some(Histogram { edges, counts, below, above, asymptotic_sd: sd, ks_distance })
}

struct Context {
    truth: ThetaParams,
    fset: MomentFunctionSet,
    u: f64,
}

fn replicate(cfg: &ExperimentConfig, ctx: &Context, replication: usize) -> ReplicationRecord {
    let seed = cfg.path_seed(replication);
    let mut rec = ReplicationRecord::empty(replication, seed);
    let batch = match simulate_increments(&cfg.model, cfg.n, cfg.h, seed) {
        Ok(b) => b,
        Err(e) => {
            rec.note("simulate", &e);
            return rec;
        }
    };
    let est = &cfg.estimators;
    if est.gmm {
        match solve_gmm(&batch, &ctx.fset, ctx.u, &cfg.gmm) {
            Ok(res) => {
                rec.gmm_status = Some(format!("{:?}", res.status));
                rec.gmm_sigma_sq = Some(res.theta_hat.sigma_sq);
                if let Some(c) = res.theta_hat.components.first() {
                    rec.gmm_alpha = Some(c.alpha);
                    rec.gmm_r_plus = Some(c.r_plus);
                    rec.gmm_r_minus = Some(c.r_minus);
                    rec.gmm_alpha_sd = res.asym_sd(ThetaParams::alpha_index(0));
                }
                rec.gmm_iterations = Some(res.iterations);
                rec.gmm_residual = Some(res.residual_norm);
            }
            Err(e) => {
                rec.gmm_status = Some("Error".into());
                rec.note("gmm", &e);
            }
        }
    }
    if est.single {
        let f = &ctx.fset.functions[cfg.single_function];
        match single_param_estimator(&batch, f, ctx.u, &ctx.truth, Target::Alpha(0)) {
            Ok(s) => {
                rec.single_alpha = Some(s.estimate);
                rec.single_alpha_sd = Some(s.asym_sd());
            }
            Err(e) => rec.note("single", &e),
        }
    }
    let cfg_init = BaselineInit::default();
    let sigma_guess = robust_sigma(&batch).max(1e-12);
    if est.aj {
        let (k1, k2) = cfg_init.aj_factors;
        let res = ThresholdSpec::new(k1 * sigma_guess, cfg_init.omega)
            .and_then(|s1| Ok((s1, ThresholdSpec::new(k2 * sigma_guess, cfg_init.omega)?)))
            .and_then(|(s1, s2)| aj_alpha(&batch, &s1, &s2));
        match res {
            Ok(a) => rec.aj_alpha = Some(a),
            Err(e) => rec.note("aj", &e),
        }
    }
    if est.trv {
        match ThresholdSpec::new(cfg_init.trv_factor * sigma_guess, cfg_init.omega).and_then(|s| truncated_rv(&batch, &s)) {
            Ok(v) => rec.trv_sigma_sq = Some(v),
            Err(e) => rec.note("trv", &e),
        }
    }
    rec
}

/// Runs all replications and writes `records.csv` and `summary.json` when an
/// output directory is configured, without the failure-rate check.
pub fn run_replications(cfg: &ExperimentConfig) -> Result<McReport> {
    cfg.validate()?;
    let truth = cfg.model.theta()?;
    let fset = cfg.moment_set.build()?;
    if cfg.estimators.single && cfg.single_function >= fset.len() {
        return Err(invalid("single_function", "index outside the moment set"));
    }
    let u = cfg.u.resolve(cfg.n)?;
    let ctx = Context { truth, fset, u };

    let run = || -> Vec<ReplicationRecord> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|k| replicate(cfg, &ctx, k))
            .collect()
    };
    let records = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Aborted(format!("worker pool: {e}")))?
            .install(run),
        None => run(),
    };

    let gmm_failures = if cfg.estimators.gmm {
        records.iter().filter(|r| r.gmm_failed()).count()
    } else {
        0
    };
    let single_failures = if cfg.estimators.single {
        records.iter().filter(|r| r.single_alpha.is_none()).count()
    } else {
        0
    };
    let failure_rate = gmm_failures.max(single_failures) as f64 / cfg.replications as f64;

    let histogram = if cfg.estimators.gmm && !ctx.truth.components.is_empty() {
        let cov = asymptotic_covariance_with_step(&ctx.truth, &ctx.fset, cfg.n, cfg.h, u).ok();
        let sd = cov.map(|c| {
            let k = ThetaParams::alpha_index(0);
            c[(k, k)].max(0.0).sqrt()
        });
        let alpha = ctx.truth.components[0].alpha;
        let errors: Vec<f64> = records
            .iter()
            .filter(|r| !r.gmm_failed())
            .filter_map(|r| r.gmm_alpha.map(|a| a - alpha))
            .collect();
        sd.and_then(|sd| clt_histogram(&errors, sd, cfg.histogram_bins, cfg.histogram_range))
    } else {
        None
    };

    let report = McReport {
        replications: cfg.replications,
        n: cfg.n,
        h: cfg.h,
        u,
        summaries: summarize(&records, &ctx.truth),
        truth: ctx.truth,
        gmm_failures,
        single_failures,
        failure_rate,
        histogram,
        records,
    };
    if let Some(dir) = &cfg.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// [`run_replications`], aborting when more than [`MAX_FAILURE_RATE`] of the
/// solver runs fail. The report files are written either way.
pub fn run_mc_experiment(cfg: &ExperimentConfig) -> Result<McReport> {
    let report = run_replications(cfg)?;
    check_failure_rate(&report, &cfg.estimators)?;
    Ok(report)
}

pub fn check_failure_rate(report: &McReport, estimators: &EstimatorSelection) -> Result<()> {
    let (gmm_failures, single_failures) = (report.gmm_failures, report.single_failures);
    if report.failure_rate > MAX_FAILURE_RATE {
        return Err(Error::Aborted(format!(
            "{gmm_failures} GMM and {single_failures} single-parameter failures in {} replications exceed the {:.0}% limit; first failure: {}",
            report.replications,
            MAX_FAILURE_RATE * 100.0,
            report
                .records
                .iter()
                .find(|r| (estimators.gmm && r.gmm_failed()) || (estimators.single && r.single_alpha.is_none()))
                .map(|r| format!(
                    "replication {} (seed {}), status {}, {}",
                    r.replication,
                    r.seed,
                    r.gmm_status.as_deref().unwrap_or("-"),
                    r.error.as_deref().unwrap_or("no error message")
                ))
                .unwrap_or_default()
        )));
    }
    Ok(())
}

pub fn write_records(records: &[ReplicationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_report(report: &McReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_records(&report.records, &dir.join("records.csv"))?;
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// One cell of the desk-scale index-estimation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub alpha: f64,
    pub h: f64,
    pub report: McReport,
}

/// Benchmark model `B + S^{α,-1/3} + 0.1 S^{0.5,0}` at `α ∈ {1.3, 1.7}` and
/// `h ∈ {5, 1}/23400`, plus `0.2/23400` when `include_finest`.
pub fn table1_configs(replications: usize, base_seed: u64, include_finest: bool) -> Vec<ExperimentConfig> {
    let mut steps = vec![5.0 / 23400.0, 1.0 / 23400.0];
    if include_finest {
        steps.push(0.2 / 23400.0);
    }
    let mut out = Vec::new();
    for (i, &alpha) in [1.3, 1.7].iter().enumerate() {
        for (j, &h) in steps.iter().enumerate() {
            let seed = sub_seed(base_seed, 1 + i as u64, j as u64);
            out.push(ExperimentConfig::new(SimModelSpec::benchmark(alpha, -1.0 / 3.0), h, replications, seed));
        }
    }
    out
}

/// Runs [`table1_configs`]; each cell writes into its own subdirectory of `dir`.
/// Cells report their failure counts rather than aborting.
pub fn run_table1(
    replications: usize,
    base_seed: u64,
    include_finest: bool,
    workers: Option<usize>,
    dir: Option<&Path>,
) -> Result<Vec<TableCell>> {
    table1_configs(replications, base_seed, include_finest)
        .into_iter()
        .map(|mut cfg| {
            let alpha = cfg.model.components[0].alpha;
            let h = cfg.h;
            cfg.workers = workers;
            cfg.output_dir = dir.map(|d| d.join(format!("alpha{alpha}_n{}", cfg.n)));
            run_replications(&cfg).map(|report| TableCell { alpha, h, report })
        })
        .collect()
}

/// Increments as CSV with header `index,increment` and 17 significant digits.
pub fn write_increments(batch: &IncrementBatch, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "increment"])?;
    for (i, v) in batch.values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `index,increment` file. `h` is supplied by the caller.
pub fn read_increments(path: &Path, h: f64) -> Result<IncrementBatch> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "increment"] {
        return Err(invalid("increments", format!("expected header index,increment, found {headers:?}")));
    }
    let mut values = Vec::new();
    for (k, row) in r.records().enumerate() {
        let row = row?;
        let v: f64 = row
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| invalid("increments", format!("row {k} has no numeric increment")))?;
        values.push(v);
    }
    IncrementBatch::new(h, values, 0)
}
