//! Estimating equation `F_n(θ) = 0`, its damped Newton solver, rate matrices,
//! asymptotic covariance and the single-moment estimators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{aj_alpha, robust_sigma, truncated_rv, ThresholdSpec};
use crate::charfn::GridSpec;
use crate::error::{invalid, Error, Result};
use crate::levy_sim::IncrementBatch;
use crate::moments::{
    JacobianMethod, JumpTable, MomentEngine, MomentFunction, MomentFunctionSet, Side,
};
use crate::rng::rng_from_seed;
use crate::theta::{JumpComponent, ThetaParams};

/// Condition numbers above this mark a matrix as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// How `u_n` is chosen from the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalingMode {
    /// `√(n / log n)`, i.e. `1/√(h|log h|)` with `h = 1/n`.
    Practical,
    /// `τ√n / √(log n)`; `τ` should stay below `η/(σ√8)` for the given bound on `σ`.
    Theory { tau: f64, sigma_bound: f64, eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub u: f64,
    pub warning: Option<String>,
}

pub fn scaling_factor(n: usize, mode: ScalingMode) -> Result<Scaling> {
    if n < 2 {
        return Err(invalid("n", format!("{n} must be at least 2")));
    }
    let nf = n as f64;
    let root = (nf / nf.ln()).sqrt();
    match mode {
        ScalingMode::Practical => Ok(Scaling { u: root, warning: None }),
        ScalingMode::Theory { tau, sigma_bound, eta } => {
            if !(tau > 0.0) {
                return Err(invalid("tau", format!("{tau} must be positive")));
            }
            let limit = eta / (sigma_bound * 8f64.sqrt());
            let warning = (tau >= limit).then(|| {
                format!("tau = {tau} is not below eta/(sigma*sqrt(8)) = {limit}")
            });
            Ok(Scaling { u: tau * root, warning })
        }
    }
}

/// Componentwise `(1/n) Σ f_j(u Δ_i)`.
pub fn sample_moments(batch: &IncrementBatch, u: f64, fset: &MomentFunctionSet) -> Vec<f64> {
    sample_moment_stats(batch, u, fset).mean
}

/// Means and (population) variances of `f_j(u Δ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub n: usize,
}

pub fn sample_moment_stats(batch: &IncrementBatch, u: f64, fset: &MomentFunctionSet) -> SampleStats {
    let k = fset.len();
    let mut sum = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for x in &batch.values {
        for (j, f) in fset.functions.iter().enumerate() {
            let v = f.eval(u * x);
            sum[j] += v;
            sq[j] += v * v;
        }
    }
    let n = batch.len().max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let variance = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0))
        .collect();
    SampleStats { mean, variance, n: batch.len() }
}

/// `F_n(θ)`: sample moments minus model moments at `θ`.
pub fn estimating_function(
    theta: &ThetaParams,
    batch_moments: &[f64],
    h: f64,
    u: f64,
    fset: &MomentFunctionSet,
) -> Result<Vec<f64>> {
    if batch_moments.len() != fset.len() {
        return Err(invalid("batch_moments", "length differs from the function set"));
    }
    let engine = MomentEngine::new(theta, h, u, &fset.functions, &GridSpec::default())?;
    let model = engine.moment_vector(theta)?;
    Ok(batch_moments.iter().zip(&model).map(|(m, e)| m - e).collect())
}

/// Box constraints applied coordinatewise, with the interior margin added.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub sigma_sq: (f64, f64),
    pub alpha: (f64, f64),
    pub r: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            sigma_sq: (0.0, 100.0),
            alpha: (0.05, 1.99),
            r: (0.0, 100.0),
        }
    }
}

/// Thresholds for the baseline starting point, as multiples of a robust `σ` guess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineInit {
    pub trv_factor: f64,
    pub aj_factors: (f64, f64),
    pub omega: f64,
    pub alpha_fallback: f64,
}

impl Default for BaselineInit {
    fn default() -> Self {
        Self {
            trv_factor: 3.0,
            aj_factors: (4.0, 6.0),
            omega: ThresholdSpec::DEFAULT_OMEGA,
            alpha_fallback: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    Baselines(BaselineInit),
    Fixed(ThetaParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub max_iterations: usize,
    /// Max-norm tolerance on `F_n` measured in sampling standard errors.
    pub tolerance: f64,
    pub max_halvings: usize,
    pub margin: f64,
    /// Iterations a coordinate may sit on a bound before the fit stops.
    pub boundary_patience: usize,
    pub bounds: Bounds,
    pub init: InitPolicy,
    pub jacobian: JacobianMethod,
    pub grid: GridSpec,
    /// Extra randomized starts; the best-residual root is reported.
    pub restarts: usize,
    pub restart_seed: u64,
    pub ci_level: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            tolerance: 1e-6,
            max_halvings: 20,
            margin: 1e-6,
            boundary_patience: 3,
            bounds: Bounds::default(),
            init: InitPolicy::Baselines(BaselineInit::default()),
            jacobian: JacobianMethod::FiniteDifference,
            grid: GridSpec::default(),
            restarts: 0,
            restart_seed: 0,
            ci_level: 0.95,
        }
    }
}

impl GmmOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(invalid("margin", "must be positive"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(invalid("ci_level", "must lie in (0, 1)"));
        }
        let b = &self.bounds;
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo + 2.0 * self.margin;
        if !ok(b.sigma_sq.0, b.sigma_sq.1) || !ok(b.r.0, b.r.1) {
            return Err(invalid("bounds", "sigma_sq and r bounds must be finite, nonnegative and ordered"));
        }
        if !(b.alpha.0 >= 0.0 && b.alpha.1 <= 2.0 && ok(b.alpha.0, b.alpha.1)) {
            return Err(invalid("bounds", "alpha bounds must lie in [0, 2]"));
        }
        self.grid.validate()
    }

    /// Clamp a parameter vector into the box (with margin) and the ordering
    /// constraints on the indices.
    fn project(&self, x: &mut [f64], prev: &[f64]) {
        let m = self.margin;
        let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo + m, hi - m);
        x[0] = clamp(x[0], self.bounds.sigma_sq);
        let comps = (x.len() - 1) / 3;
        for k in 0..comps {
            let ia = ThetaParams::alpha_index(k);
            let mut a = clamp(x[ia], self.bounds.alpha);
            if k > 0 {
                a = a.min(x[ThetaParams::alpha_index(k - 1)] - ORDER_GAP);
                a = a.max(x[1] / 2.0 + ORDER_GAP);
            }
            if (a - 1.0).abs() < ALPHA_ONE_MARGIN {
                let side = if prev[ia] >= 1.0 { 1.0 } else { -1.0 };
                a = 1.0 + side * ALPHA_ONE_MARGIN;
            }
            x[ia] = a;
            x[ia + 1] = clamp(x[ia + 1], self.bounds.r);
            x[ia + 2] = clamp(x[ia + 2], self.bounds.r);
        }
    }

    fn at_lower(&self, x: &[f64], k: usize) -> bool {
        let lo = if k == 0 {
            self.bounds.sigma_sq.0
        } else if (k - 1) % 3 == 0 {
            self.bounds.alpha.0
        } else {
            self.bounds.r.0
        };
        x[k] <= lo + self.margin * (1.0 + 1e-9)
    }

    fn near_bound(&self, x: &[f64], k: usize) -> bool {
        let (lo, hi) = self.bounds_of(k);
        x[k] - lo <= NEAR_BOUND * lo.abs().max(1.0) || hi - x[k] <= NEAR_BOUND * hi.abs().max(1.0)
    }

    fn bounds_of(&self, k: usize) -> (f64, f64) {
        if k == 0 {
            self.bounds.sigma_sq
        } else if (k - 1) % 3 == 0 {
            self.bounds.alpha
        } else {
            self.bounds.r
        }
    }

    fn at_upper(&self, x: &[f64], k: usize) -> bool {
        let hi = if k == 0 {
            self.bounds.sigma_sq.1
        } else if (k - 1) % 3 == 0 {
            self.bounds.alpha.1
        } else {
            self.bounds.r.1
        };
        x[k] >= hi - self.margin * (1.0 + 1e-9)
    }
}

const ORDER_GAP: f64 = 1e-3;
/// Accepted iterations over which the residual must shrink by `STAGNATION_GAIN`.
const STAGNATION_WINDOW: usize = 5;
const STAGNATION_GAIN: f64 = 1e-3;
/// Distance to a bound below which a stagnated iterate counts as a boundary fit.
const NEAR_BOUND: f64 = 1e-4;
const ALPHA_ONE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    /// A coordinate sits on its bound (for an intensity: the component may be absent).
    Boundary,
    MaxIterations,
    /// The Jacobian lost rank (identifiability fails in this sample).
    Singular,
    /// No damped step reduced the residual.
    Stalled,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::Boundary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: ThetaParams,
    pub theta_init: ThetaParams,
    pub status: SolveStatus,
    pub iterations: usize,
    /// `‖F_n‖∞` in sampling standard errors.
    pub residual_norm: f64,
    /// Raw `F_n(θ̂)`.
    pub residual: Vec<f64>,
    pub jacobian_condition: f64,
    /// Coordinates resting on a bound at termination.
    pub pinned: Vec<String>,
    pub asym_cov: Option<Vec<Vec<f64>>>,
    pub ci: Option<Vec<ConfidenceInterval>>,
    pub ci_level: f64,
    pub u_used: f64,
    pub n: usize,
    pub h: f64,
    /// Largest max-norm distance between the reported root and other successful restarts.
    pub restart_spread: Option<f64>,
    pub history: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl EstimationResult {
    pub fn failed(&self) -> bool {
        !self.status.is_success()
    }

    /// Asymptotic standard deviation of coordinate `k`.
    pub fn asym_sd(&self, k: usize) -> Option<f64> {
        self.asym_cov.as_ref().map(|c| c[k][k].max(0.0).sqrt())
    }
}

/// Starting point from truncated variance, the two-threshold index ratio and
/// a least-squares fit of the intensities to the jump moments.
pub fn initial_theta(
    batch: &IncrementBatch,
    fset: &MomentFunctionSet,
    u: f64,
    stats: &SampleStats,
    cfg: &BaselineInit,
    opts: &GmmOptions,
) -> Result<(ThetaParams, Vec<String>)> {
    let mut warnings = Vec::new();
    let sigma_guess = robust_sigma(batch).max(1e-8);
    let trv = truncated_rv(batch, &ThresholdSpec::new(cfg.trv_factor * sigma_guess, cfg.omega)?)?;
    let s1 = ThresholdSpec::new(cfg.aj_factors.0 * sigma_guess, cfg.omega)?;
    let s2 = ThresholdSpec::new(cfg.aj_factors.1 * sigma_guess, cfg.omega)?;
    let alpha = match aj_alpha(batch, &s1, &s2) {
        Ok(a) if a.is_finite() => a,
        Ok(_) | Err(Error::InsufficientExceedances { .. }) => {
            warnings.push(format!("index ratio unavailable; starting from alpha = {}", cfg.alpha_fallback));
            cfg.alpha_fallback
        }
        Err(e) => return Err(e),
    };
    let (lo, hi) = opts.bounds.alpha;
    let alpha = alpha.clamp(lo + 0.02, hi - 0.02);
    let alpha = if (alpha - 1.0).abs() < 0.02 { 1.02 } else { alpha };

    let m = fset.n_components();
    let alphas: Vec<f64> = (0..m)
        .map(|k| {
            let a = alpha - 0.25 * k as f64;
            if k == 0 { a } else { a.max(alpha / 2.0 + 0.05) }
        })
        .collect();
    let h = batch.h;
    let mut comps = Vec::with_capacity(m);
    let table = JumpTable::new(alphas[0], &fset.functions)?;
    let scale = h * u.powf(alphas[0]);
    // Rows relative to their per-unit-intensity model value.
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in 1..fset.len() {
        let (p, q) = (table.plus[j], table.minus[j]);
        let unit = scale * (p + q);
        if !(unit > 0.0) {
            continue;
        }
        let (p, q, y) = (scale * p / unit, scale * q / unit, stats.mean[j] / unit);
        a11 += p * p;
        a12 += p * q;
        a22 += q * q;
        b1 += p * y;
        b2 += q * y;
    }
    let det = a11 * a22 - a12 * a12;
    let (mut rp, mut rm) = if det.abs() > 1e-12 * (a11 * a22).max(f64::MIN_POSITIVE) {
        ((b1 * a22 - b2 * a12) / det, (a11 * b2 - a12 * b1) / det)
    } else {
        let r = (b1 + b2) / (a11 + 2.0 * a12 + a22).max(f64::MIN_POSITIVE);
        (r, r)
    };
    if rp < 0.0 || rm < 0.0 {
        // one-sided fit with the other intensity at zero
        if rp < 0.0 {
            rp = 0.0;
            rm = if a22 > 0.0 { b2 / a22 } else { 0.0 };
        } else {
            rm = 0.0;
            rp = if a11 > 0.0 { b1 / a11 } else { 0.0 };
        }
    }
    let floor = 1e-2;
    let (rp, rm) = (rp.clamp(floor, opts.bounds.r.1 / 2.0), rm.clamp(floor, opts.bounds.r.1 / 2.0));
    for (k, a) in alphas.iter().enumerate() {
        let w = if k == 0 { 1.0 } else { 0.5 };
        comps.push(JumpComponent::new(*a, w * rp, w * rm));
    }
    let sigma_sq = trv.clamp(opts.bounds.sigma_sq.0 + 1e-4, opts.bounds.sigma_sq.1 - 1e-4);
    Ok((ThetaParams { sigma_sq, components: comps }, warnings))
}

struct Problem<'a> {
    fset: &'a MomentFunctionSet,
    h: f64,
    u: f64,
    target: Vec<f64>,
    scale: Vec<f64>,
    opts: &'a GmmOptions,
    engine: MomentEngine,
    /// Wider grid for trial points the primary grid cannot resolve; kept
    /// separate so one excursion toward σ² → 0 does not slow every later step.
    wide: Option<MomentEngine>,
}

impl Problem<'_> {
    fn engine_for(&mut self, theta: &ThetaParams) -> Result<&MomentEngine> {
        if self.engine.resolves(theta) {
            return Ok(&self.engine);
        }
        if !self.wide.as_ref().is_some_and(|w| w.resolves(theta)) {
            self.wide = Some(MomentEngine::new(theta, self.h, self.u, &self.fset.functions, &self.opts.grid)?);
        }
        Ok(self.wide.as_ref().expect("wide engine was just built"))
    }

    /// Standardized residual `(m̂ - E_θ f) / s`.
    fn residual(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let theta = ThetaParams::from_slice(x)?;
        let model = self.engine_for(&theta)?.moment_vector(&theta)?;
        Ok(self
            .target
            .iter()
            .zip(&model)
            .zip(&self.scale)
            .map(|((m, e), s)| (m - e) / s)
            .collect())
    }

    /// Jacobian of the standardized model moments `E_θ f / s`.
    fn jacobian(&mut self, x: &[f64]) -> Result<DMatrix<f64>> {
        let theta = ThetaParams::from_slice(x)?;
        let method = self.opts.jacobian;
        let mut j = self.engine_for(&theta)?.jacobian(&theta, method)?;
        for (r, s) in self.scale.iter().enumerate() {
            j.row_mut(r).scale_mut(1.0 / s);
        }
        Ok(j)
    }
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

/// Row and column scale factors bringing every row and column to unit max-norm.
fn equilibrate(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<f64> = (0..m.nrows())
        .map(|r| {
            let s = m.row(r).amax();
            if s > 0.0 { 1.0 / s } else { 1.0 }
        })
        .collect();
    let cols: Vec<f64> = (0..m.ncols())
        .map(|c| {
            let s = (0..m.nrows()).map(|r| (m[(r, c)] * rows[r]).abs()).fold(0.0, f64::max);
            if s > 0.0 { 1.0 / s } else { 1.0 }
        })
        .collect();
    (rows, cols)
}

fn scaled(m: &DMatrix<f64>, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)] * rows[r] * cols[c])
}

/// Two-norm condition number after row and column equilibration.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let (rows, cols) = equilibrate(m);
    let sv = scaled(m, &rows, &cols).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Inverse through the equilibrated matrix; fails above [`SINGULAR_CONDITION`].
pub fn stable_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (rows, cols) = equilibrate(m);
    let s = scaled(m, &rows, &cols);
    let cond = condition_number(m);
    if !(cond < SINGULAR_CONDITION) {
        return Err(Error::Singular { condition: cond, context: context.to_string() });
    }
    let inv = s.try_inverse().ok_or_else(|| Error::Singular {
        condition: cond,
        context: context.to_string(),
    })?;
    // m = R⁻¹ s C⁻¹  ⇒  m⁻¹ = C s⁻¹ R
    Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| cols[r] * inv[(r, c)] * rows[c]))
}

/// Newton step on the free coordinates; pinned coordinates stay put.
fn newton_step(jac: &DMatrix<f64>, g: &[f64], free: &[usize]) -> Option<Vec<f64>> {
    let sub = DMatrix::from_fn(jac.nrows(), free.len(), |r, c| jac[(r, free[c])]);
    let (rows, cols) = equilibrate(&sub);
    let s = scaled(&sub, &rows, &cols);
    let rhs = DVector::from_iterator(g.len(), g.iter().zip(&rows).map(|(g, r)| g * r));
    let sol = s.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let mut step = vec![0.0; jac.ncols()];
    for (c, &k) in free.iter().enumerate() {
        step[k] = sol[c] * cols[c];
    }
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// One accepted Newton iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub theta: Vec<f64>,
    pub residual_norm: f64,
    pub step_length: f64,
    pub condition: f64,
}

struct Run {
    x: Vec<f64>,
    status: SolveStatus,
    iterations: usize,
    residual: Vec<f64>,
    condition: f64,
    history: Vec<IterationRecord>,
}

fn newton(problem: &mut Problem, start: &[f64]) -> Result<Run> {
    let opts = problem.opts;
    let dim = start.len();
    let mut x = start.to_vec();
    opts.project(&mut x, start);
    let mut g = problem.residual(&x)?;
    let mut norm = max_norm(&g);
    let mut pinned_for = vec![0usize; dim];
    let mut condition = f64::NAN;
    let mut history = Vec::new();
    // Only a vanishing intensity counts as a boundary solution; σ² or α on a
    // bound means the fit failed.
    let intensity = |k: usize| k > 0 && (k - 1) % 3 != 0;
    let on_bound = |x: &[f64]| {
        (0..dim).any(|k| intensity(k) && opts.near_bound(x, k)) && !(0..dim).any(|k| !intensity(k) && opts.near_bound(x, k))
    };
    let finish = |x: Vec<f64>, status, iterations, residual, condition, history| {
        Ok(Run { x, status, iterations, residual, condition, history })
    };
    for it in 0..opts.max_iterations {
        if norm < opts.tolerance {
            return finish(x, SolveStatus::Converged, it, g, condition, history);
        }
        let jac = problem.jacobian(&x)?;
        condition = condition_number(&jac);
        if !(condition < SINGULAR_CONDITION) {
            return finish(x, SolveStatus::Singular, it, g, condition, history);
        }
        // Active set: drop coordinates whose step leaves the box.
        let mut free: Vec<usize> = (0..dim).collect();
        let mut step = None;
        for _ in 0..=dim {
            let Some(s) = newton_step(&jac, &g, &free) else { break };
            let blocked: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&k| (s[k] < 0.0 && opts.at_lower(&x, k)) || (s[k] > 0.0 && opts.at_upper(&x, k)))
                .collect();
            if blocked.is_empty() || blocked.len() == free.len() {
                step = Some(s);
                break;
            }
            free.retain(|k| !blocked.contains(k));
        }
        let Some(step) = step else {
            return finish(x, SolveStatus::Singular, it, g, condition, history);
        };
        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=opts.max_halvings {
            let mut trial: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            opts.project(&mut trial, &x);
            if let Ok(gt) = problem.residual(&trial) {
                let nt = max_norm(&gt);
                if nt < norm {
                    accepted = Some((trial, gt, nt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, gn, nn)) = accepted else {
            // No descent left: a constrained stationary point if an intensity is pinned.
            let status = if on_bound(&x) { SolveStatus::Boundary } else { SolveStatus::Stalled };
            return finish(x, status, it + 1, g, condition, history);
        };
        x = xn;
        g = gn;
        norm = nn;
        history.push(IterationRecord { theta: x.clone(), residual_norm: norm, step_length: t, condition });
        for k in (0..dim).filter(|&k| intensity(k)) {
            if opts.at_lower(&x, k) || opts.at_upper(&x, k) {
                pinned_for[k] += 1;
            } else {
                pinned_for[k] = 0;
            }
        }
        if norm >= opts.tolerance && pinned_for.iter().any(|&c| c >= opts.boundary_patience) && on_bound(&x) {
            return finish(x, SolveStatus::Boundary, it + 1, g, condition, history);
        }
        let k = history.len();
        if norm >= opts.tolerance && k > STAGNATION_WINDOW {
            let earlier = history[k - 1 - STAGNATION_WINDOW].residual_norm;
            if norm > (1.0 - STAGNATION_GAIN) * earlier {
                let status = if on_bound(&x) { SolveStatus::Boundary } else { SolveStatus::Stalled };
                return finish(x, status, it + 1, g, condition, history);
            }
        }
    }
    let status = if norm < opts.tolerance {
        SolveStatus::Converged
    } else if on_bound(&x) {
        SolveStatus::Boundary
    } else {
        SolveStatus::MaxIterations
    };
    finish(x, status, opts.max_iterations, g, condition, history)
}

/// Solve `F_n(θ) = 0` by damped, projected Newton iterations.
pub fn solve_gmm(batch: &IncrementBatch, fset: &MomentFunctionSet, u: f64, opts: &GmmOptions) -> Result<EstimationResult> {
    opts.validate()?;
    if batch.is_empty() {
        return Err(invalid("batch", "no increments"));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(invalid("u", format!("{u} must be positive")));
    }
    let stats = sample_moment_stats(batch, u, fset);
    let (init, mut warnings) = match &opts.init {
        InitPolicy::Fixed(t) => {
            if t.n_components() != fset.n_components() {
                return Err(invalid("init", "component count differs from the function set"));
            }
            t.validate()?;
            (t.clone(), Vec::new())
        }
        InitPolicy::Baselines(cfg) => initial_theta(batch, fset, u, &stats, cfg, opts)?,
    };
    let mut x0 = init.to_vec();
    opts.project(&mut x0, &init.to_vec());
    let theta0 = ThetaParams::from_slice(&x0)?;
    let h = batch.h;
    let n = batch.len();

    let engine = MomentEngine::new(&theta0, h, u, &fset.functions, &opts.grid)?;
    // Residual scales: larger of the sample and model-implied standard errors.
    let squares: Vec<MomentFunction> = fset.functions.iter().map(|f| MomentFunction::product(f, f)).collect();
    let second = MomentEngine::with_grid(engine.grid().clone(), &squares).moment_vector(&theta0)?;
    let first = engine.moment_vector(&theta0)?;
    let scale: Vec<f64> = (0..fset.len())
        .map(|j| {
            let model_var = (second[j] - first[j] * first[j]).max(0.0);
            (stats.variance[j].max(model_var) / n as f64).sqrt().max(f64::MIN_POSITIVE)
        })
        .collect();
    let mut problem = Problem {
        fset,
        h,
        u,
        target: stats.mean.clone(),
        scale,
        opts,
        engine,
        wide: None,
    };

    let mut runs = vec![newton(&mut problem, &x0)?];
    if opts.restarts > 0 {
        let mut rng = rng_from_seed(opts.restart_seed);
        for _ in 0..opts.restarts {
            let mut x = x0.clone();
            x[0] *= 1.0 + 0.2 * (2.0 * rng.random::<f64>() - 1.0);
            for k in 0..fset.n_components() {
                let ia = ThetaParams::alpha_index(k);
                x[ia] += 0.3 * (2.0 * rng.random::<f64>() - 1.0);
                for d in 1..=2 {
                    let z: f64 = rng.sample(StandardNormal);
                    x[ia + d] *= (0.5 * z).exp();
                }
            }
            opts.project(&mut x, &x0);
            if ThetaParams::from_slice(&x).is_err() {
                continue;
            }
            if let Ok(r) = newton(&mut problem, &x) {
                runs.push(r);
            }
        }
    }
    let rank = |r: &Run| (!r.status.is_success(), max_norm(&r.residual));
    let best_idx = (0..runs.len())
        .min_by(|&a, &b| rank(&runs[a]).partial_cmp(&rank(&runs[b])).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    let restart_spread = (runs.len() > 1).then(|| {
        runs.iter()
            .filter(|r| r.status.is_success())
            .map(|r| r.x.iter().zip(&runs[best_idx].x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    });
    let best = runs.swap_remove(best_idx);

    let theta_hat = ThetaParams::from_slice(&best.x)?;
    let names = ThetaParams::coordinate_names(fset.n_components());
    let pinned = (0..best.x.len())
        .filter(|&k| opts.at_lower(&best.x, k) || opts.at_upper(&best.x, k))
        .map(|k| names[k].clone())
        .collect();
    let residual: Vec<f64> = best.residual.iter().zip(&problem.scale).map(|(g, s)| g * s).collect();
    let condition = if best.condition.is_nan() {
        problem.jacobian(&best.x).map(|j| condition_number(&j)).unwrap_or(f64::NAN)
    } else {
        best.condition
    };

    let (asym_cov, ci) = if best.status.is_success() && u > 1.0 {
        match asymptotic_covariance_with_step(&theta_hat, fset, n, h, u) {
            Ok(cov) => {
                let z = Normal::standard().inverse_cdf(0.5 + opts.ci_level / 2.0);
                let ci = (0..cov.nrows())
                    .map(|k| {
                        let sd = cov[(k, k)].max(0.0).sqrt();
                        ConfidenceInterval {
                            name: names[k].clone(),
                            estimate: best.x[k],
                            lower: best.x[k] - z * sd,
                            upper: best.x[k] + z * sd,
                        }
                    })
                    .collect();
                let rows = (0..cov.nrows()).map(|r| cov.row(r).iter().copied().collect()).collect();
                (Some(rows), Some(ci))
            }
            Err(e) => {
                warnings.push(format!("asymptotic covariance unavailable: {e}"));
                (None, None)
            }
        }
    } else {
        (None, None)
    };

    Ok(EstimationResult {
        theta_hat,
        theta_init: theta0,
        status: best.status,
        iterations: best.iterations,
        residual_norm: max_norm(&best.residual),
        residual,
        jacobian_condition: condition,
        pinned,
        asym_cov,
        ci,
        ci_level: opts.ci_level,
        u_used: u,
        n,
        h,
        restart_spread,
        history: best.history,
        warnings,
    })
}

/// `Γ_n`, `Λ_n`, `Λ̃_n` and `Λ̄_n = Λ̃_n⁻¹ Λ_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrices {
    pub gamma_n: DMatrix<f64>,
    pub lambda_n: DMatrix<f64>,
    pub lambda_tilde_n: DMatrix<f64>,
    pub lambda_bar_n: DMatrix<f64>,
}

/// Rate matrices with `h = 1/n`.
pub fn rate_matrices(theta: &ThetaParams, n: usize, u: f64) -> Result<RateMatrices> {
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    rate_matrices_with_step(theta, 1.0 / n as f64, u)
}

pub fn rate_matrices_with_step(theta: &ThetaParams, h: f64, u: f64) -> Result<RateMatrices> {
    if !(u > 1.0) {
        return Err(invalid("u", format!("{u} must exceed 1")));
    }
    let d = theta.dim();
    let log_u = u.ln();
    let a1 = theta.components.first().map_or(2.0, |c| c.alpha);
    let mut gamma = DMatrix::identity(d, d);
    let mut lam = vec![h * u * u];
    let mut lam_t = vec![h * u * u];
    for (m, c) in theta.components.iter().enumerate() {
        let ia = ThetaParams::alpha_index(m);
        gamma[(ia + 1, ia)] = -c.r_plus * log_u;
        gamma[(ia + 2, ia)] = -c.r_minus * log_u;
        for _ in 0..3 {
            lam.push(h * u.powf(c.alpha));
            lam_t.push((h * u.powf(a1)).sqrt());
        }
    }
    let lambda_n = DMatrix::from_diagonal(&DVector::from_vec(lam.clone()));
    let lambda_tilde_n = DMatrix::from_diagonal(&DVector::from_vec(lam_t.clone()));
    let lambda_bar_n = DMatrix::from_diagonal(&DVector::from_iterator(d, lam.iter().zip(&lam_t).map(|(a, b)| a / b)));
    Ok(RateMatrices { gamma_n: gamma, lambda_n, lambda_tilde_n, lambda_bar_n })
}

/// `A(θ)`: `f₁''(0)/2` in the corner and the jump block from `J^±` and `∂_α J^±`.
pub fn a_matrix(theta: &ThetaParams, fset: &MomentFunctionSet) -> Result<DMatrix<f64>> {
    let d = fset.len();
    if theta.dim() != d {
        return Err(invalid("theta", "dimension differs from the function set"));
    }
    let mut a = DMatrix::zeros(d, d);
    a[(0, 0)] = fset.volatility_curvature() / 2.0;
    for (m, c) in theta.components.iter().enumerate() {
        let table = JumpTable::new(c.alpha, &fset.functions[1..])?;
        let ia = ThetaParams::alpha_index(m);
        for j in 1..d {
            let t = j - 1;
            a[(j, ia)] = table.combined_dalpha(t, c.r_plus, c.r_minus);
            a[(j, ia + 1)] = table.plus[t];
            a[(j, ia + 2)] = table.minus[t];
        }
    }
    Ok(a)
}

/// `Σ(θ)`: `σ⁴ f₁''(0)²/2` in the corner and `(r₁⁺J⁺ + r₁⁻J⁻)(f_j f_k)(0)` in the jump block.
pub fn sigma_matrix(theta: &ThetaParams, fset: &MomentFunctionSet) -> Result<DMatrix<f64>> {
    let d = fset.len();
    if theta.dim() != d {
        return Err(invalid("theta", "dimension differs from the function set"));
    }
    let mut s = DMatrix::zeros(d, d);
    let f2 = fset.volatility_curvature();
    s[(0, 0)] = theta.sigma_sq * theta.sigma_sq * f2 * f2 / 2.0;
    if let Some(c) = theta.components.first() {
        for j in 1..d {
            for k in j..d {
                let g = MomentFunction::product(&fset.functions[j], &fset.functions[k]);
                let v = c.r_plus * crate::moments::jump_functional(c.alpha, Side::Plus, &g)?
                    + c.r_minus * crate::moments::jump_functional(c.alpha, Side::Minus, &g)?;
                s[(j, k)] = v;
                s[(k, j)] = v;
            }
        }
    }
    Ok(s)
}

/// `(1/n) Γ_n Λ̄_n⁻¹ A⁻¹ Σ A⁻ᵀ Λ̄_n⁻¹ Γ_nᵀ` with `h = 1/n`.
pub fn asymptotic_covariance(theta: &ThetaParams, fset: &MomentFunctionSet, n: usize, u: f64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    asymptotic_covariance_with_step(theta, fset, n, 1.0 / n as f64, u)
}

pub fn asymptotic_covariance_with_step(
    theta: &ThetaParams,
    fset: &MomentFunctionSet,
    n: usize,
    h: f64,
    u: f64,
) -> Result<DMatrix<f64>> {
    let a = a_matrix(theta, fset)?;
    let a_inv = stable_inverse(&a, "A(theta) is singular; identifiability fails")?;
    let sigma = sigma_matrix(theta, fset)?;
    let rates = rate_matrices_with_step(theta, h, u)?;
    let lb_inv = DMatrix::from_diagonal(&rates.lambda_bar_n.diagonal().map(|v| 1.0 / v));
    let core = &a_inv * &sigma * a_inv.transpose();
    let left = &rates.gamma_n * &lb_inv;
    let cov = &left * core * left.transpose() / n as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Which coordinate a single-moment estimator targets (zero-based component).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Alpha(usize),
    RPlus(usize),
    RMinus(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleEstimate {
    pub target: Target,
    pub estimate: f64,
    /// Asymptotic variance of the estimate itself (rate included).
    pub asym_var: f64,
    pub evaluations: usize,
    pub u: f64,
}

impl SingleEstimate {
    pub fn asym_sd(&self) -> f64 {
        self.asym_var.sqrt()
    }
}

/// Root in one coordinate of `(1/n) Σ f(uΔ_i) = E_θ f(uZ̃_h)` with the rest of `θ` known.
pub fn single_param_estimator(
    batch: &IncrementBatch,
    f: &MomentFunction,
    u: f64,
    theta_known: &ThetaParams,
    target: Target,
) -> Result<SingleEstimate> {
    single_param_estimator_with_grid(batch, f, u, theta_known, target, &GridSpec::default())
}

pub fn single_param_estimator_with_grid(
    batch: &IncrementBatch,
    f: &MomentFunction,
    u: f64,
    theta_known: &ThetaParams,
    target: Target,
    grid: &GridSpec,
) -> Result<SingleEstimate> {
    theta_known.validate()?;
    if batch.is_empty() {
        return Err(invalid("batch", "no increments"));
    }
    if !(u > 1.0) {
        return Err(invalid("u", format!("{u} must exceed 1")));
    }
    if !(f.eta > 0.0) || !f.is_nonnegative() {
        return Err(Error::Hypothesis(
            "the moment function must be nonnegative and vanish near zero".into(),
        ));
    }
    let m = match target {
        Target::Alpha(m) | Target::RPlus(m) | Target::RMinus(m) => m,
    };
    let comp = *theta_known
        .components
        .get(m)
        .ok_or_else(|| invalid("target", format!("component {m} does not exist")))?;
    let jp = crate::moments::jump_functional(comp.alpha, Side::Plus, f)?;
    let jm = crate::moments::jump_functional(comp.alpha, Side::Minus, f)?;
    let lead = comp.r_plus * jp + comp.r_minus * jm;
    let identified = match target {
        Target::Alpha(_) => lead > 0.0,
        Target::RPlus(_) => jp > 0.0,
        Target::RMinus(_) => jm > 0.0,
    };
    if !identified {
        return Err(Error::NotIdentified(format!(
            "J functional of the moment function vanishes for {target:?}"
        )));
    }

    let h = batch.h;
    let n = batch.len();
    let target_value = batch.values.iter().map(|x| f.eval(u * x)).sum::<f64>() / n as f64;
    let mut engine = MomentEngine::new(theta_known, h, u, std::slice::from_ref(f), grid)?;
    let coord = match target {
        Target::Alpha(m) => ThetaParams::alpha_index(m),
        Target::RPlus(m) => ThetaParams::alpha_index(m) + 1,
        Target::RMinus(m) => ThetaParams::alpha_index(m) + 2,
    };
    let base = theta_known.to_vec();
    let mut evaluations = 0usize;
    let mut eval = |v: f64| -> Result<f64> {
        let mut x = base.clone();
        x[coord] = v;
        let theta = ThetaParams::from_slice(&x)?;
        if !engine.resolves(&theta) {
            engine = MomentEngine::new(&theta, h, u, std::slice::from_ref(f), grid)?;
        }
        evaluations += 1;
        Ok(target_value - engine.moment_vector(&theta)?[0])
    };

    let (lo, mut hi) = match target {
        Target::Alpha(m) => {
            let upper = if m == 0 { 2.0 } else { theta_known.components[m - 1].alpha };
            let lower = match theta_known.components.len() {
                1 => 0.0,
                _ if m == 0 => theta_known.components[1].alpha,
                _ => theta_known.components[0].alpha / 2.0,
            };
            let lower = match theta_known.components.get(m + 1) {
                Some(next) => next.alpha.max(lower),
                None => lower,
            };
            // stay on the side of 1 containing the known index
            let (lo, hi) = if comp.alpha > 1.0 { (lower.max(1.0), upper) } else { (lower, upper.min(1.0)) };
            (lo + 1e-4, hi - 1e-4)
        }
        Target::RPlus(_) | Target::RMinus(_) => (0.0, (2.0 * base[coord]).max(1.0)),
    };
    let f_lo = eval(lo)?;
    let mut f_hi = eval(hi)?;
    if matches!(target, Target::RPlus(_) | Target::RMinus(_)) {
        let mut grow = 0;
        while f_lo * f_hi > 0.0 && grow < 40 {
            hi *= 2.0;
            f_hi = eval(hi)?;
            grow += 1;
        }
    }
    if !(f_lo * f_hi <= 0.0) {
        return Err(Error::NotIdentified(format!(
            "no sign change of the scalar estimating function on [{lo}, {hi}]"
        )));
    }
    // Illinois regula falsi; [a, b] always brackets the root.
    let (mut a, mut fa, mut b, mut fb) = (lo, f_lo, hi, f_hi);
    let mut estimate = if fa == 0.0 { a } else { b };
    if fa != 0.0 && fb != 0.0 {
        for _ in 0..200 {
            let mut c = b - fb * (b - a) / (fb - fa);
            if !c.is_finite() || c <= a.min(b) || c >= a.max(b) {
                c = 0.5 * (a + b);
            }
            let fc = eval(c)?;
            estimate = c;
            if fc == 0.0 {
                break;
            }
            if fc * fb < 0.0 {
                a = b;
                fa = fb;
            } else {
                fa *= 0.5;
            }
            b = c;
            fb = fc;
            if (b - a).abs() < 1e-12 * (1.0 + b.abs()) {
                break;
            }
        }
    }

    // V₁ = (r₁⁺J⁺ + r₁⁻J⁻) f²(0) at the dominant index.
    let first = theta_known.components[0];
    let sq = MomentFunction::product(f, f);
    let v1 = first.r_plus * crate::moments::jump_functional(first.alpha, Side::Plus, &sq)?
        + first.r_minus * crate::moments::jump_functional(first.alpha, Side::Minus, &sq)?;
    let log_u = u.ln();
    let (denominator, power) = match target {
        Target::Alpha(_) => (lead * log_u, comp.alpha),
        Target::RPlus(_) => (jp, comp.alpha),
        Target::RMinus(_) => (jm, comp.alpha),
    };
    let asym_var = v1 / (n as f64 * h * u.powf(2.0 * power - first.alpha) * denominator * denominator);
    Ok(SingleEstimate { target, estimate, asym_var, evaluations, u })
}
