//! Moment functions, model-implied moments `E_θ f(uZ̃_h)` and jump functionals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

use crate::charfn::{GridSpec, InversionGrid};
use crate::error::{invalid, Error, Result};
use crate::levy_sim::{simulate_increments, SimModelSpec};
use crate::quad::{integrate_points, QuadOptions};
use crate::rng::sub_seed;
use crate::theta::{check_alpha, ThetaParams};

/// Truncated Taylor expansion `Σ c_k t^k`, `k ≤ 4`, for forward-mode derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet(pub [f64; 5]);

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet([v, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn variable(v: f64) -> Self {
        Jet([v, 1.0, 0.0, 0.0, 0.0])
    }

    /// `k`-th derivative.
    pub fn derivative(&self, k: usize) -> f64 {
        const FACT: [f64; 5] = [1.0, 1.0, 2.0, 6.0, 24.0];
        self.0[k] * FACT[k]
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(o.0) {
            *a += b;
        }
        Jet(c)
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet(self.0.map(|v| -v))
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self.0, o.0);
        let mut c = [0.0; 5];
        for i in 0..5 {
            for j in 0..5 - i {
                c[i + j] += a[i] * b[j];
            }
        }
        Jet(c)
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        Jet(self.0.map(|v| v * s))
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, s: f64) -> Jet {
        let mut c = self.0;
        c[0] += s;
        Jet(c)
    }
}

/// Arithmetic needed to evaluate a [`Shape`] on plain numbers or jets.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
    + Mul<f64, Output = Self> + Add<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
}

impl Scalar for Jet {
    fn constant(v: f64) -> Self {
        Jet::constant(v)
    }
    fn value(&self) -> f64 {
        self.0[0]
    }
    fn exp(self) -> Self {
        let f = self.0;
        let mut g = [0.0; 5];
        g[0] = f[0].exp();
        for k in 1..5 {
            let mut s = 0.0;
            for j in 1..=k {
                s += j as f64 * f[j] * g[k - j];
            }
            g[k] = s / k as f64;
        }
        Jet(g)
    }
    fn recip(self) -> Self {
        let f = self.0;
        let mut r = [0.0; 5];
        r[0] = 1.0 / f[0];
        for k in 1..5 {
            let mut s = 0.0;
            for j in 1..=k {
                s += f[j] * r[k - j];
            }
            r[k] = -s * r[0];
        }
        Jet(r)
    }
}

fn abs_of<T: Scalar>(x: T) -> T {
    if x.value() < 0.0 {
        -x
    } else {
        x
    }
}

/// Expression tree for a smooth moment function.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Zero,
    /// `1 - exp(-rate·x²)`.
    GaussComplement { rate: f64 },
    /// `exp(-a_rate/(|s x| - a)) · exp(-b_rate/(b - |s x|))` on `a < |s x| < b`, else 0.
    Bump {
        scale: f64,
        inner: f64,
        inner_rate: f64,
        outer: f64,
        outer_rate: f64,
    },
    /// `f(c x)`.
    Dilate(f64, Box<Shape>),
    /// `c f(x)`.
    Scale(f64, Box<Shape>),
    /// `f(x)` for `x ≥ 0`, `g(x)` for `x < 0`.
    Splice(Box<Shape>, Box<Shape>),
    Sum(Box<Shape>, Box<Shape>),
    Product(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn eval<T: Scalar>(&self, x: T) -> T {
        match self {
            Shape::Zero => T::constant(0.0),
            Shape::GaussComplement { rate } => -((x * x * -*rate).exp()) + 1.0,
            Shape::Bump {
                scale,
                inner,
                inner_rate,
                outer,
                outer_rate,
            } => {
                let t = abs_of(x * *scale);
                let tv = t.value();
                if tv <= *inner || tv >= *outer {
                    return T::constant(0.0);
                }
                let lo = (t + -*inner).recip() * -*inner_rate;
                let hi = (-t + *outer).recip() * -*outer_rate;
                (lo + hi).exp()
            }
            Shape::Dilate(c, f) => f.eval(x * *c),
            Shape::Scale(c, f) => f.eval(x) * *c,
            Shape::Splice(pos, neg) => {
                if x.value() >= 0.0 {
                    pos.eval(x)
                } else {
                    neg.eval(x)
                }
            }
            Shape::Sum(f, g) => f.eval(x) + g.eval(x),
            Shape::Product(f, g) => f.eval(x) * g.eval(x),
        }
    }
}

/// A bounded smooth function with the metadata the estimator relies on.
#[derive(Debug, Clone)]
pub struct MomentFunction {
    pub name: String,
    shape: Shape,
    /// `f ≡ 0` on `[-eta, eta]`; 0 if `f` does not vanish near the origin.
    pub eta: f64,
    /// `f ≡ 0` outside `[-support, support]` when known.
    pub support: Option<f64>,
    pub symmetric: bool,
    pub integrable_d1: bool,
    /// Grid estimate of `‖f‖∞`.
    pub sup_norm: f64,
}

/// Bump constants matching `exp(-300/(|x|-0.2)) exp(-10/(4-|x|))`.
const BUMP_INNER: f64 = 0.2;
const BUMP_INNER_RATE: f64 = 300.0;
const BUMP_OUTER: f64 = 4.0;
const BUMP_OUTER_RATE: f64 = 10.0;

impl MomentFunction {
    fn build(name: impl Into<String>, shape: Shape, eta: f64, support: Option<f64>, integrable_d1: bool) -> Self {
        let mut f = Self {
            name: name.into(),
            shape,
            eta,
            support,
            symmetric: false,
            integrable_d1,
            sup_norm: 0.0,
        };
        let radius = support.unwrap_or(50.0).max(1e-3);
        let m = 20_000;
        let (mut sup, mut asym): (f64, f64) = (0.0, 0.0);
        for k in 0..=m {
            let x = radius * k as f64 / m as f64;
            let (a, b) = (f.eval(x), f.eval(-x));
            sup = sup.max(a.abs()).max(b.abs());
            asym = asym.max((a - b).abs());
        }
        f.sup_norm = sup;
        f.symmetric = asym <= 1e-14 * sup;
        f
    }

    pub fn zero() -> Self {
        Self::build("zero", Shape::Zero, f64::INFINITY, Some(0.0), true)
    }

    /// `1 - exp(-rate·x²)`.
    pub fn gauss_complement(rate: f64) -> Self {
        Self::build(format!("gauss_complement({rate})"), Shape::GaussComplement { rate }, 0.0, None, true)
    }

    /// `exp(-300/(|sx|-0.2)) · exp(-10/(4-|sx|))`, vanishing on `|x| ≤ 0.2/s` and `|x| ≥ 4/s`.
    pub fn bump(scale: f64) -> Self {
        assert!(scale > 0.0, "bump scale must be positive");
        Self::build(
            format!("bump({scale})"),
            Shape::Bump {
                scale,
                inner: BUMP_INNER,
                inner_rate: BUMP_INNER_RATE,
                outer: BUMP_OUTER,
                outer_rate: BUMP_OUTER_RATE,
            },
            BUMP_INNER / scale,
            Some(BUMP_OUTER / scale),
            true,
        )
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// `x ↦ f(c x)`.
    pub fn dilate(&self, c: f64) -> Self {
        assert!(c > 0.0, "dilation factor must be positive");
        Self::build(
            format!("{}({c}x)", self.name),
            Shape::Dilate(c, Box::new(self.shape.clone())),
            self.eta / c,
            self.support.map(|r| r / c),
            self.integrable_d1,
        )
    }

    /// `x ↦ f(-x)`.
    pub fn reflect(&self) -> Self {
        Self::build(
            format!("{}(-x)", self.name),
            Shape::Dilate(-1.0, Box::new(self.shape.clone())),
            self.eta,
            self.support,
            self.integrable_d1,
        )
    }

    pub fn scaled(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero();
        }
        Self::build(
            format!("{c}*{}", self.name),
            Shape::Scale(c, Box::new(self.shape.clone())),
            self.eta,
            self.support,
            self.integrable_d1,
        )
    }

    /// `pos` on `x ≥ 0`, `neg` on `x < 0`.
    pub fn splice(pos: &Self, neg: &Self) -> Self {
        Self::build(
            format!("splice({}, {})", pos.name, neg.name),
            Shape::Splice(Box::new(pos.shape.clone()), Box::new(neg.shape.clone())),
            pos.eta.min(neg.eta),
            pos.support.zip(neg.support).map(|(a, b)| a.max(b)),
            pos.integrable_d1 && neg.integrable_d1,
        )
    }

    /// `a f + b g`.
    pub fn linear_combination(a: f64, f: &Self, b: f64, g: &Self) -> Self {
        let (fa, gb) = (f.scaled(a), g.scaled(b));
        Self::build(
            format!("{a}*{} + {b}*{}", f.name, g.name),
            Shape::Sum(Box::new(fa.shape), Box::new(gb.shape)),
            fa.eta.min(gb.eta),
            fa.support.zip(gb.support).map(|(a, b)| a.max(b)),
            fa.integrable_d1 && gb.integrable_d1,
        )
    }

    pub fn product(f: &Self, g: &Self) -> Self {
        let support = match (f.support, g.support) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (Some(a), None) | (None, Some(a)) => Some(a),
            (None, None) => None,
        };
        Self::build(
            format!("{}*{}", f.name, g.name),
            Shape::Product(Box::new(f.shape.clone()), Box::new(g.shape.clone())),
            f.eta.max(g.eta),
            support,
            support.is_some() || (f.integrable_d1 && g.integrable_d1),
        )
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.shape.eval(x)
    }

    /// `[f, f', f'', f''', f'''']` at `x`.
    pub fn derivatives(&self, x: f64) -> [f64; 5] {
        let j = self.shape.eval(Jet::variable(x));
        [0, 1, 2, 3, 4].map(|k| j.derivative(k))
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.derivatives(x)[1]
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.derivatives(x)[2]
    }

    pub fn d3(&self, x: f64) -> f64 {
        self.derivatives(x)[3]
    }

    /// True when `f` is nonnegative on a dense grid over its support.
    pub fn is_nonnegative(&self) -> bool {
        let radius = self.support.unwrap_or(50.0);
        let m = 20_000;
        (0..=m).all(|k| {
            let x = radius * k as f64 / m as f64;
            self.eval(x) >= 0.0 && self.eval(-x) >= 0.0
        })
    }
}

/// The `3M+1` functions defining the estimating equation.
#[derive(Debug, Clone)]
pub struct MomentFunctionSet {
    pub functions: Vec<MomentFunction>,
    /// Common vanishing radius of functions `2..`.
    pub eta: f64,
}

impl MomentFunctionSet {
    pub fn new(functions: Vec<MomentFunction>) -> Result<Self> {
        if functions.len() < 4 || (functions.len() - 1) % 3 != 0 {
            return Err(invalid(
                "functions",
                format!("need 3M+1 functions with M ≥ 1, got {}", functions.len()),
            ));
        }
        let first = &functions[0];
        let d = first.derivatives(0.0);
        if !first.symmetric || d[0].abs() > 1e-14 || d[1].abs() > 1e-14 || d[2] == 0.0 {
            return Err(invalid(
                "functions",
                "first function must be symmetric with f(0) = f'(0) = 0 != f''(0)",
            ));
        }
        let eta = functions[1..]
            .iter()
            .map(|f| f.eta)
            .fold(f64::INFINITY, f64::min);
        if !(eta > 0.0) {
            return Err(invalid(
                "functions",
                "functions after the first must vanish on a neighbourhood of 0",
            ));
        }
        Ok(Self { functions, eta })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn n_components(&self) -> usize {
        (self.functions.len() - 1) / 3
    }

    pub fn volatility_curvature(&self) -> f64 {
        self.functions[0].d2(0.0)
    }

    /// `(f_1(x), …, f_{3M+1}(x))`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.functions.iter().map(|f| f.eval(x)).collect()
    }
}

/// The benchmark set: `1-e^{-10x²}`, a bump `f₂` on `0.5 < |x| < 10`,
/// `f₃ = f₂(4·)`, and `f₄` equal to `f₃` on `x ≥ 0` and `f₂` on `x < 0`.
pub fn default_moment_set() -> MomentFunctionSet {
    let f1 = MomentFunction::gauss_complement(10.0).named("f1");
    let f2 = MomentFunction::bump(0.4).named("f2");
    let f3 = f2.dilate(4.0).named("f3");
    let f4 = MomentFunction::splice(&f3, &f2).named("f4");
    MomentFunctionSet::new(vec![f1, f2, f3, f4]).expect("benchmark set is valid")
}

/// `(f, g, g(2·), g on x>0 / g(2·) on x<0)` for a symmetric `g` vanishing near 0.
pub fn splice_moment_set(f: MomentFunction, g: &MomentFunction) -> Result<MomentFunctionSet> {
    let g2 = g.dilate(2.0).named("g(2x)");
    let f4 = MomentFunction::splice(g, &g2).named("f4");
    MomentFunctionSet::new(vec![f, g.clone(), g2, f4])
}

/// Bump vanishing on `[-1, 1]`, supported in `[-20, 20]`.
pub fn unit_gap_bump() -> MomentFunction {
    MomentFunction::bump(BUMP_INNER).named("g")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

const TAYLOR_PANEL: f64 = 1e-3;
const JUMP_REL_TOL: f64 = 1e-9;

fn jump_quad_options() -> QuadOptions {
    QuadOptions {
        rel_tol: 1e-12,
        abs_tol: 0.0,
        max_intervals: 20_000,
        initial_split: 16,
    }
}

/// `α ∫ (g(±w) - g(0) ∓ g'(0) w 1_{w≤1}) w^{-1-α} dw` (`weight = false`) or its
/// `α`-derivative (`weight = true`).
fn jump_integral(alpha: f64, side: Side, f: &MomentFunction, derivative: bool) -> Result<f64> {
    check_alpha(alpha)?;
    let s = side.sign();
    let d0 = f.derivatives(0.0);
    let (f0, f1) = if f.eta > 0.0 { (0.0, 0.0) } else { (d0[0], d0[1]) };
    let weight = |w: f64| -> f64 {
        let base = w.powf(-1.0 - alpha);
        if derivative {
            base * (1.0 - alpha * w.ln())
        } else {
            base
        }
    };
    let g = |w: f64| -> f64 {
        let comp = if w <= 1.0 { s * f1 * w } else { 0.0 };
        f.eval(s * w) - f0 - comp
    };
    let mut total = 0.0;
    let mut error = 0.0;
    let opts = jump_quad_options();

    let lower = if f.eta > 0.0 {
        f.eta.min(f.support.unwrap_or(f64::INFINITY))
    } else {
        let dl = TAYLOR_PANEL;
        // ∫_0^δ Σ_k c_k w^{k-α} with c_k = s^k f^{(k)}(0)/k!, k = 2..4
        for k in 2..=4 {
            let c = s.powi(k as i32) * d0[k] / [1.0, 1.0, 2.0, 6.0, 24.0][k];
            let p = k as f64 - alpha;
            let v = dl.powf(p) / p;
            total += if derivative {
                c * v * (1.0 / alpha - dl.ln() + 1.0 / p) * alpha
            } else {
                c * v
            };
        }
        dl
    };

    let integrand = |w: f64| g(w) * weight(w);
    match f.support {
        Some(radius) => {
            let upper = radius.max(1.0);
            if upper > lower {
                let pts = breakpoints(lower, upper, &[1.0, radius]);
                let r = integrate_points(integrand, &pts, &opts);
                total += r.value;
                error += r.error;
            }
            // beyond the support only the constant -f(0) remains
            let tail = if derivative {
                f0 * upper.powf(-alpha) * upper.ln()
            } else {
                -f0 * upper.powf(-alpha) / alpha
            };
            total += tail;
        }
        None => {
            if lower < 1.0 {
                let pts = breakpoints(lower, 1.0, &[]);
                let r = integrate_points(integrand, &pts, &opts);
                total += r.value;
                error += r.error;
            }
            let start = lower.max(1.0);
            // w = t^{-1/α} maps [start, ∞) onto (0, start^{-α}]
            let top = start.powf(-alpha);
            let mapped = |t: f64| {
                if t <= 0.0 {
                    return 0.0;
                }
                let w = t.powf(-1.0 / alpha);
                let v = g(w) / alpha;
                if derivative {
                    v * (1.0 + t.ln())
                } else {
                    v
                }
            };
            let r = integrate_points(mapped, &[0.0, top], &opts);
            total += r.value;
            error += r.error;
        }
    }
    // With `derivative` every piece above is already a term of d/dα [α ∫ g w^{-1-α}].
    let (value, error) = if derivative {
        (total, error)
    } else {
        (alpha * total, alpha * error)
    };
    if !(error <= JUMP_REL_TOL * value.abs() + 1e-300) || !value.is_finite() {
        return Err(Error::Quadrature {
            estimate: value,
            error,
        });
    }
    Ok(value)
}

/// Sorted, deduplicated panel edges on `[a, b]`: geometric refinement towards `a`
/// plus any interior `extra` points.
fn breakpoints(a: f64, b: f64, extra: &[f64]) -> Vec<f64> {
    let mut pts = vec![a, b];
    let mut p = a;
    while p > 0.0 && p * 4.0 < b {
        p *= 4.0;
        pts.push(p);
    }
    pts.extend(extra.iter().copied().filter(|x| *x > a && *x < b));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// `J^±_α f(0) = α ∫ (f(z) - f(0) - f'(0) z 1_{|z|≤1}) |z|^{-1-α} 1_{±z>0} dz`.
pub fn jump_functional(alpha: f64, side: Side, f: &MomentFunction) -> Result<f64> {
    jump_integral(alpha, side, f, false)
}

/// `∂_α J^±_α f(0)`.
pub fn jump_functional_dalpha(alpha: f64, side: Side, f: &MomentFunction) -> Result<f64> {
    jump_integral(alpha, side, f, true)
}

/// `J^±` and `∂_α J^±` of every function in a set at one index.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTable {
    pub alpha: f64,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub dplus: Vec<f64>,
    pub dminus: Vec<f64>,
}

impl JumpTable {
    pub fn new(alpha: f64, functions: &[MomentFunction]) -> Result<Self> {
        let mut t = Self {
            alpha,
            plus: Vec::new(),
            minus: Vec::new(),
            dplus: Vec::new(),
            dminus: Vec::new(),
        };
        for f in functions {
            t.plus.push(jump_functional(alpha, Side::Plus, f)?);
            t.minus.push(jump_functional(alpha, Side::Minus, f)?);
            t.dplus.push(jump_functional_dalpha(alpha, Side::Plus, f)?);
            t.dminus.push(jump_functional_dalpha(alpha, Side::Minus, f)?);
        }
        Ok(t)
    }

    /// `(r^+ J^+ + r^- J^-) f_j(0)`.
    pub fn combined(&self, j: usize, r_plus: f64, r_minus: f64) -> f64 {
        r_plus * self.plus[j] + r_minus * self.minus[j]
    }

    pub fn combined_dalpha(&self, j: usize, r_plus: f64, r_minus: f64) -> f64 {
        r_plus * self.dplus[j] + r_minus * self.dminus[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianMethod {
    Analytic,
    FiniteDifference,
}

/// Moment values with an error bound for the mass outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentValues {
    pub values: Vec<f64>,
    pub tail_bounds: Vec<f64>,
}

/// Precomputed inversion grid and tabulated moment functions for repeated
/// evaluation of `E_θ f_j(uZ̃_h)` at a fixed `(h, u)`.
#[derive(Debug, Clone)]
pub struct MomentEngine {
    grid: InversionGrid,
    tables: Vec<Vec<f64>>,
    sup_norms: Vec<f64>,
}

/// Largest tolerated `|φ|` at the top grid frequency before a grid is rebuilt.
pub const EDGE_TOLERANCE: f64 = 1e-9;

impl MomentEngine {
    pub fn new(
        reference: &ThetaParams,
        h: f64,
        u: f64,
        functions: &[MomentFunction],
        spec: &GridSpec,
    ) -> Result<Self> {
        let grid = InversionGrid::new(reference, h, u, spec)?;
        Ok(Self::with_grid(grid, functions))
    }

    pub fn with_grid(grid: InversionGrid, functions: &[MomentFunction]) -> Self {
        // Node 0 sits at -N/2·dx, which on the periodic grid is also +N/2·dx;
        // averaging both keeps the rule exactly symmetric under reflection.
        let tables = functions
            .iter()
            .map(|f| {
                let mut t: Vec<f64> = (0..grid.len()).map(|k| f.eval(grid.x(k))).collect();
                if let Some(first) = t.first_mut() {
                    *first = 0.5 * (*first + f.eval(-grid.x(0)));
                }
                t
            })
            .collect();
        Self {
            tables,
            sup_norms: functions.iter().map(|f| f.sup_norm).collect(),
            grid,
        }
    }

    /// Engine whose grid is refined by doubling until successive moment
    /// vectors differ by less than `tol` in max norm (at most `max_points`).
    pub fn converged(
        theta: &ThetaParams,
        h: f64,
        u: f64,
        functions: &[MomentFunction],
        spec: &GridSpec,
        tol: f64,
        max_points: usize,
    ) -> Result<Self> {
        let mut spec = *spec;
        let mut engine = Self::new(theta, h, u, functions, &spec)?;
        let mut prev = engine.moment_vector(theta)?;
        loop {
            let n = engine.grid.len() * 2;
            if n > max_points.max(engine.grid.len()) {
                return Ok(engine);
            }
            spec.n_points = n;
            let next = Self::new(theta, h, u, functions, &spec)?;
            let cur = next.moment_vector(theta)?;
            let diff = prev
                .iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            engine = next;
            prev = cur;
            if diff < tol {
                return Ok(engine);
            }
        }
    }

    pub fn grid(&self) -> &InversionGrid {
        &self.grid
    }

    pub fn n_functions(&self) -> usize {
        self.tables.len()
    }

    /// Whether `θ` is still resolved by this grid's frequency range.
    pub fn resolves(&self, theta: &ThetaParams) -> bool {
        self.grid.edge_modulus(theta) < EDGE_TOLERANCE
    }

    fn check_resolution(&self, theta: &ThetaParams) -> Result<()> {
        let edge = self.grid.edge_modulus(theta);
        if !(edge < EDGE_TOLERANCE) {
            return Err(Error::CutoffNotFound {
                limit: self.grid.max_frequency(),
                threshold: EDGE_TOLERANCE,
            });
        }
        Ok(())
    }

    fn integrate(&self, density: &[f64]) -> Vec<f64> {
        let dx = self.grid.dx();
        self.tables
            .iter()
            .map(|t| t.iter().zip(density).map(|(f, p)| f * p).sum::<f64>() * dx)
            .collect()
    }

    pub fn moments(&self, theta: &ThetaParams) -> Result<MomentValues> {
        self.check_resolution(theta)?;
        let density = self.grid.density(theta)?;
        Ok(MomentValues {
            values: self.integrate(&density.values),
            tail_bounds: self
                .sup_norms
                .iter()
                .map(|s| s * density.tail_mass)
                .collect(),
        })
    }

    pub fn moment_vector(&self, theta: &ThetaParams) -> Result<Vec<f64>> {
        Ok(self.moments(theta)?.values)
    }

    /// `D_θ E_θ f_j(uZ̃_h)`, rows indexed by function, columns by coordinate.
    pub fn jacobian(&self, theta: &ThetaParams, method: JacobianMethod) -> Result<DMatrix<f64>> {
        let jac = match method {
            JacobianMethod::Analytic => {
                self.check_resolution(theta)?;
                let (_, derivs) = self.grid.density_with_gradient(theta)?;
                let cols: Vec<Vec<f64>> = derivs.iter().map(|d| self.integrate(d)).collect();
                DMatrix::from_fn(self.n_functions(), theta.dim(), |r, c| cols[c][r])
            }
            JacobianMethod::FiniteDifference => self.fd_jacobian(theta)?,
        };
        for r in 0..jac.nrows() {
            for c in 0..jac.ncols() {
                if !jac[(r, c)].is_finite() {
                    return Err(Error::NonFiniteJacobian { row: r, col: c });
                }
            }
        }
        Ok(jac)
    }

    fn fd_jacobian(&self, theta: &ThetaParams) -> Result<DMatrix<f64>> {
        let base = theta.to_vec();
        let mut jac = DMatrix::zeros(self.n_functions(), base.len());
        let mut center: Option<Vec<f64>> = None;
        for j in 0..base.len() {
            let step = FD_REL_STEP * base[j].abs().max(FD_FLOOR);
            let mut up = base.clone();
            let mut dn = base.clone();
            up[j] += step;
            dn[j] -= step;
            let up_ok = fd_admissible(&up);
            let dn_ok = fd_admissible(&dn);
            let column: Vec<f64> = match (up_ok, dn_ok) {
                (true, true) => {
                    let a = self.moment_vector(&ThetaParams::from_slice_unchecked(&up))?;
                    let b = self.moment_vector(&ThetaParams::from_slice_unchecked(&dn))?;
                    a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * step)).collect()
                }
                (true, false) | (false, true) => {
                    let c = match &center {
                        Some(c) => c.clone(),
                        None => {
                            let c = self.moment_vector(theta)?;
                            center = Some(c.clone());
                            c
                        }
                    };
                    let (other, sign) = if up_ok { (&up, 1.0) } else { (&dn, -1.0) };
                    let a = self.moment_vector(&ThetaParams::from_slice_unchecked(other))?;
                    a.iter().zip(&c).map(|(a, c)| sign * (a - c) / step).collect()
                }
                (false, false) => {
                    return Err(invalid(
                        "theta",
                        format!("no admissible finite-difference step for coordinate {j}"),
                    ))
                }
            };
            for (r, v) in column.into_iter().enumerate() {
                jac[(r, j)] = v;
            }
        }
        Ok(jac)
    }
}

/// Relative finite-difference step per coordinate.
pub const FD_REL_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-3;
/// Finite differences never straddle α = 1 closer than this.
const FD_ALPHA_ONE_MARGIN: f64 = 1e-6;

fn fd_admissible(v: &[f64]) -> bool {
    match ThetaParams::from_slice(v) {
        Ok(t) => t
            .components
            .iter()
            .all(|c| (c.alpha - 1.0).abs() > FD_ALPHA_ONE_MARGIN),
        Err(_) => false,
    }
}

/// `E_θ f(uZ̃_h)` by trapezoidal quadrature on an FFT density grid.
pub fn expected_moment(theta: &ThetaParams, h: f64, u: f64, f: &MomentFunction, spec: &GridSpec) -> Result<f64> {
    let engine = MomentEngine::new(theta, h, u, std::slice::from_ref(f), spec)?;
    Ok(engine.moment_vector(theta)?[0])
}

/// Jacobian of the model-implied moment vector of `fset` in `θ`.
pub fn moment_jacobian(
    theta: &ThetaParams,
    h: f64,
    u: f64,
    fset: &MomentFunctionSet,
    method: JacobianMethod,
    spec: &GridSpec,
) -> Result<DMatrix<f64>> {
    MomentEngine::new(theta, h, u, &fset.functions, spec)?.jacobian(theta, method)
}

/// Which leading-order small-time law to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmallTimeCase {
    /// `f` vanishes near 0: `h u^{α_1} (r_1^+ J^+ + r_1^- J^-) f(0)`.
    Jump,
    /// `f(0) = f'(0) = 0 ≠ f''(0)`: `h u² σ² f''(0)/2`.
    Diffusive,
    /// `f`, `f'`, `f''`, `f'''` vanish at 0: `h² u⁴ σ⁴ f''''(0)/8`.
    Quartic,
}

/// Leading-order prediction of `E_θ f(uZ̃_h)` as `h → 0`.
pub fn smalltime_expansion(theta: &ThetaParams, h: f64, u: f64, f: &MomentFunction, case: SmallTimeCase) -> Result<f64> {
    theta.validate()?;
    let d = f.derivatives(0.0);
    let scale = f.sup_norm.max(1.0);
    let small = |v: f64| v.abs() <= 1e-12 * scale;
    match case {
        SmallTimeCase::Jump => {
            if !(f.eta > 0.0) {
                return Err(Error::Hypothesis("f must vanish on a neighbourhood of 0".into()));
            }
            let Some(c) = theta.components.first() else {
                return Err(Error::Hypothesis("theta has no jump component".into()));
            };
            let jp = jump_functional(c.alpha, Side::Plus, f)?;
            let jm = jump_functional(c.alpha, Side::Minus, f)?;
            Ok(h * u.powf(c.alpha) * (c.r_plus * jp + c.r_minus * jm))
        }
        SmallTimeCase::Diffusive => {
            if !(small(d[0]) && small(d[1])) || small(d[2]) {
                return Err(Error::Hypothesis("requires f(0) = f'(0) = 0 != f''(0)".into()));
            }
            Ok(h * u * u * theta.sigma_sq * d[2] / 2.0)
        }
        SmallTimeCase::Quartic => {
            if !(small(d[0]) && small(d[1]) && small(d[2]) && small(d[3])) || small(d[4]) {
                return Err(Error::Hypothesis(
                    "requires f and its first three derivatives to vanish at 0, f''''(0) != 0".into(),
                ));
            }
            let s2 = theta.sigma_sq;
            Ok(h * h * u.powi(4) * s2 * s2 * d[4] / 8.0)
        }
    }
}

/// Scaling `1/√(h |log h|)`.
pub fn practical_scaling(h: f64) -> f64 {
    1.0 / (h * h.ln().abs()).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasConfig {
    /// Simulated increments per step size.
    pub draws: usize,
    pub seed: u64,
    pub grid: GridSpec,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            draws: 200_000,
            seed: 1,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasRow {
    pub h: f64,
    pub u: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub model_moment: f64,
    pub bias: f64,
    /// `|bias|` lies within the 4-SE noise band and carries no slope information.
    pub censored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Least-squares slope of `log|bias|` on `log h` over uncensored rows.
    pub slope: Option<f64>,
    /// Slope in `h` of `(h u^ρ + h² u^{max(2, α+1)}) (1 + log u)` over the schedule.
    pub bound_slope: f64,
}

impl BiasReport {
    /// Half-width of the noise band per row (4 standard errors).
    pub fn noise_band(&self) -> Vec<f64> {
        self.rows.iter().map(|r| 4.0 * r.mc_se).collect()
    }
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Monte Carlo estimate of `|E f(uX_h) - E_θ f(uZ̃_h)|` along a schedule of steps,
/// with `u = 1/√(h|log h|)`.
pub fn bias_decay_diagnostic(
    model: &SimModelSpec,
    theta: &ThetaParams,
    f: &MomentFunction,
    h_schedule: &[f64],
    config: &BiasConfig,
) -> Result<BiasReport> {
    if config.draws < 2 {
        return Err(invalid("draws", "need at least two draws"));
    }
    let mut rows = Vec::with_capacity(h_schedule.len());
    for (i, &h) in h_schedule.iter().enumerate() {
        let u = practical_scaling(h);
        let batch = simulate_increments(model, config.draws, h, sub_seed(config.seed, 7, i as u64))?;
        let n = batch.len() as f64;
        let (mut s, mut s2) = (0.0, 0.0);
        for x in &batch.values {
            let v = f.eval(u * x);
            s += v;
            s2 += v * v;
        }
        let mean = s / n;
        let se = ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        let model_moment = expected_moment(theta, h, u, f, &config.grid)?;
        let bias = mean - model_moment;
        rows.push(BiasRow {
            h,
            u,
            mc_mean: mean,
            mc_se: se,
            model_moment,
            bias,
            censored: bias.abs() <= 4.0 * se,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| !r.censored && r.bias != 0.0)
        .map(|r| (r.h.ln(), r.bias.abs().ln()))
        .unzip();
    let rho = model.nuisance.filter(|n| n.scale > 0.0).map(|n| n.alpha);
    let alpha = theta.components.first().map_or(1.0, |c| c.alpha);
    let bound = |h: f64| {
        let u = practical_scaling(h);
        let first = rho.map_or(0.0, |r| h * u.powf(r));
        (first + h * h * u.powf(2f64.max(alpha + 1.0))) * (1.0 + u.ln())
    };
    let bx: Vec<f64> = h_schedule.iter().map(|h| h.ln()).collect();
    let by: Vec<f64> = h_schedule.iter().map(|&h| bound(h).ln()).collect();
    Ok(BiasReport {
        rows,
        slope: ls_slope(&xs, &ys),
        bound_slope: ls_slope(&bx, &by).unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::function::gamma::gamma;

    fn section4() -> ThetaParams {
        ThetaParams::stable_plus_brownian(1.0, 1.3, -1.0 / 3.0).unwrap()
    }

    #[test]
    fn jet_matches_known_derivatives() {
        // exp(sin-free) check: d^k/dx^k exp(2x) = 2^k exp(2x)
        let x = 0.3;
        let j = (Jet::variable(x) * 2.0).exp();
        for k in 0..5 {
            assert_relative_eq!(j.derivative(k), 2f64.powi(k as i32) * (2.0 * x).exp(), max_relative = 1e-13);
        }
        // 1/(1+x): k-th derivative (-1)^k k! / (1+x)^{k+1}
        let r = (Jet::variable(x) + 1.0).recip();
        let fact = [1.0, 1.0, 2.0, 6.0, 24.0];
        for k in 0..5 {
            let exact = (-1f64).powi(k as i32) * fact[k] / (1.0 + x).powi(k as i32 + 1);
            assert_relative_eq!(r.derivative(k), exact, max_relative = 1e-13);
        }
    }

    #[test]
    fn default_set_basics() {
        let s = default_moment_set();
        assert_eq!(s.len(), 4);
        assert_relative_eq!(s.functions[0].d2(0.0), 20.0, epsilon = 1e-12);
        assert_eq!(s.eta, 0.125);
        let f2 = &s.functions[1];
        assert_eq!(f2.eval(0.1), 0.0);
        assert_eq!(f2.eval(-0.1), 0.0);
        assert!(f2.eval(8.5) > 0.0);
        for f in &s.functions[1..] {
            for k in 0..=100 {
                let x = 0.125 * k as f64 / 100.0;
                assert_eq!(f.eval(x), 0.0);
                assert_eq!(f.eval(-x), 0.0);
            }
        }
    }

    #[test]
    fn splice_matches_pieces() {
        let s = default_moment_set();
        let (f2, f3, f4) = (&s.functions[1], &s.functions[2], &s.functions[3]);
        for k in -400..=400 {
            let x = k as f64 * 0.025;
            let expect = if x >= 0.0 { f3.eval(x) } else { f2.eval(x) };
            assert_eq!(f4.eval(x), expect);
        }
        assert!(!f4.symmetric);
        assert!(f2.symmetric && f3.symmetric);
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let f = MomentFunction::bump(0.4);
        for x in [6.0, 7.7, 8.5, 9.3] {
            let d = f.derivatives(x);
            let e = 1e-4;
            let fd = (f.eval(x + e) - f.eval(x - e)) / (2.0 * e);
            assert_relative_eq!(d[1], fd, max_relative = 1e-5);
            let fd2 = (f.d1(x + e) - f.d1(x - e)) / (2.0 * e);
            assert_relative_eq!(d[2], fd2, max_relative = 1e-5);
        }
    }

    #[test]
    fn gauss_complement_jump_functional_closed_form() {
        let f = MomentFunction::gauss_complement(10.0);
        for alpha in [0.4, 0.8, 1.3, 1.7] {
            let exact = 10f64.powf(alpha / 2.0) * gamma(1.0 - alpha / 2.0);
            for side in [Side::Plus, Side::Minus] {
                let v = jump_functional(alpha, side, &f).unwrap();
                assert_relative_eq!(v, exact, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn jump_functional_of_f2_matches_riemann_sum() {
        let f2 = &default_moment_set().functions[1];
        let alpha: f64 = 1.3;
        let (a, b, n) = (0.5, 10.0, 1_000_000);
        let dw = (b - a) / n as f64;
        let riemann: f64 = (0..n)
            .map(|i| {
                let w = a + (i as f64 + 0.5) * dw;
                f2.eval(w) * w.powf(-1.0 - alpha)
            })
            .sum::<f64>()
            * dw
            * alpha;
        let v = jump_functional(alpha, Side::Plus, f2).unwrap();
        assert!(v > 0.0);
        assert_relative_eq!(v, riemann, max_relative = 1e-6);
    }

    #[test]
    fn dilation_law() {
        let g = &default_moment_set().functions[1];
        for alpha in [0.7, 1.3, 1.7] {
            let a = jump_functional(alpha, Side::Plus, g).unwrap();
            let b = jump_functional_dalpha(alpha, Side::Plus, g).unwrap();
            let g2 = g.dilate(2.0);
            let a2 = jump_functional(alpha, Side::Plus, &g2).unwrap();
            let b2 = jump_functional_dalpha(alpha, Side::Plus, &g2).unwrap();
            let c = 2f64.powf(alpha);
            assert_relative_eq!(a2, c * a, max_relative = 1e-9);
            assert_relative_eq!(b2, c * (b + 2f64.ln() * a), max_relative = 1e-8);
        }
    }

    #[test]
    fn dalpha_matches_differences() {
        let set = default_moment_set();
        let mut fs: Vec<MomentFunction> = set.functions.clone();
        // a function that does not vanish at the origin exercises the compensated path
        fs.push(MomentFunction::linear_combination(1.0, &MomentFunction::gauss_complement(3.0), 0.5, &MomentFunction::bump(1.0).reflect()));
        for f in &fs {
            for alpha in [0.6, 1.3, 1.7] {
                for side in [Side::Plus, Side::Minus] {
                    let e = 1e-5;
                    let fd = (jump_functional(alpha + e, side, f).unwrap()
                        - jump_functional(alpha - e, side, f).unwrap())
                        / (2.0 * e);
                    let v = jump_functional_dalpha(alpha, side, f).unwrap();
                    assert_relative_eq!(v, fd, max_relative = 1e-4);
                }
            }
        }
    }

    #[test]
    fn jump_functional_with_nonzero_value_at_origin() {
        // f ≡ 1 - bump: compensated integrand reduces to -∫ bump, since constants cancel.
        let b = MomentFunction::bump(1.0);
        let one_minus = MomentFunction::linear_combination(1.0, &MomentFunction::gauss_complement(1e6), -1.0, &b);
        let alpha = 1.3;
        let v = jump_functional(alpha, Side::Plus, &one_minus).unwrap();
        let w = jump_functional(alpha, Side::Plus, &b).unwrap();
        let g = jump_functional(alpha, Side::Plus, &MomentFunction::gauss_complement(1e6)).unwrap();
        assert_relative_eq!(v, g - w, max_relative = 1e-8);
    }

    #[test]
    fn dalpha_is_linear() {
        let f = &default_moment_set().functions[3];
        let a = jump_functional_dalpha(1.3, Side::Minus, f).unwrap();
        let b = jump_functional_dalpha(1.3, Side::Minus, &f.scaled(3.5)).unwrap();
        assert_relative_eq!(b, 3.5 * a, max_relative = 1e-12);
    }

    #[test]
    fn negative_axis_function_has_zero_plus_functional() {
        let f = MomentFunction::splice(&MomentFunction::zero(), &MomentFunction::bump(0.4));
        assert_eq!(jump_functional(1.3, Side::Plus, &f).unwrap(), 0.0);
        assert!(jump_functional(1.3, Side::Minus, &f).unwrap() > 0.0);
    }

    #[test]
    fn zero_function_has_zero_moment() {
        let v = expected_moment(&section4(), 1e-4, 10.0, &MomentFunction::zero(), &GridSpec::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gaussian_closed_form_moment() {
        let f1 = MomentFunction::gauss_complement(10.0);
        let v = expected_moment(&ThetaParams::gaussian(1.0), 1e-4, 10.0, &f1, &GridSpec::default()).unwrap();
        let exact = 1.0 - 1.2f64.powf(-0.5);
        assert!((v - exact).abs() < 1e-6, "{v} vs {exact}");
    }

    #[test]
    fn analytic_and_fd_jacobians_agree() {
        let theta = section4();
        let h = 1.0 / 23_400.0;
        let u = practical_scaling(h);
        let set = default_moment_set();
        let e = MomentEngine::new(&theta, h, u, &set.functions, &GridSpec::default()).unwrap();
        let a = e.jacobian(&theta, JacobianMethod::Analytic).unwrap();
        let f = e.jacobian(&theta, JacobianMethod::FiniteDifference).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let rel = (a[(r, c)] - f[(r, c)]).abs() / a[(r, c)].abs();
                assert!(rel < 1e-3, "({r},{c}): {} vs {}", a[(r, c)], f[(r, c)]);
            }
        }
    }

    #[test]
    fn smalltime_hypothesis_checks() {
        let theta = section4();
        let set = default_moment_set();
        let f1 = &set.functions[0];
        let v = smalltime_expansion(&theta, 1e-4, 10.0, f1, SmallTimeCase::Diffusive).unwrap();
        assert_relative_eq!(v, 1e-4 * 100.0 * 10.0, max_relative = 1e-12);
        assert!(matches!(
            smalltime_expansion(&theta, 1e-4, 10.0, f1, SmallTimeCase::Jump),
            Err(Error::Hypothesis(_))
        ));
        let sq = MomentFunction::product(f1, f1);
        let q = smalltime_expansion(&theta, 1e-4, 10.0, &sq, SmallTimeCase::Quartic).unwrap();
        assert_relative_eq!(q, 1e-8 * 1e4 * 300.0, max_relative = 1e-10);
        assert!(smalltime_expansion(&theta, 1e-4, 10.0, &sq, SmallTimeCase::Diffusive).is_err());
    }
}
