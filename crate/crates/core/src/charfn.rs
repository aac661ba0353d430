//! Lévy symbol, characteristic function and FFT density grids for the
//! approximating process with triplet `(0, σ², ν̃)` and truncation `z·1_{|z|≤1}`.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::quad::{integrate_points, QuadOptions};
pub use crate::theta::{JumpComponent, ThetaParams};
use crate::theta::{check_alpha, skew_norm, skew_norm_dalpha, stable_norm, stable_norm_dalpha};

/// Modulus of the characteristic function at the automatic cutoff.
pub const CUTOFF_THRESHOLD: f64 = 1e-12;
/// Most negative density value that is clipped rather than rejected.
pub const RINGING_TOLERANCE: f64 = 1e-8;
const CUTOFF_LIMIT: f64 = (1u64 << 30) as f64;

/// Per-layer constants of the exponent, `ψ(μ) = Σ (a - i b sgn μ)|μ|^α - i c μ`.
#[derive(Debug, Clone, Copy)]
struct LayerCoefficients {
    alpha: f64,
    a: f64,
    b: f64,
    c: f64,
}

impl LayerCoefficients {
    fn new(comp: &JumpComponent) -> Self {
        let d = comp.r_plus - comp.r_minus;
        Self {
            alpha: comp.alpha,
            a: stable_norm(comp.alpha) * comp.total(),
            b: skew_norm(comp.alpha) * d,
            c: comp.truncation_drift(),
        }
    }
}

fn coefficients(theta: &ThetaParams) -> Vec<LayerCoefficients> {
    theta.components.iter().map(LayerCoefficients::new).collect()
}

/// `ψ(μ)` for `μ > 0` given `ln μ`; the value at `-μ` is the conjugate.
#[inline]
fn symbol_positive(sigma_sq: f64, layers: &[LayerCoefficients], mu: f64, ln_mu: f64) -> Complex64 {
    let mut re = 0.5 * sigma_sq * mu * mu;
    let mut im = 0.0;
    for l in layers {
        let p = (l.alpha * ln_mu).exp();
        re += l.a * p;
        im -= l.b * p + l.c * mu;
    }
    Complex64::new(re, im)
}

pub(crate) fn symbol_unchecked(theta: &ThetaParams, lambda: f64) -> Complex64 {
    if lambda == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let layers = coefficients(theta);
    let mu = lambda.abs();
    let v = symbol_positive(theta.sigma_sq, &layers, mu, mu.ln());
    if lambda > 0.0 {
        v
    } else {
        v.conj()
    }
}

/// Lévy symbol `ψ_θ(λ)`, with `E e^{iλ Z̃_t} = exp(-t ψ_θ(λ))`.
pub fn levy_symbol(theta: &ThetaParams, lambda: f64) -> Result<Complex64> {
    theta.validate()?;
    Ok(symbol_unchecked(theta, lambda))
}

/// Characteristic function of `u·Z̃_h` at `lambda`.
pub fn char_fn(theta: &ThetaParams, h: f64, u: f64, lambda: f64) -> Result<Complex64> {
    theta.validate()?;
    check_step_and_scale(h, u)?;
    Ok((-h * symbol_unchecked(theta, u * lambda)).exp())
}

fn check_step_and_scale(h: f64, u: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("h", format!("step {h} must be positive")));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(invalid("u", format!("scaling {u} must be positive")));
    }
    Ok(())
}

/// Gradient of `ψ_θ(λ)` in vector order `(σ², α_1, r_1^+, r_1^-, …)`.
pub fn symbol_gradient(theta: &ThetaParams, lambda: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); theta.dim()];
    if lambda == 0.0 {
        return out;
    }
    let mu = lambda.abs();
    let grads = GradientCoefficients::new(theta);
    grads.fill(mu, mu.ln(), &mut out);
    if lambda < 0.0 {
        for g in &mut out {
            *g = g.conj();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct GradientCoefficients {
    layers: Vec<LayerCoefficients>,
    k: Vec<f64>,
    s: Vec<f64>,
    dk: Vec<f64>,
    ds: Vec<f64>,
    dc: Vec<f64>,
    weights: Vec<(f64, f64)>,
}

impl GradientCoefficients {
    fn new(theta: &ThetaParams) -> Self {
        let comps = &theta.components;
        Self {
            layers: coefficients(theta),
            k: comps.iter().map(|c| stable_norm(c.alpha)).collect(),
            s: comps.iter().map(|c| skew_norm(c.alpha)).collect(),
            dk: comps.iter().map(|c| stable_norm_dalpha(c.alpha)).collect(),
            ds: comps.iter().map(|c| skew_norm_dalpha(c.alpha)).collect(),
            dc: comps
                .iter()
                .map(|c| -(c.r_plus - c.r_minus) / ((c.alpha - 1.0) * (c.alpha - 1.0)))
                .collect(),
            weights: comps.iter().map(|c| (c.total(), c.r_plus - c.r_minus)).collect(),
        }
    }

    /// Gradient at `μ > 0`.
    fn fill(&self, mu: f64, ln_mu: f64, out: &mut [Complex64]) {
        out[0] = Complex64::new(0.5 * mu * mu, 0.0);
        for (m, l) in self.layers.iter().enumerate() {
            let p = (l.alpha * ln_mu).exp();
            let ratio = l.alpha / (l.alpha - 1.0);
            let (total, diff) = self.weights[m];
            let base = 3 * m + 1;
            out[base] = Complex64::new(
                (self.dk[m] * total + l.a * ln_mu) * p,
                -(self.ds[m] * diff + l.b * ln_mu) * p - self.dc[m] * mu,
            );
            out[base + 1] = Complex64::new(self.k[m] * p, -self.s[m] * p - ratio * mu);
            out[base + 2] = Complex64::new(self.k[m] * p, self.s[m] * p + ratio * mu);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    /// Smallest power of two with `|φ(Λ)| < 1e-12`.
    Auto,
    Explicit(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Minimum number of grid points; raised to honour `max_dx` and `min_half_width`.
    pub n_points: usize,
    pub cutoff: Cutoff,
    /// Largest admissible spacing in the `x` domain.
    pub max_dx: f64,
    /// Smallest admissible half-width of the `x` grid.
    pub min_half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_points: 1 << 14,
            cutoff: Cutoff::Auto,
            max_dx: 1.0 / 64.0,
            min_half_width: 256.0,
        }
    }
}

impl GridSpec {
    pub fn with_points(n_points: usize) -> Self {
        Self {
            n_points,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 256 || !self.n_points.is_power_of_two() {
            return Err(invalid(
                "n_points",
                format!("{} must be a power of two and at least 256", self.n_points),
            ));
        }
        if !(self.max_dx > 0.0) || !(self.min_half_width > 0.0) {
            return Err(invalid("grid", "max_dx and min_half_width must be positive"));
        }
        if let Cutoff::Explicit(c) = self.cutoff {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("cutoff", format!("{c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Density of `u·Z̃_h` sampled at `x0 + k·dx`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x0: f64,
    pub dx: f64,
    pub values: Vec<f64>,
    /// Upper bound on the probability mass outside the grid.
    pub tail_mass: f64,
}

impl DensityGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, k: usize) -> f64 {
        self.x0 + k as f64 * self.dx
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx
    }

    /// Trapezoidal integral of `f` against the density.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, p)| f(self.x(k)) * p)
            .sum::<f64>()
            * self.dx
    }

    /// Distribution function at the grid nodes (cell-centred cumulative sums).
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.values
            .iter()
            .map(|p| {
                let lo = acc;
                acc += p * self.dx;
                0.5 * (lo + acc)
            })
            .collect()
    }
}

/// Geometry and FFT plan for inverting `exp(-h ψ_θ(uλ))` at a fixed `(h, u)`.
///
/// The geometry is chosen once from a reference `θ`, so densities at nearby
/// parameters share nodes and moment vectors are smooth in `θ`.
#[derive(Clone)]
pub struct InversionGrid {
    n: usize,
    dx: f64,
    dlambda: f64,
    h: f64,
    u: f64,
    /// `ln(u·m·dλ)` for `m = 1..=n/2`.
    ln_mu: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for InversionGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InversionGrid")
            .field("n", &self.n)
            .field("dx", &self.dx)
            .field("h", &self.h)
            .field("u", &self.u)
            .finish()
    }
}

/// Smallest doubling of 1 at which `|exp(-h ψ(uΛ))| < 1e-12`.
pub fn auto_cutoff(theta: &ThetaParams, h: f64, u: f64) -> Result<f64> {
    let mut lambda = 1.0;
    loop {
        let modulus = (-h * symbol_unchecked(theta, u * lambda).re).exp();
        if modulus < CUTOFF_THRESHOLD {
            return Ok(lambda);
        }
        if lambda >= CUTOFF_LIMIT {
            return Err(Error::CutoffNotFound {
                limit: lambda,
                threshold: CUTOFF_THRESHOLD,
            });
        }
        lambda *= 2.0;
    }
}

impl InversionGrid {
    pub fn new(theta: &ThetaParams, h: f64, u: f64, spec: &GridSpec) -> Result<Self> {
        theta.validate()?;
        check_step_and_scale(h, u)?;
        spec.validate()?;
        let cutoff = match spec.cutoff {
            Cutoff::Auto => auto_cutoff(theta, h, u)?,
            Cutoff::Explicit(c) => c,
        };
        let dx = (PI / cutoff).min(spec.max_dx);
        let needed = (2.0 * spec.min_half_width / dx).ceil() as usize;
        let n = spec.n_points.max(needed.next_power_of_two());
        Ok(Self::with_geometry(n, dx, h, u))
    }

    pub fn with_geometry(n: usize, dx: f64, h: f64, u: f64) -> Self {
        let dlambda = 2.0 * PI / (n as f64 * dx);
        let ln_mu = (1..=n / 2).map(|m| (u * m as f64 * dlambda).ln()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Self {
            n,
            dx,
            dlambda,
            h,
            u,
            ln_mu,
            fft,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn x0(&self) -> f64 {
        -(self.n as f64) * self.dx / 2.0
    }

    pub fn x(&self, k: usize) -> f64 {
        self.x0() + k as f64 * self.dx
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn half_width(&self) -> f64 {
        self.n as f64 * self.dx / 2.0
    }

    /// Largest frequency on the grid, in the scaled variable.
    pub fn max_frequency(&self) -> f64 {
        (self.n / 2) as f64 * self.dlambda
    }

    /// `|φ|` at the highest grid frequency; large values mean the geometry
    /// no longer resolves this `θ`.
    pub fn edge_modulus(&self, theta: &ThetaParams) -> f64 {
        let lambda = self.max_frequency();
        (-self.h * symbol_unchecked(theta, self.u * lambda).re).exp()
    }

    /// Upper bound on `P(|u Z̃_h| > half_width)`.
    pub fn tail_mass(&self, theta: &ThetaParams) -> f64 {
        let level = self.half_width() / self.u;
        let jumps: f64 = theta
            .components
            .iter()
            .map(|c| self.h * c.total() * level.powf(-c.alpha))
            .sum();
        let gauss = if theta.sigma_sq > 0.0 {
            let sd = (theta.sigma_sq * self.h).sqrt();
            statrs::function::erf::erfc(level / (sd * std::f64::consts::SQRT_2))
        } else {
            0.0
        };
        (jumps + gauss).min(1.0)
    }

    /// Characteristic function at the non-negative grid frequencies `m·dλ`, `m = 0..=n/2`.
    fn half_spectrum(&self, theta: &ThetaParams) -> Vec<Complex64> {
        let layers = coefficients(theta);
        let mut out = Vec::with_capacity(self.n / 2 + 1);
        out.push(Complex64::new(1.0, 0.0));
        for (m, &ln_mu) in self.ln_mu.iter().enumerate() {
            let mu = self.u * (m + 1) as f64 * self.dlambda;
            let psi = symbol_positive(theta.sigma_sq, &layers, mu, ln_mu);
            out.push((-self.h * psi).exp());
        }
        out
    }

    /// Inverse transform of a Hermitian spectrum given on `λ ≥ 0`.
    fn invert(&self, half: &[Complex64]) -> Vec<f64> {
        let n = self.n;
        let mid = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (m, v) in half.iter().enumerate() {
            let s = if (mid + m) % 2 == 0 { 1.0 } else { -1.0 };
            if m < mid {
                buf[mid + m] = v * s;
            }
            // index mid - m carries λ = -m dλ and the same parity as mid + m
            buf[mid - m] = v.conj() * s;
        }
        self.fft.process(&mut buf);
        let scale = self.dlambda / (2.0 * PI);
        buf.iter()
            .enumerate()
            .map(|(k, v)| if k % 2 == 0 { v.re * scale } else { -v.re * scale })
            .collect()
    }

    fn clip(values: &mut [f64]) -> Result<()> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -RINGING_TOLERANCE {
            return Err(Error::Ringing { min });
        }
        for v in values.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(())
    }

    pub fn density(&self, theta: &ThetaParams) -> Result<DensityGrid> {
        let mut values = self.invert(&self.half_spectrum(theta));
        Self::clip(&mut values)?;
        Ok(DensityGrid {
            x0: self.x0(),
            dx: self.dx,
            values,
            tail_mass: self.tail_mass(theta),
        })
    }

    /// Density together with its partial derivatives in each coordinate of `θ`,
    /// obtained by differentiating the exponent inside the inversion integral.
    pub fn density_with_gradient(&self, theta: &ThetaParams) -> Result<(DensityGrid, Vec<Vec<f64>>)> {
        let density = self.density(theta)?;
        let half = self.half_spectrum(theta);
        let grads = GradientCoefficients::new(theta);
        let dim = theta.dim();
        let mut spectra = vec![vec![Complex64::new(0.0, 0.0); half.len()]; dim];
        let mut g = vec![Complex64::new(0.0, 0.0); dim];
        for (m, &ln_mu) in self.ln_mu.iter().enumerate() {
            let mu = self.u * (m + 1) as f64 * self.dlambda;
            grads.fill(mu, ln_mu, &mut g);
            for j in 0..dim {
                spectra[j][m + 1] = -self.h * g[j] * half[m + 1];
            }
        }
        let derivs = spectra.iter().map(|s| self.invert(s)).collect();
        Ok((density, derivs))
    }
}

/// Density grid of `u·Z̃_h`.
pub fn density_grid(theta: &ThetaParams, h: f64, u: f64, spec: &GridSpec) -> Result<DensityGrid> {
    InversionGrid::new(theta, h, u, spec)?.density(theta)
}

/// Density of the standardized stable law with exponent
/// `-|λ|^α (1 - iβ tan(πα/2) sgn λ)` at each point of `x_grid`.
pub fn stable_density(alpha: f64, beta: f64, x_grid: &[f64]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if !(-1.0..=1.0).contains(&beta) {
        return Err(invalid("beta", format!("{beta} is outside [-1, 1]")));
    }
    let skew = beta * (PI * alpha / 2.0).tan();
    // Integrate in s = λ^α, where e^{-s} sets the decay; s ≤ 45 loses < 1e-19.
    let s_max: f64 = 45.0;
    let opts = QuadOptions {
        rel_tol: 1e-12,
        abs_tol: 1e-16,
        max_intervals: 20_000,
        initial_split: 1,
    };
    x_grid
        .iter()
        .map(|&x| {
            let r = if alpha < 1.0 {
                let p = 1.0 / alpha;
                let f = |s: f64| {
                    if s == 0.0 {
                        return 0.0;
                    }
                    let lam = s.powf(p);
                    (-s).exp() * (skew * s - lam * x).cos() * p * lam / s
                };
                let lam_max = s_max.powf(p);
                let pieces = ((lam_max * x.abs() / PI).ceil() as usize).clamp(8, 4000);
                let pts = panel_points(0.0, s_max, pieces);
                integrate_points(f, &pts, &opts)
            } else {
                let lam_max = s_max.powf(1.0 / alpha);
                let f = |l: f64| {
                    let s = l.powf(alpha);
                    (-s).exp() * (skew * s - l * x).cos()
                };
                let pieces = ((lam_max * x.abs() / PI).ceil() as usize).clamp(8, 4000);
                let pts = panel_points(0.0, lam_max, pieces);
                integrate_points(f, &pts, &opts)
            };
            if !r.converged {
                return Err(Error::Quadrature {
                    estimate: r.value,
                    error: r.error,
                });
            }
            Ok((r.value / PI).max(0.0))
        })
        .collect()
}

fn panel_points(a: f64, b: f64, pieces: usize) -> Vec<f64> {
    (0..=pieces)
        .map(|k| a + (b - a) * k as f64 / pieces as f64)
        .collect()
}
