//! Fisher information of the `(r, α)` block for Brownian motion plus one
//! symmetric stable layer, and its diagonally rescaled limit.
//!
//! Work happens in the standardized variable `x / √(σ²h)`, where the density
//! is `S(x) = ∫ φ(x - w y) φ_α(y) dy` with `φ_α` the symmetric stable density
//! whose Lévy measure is `α|y|^{-1-α} dy`. All convolutions are evaluated as
//! products of characteristic functions and inverted by one FFT each.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::theta::{check_alpha, stable_norm};

/// Step of the central difference in `α` of the stable characteristic function.
pub const ALPHA_STEP: f64 = 1e-4;
/// Points where `S` falls below this are left out of the `J` integrals.
pub const DENSITY_FLOOR: f64 = 1e-30;
/// Largest tolerated relative change of a `J` integral under grid refinement.
pub const REFINEMENT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherGrid {
    pub n_points: usize,
    pub dx: f64,
}

impl Default for FisherGrid {
    fn default() -> Self {
        Self {
            n_points: 1 << 16,
            dx: 0.25,
        }
    }
}

impl FisherGrid {
    fn validate(&self) -> Result<()> {
        if self.n_points < 64 || !self.n_points.is_power_of_two() {
            return Err(invalid("n_points", "must be a power of two ≥ 64"));
        }
        if !(self.dx > 0.0 && self.dx <= 0.5) {
            return Err(invalid("dx", "must lie in (0, 0.5]"));
        }
        Ok(())
    }

    fn refined(&self) -> Self {
        Self {
            n_points: 2 * self.n_points,
            dx: self.dx / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherQuantities {
    pub w_h: f64,
    pub v_h: f64,
    pub psi_h: f64,
    pub x0: f64,
    pub dx: f64,
    pub s_h: Vec<f64>,
    pub r0_h: Vec<f64>,
    pub r1_h: Vec<f64>,
    pub j00: f64,
    pub j10: f64,
    pub j11: f64,
    /// Analytic contribution of `|x|` beyond the integration window, per `J`.
    pub tail: [f64; 3],
    /// Half-width of the integration window.
    pub window: f64,
}

impl FisherQuantities {
    pub fn x(&self, k: usize) -> f64 {
        self.x0 + k as f64 * self.dx
    }
}

fn check_inputs(sigma_sq: f64, r: f64, alpha: f64, h: f64) -> Result<()> {
    check_alpha(alpha)?;
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(invalid("sigma_sq", "must be positive"));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(invalid("r", "must be positive"));
    }
    if !(h > 0.0 && h < 1.0) {
        return Err(invalid("h", "must lie in (0, 1)"));
    }
    Ok(())
}

/// `w_h = (rh)^{1/α} / √(σ²h)`.
pub fn w_h(sigma_sq: f64, r: f64, alpha: f64, h: f64) -> f64 {
    (r * h).powf(1.0 / alpha) / (sigma_sq * h).sqrt()
}

/// `v_h = (2 + log(r/σ²)/log(1/w_h)) / (α(2-α))`.
pub fn v_h(sigma_sq: f64, r: f64, alpha: f64, h: f64) -> f64 {
    let l = -w_h(sigma_sq, r, alpha, h).ln();
    (2.0 + (r / sigma_sq).ln() / l) / (alpha * (2.0 - alpha))
}

/// `ψ_h = 2σ^α / (r α² (2-α)^{α/2}) · 1/(h^{1-α/2} log(1/h)^{α/2})`.
pub fn psi_h(sigma_sq: f64, r: f64, alpha: f64, h: f64) -> f64 {
    let sigma_a = sigma_sq.powf(alpha / 2.0);
    2.0 * sigma_a / (r * alpha * alpha * (2.0 - alpha).powf(alpha / 2.0))
        / (h.powf(1.0 - alpha / 2.0) * (1.0 / h).ln().powf(alpha / 2.0))
}

/// Characteristic function of `φ_α`: `exp(-2K(α)|μ|^α)`.
fn stable_cf(alpha: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        return 1.0;
    }
    (-2.0 * stable_norm(alpha) * mu.abs().powf(alpha)).exp()
}

/// Inverse transform of an even real spectrum given at `λ_m = m dλ`, `m = 0..=n/2`.
fn invert_even(half: &[f64], n: usize, dx: f64) -> Vec<f64> {
    let dlambda = 2.0 * PI / (n as f64 * dx);
    let mid = n / 2;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (m, &v) in half.iter().enumerate() {
        let s = if (mid + m) % 2 == 0 { v } else { -v };
        if m < mid {
            buf[mid + m] = Complex64::new(s, 0.0);
        }
        buf[mid - m] = Complex64::new(s, 0.0);
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = dlambda / (2.0 * PI);
    buf.iter()
        .enumerate()
        .map(|(k, v)| if k % 2 == 0 { v.re * scale } else { -v.re * scale })
        .collect()
}

/// `S`, `R⁰`, `R¹` and the `J` integrals on the given grid.
pub fn fisher_quantities(sigma_sq: f64, r: f64, alpha: f64, h: f64, grid: &FisherGrid) -> Result<FisherQuantities> {
    check_inputs(sigma_sq, r, alpha, h)?;
    grid.validate()?;
    let w = w_h(sigma_sq, r, alpha, h);
    let l = -w.ln();
    if !(l > 0.0) {
        return Err(invalid("h", "w_h must be below 1 (the stable part must be small)"));
    }
    let wa = w.powf(alpha);
    let n = grid.n_points;
    let dlambda = 2.0 * PI / (n as f64 * grid.dx);
    let two_k = 2.0 * stable_norm(alpha);

    let mut s_hat = Vec::with_capacity(n / 2 + 1);
    let mut r0_hat = Vec::with_capacity(n / 2 + 1);
    let mut r1_hat = Vec::with_capacity(n / 2 + 1);
    for m in 0..=n / 2 {
        let lambda = m as f64 * dlambda;
        let gauss = (-0.5 * lambda * lambda).exp();
        let mu = w * lambda;
        let phi = stable_cf(alpha, mu);
        s_hat.push(gauss * phi);
        // FT of φ_α + yφ_α' is -μ ∂_μ Φ(μ) = 2Kα|μ|^α Φ(μ)
        r0_hat.push(gauss * two_k * alpha * lambda.powf(alpha) * phi);
        let d_alpha = (stable_cf(alpha + ALPHA_STEP, mu) - stable_cf(alpha - ALPHA_STEP, mu)) / (2.0 * ALPHA_STEP);
        r1_hat.push(gauss * d_alpha / (wa * l));
    }
    let s = invert_even(&s_hat, n, grid.dx);
    let r0 = invert_even(&r0_hat, n, grid.dx);
    let r1 = invert_even(&r1_hat, n, grid.dx);

    let x0 = -(n as f64) * grid.dx / 2.0;
    let window = n as f64 * grid.dx / 4.0;
    let (mut j00, mut j10, mut j11) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let x = x0 + k as f64 * grid.dx;
        if x.abs() > window {
            continue;
        }
        if s[k] < DENSITY_FLOOR {
            // inside the window S only drops this low once the stable tail
            // itself is below the floor, and then the tail correction is meaningless
            return Err(invalid("h", format!("density below {DENSITY_FLOOR:e} at x = {x}; step too small for this grid")));
        }
        j00 += r0[k] * r0[k] / s[k];
        j10 += r1[k] * r0[k] / s[k];
        j11 += r1[k] * r1[k] / s[k];
    }
    let tail = tail_terms(alpha, w, l, window);
    Ok(FisherQuantities {
        w_h: w,
        v_h: v_h(sigma_sq, r, alpha, h),
        psi_h: psi_h(sigma_sq, r, alpha, h),
        x0,
        dx: grid.dx,
        s_h: s,
        r0_h: r0,
        r1_h: r1,
        j00: j00 * grid.dx + tail[0],
        j10: j10 * grid.dx + tail[1],
        j11: j11 * grid.dx + tail[2],
        tail,
        window,
    })
}

/// `∫_{|x|>X}` of the `J` integrands from the leading tails
/// `S ≈ α w^α |x|^{-1-α}`, `R⁰ ≈ -α²|x|^{-1-α}`, `R¹ ≈ (1 - α log(|x|/w)) |x|^{-1-α} / log(1/w)`.
fn tail_terms(alpha: f64, w: f64, l: f64, x: f64) -> [f64; 3] {
    let wa = w.powf(alpha);
    let xa = x.powf(-alpha);
    let t = (x / w).ln();
    [
        2.0 * alpha * alpha * xa / wa,
        2.0 * alpha * xa * t / (l * wa),
        2.0 * xa * (alpha * alpha * t * t + 1.0) / (alpha * alpha * l * l * wa),
    ]
}

/// [`fisher_quantities`] plus a refinement pass; fails if any `J` moves by
/// more than [`REFINEMENT_TOLERANCE`] (relative).
pub fn fisher_quantities_checked(sigma_sq: f64, r: f64, alpha: f64, h: f64, grid: &FisherGrid) -> Result<FisherQuantities> {
    let coarse = fisher_quantities(sigma_sq, r, alpha, h, grid)?;
    let fine = fisher_quantities(sigma_sq, r, alpha, h, &grid.refined())?;
    let change = [
        (coarse.j00, fine.j00),
        (coarse.j10, fine.j10),
        (coarse.j11, fine.j11),
    ]
    .iter()
    .map(|(a, b)| ((a - b) / b).abs())
    .fold(0.0, f64::max);
    if !(change <= REFINEMENT_TOLERANCE) {
        return Err(Error::Underresolved { change });
    }
    Ok(fine)
}

/// `[[I^{r,r}, I^{r,α}], [I^{r,α}, I^{α,α}]]` from the `J` integrals.
pub fn fisher_block(q: &FisherQuantities, r: f64, alpha: f64) -> [[f64; 2]; 2] {
    let w2a = q.w_h.powf(2.0 * alpha);
    let l = -q.w_h.ln();
    let v = q.v_h;
    let rr = w2a / (r * r * alpha * alpha) * q.j00;
    let aa = w2a * l * l * (q.j11 - 2.0 * v * q.j10 + v * v * q.j00);
    let ar = w2a * l / (r * alpha) * (v * q.j00 - q.j10);
    [[rr, ar], [ar, aa]]
}

fn rescale(block: [[f64; 2]; 2], alpha: f64, h: f64) -> [[f64; 2]; 2] {
    let lh = (1.0 / h).ln();
    let s = (h * lh).powf(alpha / 2.0) / h;
    [
        [s * block[0][0], s * block[0][1] / lh],
        [s * block[1][0] / lh, s * block[1][1] / (lh * lh)],
    ]
}

/// `(h log(1/h))^{α/2}/h · diag(1, 1/log(1/h)) I_h diag(1, 1/log(1/h))`.
pub fn rescaled_fisher_block(sigma_sq: f64, r: f64, alpha: f64, h: f64) -> Result<[[f64; 2]; 2]> {
    rescaled_fisher_block_with_grid(sigma_sq, r, alpha, h, &FisherGrid::default())
}

pub fn rescaled_fisher_block_with_grid(
    sigma_sq: f64,
    r: f64,
    alpha: f64,
    h: f64,
    grid: &FisherGrid,
) -> Result<[[f64; 2]; 2]> {
    let q = fisher_quantities_checked(sigma_sq, r, alpha, h, grid)?;
    Ok(rescale(fisher_block(&q, r, alpha), alpha, h))
}

/// `2r/(σ^α (2-α)^{α/2}) · [[1/r², 1/(2r)], [1/(2r), 1/4]]`.
pub fn fisher_limit(sigma_sq: f64, r: f64, alpha: f64) -> [[f64; 2]; 2] {
    let c = 2.0 * r / (sigma_sq.powf(alpha / 2.0) * (2.0 - alpha).powf(alpha / 2.0));
    [
        [c / (r * r), c / (2.0 * r)],
        [c / (2.0 * r), c / 4.0],
    ]
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherRow {
    pub h: f64,
    pub block: [[f64; 2]; 2],
    pub determinant: f64,
    /// `det / (block₁₁ block₂₂)`.
    pub normalized_determinant: f64,
    /// Largest entrywise relative distance to the limit matrix.
    pub max_relative_gap: f64,
}

/// Rescaled blocks along a decreasing list of step sizes.
pub fn fisher_trajectory(sigma_sq: f64, r: f64, alpha: f64, steps: &[f64], grid: &FisherGrid) -> Result<Vec<FisherRow>> {
    let limit = fisher_limit(sigma_sq, r, alpha);
    steps
        .iter()
        .map(|&h| {
            let block = rescaled_fisher_block_with_grid(sigma_sq, r, alpha, h, grid)?;
            let determinant = det2(&block);
            let mut gap: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    gap = gap.max(((block[i][j] - limit[i][j]) / limit[i][j]).abs());
                }
            }
            Ok(FisherRow {
                h,
                block,
                determinant,
                normalized_determinant: determinant / (block[0][0] * block[1][1]),
                max_relative_gap: gap,
            })
        })
        .collect()
}
