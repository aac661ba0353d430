//! The parameter vector `(σ², α_1, r_1^+, r_1^-, …, α_M, r_M^+, r_M^-)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};

/// Distance from 1 below which a stability index is treated as the excluded value 1.
pub const ALPHA_ONE_GUARD: f64 = 1e-9;

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 2.0 {
        return Err(invalid("alpha", format!("{alpha} is outside (0, 2)")));
    }
    if (alpha - 1.0).abs() < ALPHA_ONE_GUARD {
        return Err(Error::AlphaOne);
    }
    Ok(())
}

/// `Γ(1-α)·cos(πα/2)`, positive on `(0,2)∖{1}`.
///
/// A one-sided stable Lévy density `α r |z|^{-1-α}` on both half-lines has
/// characteristic exponent `stable_norm(α)·(r^+ + r^-)|λ|^α` up to the skew part.
pub fn stable_norm(alpha: f64) -> f64 {
    gamma(1.0 - alpha) * (PI * alpha / 2.0).cos()
}

/// Derivative of [`stable_norm`] in `alpha`.
pub fn stable_norm_dalpha(alpha: f64) -> f64 {
    let g = gamma(1.0 - alpha);
    let (s, c) = (PI * alpha / 2.0).sin_cos();
    g * (-digamma(1.0 - alpha) * c - PI / 2.0 * s)
}

/// `Γ(1-α)·sin(πα/2)`, the coefficient of the skew part of the exponent.
pub(crate) fn skew_norm(alpha: f64) -> f64 {
    gamma(1.0 - alpha) * (PI * alpha / 2.0).sin()
}

pub(crate) fn skew_norm_dalpha(alpha: f64) -> f64 {
    let g = gamma(1.0 - alpha);
    let (s, c) = (PI * alpha / 2.0).sin_cos();
    g * (-digamma(1.0 - alpha) * s + PI / 2.0 * c)
}

/// One stable-like layer `α (r^+ 1_{z>0} + r^- 1_{z<0}) |z|^{-1-α} dz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpComponent {
    pub alpha: f64,
    pub r_plus: f64,
    pub r_minus: f64,
}

impl JumpComponent {
    pub fn new(alpha: f64, r_plus: f64, r_minus: f64) -> Self {
        Self {
            alpha,
            r_plus,
            r_minus,
        }
    }

    /// Layer whose compensated part equals `scale · S^{α,β}` for the
    /// standardized stable process with exponent `-|λ|^α (1 - iβ tan(πα/2) sgn λ)`.
    pub fn from_stable(alpha: f64, beta: f64, scale: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(-1.0..=1.0).contains(&beta) {
            return Err(invalid("beta", format!("{beta} is outside [-1, 1]")));
        }
        if !(scale > 0.0) {
            return Err(invalid("scale", "must be positive to define a jump layer"));
        }
        let total = scale.powf(alpha) / stable_norm(alpha);
        Ok(Self::new(
            alpha,
            total * (1.0 + beta) / 2.0,
            total * (1.0 - beta) / 2.0,
        ))
    }

    pub fn total(&self) -> f64 {
        self.r_plus + self.r_minus
    }

    pub fn beta(&self) -> f64 {
        (self.r_plus - self.r_minus) / self.total()
    }

    /// Multiplier `c` such that the layer is `c · S^{α,β}`.
    pub fn stable_scale(&self) -> f64 {
        (self.total() * stable_norm(self.alpha)).powf(1.0 / self.alpha)
    }

    /// Drift generated by compensating with `z 1_{|z|≤1}` instead of the
    /// centring implicit in the stable exponent: `α (r^+ - r^-)/(α - 1)`.
    pub fn truncation_drift(&self) -> f64 {
        self.alpha * (self.r_plus - self.r_minus) / (self.alpha - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.r_plus >= 0.0 && self.r_minus >= 0.0) {
            return Err(Error::InvalidTheta(format!(
                "asymmetry weights must be nonnegative, got ({}, {})",
                self.r_plus, self.r_minus
            )));
        }
        if !(self.total() > 0.0) || !self.total().is_finite() {
            return Err(Error::InvalidTheta(
                "r^+ + r^- must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub sigma_sq: f64,
    pub components: Vec<JumpComponent>,
}

impl ThetaParams {
    pub fn new(sigma_sq: f64, components: Vec<JumpComponent>) -> Result<Self> {
        let theta = Self {
            sigma_sq,
            components,
        };
        theta.validate()?;
        Ok(theta)
    }

    pub fn gaussian(sigma_sq: f64) -> Self {
        Self {
            sigma_sq,
            components: Vec::new(),
        }
    }

    /// Brownian motion with volatility `sigma` plus one standardized stable layer.
    pub fn stable_plus_brownian(sigma: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(
            sigma * sigma,
            vec![JumpComponent::from_stable(alpha, beta, 1.0)?],
        )
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        1 + 3 * self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq >= 0.0) || !self.sigma_sq.is_finite() {
            return Err(Error::InvalidTheta(format!(
                "sigma^2 = {} must be finite and nonnegative",
                self.sigma_sq
            )));
        }
        for c in &self.components {
            c.validate()?;
        }
        if let Some(first) = self.components.first() {
            let floor = first.alpha / 2.0;
            for pair in self.components.windows(2) {
                if !(pair[0].alpha > pair[1].alpha) {
                    return Err(Error::InvalidTheta(
                        "indices must be strictly decreasing".into(),
                    ));
                }
            }
            if let Some(last) = self.components.last() {
                if self.components.len() > 1 && !(last.alpha > floor) {
                    return Err(Error::InvalidTheta(format!(
                        "smallest index {} must exceed alpha_1/2 = {floor}",
                        last.alpha
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.sigma_sq);
        for c in &self.components {
            v.extend([c.alpha, c.r_plus, c.r_minus]);
        }
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec) without validation.
    pub fn from_slice_unchecked(v: &[f64]) -> Self {
        assert!(
            !v.is_empty() && (v.len() - 1) % 3 == 0,
            "parameter vector length must be 3M+1"
        );
        Self {
            sigma_sq: v[0],
            components: v[1..]
                .chunks_exact(3)
                .map(|c| JumpComponent::new(c[0], c[1], c[2]))
                .collect(),
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.is_empty() || (v.len() - 1) % 3 != 0 {
            return Err(Error::InvalidTheta(format!(
                "length {} is not of the form 3M+1",
                v.len()
            )));
        }
        let theta = Self::from_slice_unchecked(v);
        theta.validate()?;
        Ok(theta)
    }

    /// Vector index of `α_m` (zero-based `m`).
    pub fn alpha_index(m: usize) -> usize {
        1 + 3 * m
    }

    /// Total drift produced by the `z 1_{|z|≤1}` compensation of all layers.
    pub fn truncation_drift(&self) -> f64 {
        self.components.iter().map(|c| c.truncation_drift()).sum()
    }

    /// Human-readable coordinate names in vector order.
    pub fn coordinate_names(m: usize) -> Vec<String> {
        let mut names = vec!["sigma_sq".to_string()];
        for k in 1..=m {
            names.push(format!("alpha_{k}"));
            names.push(format!("r_plus_{k}"));
            names.push(format!("r_minus_{k}"));
        }
        names
    }
}
