//! Seeded simulation of Brownian motion plus stable layers.

use rand::Rng;
use rand_distr::{Exp1, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from_seed, sub_seed};
use crate::theta::{check_alpha, JumpComponent, ThetaParams, ALPHA_ONE_GUARD};

const GAUSS_STREAM: u64 = 0;
const NUISANCE_STREAM: u64 = 1_000;

/// `scale · S^{α,β}` with `log E e^{iλ S_1} = -|λ|^α (1 - iβ tan(πα/2) sgn λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableSpec {
    pub alpha: f64,
    pub beta: f64,
    pub scale: f64,
}

impl StableSpec {
    pub fn new(alpha: f64, beta: f64, scale: f64) -> Result<Self> {
        let s = Self { alpha, beta, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(-1.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta", format!("{} is outside [-1, 1]", self.beta)));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(invalid("scale", format!("{} must be nonnegative", self.scale)));
        }
        Ok(())
    }

    /// The equivalent Lévy-measure layer; `None` for a zero scale.
    pub fn component(&self) -> Result<Option<JumpComponent>> {
        if self.scale == 0.0 {
            return Ok(None);
        }
        JumpComponent::from_stable(self.alpha, self.beta, self.scale).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimModelSpec {
    /// Drift per unit time.
    pub mu: f64,
    /// Diffusion coefficient (not squared).
    pub sigma: f64,
    pub components: Vec<StableSpec>,
    pub nuisance: Option<StableSpec>,
}

impl SimModelSpec {
    pub fn brownian(sigma: f64) -> Self {
        Self {
            mu: 0.0,
            sigma,
            components: Vec::new(),
            nuisance: None,
        }
    }

    /// `σB + S^{α,β}` without nuisance term.
    pub fn stable_plus_brownian(sigma: f64, alpha: f64, beta: f64) -> Self {
        Self {
            mu: 0.0,
            sigma,
            components: vec![StableSpec {
                alpha,
                beta,
                scale: 1.0,
            }],
            nuisance: None,
        }
    }

    /// `B + S^{α,β} + 0.1·S^{0.5,0}`.
    pub fn benchmark(alpha: f64, beta: f64) -> Self {
        Self {
            nuisance: Some(StableSpec {
                alpha: 0.5,
                beta: 0.0,
                scale: 0.1,
            }),
            ..Self::stable_plus_brownian(1.0, alpha, beta)
        }
    }

    /// Model whose increments have exactly the law of `Z̃` at `θ`, including
    /// the drift generated by the `z 1_{|z|≤1}` truncation.
    pub fn exact(theta: &ThetaParams) -> Self {
        Self {
            mu: theta.truncation_drift(),
            sigma: theta.sigma_sq.sqrt(),
            components: theta
                .components
                .iter()
                .map(|c| StableSpec {
                    alpha: c.alpha,
                    beta: c.beta(),
                    scale: c.stable_scale(),
                })
                .collect(),
            nuisance: None,
        }
    }

    /// Parameter vector of the modeled part (components with positive scale).
    pub fn theta(&self) -> Result<ThetaParams> {
        let mut comps = Vec::new();
        for c in &self.components {
            if let Some(j) = c.component()? {
                comps.push(j);
            }
        }
        ThetaParams::new(self.sigma * self.sigma, comps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid("sigma", format!("{} must be nonnegative", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(invalid("mu", "must be finite"));
        }
        for c in self.components.iter().chain(self.nuisance.iter()) {
            c.validate()?;
        }
        Ok(())
    }

    /// Violations of the assumptions under which the estimator theory applies.
    /// These are reported, never enforced.
    pub fn theory_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(n), Some(first)) = (&self.nuisance, self.components.first()) {
            if n.scale > 0.0 && n.alpha >= first.alpha / 2.0 {
                out.push(format!(
                    "nuisance index {} is not below alpha_1/2 = {}",
                    n.alpha,
                    first.alpha / 2.0
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementBatch {
    pub h: f64,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl IncrementBatch {
    pub fn new(h: f64, values: Vec<f64>, seed: u64) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("values", "batch must contain at least one increment"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid("h", format!("step {h} must be positive")));
        }
        Ok(Self { h, values, seed })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.h * self.values.len() as f64
    }

    /// Check `n·h = T` to one part in 10⁹.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        if (self.horizon() - horizon).abs() > 1e-9 * horizon.abs().max(f64::MIN_POSITIVE) {
            return Err(invalid(
                "horizon",
                format!("n*h = {} differs from T = {horizon}", self.horizon()),
            ));
        }
        Ok(())
    }
}

/// Chambers–Mallows–Stuck sampler for the standardized law.
#[derive(Debug, Clone, Copy)]
struct Cms {
    alpha: f64,
    shift: f64,
    factor: f64,
}

impl Cms {
    fn new(alpha: f64, beta: f64) -> Self {
        let t = beta * (PI * alpha / 2.0).tan();
        Self {
            alpha,
            shift: t.atan() / alpha,
            factor: (1.0 + t * t).powf(1.0 / (2.0 * alpha)),
        }
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = PI * (rng.sample::<f64, _>(Open01) - 0.5);
        let w: f64 = rng.sample(Exp1);
        let a = self.alpha;
        let arg = a * (v + self.shift);
        self.factor * arg.sin() / v.cos().powf(1.0 / a)
            * ((v - arg).cos() / w).powf((1.0 - a) / a)
    }
}

fn check_sampler_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha > 2.0 {
        return Err(invalid("alpha", format!("{alpha} is outside (0, 2]")));
    }
    if (alpha - 1.0).abs() < ALPHA_ONE_GUARD {
        return Err(Error::AlphaOne);
    }
    Ok(())
}

/// `n` draws of `S_1^{α,β}`. `alpha = 2` is accepted and yields `N(0, 2)`.
pub fn sample_standard_stable(alpha: f64, beta: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    check_sampler_alpha(alpha)?;
    if !(-1.0..=1.0).contains(&beta) {
        return Err(invalid("beta", format!("{beta} is outside [-1, 1]")));
    }
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let cms = Cms::new(alpha, beta);
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| cms.draw(&mut rng)).collect())
}

/// Increments `μh + σ√h G + Σ scale·h^{1/α} S + nuisance` over `n` steps of size `h`.
pub fn simulate_increments(model: &SimModelSpec, n: usize, h: f64, seed: u64) -> Result<IncrementBatch> {
    model.validate()?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("h", format!("step {h} must be positive")));
    }
    let mut values = vec![model.mu * h; n];
    if model.sigma > 0.0 {
        let sd = model.sigma * h.sqrt();
        let mut rng = rng_from_seed(sub_seed(seed, GAUSS_STREAM, 0));
        for v in values.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += sd * g;
        }
    }
    let layers = model
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| (j as u64 + 1, c))
        .chain(model.nuisance.iter().map(|c| (NUISANCE_STREAM, c)));
    for (stream, spec) in layers {
        if spec.scale == 0.0 {
            continue;
        }
        let cms = Cms::new(spec.alpha, spec.beta);
        let mult = spec.scale * h.powf(1.0 / spec.alpha);
        let mut rng = rng_from_seed(sub_seed(seed, stream, 0));
        for v in values.iter_mut() {
            *v += mult * cms.draw(&mut rng);
        }
    }
    IncrementBatch::new(h, values, seed)
}
