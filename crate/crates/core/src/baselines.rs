//! Threshold jump counting and truncated realized variance.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::levy_sim::IncrementBatch;

/// Threshold `c · h^ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub c: f64,
    pub omega: f64,
}

impl ThresholdSpec {
    pub const DEFAULT_OMEGA: f64 = 0.49;

    pub fn new(c: f64, omega: f64) -> Result<Self> {
        let s = Self { c, omega };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid("c", format!("{} must be positive", self.c)));
        }
        if !(self.omega > 0.0 && self.omega < 0.5) {
            return Err(invalid("omega", format!("{} is outside (0, 1/2)", self.omega)));
        }
        Ok(())
    }

    pub fn threshold(&self, h: f64) -> f64 {
        self.c * h.powf(self.omega)
    }
}

/// Fewest exceedances per threshold for [`aj_alpha`].
pub const MIN_EXCEEDANCES: usize = 10;

/// Number of increments with `|Δ| > tau`.
pub fn aj_count(batch: &IncrementBatch, tau: f64) -> usize {
    batch.values.iter().filter(|x| x.abs() > tau).count()
}

/// Two-threshold index estimate `log(U(τ₁)/U(τ₂)) / log(τ₂/τ₁)`.
pub fn aj_alpha(batch: &IncrementBatch, spec1: &ThresholdSpec, spec2: &ThresholdSpec) -> Result<f64> {
    spec1.validate()?;
    spec2.validate()?;
    let t1 = spec1.threshold(batch.h);
    let t2 = spec2.threshold(batch.h);
    if t1 == t2 {
        return Err(invalid("thresholds", "the two thresholds must differ"));
    }
    let u1 = aj_count(batch, t1);
    let u2 = aj_count(batch, t2);
    for (count, threshold) in [(u1, t1), (u2, t2)] {
        if count < MIN_EXCEEDANCES {
            return Err(Error::InsufficientExceedances { count, threshold });
        }
    }
    Ok((u1 as f64 / u2 as f64).ln() / (t2 / t1).ln())
}

/// `Σ Δ² 1(|Δ| ≤ c h^ω) / T`.
pub fn truncated_rv(batch: &IncrementBatch, spec: &ThresholdSpec) -> Result<f64> {
    spec.validate()?;
    let tau = spec.threshold(batch.h);
    let sum: f64 = batch
        .values
        .iter()
        .filter(|x| x.abs() <= tau)
        .map(|x| x * x)
        .sum();
    Ok(sum / batch.horizon())
}

/// `Σ Δ² / T`.
pub fn realized_variance(batch: &IncrementBatch) -> f64 {
    batch.values.iter().map(|x| x * x).sum::<f64>() / batch.horizon()
}

/// Jump-robust volatility guess from the median absolute increment.
pub fn robust_sigma(batch: &IncrementBatch) -> f64 {
    let mut a: Vec<f64> = batch.values.iter().map(|x| x.abs()).collect();
    let mid = a.len() / 2;
    let (_, m, _) = a.select_nth_unstable_by(mid, f64::total_cmp);
    // median of |N(0,1)| is 0.6744897501960817
    *m / 0.674_489_750_196_081_7 / batch.h.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_sim::{simulate_increments, SimModelSpec};

    fn batch(values: Vec<f64>, h: f64) -> IncrementBatch {
        IncrementBatch::new(h, values, 0).unwrap()
    }

    #[test]
    fn counting() {
        assert_eq!(aj_count(&batch(vec![0.0; 5], 0.2), 0.1), 0);
        assert_eq!(aj_count(&batch(vec![0.5, -2.0, 1.0], 1.0 / 3.0), 0.9), 2);
    }

    #[test]
    fn ratio_algebra() {
        // 1000 values above τ₁ = 1, of which 100 also exceed τ₂ = 10.
        let mut v = vec![5.0; 900];
        v.extend(vec![50.0; 100]);
        v.extend(vec![0.0; 9000]);
        let b = batch(v, 1e-4);
        let h_pow = 1e-4f64.powf(0.25);
        let s1 = ThresholdSpec::new(1.0 / h_pow, 0.25).unwrap();
        let s2 = ThresholdSpec::new(10.0 / h_pow, 0.25).unwrap();
        let a = aj_alpha(&b, &s1, &s2).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_counts_give_zero() {
        let mut v = vec![100.0; 20];
        v.extend(vec![0.0; 80]);
        let b = batch(v, 0.01);
        let a = aj_alpha(&b, &ThresholdSpec::new(1.0, 0.4).unwrap(), &ThresholdSpec::new(2.0, 0.4).unwrap()).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn empty_tail_is_an_error() {
        let b = batch(vec![0.0; 100], 0.01);
        let s = ThresholdSpec::new(1.0, 0.4).unwrap();
        let t = ThresholdSpec::new(2.0, 0.4).unwrap();
        assert!(matches!(
            aj_alpha(&b, &s, &t),
            Err(Error::InsufficientExceedances { count: 0, .. })
        ));
    }

    #[test]
    fn truncated_rv_cases() {
        let b = simulate_increments(&SimModelSpec::brownian(1.0), 1_000_000, 1e-6, 4).unwrap();
        let s = ThresholdSpec::new(5.0, 0.49).unwrap();
        let v = truncated_rv(&b, &s).unwrap();
        assert!((v - 1.0).abs() < 0.01, "{v}");
        let all_big = batch(vec![1.0, -1.0, 2.0], 1.0 / 3.0);
        assert_eq!(truncated_rv(&all_big, &ThresholdSpec::new(0.1, 0.3).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn omega_must_be_below_half() {
        assert!(ThresholdSpec::new(1.0, 0.5).is_err());
        assert!(ThresholdSpec::new(0.0, 0.3).is_err());
    }

    #[test]
    fn robust_sigma_brownian() {
        let b = simulate_increments(&SimModelSpec::brownian(0.7), 200_000, 1e-4, 9).unwrap();
        assert!((robust_sigma(&b) - 0.7).abs() < 0.01);
    }
}
