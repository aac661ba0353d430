//! Monte Carlo oracles tying the simulator to the analytic side of the crate.

use bgest::baselines::{aj_alpha, robust_sigma, truncated_rv, ThresholdSpec};
use bgest::charfn::{char_fn, density_grid, GridSpec};
use bgest::experiment::quantile;
use bgest::levy_sim::{sample_standard_stable, simulate_increments, SimModelSpec, StableSpec};
use bgest::moments::{bias_decay_diagnostic, default_moment_set, expected_moment, practical_scaling, BiasConfig};
use bgest::rng::sub_seed;
use bgest::theta::ThetaParams;

const DESK_H: f64 = 1.0 / 23_400.0;

fn benchmark_theta() -> ThetaParams {
    ThetaParams::stable_plus_brownian(1.0, 1.3, -1.0 / 3.0).unwrap()
}

fn pure_stable(alpha: f64, beta: f64) -> SimModelSpec {
    SimModelSpec { mu: 0.0, sigma: 0.0, components: vec![StableSpec { alpha, beta, scale: 1.0 }], nuisance: None }
}

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// 1% critical value of the two-sample statistic for equal sizes `n`.
fn ks_critical(n: usize) -> f64 {
    1.628 * (2.0 / n as f64).sqrt()
}

#[test]
fn stable_increments_are_self_similar() {
    let n = 100_000;
    let h = 1e-3;
    for (alpha, beta) in [(1.3, -1.0 / 3.0), (0.7, 0.5), (1.8, 0.0)] {
        let direct = simulate_increments(&pure_stable(alpha, beta), n, h, 3).unwrap().values;
        let scaled: Vec<f64> =
            sample_standard_stable(alpha, beta, n, 4).unwrap().iter().map(|s| h.powf(1.0 / alpha) * s).collect();
        let d = ks_statistic(direct, scaled);
        assert!(d < ks_critical(n), "α={alpha}: KS {d:.5} vs critical {:.5}", ks_critical(n));
    }
}

#[test]
fn aggregated_fine_steps_match_one_coarse_step() {
    // Σ of m increments at h/m has the law of one increment at h
    let (n, m) = (100_000, 10);
    let h = 1e-3;
    for (alpha, beta) in [(1.3, -1.0 / 3.0), (0.7, 0.5)] {
        let model = pure_stable(alpha, beta);
        let fine = simulate_increments(&model, n * m, h / m as f64, 5).unwrap().values;
        let summed: Vec<f64> = fine.chunks(m).map(|c| c.iter().sum()).collect();
        let coarse = simulate_increments(&model, n, h, 6).unwrap().values;
        let d = ks_statistic(summed, coarse);
        assert!(d < ks_critical(n), "α={alpha}: KS {d:.5} vs critical {:.5}", ks_critical(n));
    }
}

#[test]
fn empirical_char_fn_matches_model_on_twenty_frequencies() {
    let theta = benchmark_theta();
    let n = 200_000;
    let b = simulate_increments(&SimModelSpec::exact(&theta), n, DESK_H, 12).unwrap();
    for k in 1..=20 {
        let lam = 15.0 * k as f64;
        let model = char_fn(&theta, DESK_H, 1.0, lam).unwrap();
        let (mut c, mut s) = (0.0, 0.0);
        for x in &b.values {
            c += (lam * x).cos();
            s += (lam * x).sin();
        }
        let (c, s) = (c / n as f64, s / n as f64);
        // the empirical mean of e^{iλX} has per-coordinate variance at most 1/n
        let se = (1.0 / n as f64).sqrt();
        assert!((c - model.re).abs() < 4.0 * se, "λ={lam}: re {c} vs {}", model.re);
        assert!((s - model.im).abs() < 4.0 * se, "λ={lam}: im {s} vs {}", model.im);
    }
}

#[test]
fn grid_cdf_matches_empirical_cdf() {
    let theta = benchmark_theta();
    let u = practical_scaling(DESK_H);
    let n = 1_000_000;
    let mut draws: Vec<f64> = simulate_increments(&SimModelSpec::exact(&theta), n, DESK_H, 21)
        .unwrap()
        .values
        .iter()
        .map(|x| u * x)
        .collect();
    draws.sort_by(f64::total_cmp);
    let grid = density_grid(&theta, DESK_H, u, &GridSpec::default()).unwrap();
    let cdf = grid.cdf();
    let mut worst: f64 = 0.0;
    for (k, f) in cdf.iter().enumerate() {
        let x = grid.x(k);
        if x.abs() > 10.0 {
            continue;
        }
        let empirical = draws.partition_point(|&d| d <= x) as f64 / n as f64;
        worst = worst.max((empirical - f).abs());
    }
    // the largest pointwise standard error of an empirical CDF is 1/(2√n)
    let se = 0.5 / (n as f64).sqrt();
    assert!(worst < 4.0 * se, "sup distance {worst:.2e} vs 4 SE {:.2e}", 4.0 * se);
}

#[test]
fn doubling_the_grid_leaves_moments_unchanged() {
    let theta = benchmark_theta();
    let fset = default_moment_set();
    let base = GridSpec::default();
    let fine = GridSpec { n_points: 2 * base.n_points, max_dx: base.max_dx / 2.0, ..base };
    for h in [5.0 * DESK_H, DESK_H] {
        let u = practical_scaling(h);
        for f in &fset.functions {
            let a = expected_moment(&theta, h, u, f, &base).unwrap();
            let b = expected_moment(&theta, h, u, f, &fine).unwrap();
            assert!((a - b).abs() < 1e-8, "{}: {a} vs {b}", f.name);
        }
    }
}

#[test]
fn threshold_baselines_at_desk_scale() {
    let model = SimModelSpec::benchmark(1.3, -1.0 / 3.0);
    let reps = 200;
    let (mut alphas, mut vol_errors) = (Vec::new(), Vec::new());
    for rep in 0..reps {
        let b = simulate_increments(&model, 23_400, DESK_H, sub_seed(31, 0, rep)).unwrap();
        let s = robust_sigma(&b);
        let t1 = ThresholdSpec::new(4.0 * s, 0.49).unwrap();
        let t2 = ThresholdSpec::new(6.0 * s, 0.49).unwrap();
        if let Ok(a) = aj_alpha(&b, &t1, &t2) {
            alphas.push(a);
        }
        let trv = truncated_rv(&b, &ThresholdSpec::new(3.0 * s, 0.49).unwrap()).unwrap();
        vol_errors.push((trv - 1.0).abs());
    }
    alphas.sort_by(f64::total_cmp);
    vol_errors.sort_by(f64::total_cmp);
    assert!(alphas.len() >= reps as usize / 2, "only {} two-threshold fits", alphas.len());
    let median_alpha = quantile(&alphas, 0.5);
    assert!((median_alpha - 1.3).abs() <= 0.4, "median jump-count index {median_alpha}");
    let mae = quantile(&vol_errors, 0.5);
    assert!((0.01..=0.09).contains(&mae), "truncated variance MAE {mae}");
}

#[test]
fn exact_model_shows_no_bias() {
    let theta = benchmark_theta();
    let fset = default_moment_set();
    let cfg = BiasConfig { draws: 400_000, seed: 41, ..BiasConfig::default() };
    let steps = [1e-3, 1e-4, DESK_H];
    for f in [&fset.functions[0], &fset.functions[2]] {
        let report = bias_decay_diagnostic(&SimModelSpec::exact(&theta), &theta, f, &steps, &cfg).unwrap();
        for row in &report.rows {
            assert!(row.censored, "{} at h={}: bias {:.3e} outside 4 SE {:.3e}", f.name, row.h, row.bias, 4.0 * row.mc_se);
        }
    }
}

#[test]
fn noise_band_shrinks_with_the_square_root_of_draws() {
    let theta = benchmark_theta();
    let f1 = &default_moment_set().functions[0];
    let model = SimModelSpec::exact(&theta);
    let small = BiasConfig { draws: 100_000, seed: 43, ..BiasConfig::default() };
    let large = BiasConfig { draws: 400_000, ..small.clone() };
    let a = bias_decay_diagnostic(&model, &theta, f1, &[DESK_H], &small).unwrap();
    let b = bias_decay_diagnostic(&model, &theta, f1, &[DESK_H], &large).unwrap();
    let ratio = a.noise_band()[0] / b.noise_band()[0];
    assert!((ratio - 2.0).abs() < 0.1, "band ratio {ratio}");
}
