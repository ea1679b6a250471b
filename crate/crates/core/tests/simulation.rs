use ipw_quantile::numerics::stream_rng;
use ipw_quantile::sim_lab::*;
use ipw_quantile::tail_scaling::TailCdf;
use rand::Rng;

#[test]
fn frechet_mean_settles_while_third_moment_grows() {
    let moments = |n: usize, seed: u64| {
        let mut rng = stream_rng(seed, 0);
        let z: Vec<f64> = (0..n).map(|_| frechet(1.0 - rng.random::<f64>(), 3.0)).collect();
        let m1 = z.iter().sum::<f64>() / n as f64;
        let m3 = z.iter().map(|x| x.powi(3)).sum::<f64>() / n as f64;
        (m1, m3)
    };
    // Gamma(2/3)
    let mean = 1.354_117_939_426_400_4;
    let mut small = Vec::new();
    let mut large = Vec::new();
    for seed in 0..5 {
        small.push(moments(1_000, seed).1);
        let (m1, m3) = moments(1_000_000, 100 + seed);
        assert!((m1 - mean).abs() < 0.01, "{m1}");
        large.push(m3);
    }
    small.sort_by(f64::total_cmp);
    large.sort_by(f64::total_cmp);
    assert!(large[2] > small[2] + 3.0, "{small:?} {large:?}");
}

#[test]
fn beta_scores_match_cdf_within_dkw_band() {
    let n = 1_000_000;
    let spec = DgpSpec::model_a(0.5, 3);
    let data = generate(&spec, n).unwrap();
    let cdf = TailCdf::beta(0.5, 2.0).unwrap();
    // P(sup |F_n - F| > eps) <= 2 exp(-2 n eps^2) = 1e-3
    let eps = ((2.0f64 / 1e-3).ln() / (2.0 * n as f64)).sqrt();
    let mut sorted = data.true_scores.clone();
    sorted.sort_by(f64::total_cmp);
    for t in [1e-4, 1e-3, 0.01, 0.1, 0.3, 0.5, 0.8] {
        let frac = sorted.partition_point(|&x| x <= t) as f64 / n as f64;
        assert!((frac - cdf.cdf(t)).abs() <= eps, "t {t}: {frac} vs {}", cdf.cdf(t));
    }
}

#[test]
fn model_a_oracle_agrees_with_monte_carlo() {
    for alpha in [0.2, 1.0] {
        let spec = DgpSpec::model_a(alpha, 0);
        for tau in [0.5, 0.9] {
            let exact = oracle_quantile(&spec, tau).unwrap();
            let mc = mc_quantile(&spec, tau, 1_000_000, 17).unwrap();
            assert!((exact - mc).abs() < 0.01, "{alpha} {tau}: {exact} vs {mc}");
        }
    }
    let b = DgpSpec::model_b(0.5, 0);
    let exact = oracle_quantile(&b, 0.9).unwrap();
    let mc = mc_quantile(&b, 0.9, 1_000_000, 18).unwrap();
    assert!((exact - mc).abs() < 0.02 * exact, "{exact} vs {mc}");
}

#[test]
fn model_a_density_integrates_to_cdf_increment() {
    let spec = DgpSpec::model_a(0.5, 0);
    let (a, b) = (1.0, 2.5);
    let m = 2000;
    let h = (b - a) / m as f64;
    let mut s = spec.density(a).unwrap() + spec.density(b).unwrap();
    for i in 1..m {
        s += spec.density(a + i as f64 * h).unwrap() * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = s * h / 3.0;
    let inc = spec.cdf(b).unwrap() - spec.cdf(a).unwrap();
    assert!((integral - inc).abs() < 1e-9, "{integral} vs {inc}");
}

#[test]
fn flipping_the_design_swaps_arms() {
    let spec = DgpSpec::model_a(0.5, 12);
    let data = generate(&spec, 500).unwrap();
    let obs = &data.observations;
    let flipped = ipw_quantile::propensity::ObservationSet::with_scores(
        obs.outcomes().to_vec(),
        obs.treatments().iter().map(|&d| f64::from(1 - d)).collect(),
        data.true_scores.iter().map(|e| 1.0 - e).collect(),
    )
    .unwrap();
    use ipw_quantile::estimators::estimate_arm_quantile;
    use ipw_quantile::propensity::Arm;
    let a = estimate_arm_quantile(obs, &data.true_scores, Arm::Control, 0.5, 0.0).unwrap();
    let fe: Vec<f64> = flipped.scores().unwrap().to_vec();
    let b = estimate_arm_quantile(&flipped, &fe, Arm::Treated, 0.5, 0.0).unwrap();
    let rel = (a.q_hat - b.q_hat).abs();
    assert!(rel == 0.0 || rel < 1e-12 * a.q_hat.abs().max(1.0));
}

#[test]
fn summary_rows_decompose_mse() {
    let spec = DgpSpec::model_b(0.5, 21);
    let c_grid = [0.0, 0.5, 5.0];
    let res = run_mse_experiment(
        &spec,
        &[0.5, 0.9],
        &[300, 600],
        &c_grid,
        25,
        &ExperimentOptions::default(),
    )
    .unwrap();
    assert_eq!(res.tidy.len(), 2 * 2 * (2 + 3) * 25);
    for row in &res.summary {
        let vals: Vec<f64> = res
            .tidy
            .iter()
            .filter(|t| t.n == row.n && t.tau == row.tau && t.estimator == row.estimator && t.c == row.c)
            .filter_map(|t| t.estimate)
            .collect();
        let direct = vals.iter().map(|v| (v - row.truth).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(
            (row.mse - direct).abs() <= 1e-12 * direct.max(1.0),
            "{} vs {direct}",
            row.mse
        );
        assert!((row.mse - (row.bias * row.bias + row.variance)).abs() <= 1e-15 * row.mse.max(1.0));
    }
    for n in [300, 600] {
        for tau in [0.5, 0.9] {
            let best = res
                .summary
                .iter()
                .filter(|r| r.n == n && r.tau == tau && r.best)
                .count();
            assert_eq!(best, 1);
        }
    }
}

#[test]
fn consistency_rmse_falls_with_n() {
    let rc = rate_check(&DgpSpec::model_a(1.0, 31), 0.9, &[500, 2000, 8000], 200, 0.0).unwrap();
    assert!(
        rc.rmse[0].1 > rc.rmse[1].1 && rc.rmse[1].1 > rc.rmse[2].1,
        "{:?}",
        rc.rmse
    );
    assert_eq!(rc.target, -0.5);
}

#[test]
fn constant_estimator_has_flat_rate() {
    let rc = rate_check_with(&DgpSpec::model_a(1.0, 32), 0.9, &[100, 1000, 10_000], 10, |_| Ok(0.0)).unwrap();
    assert!(rc.slope.abs() < 1e-12);
}

#[test]
fn light_tails_need_little_truncation() {
    let spec = DgpSpec::model_a(1.0, 41);
    let n = 8000;
    let c_grid = default_experiment_c_grid(n, 2.0, ipw_quantile::estimators::TruncationScale::InverseGamma);
    let res = run_mse_experiment(&spec, &[0.9], &[n], &c_grid, 500, &ExperimentOptions::default()).unwrap();
    let ipw: Vec<_> = res
        .summary
        .iter()
        .filter(|r| r.estimator == EstimatorKind::Ipw)
        .collect();
    let best = ipw.iter().find(|r| r.best).unwrap();
    let untruncated = ipw.iter().find(|r| r.c == Some(0.0)).unwrap();
    let full = ipw.last().unwrap();
    assert!(best.b_n.unwrap() <= 0.05, "best b_n {:?}", best.b_n);
    assert!(untruncated.mse < full.mse);
}

#[test]
fn drift_is_zero_at_origin_and_even() {
    let rep = quadratic_drift_check(&DgpSpec::model_a(0.5, 51), 0.5, 20_000, &[0.0, -1.5, 1.5], 20).unwrap();
    assert_eq!(rep.rows[0].mc_mean, 0.0);
    assert_eq!(rep.rows[0].target, 0.0);
    assert_eq!(rep.rows[1].target, rep.rows[2].target);
}

#[test]
fn estimated_scores_mode_runs() {
    let spec = DgpSpec::model_a(0.5, 61);
    let opts = ExperimentOptions {
        score_mode: ScoreMode::Logistic,
        ..Default::default()
    };
    let res = run_mse_experiment(&spec, &[0.5], &[1000], &[0.0, 1.0], 10, &opts).unwrap();
    assert!(res.summary.iter().all(|r| r.failures == 0));
}
