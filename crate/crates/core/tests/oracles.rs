//! Hand-computed and brute-force references.

#![allow(clippy::needless_range_loop)]

use nalgebra::DMatrix;

use xnv_core::experiment::{aggregate, run_on_datasets, Algorithm, ExperimentConfig, Report};
use xnv_core::regressors::{fit_krr, fit_xnv, XnvParams};
use xnv_core::selectron::{coopt_objective, coopt_reward_form, slr_objective, NeuroBatch, SelectronState};
use xnv_core::synth::LatentTask;

fn state(v: &[f64], w: &[f64], theta: f64, a: (f64, f64, f64)) -> SelectronState {
    SelectronState { v: v.to_vec(), w: w.to_vec(), theta, alpha1: a.0, alpha2: a.1, alpha_co: a.2 }
}

#[test]
fn coopt_objective_matches_scalar_loop() {
    let x = vec![vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]];
    let z = vec![vec![0.5, -1.0], vec![2.0, 0.0], vec![-0.3, 0.7], vec![1.0, 1.0]];
    let mu = vec![Some(1.0), Some(-0.5), None, None];
    let s = state(&[0.6, 0.2, 0.4], &[0.3, -0.2], 0.5, (1.5, 0.7, 2.0));
    let batch = NeuroBatch::new(x.clone(), z.clone(), mu.clone()).unwrap();

    let (mut lab, mut unl, mut nl, mut nu) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..4 {
        let mut e = -s.theta;
        for k in 0..3 {
            e += s.v[k] * x[i][k];
        }
        let mut g = 0.0;
        for k in 0..2 {
            g += s.w[k] * z[i][k];
        }
        let f = if e > 0.0 { 1.0 } else { 0.0 };
        if let Some(m) = mu[i] {
            lab += (s.alpha1 * e * f - m) * (s.alpha1 * e * f - m) + (s.alpha2 * g - m) * (s.alpha2 * g - m);
            nl += 1.0;
        } else {
            unl += s.alpha_co * (e - g) * (e - g);
            nu += 1.0;
        }
    }
    let want = lab / nl + unl / nu;
    assert!((coopt_objective(&s, &batch).unwrap() - want).abs() < 1e-14);
}

#[test]
fn reward_form_by_hand() {
    // one labeled spiking row: e = 0.5, g = 1, mu = 2;  one unlabeled: e = -0.5, g = 0.5
    let batch = NeuroBatch::new(
        vec![vec![1.0, 1.0], vec![1.0, 0.0]],
        vec![vec![1.0], vec![0.5]],
        vec![Some(2.0), None],
    )
    .unwrap();
    let s = state(&[0.5, 1.0], &[1.0], 1.0, (1.0, 2.0, 0.5));
    let labeled = 2.0 * 0.5 + 2.0 * 1.0 - 0.5 * 1.0 * 0.25 - 0.5 * 2.0 * 1.0;
    let modulation = (0.5 * 0.5 * 1.0 + 0.5 * -0.5 * 0.5) / 2.0;
    assert!((coopt_reward_form(&s, &batch).unwrap() - (labeled + modulation)).abs() < 1e-15);
}

#[test]
fn slr_objective_by_hand() {
    // two spiking rows with excess 0.5; the silent row adds nothing but is counted
    let batch = NeuroBatch::labeled(vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]], vec![1.0, -1.0, 3.0]).unwrap();
    let v = [1.0, 0.5];
    let e = 1.5 - 1.0;
    let want = (0.5 * (1.0 - e) * (1.0 - e) + 0.5 * (-1.0 - e) * (-1.0 - e)) / 3.0;
    assert!((slr_objective(&v, 1.0, &batch).unwrap() - want).abs() < 1e-15);
}

#[test]
fn krr_matches_explicit_inverse() {
    let k = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.3, 0.1, 0.3, 1.0]);
    let y = [1.0, -2.0, 0.5];
    let gamma = 0.2;
    let m = fit_krr(&k, &y, gamma, true).unwrap();
    let mean = (1.0 - 2.0 + 0.5) / 3.0;
    let mut a = k.clone();
    for i in 0..3 {
        a[(i, i)] += gamma * 3.0;
    }
    let inv = a.try_inverse().unwrap();
    let yc = nalgebra::DVector::from_iterator(3, y.iter().map(|v| v - mean));
    let want = &k * (inv * yc);
    let got = m.predict_kernel(&k).unwrap();
    for i in 0..3 {
        assert!((got[i] - (want[i] + mean)).abs() < 1e-12);
    }
}

#[test]
fn xnv_one_dimensional_closed_form() {
    // w = (sum z y / l) / (sum z^2 / l + (1 - lambda) / lambda + gamma)
    let z = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
    let y = [2.0, 3.0, -1.0];
    let (lambda, gamma) = (0.8, 0.1);
    let params = XnvParams { center_labels: false, ..XnvParams::new(gamma) };
    let m = fit_xnv(&z, &y, &[lambda], &params).unwrap();
    let want = (9.0 / 3.0) / (6.0 / 3.0 + 0.25 + gamma);
    assert!((m.weights[0] - want).abs() < 1e-14);
}

fn small_report(seeds: Vec<u64>) -> Report {
    let ds = LatentTask { observed_dim: 8, feature_noise: 0.5, ..LatentTask::default() }.generate(200, 11).unwrap();
    let cfg = ExperimentConfig {
        algos: vec![Algorithm::Xnv, Algorithm::Krr, Algorithm::Sssl],
        ell: vec![30, 60],
        seeds,
        landmarks: 15,
        gamma_grid: vec![1e-4, 1e-2, 1.0],
        warmup: false,
        ..ExperimentConfig::default()
    };
    run_on_datasets(&cfg, &[ds]).unwrap()
}

#[test]
fn json_report_aggregates_are_recomputable() {
    let report = small_report(vec![0, 1, 2]);
    let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 2 * 3);
    for agg in v["aggregates"].as_array().unwrap() {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r["algorithm"] == agg["algorithm"] && r["ell"] == agg["ell"])
            .map(|r| r["test_mse"].as_f64().unwrap())
            .collect();
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let se = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((agg["mean_mse"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((agg["std_error"].as_f64().unwrap() - se).abs() < 1e-12);
    }
    let find = |alg: &str, ell: u64| {
        v["aggregates"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["algorithm"] == alg && a["ell"] == ell)
            .unwrap()["mean_mse"]
            .as_f64()
            .unwrap()
    };
    for c in v["comparisons"].as_array().unwrap() {
        let ell = c["ell"].as_u64().unwrap();
        let (alg, base) = (find(c["algorithm"].as_str().unwrap(), ell), find(c["baseline"].as_str().unwrap(), ell));
        assert!((c["error_reduction"].as_f64().unwrap() - (base - alg) / base).abs() < 1e-12);
    }
    let (aggs, comps) = aggregate(&report.rows);
    assert_eq!(aggs, report.aggregates);
    assert_eq!(comps, report.comparisons);
}

#[test]
fn reports_are_deterministic_up_to_timing() {
    let strip = |mut r: Report| {
        for row in &mut r.rows {
            row.train_seconds = 0.0;
            row.featurize_seconds = 0.0;
        }
        r
    };
    let a = strip(small_report(vec![4, 5]));
    let b = strip(small_report(vec![4, 5]));
    assert_eq!(a, b);
    // a seed's rows do not depend on which other seeds run alongside it
    let c = strip(small_report(vec![5]));
    let seed5: Vec<_> = a.rows.iter().filter(|r| r.seed == 5).cloned().collect();
    assert_eq!(seed5, c.rows);
}
