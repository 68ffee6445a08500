use gridsnoop::estimation::*;
use gridsnoop::network::{build_admittance, parse_case};
use gridsnoop::powerflow::*;
use gridsnoop::{MeterLayout, NetworkCase, SystemState};
use nalgebra::Complex;

/// S = V_i conj(I_ij) from the complex pi model with an off-nominal tap at
/// the from end.
fn complex_flow(case: &NetworkCase, state: &SystemState, k: usize) -> (f64, f64) {
    let br = &case.branches[k];
    let y = Complex::new(br.r, br.x).inv();
    let ysh = Complex::new(0.0, br.b_sh);
    let vi = Complex::from_polar(state.v[br.from], state.theta[br.from]);
    let vj = Complex::from_polar(state.v[br.to], state.theta[br.to]);
    let i = (y + ysh) * vi / (br.tap * br.tap) - y * vj / br.tap;
    let s = vi * i.conj();
    (s.re, s.im)
}

#[test]
fn branch_flows_match_complex_oracle() {
    let case = NetworkCase::ieee14();
    let sol = solve_power_flow(&case, &Injections::base(&case)).unwrap();
    for (k, br) in case.branches.iter().enumerate() {
        let (p, q) = branch_flow(&sol.state, br);
        let (po, qo) = complex_flow(&case, &sol.state, k);
        assert!((p - po).abs() < 1e-9 && (q - qo).abs() < 1e-9, "branch {k}: ({p}, {q}) vs ({po}, {qo})");
    }
    // Branch 1-2 of the solved base case carries about 157 MW.
    let (p12, _) = branch_flow(&sol.state, &case.branches[0]);
    assert!((p12 - 1.569).abs() < 0.01, "{p12}");
}

#[test]
fn flat_angles_cancel_series_terms() {
    let case = parse_case("[buses]\n1 slack 0 0 0 1\n2 pq 0 0\n[branches]\n1 2 0.02 0.06 0.05 1\n").unwrap();
    let state = SystemState::flat(2);
    let (p, q) = branch_flow(&state, &case.branches[0]);
    assert!(p.abs() < 1e-15);
    assert!((q + 0.05).abs() < 1e-15);
    let mut lossless = case.branches[0].clone();
    lossless.b_sh = 0.0;
    assert_eq!(branch_flow(&state, &lossless), (0.0, 0.0));
}

fn two_bus_mismatch(v2: f64, th2: f64) -> f64 {
    // g = 5, b = -15 between a slack at 1 pu and a 0.5 pu load.
    let (g, b) = (5.0, -15.0);
    let p2 = v2 * v2 * g - v2 * (g * th2.cos() + b * th2.sin());
    let q2 = -v2 * v2 * b + v2 * (b * th2.cos() - g * th2.sin());
    (p2 + 0.5).powi(2) + q2.powi(2)
}

#[test]
fn two_bus_solution_matches_grid_search() {
    let case = parse_case("[buses]\n1 slack 0 0 0 1\n2 pq 0.5 0\n[branches]\n1 2 0.02 0.06 0 1\n").unwrap();
    let sol = solve_power_flow(&case, &Injections::base(&case)).unwrap();
    let (mut v_lo, mut v_hi, mut t_lo, mut t_hi) = (0.8, 1.2, -0.5, 0.5);
    let mut best = (1.0, 0.0);
    for _ in 0..12 {
        let steps = 80;
        let mut min = f64::INFINITY;
        for i in 0..=steps {
            for j in 0..=steps {
                let v = v_lo + (v_hi - v_lo) * i as f64 / steps as f64;
                let t = t_lo + (t_hi - t_lo) * j as f64 / steps as f64;
                let m = two_bus_mismatch(v, t);
                if m < min {
                    min = m;
                    best = (v, t);
                }
            }
        }
        let (dv, dt) = ((v_hi - v_lo) / 8.0, (t_hi - t_lo) / 8.0);
        (v_lo, v_hi, t_lo, t_hi) = (best.0 - dv, best.0 + dv, best.1 - dt, best.1 + dt);
    }
    assert!((sol.state.v[1] - best.0).abs() < 1e-6, "{} vs {}", sol.state.v[1], best.0);
    assert!((sol.state.theta[1] - best.1).abs() < 1e-6, "{} vs {}", sol.state.theta[1], best.1);
}

#[test]
fn generation_covers_load_and_losses() {
    let case = NetworkCase::ieee14();
    let profile = LoadProfileConfig::default();
    for t in [0.0, 300.0, 1080.0] {
        let sol = solve_power_flow(&case, &generate_loads(&case, &profile, t)).unwrap();
        let model = case.branch_model();
        let (p, _) = model.injections(&sol.state);
        let net: f64 = p.iter().sum();
        let losses: f64 = case
            .branches
            .iter()
            .enumerate()
            .map(|(k, br)| {
                // Line charging is reactive, so only the series branch loses power.
                let (pij, _) = complex_flow(&case, &sol.state, k);
                let vi = Complex::from_polar(sol.state.v[br.from], sol.state.theta[br.from]);
                let vj = Complex::from_polar(sol.state.v[br.to], sol.state.theta[br.to]);
                let y = Complex::new(br.r, br.x).inv();
                let pji = (vj * (y * vj - y * vi / br.tap).conj()).re;
                pij + pji
            })
            .sum();
        assert!((net - losses).abs() < 1e-6, "t={t}: net {net} losses {losses}");
    }
}

#[test]
fn injections_reproduce_the_schedule() {
    let case = NetworkCase::ieee14();
    let sched = generate_loads(&case, &LoadProfileConfig::default(), 77.0);
    let sol = solve_power_flow(&case, &sched).unwrap();
    let (p, q) = case.branch_model().injections(&sol.state);
    for bus in 0..case.bus_count() {
        if bus != case.slack {
            assert!((p[bus] - sched.p[bus]).abs() < 1e-8);
        }
        if case.buses[bus].kind == gridsnoop::network::BusKind::Pq {
            assert!((q[bus] - sched.q[bus]).abs() < 1e-8);
        }
    }
}

#[test]
fn sampled_noise_matches_configured_sigma() {
    let case = NetworkCase::ieee14();
    let layout = MeterLayout::full(&case);
    let model = case.branch_model();
    let state = solve_power_flow(&case, &Injections::base(&case)).unwrap().state;
    let exact = model.measure(&layout, &state);
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut t = 0.0;
    while count < 10_000 {
        let set = measure(&model, &layout, &state, NoiseModel::new(0.01), 9, t);
        for ((z, h), s) in set.z.iter().zip(&exact).zip(&set.sigma) {
            assert!((s - 0.01 * h.abs().max(0.01)).abs() < 1e-15);
            sum_sq += ((z - h) / s).powi(2);
            count += 1;
        }
        t += 1.0;
    }
    let ratio = (sum_sq / count as f64).sqrt();
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
}

#[test]
fn ieee14_mutual_susceptance() {
    let case = NetworkCase::ieee14();
    let y = build_admittance(&case);
    let br = &case.branches[0];
    let b12 = -br.x / (br.r * br.r + br.x * br.x);
    assert!((y.b[(0, 1)] + b12 / br.tap).abs() < 1e-12);
    // 4-7 is a tapped transformer.
    let k = case.branches.iter().position(|b| b.from == 3 && b.to == 6).unwrap();
    let tr = &case.branches[k];
    assert!(tr.tap != 1.0);
    let b47 = -tr.x / (tr.r * tr.r + tr.x * tr.x);
    assert!((y.b[(3, 6)] + b47 / tr.tap).abs() < 1e-12);
}

fn lower_gamma_regularized(s: f64, x: f64) -> f64 {
    // Series expansion with a log-gamma from the Lanczos approximation.
    let lanczos = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    let ln_gamma = |z: f64| {
        let z = z - 1.0;
        let mut a = 0.999_999_999_999_809_9;
        for (i, c) in lanczos.iter().enumerate() {
            a += c / (z + i as f64 + 1.0);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
    };
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= x / (s + k);
        sum += term;
        k += 1.0;
    }
    (s * x.ln() - x - ln_gamma(s)).exp() * sum
}

fn chi2_quantile(confidence: f64, dof: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0 * dof as f64 + 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lower_gamma_regularized(dof as f64 / 2.0, mid / 2.0) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn alarm_threshold_matches_bisection_oracle() {
    let q1 = alarm_threshold(0.99, 1).unwrap().powi(2);
    assert!((q1 - chi2_quantile(0.99, 1)).abs() < 1e-6, "{q1}");
    assert!((q1 - 6.635).abs() < 1e-3);
    for dof in [5, 55, 200] {
        let q = alarm_threshold(0.99, dof).unwrap().powi(2);
        let oracle = chi2_quantile(0.99, dof);
        assert!((q - oracle).abs() < 1e-6 * oracle, "dof {dof}: {q} vs {oracle}");
    }
    let median = alarm_threshold(0.5, 1000).unwrap().powi(2);
    assert!((median - 1000.0).abs() < 50.0);
    assert!(alarm_threshold(0.99, 55).unwrap() > alarm_threshold(0.95, 55).unwrap());
}

#[test]
fn residual_norms_match_direct_recomputation() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let direct = z.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((residual(&z, &f).unwrap() - direct).abs() < 1e-12);
        let per: f64 = (0..n).map(|m| per_meter_residual(&z, &f, m).unwrap().powi(2)).sum();
        assert!((per.sqrt() - direct).abs() < 1e-12);
    }
    assert_eq!(residual(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
    assert!((per_meter_residual(&[1.0], &[1.2], 0).unwrap() - 0.2).abs() < 1e-15);
}

#[test]
fn noiseless_estimate_recovers_the_state() {
    let case = NetworkCase::ieee14();
    let layout = MeterLayout::full(&case);
    let model = case.branch_model();
    let sim = Simulator::new(case, layout.clone(), LoadProfileConfig::default(), NoiseModel::new(0.0)).unwrap();
    for k in [0, 100, 500] {
        let snap = sim.snapshot(k).unwrap();
        let est = estimate_state(&snap.measurements, &model, &layout, &EstimatorConfig::default()).unwrap();
        assert!(est.residual < 1e-6);
        for bus in 0..14 {
            assert!((est.state.v[bus] - snap.state.v[bus]).abs() < 1e-6);
            assert!((est.state.theta[bus] - snap.state.theta[bus]).abs() < 1e-6);
        }
        // Estimating again on the fitted readings is a fixed point.
        let again = MeasurementSet {
            z: est.fitted.clone(),
            ..snap.measurements.clone()
        };
        let est2 = estimate_state(&again, &model, &layout, &EstimatorConfig::default()).unwrap();
        for bus in 0..14 {
            assert!((est2.state.theta[bus] - est.state.theta[bus]).abs() < 1e-8);
        }
    }
}
