use nalgebra::DMatrix;
use rimfg::leader::{
    block_problem, block_terminal, concavity_problem, estimate_gamma_hat, leader_gains, solve_block_riccati,
    solve_concavity, solve_leader, stationarity_residual,
};
use rimfg::odeint::residual;
use rimfg::{Error, ModelParams};

const GAMMA: f64 = 5.0;

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Backward time to blow-up of the scalar `k' = -(s k² + a k + q)`, `k(T) = g`,
/// i.e. `∫_g^∞ dk / (s k² + a k + q)`; infinite if the solution stays bounded.
fn scalar_escape_time(s: f64, a: f64, q: f64, g: f64) -> f64 {
    let disc = a * a - 4.0 * s * q;
    if disc > 0.0 {
        let sq = disc.sqrt();
        let r1 = (-a + sq) / (2.0 * s);
        let r2 = (-a - sq) / (2.0 * s);
        if g <= r1 {
            return f64::INFINITY;
        }
        ((g - r2) / (g - r1)).ln() / sq
    } else {
        let w = (-disc).sqrt();
        2.0 / w * (std::f64::consts::FRAC_PI_2 - ((2.0 * s * g + a) / w).atan())
    }
}

/// Backward time for the same equation to climb from `g` to `level > g`
/// (real-root case, both roots below `g`).
fn scalar_time_to_level(s: f64, a: f64, q: f64, g: f64, level: f64) -> f64 {
    let sq = (a * a - 4.0 * s * q).sqrt();
    let r1 = (-a + sq) / (2.0 * s);
    let r2 = (-a - sq) / (2.0 * s);
    (((g - r2) / (g - r1)).ln() - ((level - r2) / (level - r1)).ln()) / sq
}

fn table1_coeffs(p: &ModelParams, gamma: f64) -> (f64, f64, f64, f64) {
    let sv = p.e[(0, 0)].powi(2) / (gamma * gamma * p.r2[(0, 0)]);
    let a = 2.0 * p.a[(0, 0)] + p.c[(0, 0)].powi(2);
    (sv, a, p.q[(0, 0)], p.g[(0, 0)])
}

fn table1_escape_time(p: &ModelParams, gamma: f64) -> f64 {
    let (sv, a, q, g) = table1_coeffs(p, gamma);
    scalar_escape_time(sv, a, q, g)
}

/// Smallest γ for which `f(γ) ≥ T`, with `f` increasing in γ.
fn critical_level(f: impl Fn(f64) -> f64, t_final: f64) -> f64 {
    let (mut a, mut b) = (1.0, 1e5);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if f(mid) < t_final {
            a = mid;
        } else {
            b = mid;
        }
    }
    b
}

fn two_dim() -> ModelParams {
    let mut p = ModelParams::table1();
    p.n = 2;
    p.a = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.4]);
    for m in [&mut p.f, &mut p.c, &mut p.at, &mut p.ft, &mut p.sigma, &mut p.gamma1, &mut p.gamma2] {
        *m = DMatrix::identity(2, 2) * m[(0, 0)];
    }
    for m in [&mut p.q, &mut p.g, &mut p.qt, &mut p.gt, &mut p.gamma1t, &mut p.gamma2t] {
        *m = DMatrix::identity(2, 2) * m[(0, 0)];
    }
    p.c[(0, 1)] = 0.2;
    p.b = DMatrix::from_row_slice(2, 1, &[0.5, 0.1]);
    p.h = DMatrix::from_row_slice(2, 1, &[0.7, 0.0]);
    p.e = DMatrix::from_row_slice(2, 1, &[-0.5, 0.2]);
    p.d = DMatrix::from_row_slice(2, 1, &[0.5, 0.0]);
    p.bt = DMatrix::from_row_slice(2, 1, &[0.5, 0.3]);
    p.ht = DMatrix::from_row_slice(2, 1, &[0.2, 0.0]);
    p.xi = nalgebra::DVector::from_vec(vec![1.0, -1.0]);
    p.x0init = nalgebra::DVector::from_vec(vec![1.0, 0.5]);
    p.check_well_formed().unwrap();
    p
}

#[test]
fn zero_weights_give_zero_concavity_solution() {
    let mut p = ModelParams::table1();
    p.q = s(0.0);
    p.g = s(0.0);
    let cert = solve_concavity(&p, GAMMA).unwrap();
    assert_eq!(cert.trajectory().unwrap().max_norm(), 0.0);
}

#[test]
fn concavity_escapes_at_table1_gamma_near_closed_form_time() {
    let p = ModelParams::table1();
    let exact = 10.0 - table1_escape_time(&p, GAMMA);
    assert!((exact - 7.513).abs() < 1e-3, "closed form {exact}");
    let cert = solve_concavity(&p, GAMMA).unwrap();
    let e = cert.escape().expect("K must escape at gamma = 5");
    assert!((e.t_escape - exact).abs() <= 2.0 * p.grid().h, "t_escape {} vs {exact}", e.t_escape);
}

#[test]
fn no_disturbance_channel_gives_lyapunov_solution_and_zero_gamma_hat() {
    let mut p = ModelParams::table1();
    p.e = s(0.0);
    let cert = solve_concavity(&p, GAMMA).unwrap();
    let k = cert.trajectory().unwrap();
    // k' = -(1.6 k + 0.4), k(10) = 1 ⇒ k(t) = 1.25 e^{1.6 (10 - t)} - 0.25
    let grid = p.grid();
    for i in (0..grid.len()).step_by(50) {
        let exact = 1.25 * (1.6 * (10.0 - grid.t(i))).exp() - 0.25;
        assert!((k.values[i][(0, 0)] - exact).abs() / exact < 1e-8);
    }
    let gh = estimate_gamma_hat(&p, 1e-4).unwrap();
    assert!(gh.no_escape);
    assert_eq!(gh.gamma_hat, 0.0);
}

#[test]
fn gamma_hat_brackets_the_closed_form_critical_level() {
    let p = ModelParams::table1();
    let gh = estimate_gamma_hat(&p, 1e-4).unwrap();
    assert!(!gh.no_escape);
    let (lo, hi) = gh.bracket;
    assert!(lo < hi && hi - lo <= 1e-4);
    assert!(lo <= gh.gamma_hat && gh.gamma_hat <= hi);
    assert!((gh.gamma_hat - 2209.3186).abs() < 1e-2, "gamma_hat {}", gh.gamma_hat);

    // Detection is by the norm threshold, so the bisection locates the γ at
    // which the exact solution reaches 1e8 exactly at t = 0. The true blow-up
    // level is lower: there K stays finite but passes the threshold.
    let threshold = rimfg::odeint::EscapePolicy::default().norm_threshold;
    let crossing = critical_level(
        |g| {
            let (sv, a, q, k) = table1_coeffs(&p, g);
            scalar_time_to_level(sv, a, q, k, threshold)
        },
        10.0,
    );
    assert!((gh.gamma_hat - crossing).abs() / crossing < 1e-3, "gamma_hat {} vs crossing {crossing}", gh.gamma_hat);
    let blowup = critical_level(|g| table1_escape_time(&p, g), 10.0);
    assert!(blowup < gh.gamma_hat);

    for t in &gh.trace {
        assert_eq!(t.solvable, t.gamma >= hi, "trial at {} inconsistent with bracket", t.gamma);
    }
}

#[test]
fn heavier_weights_raise_gamma_hat() {
    let mut p = ModelParams::table1();
    let base = estimate_gamma_hat(&p, 1e-2).unwrap().gamma_hat;
    p.q *= 5.0;
    p.g *= 5.0;
    let heavy = estimate_gamma_hat(&p, 1e-2).unwrap().gamma_hat;
    assert!(heavy > base, "{heavy} <= {base}");
}

#[test]
fn hundredfold_weights_exceed_threshold_for_every_gamma() {
    // Without any disturbance term K(0) = 125 e^16 - 25 ≈ 1.1e9 > 1e8, so no γ
    // up to the cap passes the escape test.
    let mut p = ModelParams::table1();
    p.q *= 100.0;
    p.g *= 100.0;
    let err = estimate_gamma_hat(&p, 1e-2).unwrap_err();
    assert!(matches!(err, Error::NotSolvableAtCap { .. }), "{err:?}");
    // the exact blow-up level still moves up with the weights
    let base = critical_level(|g| table1_escape_time(&ModelParams::table1(), g), 10.0);
    let heavy = critical_level(|g| table1_escape_time(&p, g), 10.0);
    assert!(heavy > base);
}

#[test]
fn gamma_hat_separates_solvable_from_escaping() {
    let p = ModelParams::table1();
    let gh = estimate_gamma_hat(&p, 1e-2).unwrap();
    assert!(solve_concavity(&p, gh.gamma_hat * 1.01).unwrap().is_solvable());
    assert!(!solve_concavity(&p, gh.gamma_hat * 0.99).unwrap().is_solvable());
}

#[test]
fn terminal_blocks_for_table1() {
    let t = block_terminal(&ModelParams::table1());
    let expect = [1.0, -0.01, -0.01, 1e-4];
    for (m, e) in t.iter().zip(expect) {
        assert!((m[(0, 0)] - e).abs() < 1e-15);
    }
}

#[test]
fn block_riccati_residuals_and_identities() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let blocks: Vec<_> = sol.blocks().into_iter().cloned().collect();
    let r = residual(&blocks, &block_problem(&p, GAMMA)).unwrap();
    assert!(r <= 1e-6, "block residual {r}");
    assert!(sol.transpose_gap <= 1e-8, "transpose gap {}", sol.transpose_gap);
    assert!(sol.assembled_gap <= 1e-6, "assembled gap {}", sol.assembled_gap);
}

#[test]
fn concavity_residual_where_solvable() {
    let p = ModelParams::table1();
    let gamma = 5000.0;
    let cert = solve_concavity(&p, gamma).unwrap();
    let k = cert.trajectory().unwrap().clone();
    let r = residual(&[k], &concavity_problem(&p, gamma)).unwrap();
    assert!(r <= 1e-6, "K residual {r}");
}

#[test]
fn decoupled_limit_reduces_to_single_riccati() {
    let mut p = ModelParams::table1();
    for m in [&mut p.h, &mut p.ht, &mut p.bt, &mut p.f, &mut p.ft, &mut p.gamma1, &mut p.gamma2] {
        *m = DMatrix::zeros(m.nrows(), m.ncols());
    }
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    for t in [&sol.pi1, &sol.p2, &sol.pi2] {
        assert!(t.max_norm() <= 1e-12);
    }
    // scalar leader Riccati with its own RK4
    let (a, b, c, d, q, r0) = (0.3, 0.5, 1.0, 0.5, 0.4, 0.6);
    let sv = 0.25 / (GAMMA * GAMMA * 0.4);
    let f = |x: f64| {
        let s = x * b + c * x * d;
        -(2.0 * a * x + c * c * x + q + sv * x * x - s * s / (r0 + d * d * x))
    };
    let grid = p.grid();
    let mut x = 1.0;
    let h = -grid.h;
    for k in (1..grid.len()).rev() {
        let k1 = f(x);
        let k2 = f(x + h / 2.0 * k1);
        let k3 = f(x + h / 2.0 * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        assert!((sol.p1.values[k - 1][(0, 0)] - x).abs() <= 1e-10 * (1.0 + x.abs()));
    }
}

#[test]
fn terminal_follower_gain_value() {
    let p = ModelParams::table1();
    let ls = solve_leader(&p, GAMMA).unwrap();
    assert!((ls.gains.theta21.last()[(0, 0)] + 1.39).abs() < 1e-12);
}

#[test]
fn no_diffusion_coupling_gives_plain_leader_gain() {
    let mut p = ModelParams::table1();
    p.d = s(0.0);
    let ls = solve_leader(&p, GAMMA).unwrap();
    let r = &ls.riccati;
    for k in 0..p.grid().len() {
        let expect = -(p.b[(0, 0)] * r.p1.values[k][(0, 0)] + p.ht[(0, 0)] * r.p2.values[k][(0, 0)]) / p.r0[(0, 0)];
        assert!((ls.gains.theta11.values[k][(0, 0)] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn no_disturbance_channel_gives_zero_worst_case() {
    let mut p = ModelParams::table1();
    p.e = s(0.0);
    let ls = solve_leader(&p, GAMMA).unwrap();
    assert_eq!(ls.gains.v_x0.max_norm(), 0.0);
    assert_eq!(ls.gains.v_m.max_norm(), 0.0);
}

#[test]
fn zero_initial_state_or_zero_weights_give_zero_value() {
    let mut p = ModelParams::table1();
    p.xi = nalgebra::DVector::zeros(1);
    p.x0init = nalgebra::DVector::zeros(1);
    assert_eq!(solve_leader(&p, GAMMA).unwrap().value, 0.0);

    let mut p = ModelParams::table1();
    p.q = s(0.0);
    p.g = s(0.0);
    assert!(solve_leader(&p, GAMMA).unwrap().value.abs() <= 1e-14);
}

#[test]
fn table1_value_regression() {
    let ls = solve_leader(&ModelParams::table1(), GAMMA).unwrap();
    assert!((ls.value - 9.131929778).abs() < 1e-8, "V0 {}", ls.value);
    let p0 = ls.riccati.p.first();
    let expect = [16.2609, -25.8715, -25.8715, 44.6139];
    for (i, e) in expect.iter().enumerate() {
        assert!((p0[(i / 2, i % 2)] - e).abs() < 1e-3);
    }
}

#[test]
fn stationarity_holds_at_every_node() {
    let p = ModelParams::table1();
    let ls = solve_leader(&p, GAMMA).unwrap();
    let r = stationarity_residual(&ls.riccati, &ls.gains, &p);
    assert!(r <= 1e-10, "stationarity {r}");
}

#[test]
fn matrix_case_stays_symmetric_and_consistent() {
    let p = two_dim();
    let sol = solve_block_riccati(&p, 100.0).unwrap();
    let p1_sym = sol.p1.values.iter().map(|m| (m - m.transpose()).norm()).fold(0.0, f64::max);
    assert!(p1_sym <= 1e-9, "P1 asymmetry {p1_sym}");
    assert!(sol.max_symmetry_defect_pi2() <= 1e-9);
    let full_sym = sol.p.values.iter().map(|m| (m - m.transpose()).norm()).fold(0.0, f64::max);
    assert!(full_sym <= 1e-9);
    assert!(sol.transpose_gap <= 1e-8);
    assert!(sol.assembled_gap <= 1e-6 * (1.0 + sol.p.max_norm()));
}

#[test]
fn singular_gain_matrix_is_reported() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let mut q = p.clone();
    q.r0 = s(0.0);
    q.d = s(0.0);
    let err = leader_gains(&sol, &q).unwrap_err();
    assert!(matches!(err, Error::SingularGain { .. }), "{err:?}");
    assert!(solve_leader(&q, GAMMA).is_err());
}

#[test]
fn nonpositive_gamma_is_rejected() {
    let p = ModelParams::table1();
    assert!(matches!(solve_concavity(&p, 0.0), Err(Error::Value(_))));
    assert!(matches!(solve_concavity(&p, -1.0), Err(Error::Value(_))));
}
