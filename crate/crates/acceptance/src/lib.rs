//! The twelve acceptance criteria for the Table 1 example, each returning a
//! pass/fail verdict with the measured quantities.
//!
//! Oracles that need an independent computation (Lyapunov equation,
//! standalone single-block Riccati) use their own RK4 below rather than the
//! library's integrator.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rimfg::incentive::{solve_cc_incentive, solve_follower_side, IncentiveOptions};
use rimfg::leader::{
    block_problem, concavity_problem, estimate_gamma_hat, solve_concavity, solve_leader, stationarity_residual,
};
use rimfg::odeint::residual;
use rimfg::sim::{
    incentive_match, limit_costs, mean_stderr, saddle_check, simulate_limit, simulate_population,
    sweep_mean_field_gap, sweep_optimality_gap, SimConfig, Strategy,
};
use rimfg::{ModelParams, TimeGrid};

pub struct Verdict {
    pub id: usize,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

fn verdict(id: usize, title: &'static str, budget_s: u64, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    Verdict {
        id,
        title,
        passed,
        detail,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    }
}

/// Error from the library turned into a failing verdict.
fn fail(e: impl std::fmt::Display) -> (bool, String) {
    (false, format!("error: {e}"))
}

macro_rules! tryv {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return fail(e),
        }
    };
}

// ---------------------------------------------------------------------------
// Independent oracles

/// Classic RK4 backward from `terminal` at `T` to 0 on `grid`; node values in time order.
pub fn rk4_backward(
    grid: &TimeGrid,
    terminal: DMatrix<f64>,
    f: impl Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let mut out = vec![terminal.clone(); grid.len()];
    let mut y = terminal;
    let h = -grid.h;
    for k in (1..grid.len()).rev() {
        let t = grid.t(k);
        let k1 = f(t, &y);
        let k2 = f(t + h / 2.0, &(&y + &k1 * (h / 2.0)));
        let k3 = f(t + h / 2.0, &(&y + &k2 * (h / 2.0)));
        let k4 = f(t + h, &(&y + &k3 * h));
        y = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        y = (&y + y.transpose()) * 0.5;
        out[k - 1] = y.clone();
    }
    out
}

/// `K̇ + KA + AᵀK + CᵀKC + Q = 0`, `K(T) = G`.
pub fn lyapunov_oracle(p: &ModelParams) -> Vec<DMatrix<f64>> {
    rk4_backward(&p.grid(), p.g.clone(), |_, k| {
        -(k * &p.a + p.a.transpose() * k + p.c.transpose() * k * &p.c + &p.q)
    })
}

/// Standalone leader Riccati for the decoupled limit:
/// `Ṗ + PA + AᵀP + CᵀPC + Q + γ⁻²PER2⁻¹EᵀP − (PB + CᵀPD)(R0 + DᵀPD)⁻¹(BᵀP + DᵀPC) = 0`.
pub fn single_block_oracle(p: &ModelParams, gamma: f64) -> Vec<DMatrix<f64>> {
    let r2inv = p.r2.clone().try_inverse().expect("R2 invertible");
    let sv = &p.e * r2inv * p.e.transpose() / (gamma * gamma);
    rk4_backward(&p.grid(), p.g.clone(), |_, x| {
        let n0 = &p.r0 + p.d.transpose() * x * &p.d;
        let s = x * &p.b + p.c.transpose() * x * &p.d;
        let gain = n0.try_inverse().expect("R0 + DᵀPD invertible") * s.transpose();
        -(x * &p.a + p.a.transpose() * x + p.c.transpose() * x * &p.c + &p.q + x * &sv * x - s * gain)
    })
}

pub fn decoupled_params() -> ModelParams {
    let mut p = ModelParams::table1();
    let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
    p.h = z(&p.h);
    p.ht = z(&p.ht);
    p.bt = z(&p.bt);
    p.f = z(&p.f);
    p.ft = z(&p.ft);
    p.gamma1 = z(&p.gamma1);
    p.gamma2 = z(&p.gamma2);
    p
}

// ---------------------------------------------------------------------------
// Criteria

pub const GAMMA: f64 = 5.0;

pub fn c1_riccati_residuals() -> Verdict {
    verdict(1, "Riccati residuals (K and P1..Pi2) <= 1e-6", 1, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let r = &sol.riccati;
        let rp = tryv!(residual(
            &[r.p1.clone(), r.pi1.clone(), r.p2.clone(), r.pi2.clone()],
            &block_problem(&p, GAMMA)
        ));
        let cert = tryv!(solve_concavity(&p, GAMMA));
        let (k_ok, k_msg) = match cert.trajectory() {
            Some(k) => {
                let rk = tryv!(residual(std::slice::from_ref(k), &concavity_problem(&p, GAMMA)));
                (rk <= 1e-6, format!("K residual {rk:.3e}"))
            }
            None => {
                let e = cert.escape().unwrap();
                (false, format!("K escapes at t={} (norm {:.2e}); no residual", e.t_escape, e.norm))
            }
        };
        (k_ok && rp <= 1e-6, format!("{k_msg}; P residual {rp:.3e}"))
    })
}

pub fn c2_structural_identities() -> Verdict {
    verdict(2, "Pi1^T = P2 and block vs assembled form <= 1e-8", 1, || {
        let p = ModelParams::table1();
        let r = tryv!(solve_leader(&p, GAMMA)).riccati;
        let worst_rel = (0..r.grid().len())
            .map(|k| (r.pi1.values[k].transpose() - &r.p2.values[k]).norm() / (1.0 + r.p2.values[k].norm()))
            .fold(0.0, f64::max);
        let assembled = r.p.max_distance(&r.p_assembled);
        (
            worst_rel <= 1e-8 && assembled <= 1e-8,
            format!("transpose gap {worst_rel:.3e}; assembled gap {assembled:.3e}"),
        )
    })
}

pub fn c3_gamma_hat() -> Verdict {
    verdict(3, "gamma_hat bracket <= 1e-3, K solvable at hi, escaped at lo, gamma_hat < 5", 10, || {
        let p = ModelParams::table1();
        let gh = tryv!(estimate_gamma_hat(&p, 1e-4));
        let (lo, hi) = gh.bracket;
        let hi_ok = tryv!(solve_concavity(&p, hi)).is_solvable();
        let lo_esc = lo > 0.0 && !tryv!(solve_concavity(&p, lo)).is_solvable();
        let width = hi - lo;
        (
            width <= 1e-3 && hi_ok && lo_esc && gh.gamma_hat < GAMMA,
            format!(
                "gamma_hat {:.6} in [{lo:.6}, {hi:.6}] (width {width:.2e}); solvable at hi: {hi_ok}; escaped at lo: {lo_esc}; below 5: {}",
                gh.gamma_hat,
                gh.gamma_hat < GAMMA
            ),
        )
    })
}

pub fn c4_stationarity() -> Verdict {
    verdict(4, "stationarity identity <= 1e-10", 1, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let s = stationarity_residual(&sol.riccati, &sol.gains, &p);
        (s <= 1e-10, format!("max residual {s:.3e}"))
    })
}

pub fn c5_saddle_value() -> Verdict {
    verdict(5, "Monte Carlo J0 within 3 stderr of V0, stderr <= 2% (|V0|+1)", 30, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let cfg = SimConfig {
            n_paths: 2000,
            ..SimConfig::default()
        };
        let j = tryv!(limit_costs(&p, &sol.gains, &cfg));
        let (mean, se) = mean_stderr(&j);
        let v0 = sol.value;
        let ok = (mean - v0).abs() <= 3.0 * se && se <= 0.02 * (v0.abs() + 1.0);
        (ok, format!("J0 {mean:.5} +- {se:.5}; V0 {v0:.6}; |diff|/se {:.2}", (mean - v0).abs() / se))
    })
}

pub fn c6_saddle_inequalities() -> Verdict {
    verdict(6, "saddle battery signs within 3 stderr; control margin ratio in [20, 30]", 120, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let cfg = SimConfig {
            n_paths: 2000,
            ..SimConfig::default()
        };
        let rep = tryv!(saddle_check(&p, &sol.gains, &cfg, &[0.1, 0.5]));
        let ratios_ok = rep.control_ratios.iter().all(|(_, raw, _)| (20.0..=30.0).contains(raw));
        let ratios: Vec<String> = rep
            .control_ratios
            .iter()
            .map(|(s, raw, curv)| format!("{s:?} {raw:.2} (curvature {curv:.2})"))
            .collect();
        let bad = rep.entries.iter().filter(|e| !e.passed).count();
        (
            rep.signs_ok() && ratios_ok,
            format!("{bad} sign violations of {}; ratios {}", rep.entries.len(), ratios.join(", ")),
        )
    })
}

pub fn c7_incentive() -> Verdict {
    verdict(7, "incentive system solved (residual <= 1e-6) and gain match <= 1e-4 (1+max|Theta2.|)", 10, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let opts = IncentiveOptions::default();
        let solved = solve_cc_incentive(&p, &sol.riccati, &opts);
        let fs = tryv!(solve_follower_side(&p, &sol.riccati, &opts));
        let max_res = fs.dt.max_matching_residual();
        let gap = incentive_match(&sol.gains, &fs.gains);
        let scale = 1.0 + sol.gains.theta21.max_norm().max(sol.gains.theta22.max_norm());
        let ok = solved.is_ok() && max_res <= 1e-6 && gap <= 1e-4 * scale;
        let status = match &solved {
            Ok(_) => "solved".to_string(),
            Err(e) => format!("{}", e.kind()),
        };
        (
            ok,
            format!("{status}; max matching residual {max_res:.3e}; gain gap {gap:.3e} vs {:.3e}", 1e-4 * scale),
        )
    })
}

pub fn c8_relations() -> Verdict {
    verdict(8, "Theta = Psi and Delta = Sigma + Phi <= 1e-6 (1+|.|)", 1, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let fs = tryv!(solve_follower_side(&p, &sol.riccati, &IncentiveOptions::default()));
        let (a, b) = (fs.spp.theta_psi_gap, fs.spp.delta_split_gap);
        (a <= 1e-6 && b <= 1e-6, format!("Theta-Psi {a:.3e}; Delta-(Sigma+Phi) {b:.3e}"))
    })
}

const NS: [usize; 4] = [10, 40, 160, 640];

fn sweep_cfg() -> SimConfig {
    SimConfig {
        n_paths: 200,
        strategy: Strategy::Team,
        store_agents: 0,
        ..SimConfig::default()
    }
}

pub fn c9_mean_field_rate() -> Verdict {
    verdict(9, "mean-field gap slope in [-1.25, -0.75]", 180, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let r = tryv!(sweep_mean_field_gap(&p, &sol.gains, None, None, &NS, &sweep_cfg()));
        let pts: Vec<String> = r.points.iter().map(|x| format!("{}:{:.4}", x.n, x.gap)).collect();
        (
            (-1.25..=-0.75).contains(&r.slope),
            format!("slope {:.3} +- {:.3}; gaps {}", r.slope, r.slope_halfwidth, pts.join(" ")),
        )
    })
}

pub fn c10_optimality_proxy() -> Verdict {
    verdict(10, "optimality-gap proxy slope in [-1.3, -0.2]", 180, || {
        let p = ModelParams::table1();
        let sol = tryv!(solve_leader(&p, GAMMA));
        let r = tryv!(sweep_optimality_gap(&p, &sol.gains, None, None, &NS, &sweep_cfg()));
        (
            (-1.3..=-0.2).contains(&r.slope),
            format!("slope {:.3} +- {:.3}; {}", r.slope, r.slope_halfwidth, r.note),
        )
    })
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

pub fn c11_reproducibility(scratch: &Path) -> Verdict {
    verdict(11, "reproduce-paper CSVs bitwise identical across thread counts", 300, || {
        let (a, b) = (scratch.join("threads1"), scratch.join("threads2"));
        let ra = rimfg::cli::reproduce_paper(&a, Some(1));
        let rb = rimfg::cli::reproduce_paper(&b, Some(2));
        if let Some(e) = ra.error.or(rb.error) {
            return fail(e);
        }
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        let same = !fa.is_empty() && fa == fb;
        let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
        (same, format!("{} CSV files compared: {}", fa.len(), names.join(" ")))
    })
}

pub fn c12_degenerate_oracles() -> Verdict {
    verdict(12, "degenerate oracles: E=0 Lyapunov, decoupled block, sigma=0 N=1", 5, || {
        // (a) E = 0: no disturbance channel
        let mut p = ModelParams::table1();
        p.e = DMatrix::zeros(1, 1);
        let gh = tryv!(estimate_gamma_hat(&p, 1e-4));
        let cert = tryv!(solve_concavity(&p, GAMMA));
        let oracle = lyapunov_oracle(&p);
        let a_gap = match cert.trajectory() {
            Some(k) => k
                .values
                .iter()
                .zip(&oracle)
                .map(|(x, y)| (x - y).norm() / (1.0 + y.norm()))
                .fold(0.0, f64::max),
            None => f64::INFINITY,
        };
        let a_ok = gh.no_escape && gh.gamma_hat == 0.0 && a_gap <= 1e-10;

        // (b) decoupled limit
        let q = decoupled_params();
        let sol = tryv!(solve_leader(&q, GAMMA)).riccati;
        let oracle = single_block_oracle(&q, GAMMA);
        let p1_gap = sol.p1.values.iter().zip(&oracle).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        let zero_gap = [&sol.pi1, &sol.p2, &sol.pi2]
            .iter()
            .map(|t| t.max_norm())
            .fold(0.0, f64::max);
        let b_ok = p1_gap <= 1e-10 && zero_gap <= 1e-10;

        // (c) σ = 0, N = 1: the population is the limit system
        let mut r = ModelParams::table1();
        r.sigma = DMatrix::zeros(1, 1);
        let ls = tryv!(solve_leader(&r, GAMMA));
        let cfg = SimConfig {
            n_agents: 1,
            n_paths: 3,
            strategy: Strategy::Team,
            ..SimConfig::default()
        };
        let lim = tryv!(simulate_limit(&r, &ls.gains, &cfg));
        let pop = tryv!(simulate_population(&r, &ls.gains, None, None, &cfg));
        let mut c_gap: f64 = 0.0;
        for (l, q) in lim.paths.iter().zip(&pop.paths) {
            let xbar = q.xbar.as_ref().unwrap();
            for (a, b) in [(&l.x0, &q.x0), (&l.m, &q.m), (&l.m, xbar)] {
                for (x, y) in a.data.iter().zip(&b.data) {
                    c_gap = c_gap.max((x - y).abs());
                }
            }
        }
        let c_ok = c_gap <= 1e-9;
        (
            a_ok && b_ok && c_ok,
            format!(
                "(a) gamma_hat flag {} rel gap {a_gap:.2e}; (b) P1 gap {p1_gap:.2e}, off-blocks {zero_gap:.2e}; (c) gap {c_gap:.2e}",
                gh.no_escape
            ),
        )
    })
}

pub fn run_all(scratch: &Path) -> Vec<Verdict> {
    vec![
        c1_riccati_residuals(),
        c2_structural_identities(),
        c3_gamma_hat(),
        c4_stationarity(),
        c5_saddle_value(),
        c6_saddle_inequalities(),
        c7_incentive(),
        c8_relations(),
        c9_mean_field_rate(),
        c10_optimality_proxy(),
        c11_reproducibility(scratch),
        c12_degenerate_oracles(),
    ]
}
