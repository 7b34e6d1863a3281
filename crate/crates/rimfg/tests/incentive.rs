use nalgebra::DMatrix;
use rimfg::incentive::{
    delta_theta_rhs, march_cc_incentive, matching_residual, solve_cc_incentive, solve_follower_side, zeta_eta,
    CCNode, IncentiveOptions, PNode,
};
use rimfg::leader::{block_rhs, block_terminal, solve_block_riccati, solve_leader};
use rimfg::odeint::{residual, Direction, OdeProblem};
use rimfg::{Error, ModelParams};

const GAMMA: f64 = 5.0;

fn s(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn fixed(l: f64) -> IncentiveOptions {
    IncentiveOptions {
        fixed_l: Some(s(l)),
        ..IncentiveOptions::default()
    }
}

/// Table 1 leader gains at `t = T`, by hand from `P1 = 1`, `Π1 = P2 = −0.01`, `Π2 = 1e-4`.
fn terminal_thetas() -> [f64; 4] {
    let n0 = 0.6 + 0.25;
    let t11 = -(0.5 * 1.0 + 0.2 * -0.01 + 0.5 * 1.0 * 1.0) / n0;
    let t12 = -(0.5 * -0.01 + 0.2 * 1e-4) / n0;
    let t21 = -(0.7 * 1.0 + 0.5 * -0.01) / 0.5;
    let t22 = -(0.7 * -0.01 + 0.5 * 1e-4) / 0.5;
    [t11, t12, t21, t22]
}

#[test]
fn zero_incentive_reproduces_leader_gains() {
    let p = ModelParams::table1();
    let ls = solve_leader(&p, GAMMA).unwrap();
    let grid = p.grid();
    for k in (0..grid.len()).step_by(37) {
        let pn = PNode::from_solution(&ls.riccati, k);
        let (z, e) = zeta_eta(&p, &s(0.0), pn, grid.t(k)).unwrap();
        assert!((&z - &ls.gains.theta11.values[k]).norm() <= 1e-14 * (1.0 + z.norm()));
        assert!((&e - &ls.gains.theta12.values[k]).norm() <= 1e-14 * (1.0 + e.norm()));
    }
}

#[test]
fn terminal_zeta_with_unit_incentive() {
    let p = ModelParams::table1();
    let term = block_terminal(&p);
    let (z, _) = zeta_eta(&p, &s(1.0), PNode::from_slice(&term), 10.0).unwrap();
    let hand: f64 = -(0.5 - 0.002 + 0.5) / 0.85 + 2.0 * 0.695;
    assert!((hand - 0.21588).abs() < 1e-5);
    assert!((z[(0, 0)] - hand).abs() < 1e-14);
}

#[test]
fn residual_vanishes_at_an_exact_root() {
    // Γ2 = 0 makes Π1, P2, Π2 vanish at T, so the second condition is void
    // and the first has the root L = −R̃1Θ21 / (R̃0Θ11).
    let mut p = ModelParams::table1();
    p.gamma2 = s(0.0);
    let term = block_terminal(&p);
    let pn = PNode::from_slice(&term);
    let t11 = -(0.5 + 0.5) / 0.85;
    let t21 = -0.7 / 0.5;
    let root = -0.6 * t21 / (0.15 * t11);
    let zero = s(0.0);
    let (r1, r2) = matching_residual(&p, &s(root), &zero, &zero, pn);
    assert!(r1.norm() < 1e-14 && r2.norm() < 1e-14, "{r1} {r2}");
    let (q1, _) = matching_residual(&p, &s(root + 0.1), &zero, &zero, pn);
    assert!(q1.norm() > 1e-4);
}

#[test]
fn table1_has_no_exact_incentive_and_terminal_l_is_least_squares() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let err = solve_cc_incentive(&p, &sol, &IncentiveOptions::default()).unwrap_err();
    let Error::NoIncentiveSolution { max_residual, threshold, partial, .. } = err else {
        panic!("expected NoIncentiveSolution");
    };
    assert!(max_residual > threshold);

    // Δ(T) = G̃ − G̃Γ̃2 = 0 and Θ(T) = 0, so the cleared conditions are
    // L R̃0 Θ1j + R̃1 Θ2j = 0 for j = 1, 2 with least-squares solution below.
    let [t11, t12, t21, t22] = terminal_thetas();
    let l_ls = -0.6 * (t11 * t21 + t12 * t22) / (0.15 * (t11 * t11 + t12 * t12));
    let (dt, inc) = *partial;
    assert_eq!(dt.delta.last()[(0, 0)], 0.0);
    assert_eq!(dt.theta.last()[(0, 0)], 0.0);
    let l_t = inc.l.last()[(0, 0)];
    assert!((l_t - l_ls).abs() < 1e-7, "L(T) {l_t} vs {l_ls}");
    assert!((l_t + 4.7356).abs() < 1e-3);
}

#[test]
fn zero_incentive_without_coupling_cannot_match() {
    let mut p = ModelParams::table1();
    p.ht = s(0.0);
    p.d = s(0.0);
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let err = solve_cc_incentive(&p, &sol, &fixed(0.0)).unwrap_err();
    assert_eq!(err.kind(), "NoIncentiveSolution");
    // at T the first condition reduces to R1⁻¹(HᵀP1 + B̃ᵀP2) = 1.39 ≠ 0
    if let Error::NoIncentiveSolution { t_first, max_residual, .. } = err {
        assert_eq!(t_first, 0.0);
        assert!(max_residual >= 1.39 - 1e-12);
    }
}

#[test]
fn no_follower_state_cost_gives_zero_sigma() {
    let mut p = ModelParams::table1();
    p.qt = s(0.0);
    p.gt = s(0.0);
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let fs = solve_follower_side(&p, &sol, &IncentiveOptions::default()).unwrap();
    assert_eq!(fs.spp.sigma.max_norm(), 0.0);
    assert_eq!(fs.spp.psi.last()[(0, 0)], 0.0);
    assert_eq!(fs.dt.theta.last()[(0, 0)], 0.0);
}

#[test]
fn follower_relations_and_gain_identities_on_table1() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let fs = solve_follower_side(&p, &sol, &IncentiveOptions::default()).unwrap();
    assert!(fs.matching_failure.is_some());
    assert!(fs.spp.theta_psi_gap <= 1e-6, "{}", fs.spp.theta_psi_gap);
    assert!(fs.spp.delta_split_gap <= 1e-6, "{}", fs.spp.delta_split_gap);
    let g = &fs.gains;
    for k in 0..p.grid().len() {
        let a = &g.gmbar.values[k];
        let b = &g.gxi.values[k] + &g.gm.values[k];
        assert!((a - &b).norm() <= 1e-8 * (1.0 + a.norm()));
        let c = &g.gx0bar.values[k];
        assert!((c - &g.gx0.values[k]).norm() <= 1e-8 * (1.0 + c.norm()));
    }
}

#[test]
fn zero_incentive_gain_reduces_to_plain_feedback() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let fs = solve_follower_side(&p, &sol, &fixed(0.0)).unwrap();
    for k in 0..p.grid().len() {
        let expect = -p.bt[(0, 0)] * fs.dt.theta.values[k][(0, 0)] / p.r1t[(0, 0)];
        let got = fs.gains.gx0bar.values[k][(0, 0)];
        assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        assert!((&fs.inc.zeta.values[k] - &sol_theta11(&p, &sol, k)).norm() <= 1e-12);
    }
}

fn sol_theta11(p: &ModelParams, sol: &rimfg::leader::BlockRiccatiSolution, k: usize) -> DMatrix<f64> {
    let pn = PNode::from_solution(sol, k);
    rimfg::incentive::ThetaNode::new(p, pn).t11
}

#[test]
fn delta_theta_satisfy_their_equations_under_constant_incentive() {
    let p = ModelParams::table1();
    let sol = solve_block_riccati(&p, GAMMA).unwrap();
    let l = s(0.5);
    let inc = march_cc_incentive(&p, &sol, &fixed(0.5)).unwrap();
    let mut terminal = block_terminal(&p);
    terminal.push(inc.dt.delta.last().clone());
    terminal.push(inc.dt.theta.last().clone());
    let prob = OdeProblem::new(terminal, Direction::Backward, |_, y| {
        let mut out = block_rhs(&p, GAMMA, &y[..4]);
        let pn = PNode::from_slice(&y[..4]);
        let (z, e) = zeta_eta(&p, &l, pn, 0.0).unwrap();
        let cc = CCNode::new(&p, GAMMA, &l, &z, &e, &y[0], &y[1]);
        let (dd, dt) = delta_theta_rhs(&p, &cc, &y[4], &y[5]);
        out.push(dd);
        out.push(dt);
        out
    });
    let mut tr: Vec<_> = sol.blocks().into_iter().cloned().collect();
    tr.push(inc.dt.delta.clone());
    tr.push(inc.dt.theta.clone());
    let r = residual(&tr, &prob).unwrap();
    assert!(r <= 1e-5, "Δ/Θ residual {r}");
}
