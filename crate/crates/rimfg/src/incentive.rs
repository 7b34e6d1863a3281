//! The leader's incentive matrix `L(t)` and the follower-side Riccati
//! quantities.
//!
//! The CC-incentive system is a backward DAE: `Δ`, `Θ` are differential and
//! `L` is algebraic. The march solves `L` nodewise by Levenberg–Marquardt and
//! holds it constant over each RK4 step of `(Δ, Θ)`. The P-blocks are carried
//! in the same stacked state, so RK4 stages see `P` at half steps without
//! interpolation.
//!
//! The two matching conditions
//!
//! ```text
//! (R̃1 + LᵀR̃0L)⁻¹[LᵀR̃0ζ + (B̃ + H̃L)ᵀΘ] − R1⁻¹(HᵀP1 + B̃ᵀP2) = 0
//! (R̃1 + LᵀR̃0L)⁻¹[LᵀR̃0η + (B̃ + H̃L)ᵀΔ] − R1⁻¹(HᵀΠ1 + B̃ᵀΠ2) = 0
//! ```
//!
//! become affine in `L` after multiplying by `R̃1 + LᵀR̃0L`:
//!
//! ```text
//! Lᵀ(R̃0Θ11 + H̃ᵀΘ) + R̃1Θ21 + B̃ᵀΘ = 0
//! Lᵀ(R̃0Θ12 + H̃ᵀΔ) + R̃1Θ22 + B̃ᵀΔ = 0
//! ```
//!
//! Both forms have the same zero set. The least-squares solve uses the cleared
//! form because the raw residual decays like `1/|L|` and has its infimum at
//! infinity whenever no exact solution exists. The residual that is reported
//! and thresholded is always the raw one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::leader::{block_rhs, disturbance_weight, BlockRiccatiSolution, BlockTerms};
use crate::linalg::{checked_inverse, vstack};
use crate::model::{Coefficients, MatrixTrajectory, ModelParams, TimeGrid};
use crate::odeint::{rk4_step, EscapePolicy, State, StepOutcome};
use crate::{Error, Result};

/// Relative tolerance of the `Θ = Ψ`, `Δ = Σ + Φ` relations.
pub const RELATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct IncentiveOptions {
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Initial Levenberg damping.
    pub damping: f64,
    /// Hold `L` at this value instead of solving for it.
    pub fixed_l: Option<DMatrix<f64>>,
}

impl Default for IncentiveOptions {
    fn default() -> Self {
        IncentiveOptions {
            newton_tol: 1e-9,
            max_iter: 50,
            damping: 1e-3,
            fixed_l: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Node formulas

/// `P1, Π1, P2, Π2` at one node.
#[derive(Clone, Copy)]
pub struct PNode<'a> {
    pub p1: &'a DMatrix<f64>,
    pub pi1: &'a DMatrix<f64>,
    pub p2: &'a DMatrix<f64>,
    pub pi2: &'a DMatrix<f64>,
}

impl<'a> PNode<'a> {
    pub fn from_slice(y: &'a [DMatrix<f64>]) -> Self {
        PNode {
            p1: &y[0],
            pi1: &y[1],
            p2: &y[2],
            pi2: &y[3],
        }
    }

    pub fn from_solution(sol: &'a BlockRiccatiSolution, k: usize) -> Self {
        PNode {
            p1: &sol.p1.values[k],
            pi1: &sol.pi1.values[k],
            p2: &sol.p2.values[k],
            pi2: &sol.pi2.values[k],
        }
    }
}

/// Leader gains `Θ11, Θ12, Θ21, Θ22` at one node; non-invertible weights give NaN.
pub struct ThetaNode {
    pub t11: DMatrix<f64>,
    pub t12: DMatrix<f64>,
    pub t21: DMatrix<f64>,
    pub t22: DMatrix<f64>,
}

impl ThetaNode {
    pub fn new(c: &ModelParams, pn: PNode) -> Self {
        let bt = BlockTerms::new(c, pn.p1, pn.pi1, pn.p2, pn.pi2);
        ThetaNode {
            t11: -&bt.n0inv * &bt.x1,
            t12: -&bt.n0inv * &bt.x2,
            t21: -&bt.r1inv * &bt.y1,
            t22: -&bt.r1inv * &bt.y2,
        }
    }
}

/// `ζ = Θ11 − LΘ21`, `η = Θ12 − LΘ22` (equivalently the displayed formulas with
/// `R1⁻¹(HᵀP1 + B̃ᵀP2) = −Θ21`).
pub fn zeta_eta(c: &ModelParams, l: &DMatrix<f64>, pn: PNode, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt = BlockTerms::new(c, pn.p1, pn.pi1, pn.p2, pn.pi2);
    let n0inv = checked_inverse(&bt.n0, t)?;
    let r1inv = checked_inverse(&c.r1, t)?;
    let zeta = -&n0inv * &bt.x1 + l * &r1inv * &bt.y1;
    let eta = -&n0inv * &bt.x2 + l * &r1inv * &bt.y2;
    Ok((zeta, eta))
}

/// `W = (R̃1 + LᵀR̃0L)⁻¹`; `None` when not invertible.
fn follower_weight_inv(c: &ModelParams, l: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    (&c.r1t + l.transpose() * &c.r0t * l).lu().try_inverse()
}

/// The two matching conditions evaluated exactly as written (mF×n each).
pub fn matching_residual(
    c: &ModelParams,
    l: &DMatrix<f64>,
    delta: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    pn: PNode,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let th = ThetaNode::new(c, pn);
    let zeta = &th.t11 - l * &th.t21;
    let eta = &th.t12 - l * &th.t22;
    let w = follower_weight_inv(c, l).unwrap_or_else(|| c.r1t.map(|_| f64::NAN));
    let bh = &c.bt + &c.ht * l;
    let ltr = l.transpose() * &c.r0t;
    let r1 = &w * (&ltr * zeta + bh.transpose() * theta) + &th.t21;
    let r2 = &w * (&ltr * eta + bh.transpose() * delta) + &th.t22;
    (r1, r2)
}

/// Cleared (affine-in-`L`) form of the matching conditions, stacked (2mF×n).
fn cleared_residual(c: &ModelParams, th: &ThetaNode, l: &DMatrix<f64>, delta: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let lt = l.transpose();
    let c1 = lt.clone() * (&c.r0t * &th.t11 + c.ht.transpose() * theta) + &c.r1t * &th.t21 + c.bt.transpose() * theta;
    let c2 = lt * (&c.r0t * &th.t12 + c.ht.transpose() * delta) + &c.r1t * &th.t22 + c.bt.transpose() * delta;
    vstack(&[&c1, &c2])
}

/// Levenberg–Marquardt on the cleared residual from `l0`. Returns the final
/// iterate and its cleared residual norm.
fn solve_l_from(
    c: &ModelParams,
    th: &ThetaNode,
    delta: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    l0: &DMatrix<f64>,
    opts: &IncentiveOptions,
) -> (DMatrix<f64>, f64) {
    let (ml, mf) = l0.shape();
    let nvar = ml * mf;
    let res = |l: &DMatrix<f64>| -> DVector<f64> {
        let r = cleared_residual(c, th, l, delta, theta);
        DVector::from_column_slice(r.as_slice())
    };
    let mut l = l0.clone();
    let mut r = res(&l);
    let mut cost = r.norm_squared();
    let mut lambda = opts.damping;
    for _ in 0..opts.max_iter {
        // the residual is affine in L, so basis differences give the exact Jacobian
        let mut jac = DMatrix::zeros(r.len(), nvar);
        let base = res(&DMatrix::zeros(ml, mf));
        for j in 0..nvar {
            let mut e = DMatrix::zeros(ml, mf);
            e[j] = 1.0;
            jac.set_column(j, &(res(&e) - &base));
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let scale = DMatrix::from_diagonal(&jtj.diagonal().map(|d| d.max(1e-12)));
        let mut improved = false;
        for _ in 0..20 {
            let lhs = &jtj + &scale * lambda;
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &l + DMatrix::from_column_slice(ml, mf, step.as_slice());
            let rc = res(&cand);
            let cc = rc.norm_squared();
            if cc <= cost {
                let small = step.norm() <= opts.newton_tol * (1.0 + l.norm());
                l = cand;
                r = rc;
                cost = cc;
                lambda = (lambda * 0.1).max(1e-15);
                improved = true;
                if small {
                    return (l, cost.sqrt());
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || cost.sqrt() <= 1e-3 * opts.newton_tol {
            break;
        }
    }
    (l, cost.sqrt())
}

/// Terminal multistart seeds: `s·I` (rectangular identity) for s in {−2, …, 2}.
fn seeds(ml: usize, mf: usize) -> Vec<DMatrix<f64>> {
    [0.0, -2.0, -1.0, 1.0, 2.0]
        .iter()
        .map(|&s| DMatrix::identity(ml, mf) * s)
        .collect()
}

/// Nodewise least-squares `L`; `warm = None` triggers the multistart.
pub fn solve_l_node(
    c: &ModelParams,
    pn: PNode,
    delta: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
    opts: &IncentiveOptions,
) -> DMatrix<f64> {
    if let Some(l) = &opts.fixed_l {
        return l.clone();
    }
    let th = ThetaNode::new(c, pn);
    match warm {
        Some(l0) => solve_l_from(c, &th, delta, theta, l0, opts).0,
        None => {
            let runs: Vec<(DMatrix<f64>, f64)> = seeds(c.ml, c.mf)
                .par_iter()
                .map(|s| solve_l_from(c, &th, delta, theta, s, opts))
                .collect();
            // first seed wins ties, so the result does not depend on scheduling
            let mut best = 0;
            for (i, r) in runs.iter().enumerate() {
                if r.1 < runs[best].1 {
                    best = i;
                }
            }
            runs[best].0.clone()
        }
    }
}

/// Coefficients of the CC system at one node.
#[derive(Clone, Debug)]
pub struct CCNode {
    pub a1h: DMatrix<f64>,
    pub b1h: DMatrix<f64>,
    pub h1h: DMatrix<f64>,
    pub a2h: DMatrix<f64>,
    pub b2h: DMatrix<f64>,
    pub h2h: DMatrix<f64>,
    pub a3h: DMatrix<f64>,
    pub b3h: DMatrix<f64>,
    pub h3h: DMatrix<f64>,
}

impl CCNode {
    pub fn new(
        c: &ModelParams,
        gamma: f64,
        l: &DMatrix<f64>,
        zeta: &DMatrix<f64>,
        eta: &DMatrix<f64>,
        p1: &DMatrix<f64>,
        pi1: &DMatrix<f64>,
    ) -> Self {
        let w = follower_weight_inv(c, l).unwrap_or_else(|| c.r1t.map(|_| f64::NAN));
        let bh = &c.bt + &c.ht * l;
        let hb = &c.h + &c.b * l;
        let dl = &c.d * l;
        let wlr = &w * l.transpose() * &c.r0t;
        let wlr_zeta = &wlr * zeta;
        let wlr_eta = &wlr * eta;
        let sv = disturbance_weight(c, gamma);
        CCNode {
            a1h: &c.at + &c.ft + &c.ht * eta - &bh * &wlr_eta,
            b1h: &c.ht * zeta - &bh * &wlr_zeta,
            h1h: -(&bh * &w * bh.transpose()),
            a2h: &c.a + &sv * p1 + &c.b * zeta - &hb * &wlr_zeta,
            b2h: &c.f + &sv * pi1 + &c.b * eta - &hb * &wlr_eta,
            h2h: -(&hb * &w * bh.transpose()),
            a3h: &c.c + &c.d * zeta - &dl * &wlr_zeta,
            b3h: &c.d * eta - &dl * &wlr_eta,
            h3h: -(&dl * &w * bh.transpose()),
        }
    }

    /// As [`CCNode::new`] with ζ, η recomputed from `L` and the P-blocks.
    fn from_blocks(c: &ModelParams, gamma: f64, l: &DMatrix<f64>, pn: PNode) -> Self {
        let th = ThetaNode::new(c, pn);
        let zeta = &th.t11 - l * &th.t21;
        let eta = &th.t12 - l * &th.t22;
        CCNode::new(c, gamma, l, &zeta, &eta, pn.p1, pn.pi1)
    }
}

/// `(Δ̇, Θ̇)`
pub fn delta_theta_rhs(c: &ModelParams, cc: &CCNode, delta: &DMatrix<f64>, theta: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let att = c.at.transpose();
    let dd = delta * &cc.a1h + &att * delta + delta * &cc.h1h * delta + theta * (&cc.b2h + &cc.h2h * delta) + &c.qt
        - &c.qt * &c.gamma1t;
    let dt = theta * &cc.a2h + &att * theta + theta * &cc.h2h * theta + delta * (&cc.b1h + &cc.h1h * theta);
    (-dd, -dt)
}

/// `(Σ̇, Φ̇, Ψ̇)` given `Δ`, `Θ` at the same time.
pub fn sigma_phi_psi_rhs(
    c: &ModelParams,
    cc: &CCNode,
    delta: &DMatrix<f64>,
    theta: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let att = c.at.transpose();
    let ds = sigma * &c.at + &att * sigma + sigma * &cc.h1h * sigma + &c.qt;
    let dphi = phi * (&cc.a1h + &cc.h1h * delta) + &att * phi + sigma * &cc.h1h * phi + sigma * (&cc.a1h - &c.at)
        + psi * (&cc.b2h + &cc.h2h * delta)
        - &c.qt * &c.gamma1t;
    let dpsi = psi * (&cc.a2h + &cc.h2h * theta) + &att * psi + sigma * &cc.h1h * psi + sigma * &cc.b1h
        + phi * (&cc.b1h + &cc.h1h * theta);
    (-ds, -dphi, -dpsi)
}

/// Stacked rhs for `[P1, Π1, P2, Π2, Δ, Θ]` and optionally `[Σ, Φ, Ψ]`, with `L` frozen.
fn stacked_rhs(c: &ModelParams, gamma: f64, l: &DMatrix<f64>, y: &[DMatrix<f64>]) -> State {
    let mut out = block_rhs(c, gamma, &y[..4]);
    let cc = CCNode::from_blocks(c, gamma, l, PNode::from_slice(&y[..4]));
    let (dd, dt) = delta_theta_rhs(c, &cc, &y[4], &y[5]);
    out.push(dd);
    out.push(dt);
    if y.len() == 9 {
        let (ds, dphi, dpsi) = sigma_phi_psi_rhs(c, &cc, &y[4], &y[5], &y[6], &y[7], &y[8]);
        out.push(ds);
        out.push(dphi);
        out.push(dpsi);
    }
    out
}

// ---------------------------------------------------------------------------
// Solutions

#[derive(Clone, Debug)]
pub struct IncentiveMatrices {
    pub l: MatrixTrajectory,
    pub zeta: MatrixTrajectory,
    pub eta: MatrixTrajectory,
}

#[derive(Clone, Debug)]
pub struct CCCoefficients {
    pub a1h: MatrixTrajectory,
    pub b1h: MatrixTrajectory,
    pub h1h: MatrixTrajectory,
    pub a2h: MatrixTrajectory,
    pub b2h: MatrixTrajectory,
    pub h2h: MatrixTrajectory,
    pub a3h: MatrixTrajectory,
    pub b3h: MatrixTrajectory,
    pub h3h: MatrixTrajectory,
}

#[derive(Clone, Debug)]
pub struct DeltaThetaSolution {
    pub delta: MatrixTrajectory,
    pub theta: MatrixTrajectory,
    /// Per node `[‖first condition‖, ‖second condition‖]` (2×1), raw form.
    pub matching_residual: MatrixTrajectory,
    /// Per node Frobenius norm of the stacked cleared residual.
    pub cleared_residual: Vec<f64>,
    /// Per node `‖L·(raw residual)‖`: mismatch of the leader's mean control
    /// `ū0⁺ − ū0*`, which the raw residual does not see when `|L|` is large.
    pub leader_gap: Vec<f64>,
}

impl DeltaThetaSolution {
    pub fn residual_norms(&self) -> Vec<f64> {
        self.matching_residual
            .values
            .iter()
            .map(|m| m[(0, 0)].hypot(m[(1, 0)]))
            .collect()
    }

    pub fn max_matching_residual(&self) -> f64 {
        self.residual_norms().into_iter().fold(0.0, f64::max)
    }

    /// Fraction of nodes with stacked raw residual ≤ `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let r = self.residual_norms();
        r.iter().filter(|&&x| x <= tol).count() as f64 / r.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct SigmaPhiPsiSolution {
    pub sigma: MatrixTrajectory,
    pub phi: MatrixTrajectory,
    pub psi: MatrixTrajectory,
    /// `max_t ‖Θ − Ψ‖ / (1 + ‖Θ‖)`
    pub theta_psi_gap: f64,
    /// `max_t ‖Δ − (Σ + Φ)‖ / (1 + ‖Δ‖)`
    pub delta_split_gap: f64,
}

#[derive(Clone, Debug)]
pub struct FollowerGains {
    pub gx0bar: MatrixTrajectory,
    pub gmbar: MatrixTrajectory,
    pub gxi: MatrixTrajectory,
    pub gx0: MatrixTrajectory,
    pub gm: MatrixTrajectory,
}

/// Outcome of the backward march, returned whether or not matching succeeded.
#[derive(Clone, Debug)]
pub struct IncentiveSolution {
    pub dt: DeltaThetaSolution,
    pub inc: IncentiveMatrices,
}

fn max_abs(y: &[DMatrix<f64>]) -> f64 {
    y.iter().map(|m| m.norm()).fold(0.0, f64::max)
}

/// Backward march for `(Δ, Θ, L)` without the pass/fail decision.
pub fn march_cc_incentive<P: Coefficients>(
    p: &P,
    leader: &BlockRiccatiSolution,
    opts: &IncentiveOptions,
) -> Result<IncentiveSolution> {
    let grid = leader.grid();
    let gamma = leader.gamma;
    let m = grid.steps;
    let escape = EscapePolicy::default();
    let c_t = p.coeff(grid.t(m));
    let mut y: State = leader.state(m);
    y.push(&c_t.gt - &c_t.gt * &c_t.gamma2t);
    y.push(DMatrix::zeros(c_t.n, c_t.n));

    let cap = grid.len();
    let mut ls = vec![DMatrix::zeros(0, 0); cap];
    let mut deltas = vec![DMatrix::zeros(0, 0); cap];
    let mut thetas = vec![DMatrix::zeros(0, 0); cap];
    let mut prev_l: Option<DMatrix<f64>> = None;

    for k in (0..=m).rev() {
        let t = grid.t(k);
        let c = p.coeff(t);
        let pn = PNode::from_solution(leader, k);
        let l = solve_l_node(&c, pn, &y[4], &y[5], prev_l.as_ref(), opts);
        if l.iter().any(|x| !x.is_finite()) {
            return Err(Error::Value(format!("incentive matrix became non-finite at t={t}")));
        }
        ls[k] = l.clone();
        deltas[k] = y[4].clone();
        thetas[k] = y[5].clone();
        if k > 0 {
            let rhs = |ts: f64, ys: &[DMatrix<f64>]| stacked_rhs(&p.coeff(ts), gamma, &l, ys);
            match rk4_step(&rhs, t, -grid.h, &y, escape.norm_threshold)? {
                StepOutcome::Ok(mut next) => {
                    let n = max_abs(&next[4..]);
                    if !(n <= escape.norm_threshold) {
                        return Err(Error::Escape { t_escape: grid.t(k - 1), norm: n });
                    }
                    // keep the P-blocks identical to the leader solution
                    for (i, b) in leader.state(k - 1).into_iter().enumerate() {
                        next[i] = b;
                    }
                    y = next;
                }
                StepOutcome::Blowup(norm) => return Err(Error::Escape { t_escape: grid.t(k - 1), norm }),
            }
        }
        prev_l = Some(l);
    }

    let mut zetas = Vec::with_capacity(cap);
    let mut etas = Vec::with_capacity(cap);
    let mut resid = Vec::with_capacity(cap);
    let mut cleared = Vec::with_capacity(cap);
    let mut leader_gap = Vec::with_capacity(cap);
    for k in 0..cap {
        let t = grid.t(k);
        let c = p.coeff(t);
        let pn = PNode::from_solution(leader, k);
        let (z, e) = zeta_eta(&c, &ls[k], pn, t)?;
        zetas.push(z);
        etas.push(e);
        let (r1, r2) = matching_residual(&c, &ls[k], &deltas[k], &thetas[k], pn);
        leader_gap.push((&ls[k] * &r1).norm().hypot((&ls[k] * &r2).norm()));
        resid.push(DMatrix::from_column_slice(2, 1, &[r1.norm(), r2.norm()]));
        let th = ThetaNode::new(&c, pn);
        cleared.push(cleared_residual(&c, &th, &ls[k], &deltas[k], &thetas[k]).norm());
    }

    let tr = |values| MatrixTrajectory { grid, values };
    Ok(IncentiveSolution {
        dt: DeltaThetaSolution {
            delta: tr(deltas),
            theta: tr(thetas),
            matching_residual: tr(resid),
            cleared_residual: cleared,
            leader_gap,
        },
        inc: IncentiveMatrices {
            l: tr(ls),
            zeta: tr(zetas),
            eta: tr(etas),
        },
    })
}

/// Solve the CC-incentive system. Fails with `NoIncentiveSolution` (carrying
/// the partial solution) when the raw matching residual exceeds
/// `100·newton_tol` at any node.
pub fn solve_cc_incentive(
    p: &ModelParams,
    leader: &BlockRiccatiSolution,
    opts: &IncentiveOptions,
) -> Result<(DeltaThetaSolution, IncentiveMatrices)> {
    let sol = march_cc_incentive(p, leader, opts)?;
    let threshold = 100.0 * opts.newton_tol;
    let norms = sol.dt.residual_norms();
    if let Some(k) = norms.iter().position(|&r| !(r <= threshold)) {
        let max_residual = norms.iter().copied().fold(0.0, f64::max);
        return Err(Error::NoIncentiveSolution {
            max_residual,
            threshold,
            t_first: leader.grid().t(k),
            partial: Box::new((sol.dt, sol.inc)),
        });
    }
    Ok((sol.dt, sol.inc))
}

/// Nodewise CC coefficients from the stored `L`, `ζ`, `η`.
pub fn cc_coefficients(p: &ModelParams, leader: &BlockRiccatiSolution, inc: &IncentiveMatrices) -> CCCoefficients {
    let grid = leader.grid();
    let nodes: Vec<CCNode> = (0..grid.len())
        .map(|k| {
            CCNode::new(
                &p.coeff(grid.t(k)),
                leader.gamma,
                &inc.l.values[k],
                &inc.zeta.values[k],
                &inc.eta.values[k],
                &leader.p1.values[k],
                &leader.pi1.values[k],
            )
        })
        .collect();
    let tr = |f: fn(&CCNode) -> &DMatrix<f64>| MatrixTrajectory {
        grid,
        values: nodes.iter().map(|n| f(n).clone()).collect(),
    };
    CCCoefficients {
        a1h: tr(|n| &n.a1h),
        b1h: tr(|n| &n.b1h),
        h1h: tr(|n| &n.h1h),
        a2h: tr(|n| &n.a2h),
        b2h: tr(|n| &n.b2h),
        h2h: tr(|n| &n.h2h),
        a3h: tr(|n| &n.a3h),
        b3h: tr(|n| &n.b3h),
        h3h: tr(|n| &n.h3h),
    }
}

/// Backward RK4 of the Σ/Φ/Ψ equations, carried jointly with `P`, `Δ`, `Θ`
/// under the stored `L`, then checked against `Θ = Ψ` and `Δ = Σ + Φ`.
pub fn solve_sigma_phi_psi(
    p: &ModelParams,
    leader: &BlockRiccatiSolution,
    dt: &DeltaThetaSolution,
    inc: &IncentiveMatrices,
) -> Result<SigmaPhiPsiSolution> {
    let grid = leader.grid();
    check_grid(&grid, &[&dt.delta, &dt.theta, &inc.l])?;
    let gamma = leader.gamma;
    let m = grid.steps;
    let escape = EscapePolicy::default();
    let c_t = p.coeff(grid.t(m));
    let mut y: State = leader.state(m);
    y.push(dt.delta.values[m].clone());
    y.push(dt.theta.values[m].clone());
    y.push(c_t.gt.clone());
    y.push(-(&c_t.gt * &c_t.gamma2t));
    y.push(DMatrix::zeros(c_t.n, c_t.n));

    let cap = grid.len();
    let mut out: [Vec<DMatrix<f64>>; 3] = Default::default();
    for v in out.iter_mut() {
        v.resize(cap, DMatrix::zeros(0, 0));
    }
    for k in (0..=m).rev() {
        for (i, v) in out.iter_mut().enumerate() {
            v[k] = y[6 + i].clone();
        }
        if k == 0 {
            break;
        }
        let t = grid.t(k);
        let l = &inc.l.values[k];
        let rhs = |ts: f64, ys: &[DMatrix<f64>]| stacked_rhs(&p.coeff(ts), gamma, l, ys);
        match rk4_step(&rhs, t, -grid.h, &y, escape.norm_threshold)? {
            StepOutcome::Ok(mut next) => {
                let n = max_abs(&next[6..]);
                if !(n <= escape.norm_threshold) {
                    return Err(Error::Escape { t_escape: grid.t(k - 1), norm: n });
                }
                for (i, b) in leader.state(k - 1).into_iter().enumerate() {
                    next[i] = b;
                }
                // Δ, Θ follow the stored solution so the relations compare like with like
                next[4] = dt.delta.values[k - 1].clone();
                next[5] = dt.theta.values[k - 1].clone();
                y = next;
            }
            StepOutcome::Blowup(norm) => return Err(Error::Escape { t_escape: grid.t(k - 1), norm }),
        }
    }
    let [sigma, phi, psi] = out;
    let tr = |values| MatrixTrajectory { grid, values };
    let (sigma, phi, psi) = (tr(sigma), tr(phi), tr(psi));

    let mut theta_psi_gap: f64 = 0.0;
    let mut delta_split_gap: f64 = 0.0;
    for k in 0..cap {
        let th = &dt.theta.values[k];
        let de = &dt.delta.values[k];
        let g1 = (th - &psi.values[k]).norm() / (1.0 + th.norm());
        let g2 = (de - &sigma.values[k] - &phi.values[k]).norm() / (1.0 + de.norm());
        if g1 > RELATION_TOL {
            return Err(Error::RelationViolated { what: "Theta = Psi".into(), t: grid.t(k), gap: g1 });
        }
        if g2 > RELATION_TOL {
            return Err(Error::RelationViolated { what: "Delta = Sigma + Phi".into(), t: grid.t(k), gap: g2 });
        }
        theta_psi_gap = theta_psi_gap.max(g1);
        delta_split_gap = delta_split_gap.max(g2);
    }
    Ok(SigmaPhiPsiSolution {
        sigma,
        phi,
        psi,
        theta_psi_gap,
        delta_split_gap,
    })
}

fn check_grid(grid: &TimeGrid, trs: &[&MatrixTrajectory]) -> Result<()> {
    if trs.iter().any(|t| t.grid != *grid || t.values.len() != grid.len()) {
        return Err(Error::GridMismatch("inputs are not on the leader grid".into()));
    }
    Ok(())
}

/// Feedback gains of the mean follower control `ū1⁺` in `(x0, m)` and of the
/// individual control `u1i⁺` in `(xi, x0, m)`.
pub fn follower_gains(
    p: &ModelParams,
    dt: &DeltaThetaSolution,
    spp: &SigmaPhiPsiSolution,
    inc: &IncentiveMatrices,
) -> Result<FollowerGains> {
    let grid = inc.l.grid;
    check_grid(&grid, &[&dt.delta, &dt.theta, &spp.sigma, &spp.phi, &spp.psi])?;
    let mut g: [Vec<DMatrix<f64>>; 5] = Default::default();
    for k in 0..grid.len() {
        let t = grid.t(k);
        let c = p.coeff(t);
        let l = &inc.l.values[k];
        let w = checked_inverse(&(&c.r1t + l.transpose() * &c.r0t * l), t)?;
        let bht = (&c.bt + &c.ht * l).transpose();
        let ltr = l.transpose() * &c.r0t;
        let lz = &ltr * &inc.zeta.values[k];
        let le = &ltr * &inc.eta.values[k];
        g[0].push(-&w * (&lz + &bht * &dt.theta.values[k]));
        g[1].push(-&w * (&le + &bht * &dt.delta.values[k]));
        g[2].push(-&w * &bht * &spp.sigma.values[k]);
        g[3].push(-&w * (&lz + &bht * &spp.psi.values[k]));
        g[4].push(-&w * (&le + &bht * &spp.phi.values[k]));
    }
    let [a, b, c, d, e] = g;
    let tr = |values| MatrixTrajectory { grid, values };
    Ok(FollowerGains {
        gx0bar: tr(a),
        gmbar: tr(b),
        gxi: tr(c),
        gx0: tr(d),
        gm: tr(e),
    })
}

/// Full follower-side pipeline on top of a leader solution. Matching failures
/// are reported, not fatal: the least-squares `L` is still used downstream.
#[derive(Clone, Debug)]
pub struct FollowerSide {
    pub dt: DeltaThetaSolution,
    pub inc: IncentiveMatrices,
    pub spp: SigmaPhiPsiSolution,
    pub gains: FollowerGains,
    /// `None` if matching succeeded, otherwise the `NoIncentiveSolution` message.
    pub matching_failure: Option<String>,
}

pub fn solve_follower_side(p: &ModelParams, leader: &BlockRiccatiSolution, opts: &IncentiveOptions) -> Result<FollowerSide> {
    let (dt, inc, matching_failure) = match solve_cc_incentive(p, leader, opts) {
        Ok((dt, inc)) => (dt, inc, None),
        Err(e @ Error::NoIncentiveSolution { .. }) => {
            let msg = e.to_string();
            let Error::NoIncentiveSolution { partial, .. } = e else { unreachable!() };
            let (dt, inc) = *partial;
            (dt, inc, Some(msg))
        }
        Err(e) => return Err(e),
    };
    let spp = solve_sigma_phi_psi(p, leader, &dt, &inc)?;
    let gains = follower_gains(p, &dt, &spp, &inc)?;
    Ok(FollowerSide {
        dt,
        inc,
        spp,
        gains,
        matching_failure,
    })
}
