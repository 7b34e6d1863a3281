//! The leader's limiting zero-sum problem: the concavity Riccati equation for
//! `K`, the critical attenuation level, the coupled block Riccati system for
//! `P = [[P1, Π1], [P2, Π2]]`, the saddle-point feedback gains and the value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::linalg::{block2, block_diag, inverse_with_cond, symmetrize, vstack, MAX_COND};
use crate::model::{Coefficients, MatrixTrajectory, ModelParams, TimeGrid};
use crate::odeint::{integrate, Direction, EscapePolicy, EscapeRecord, Integration, OdeProblem, State};
use crate::{Error, Result};

/// Tolerance for the `Π1ᵀ = P2` coupling, relative to `1 + ‖P2‖`.
pub const TRANSPOSE_TOL: f64 = 1e-8;

/// γ values explored by the bisection stay within `[GAMMA_FLOOR, GAMMA_CAP]`.
pub const GAMMA_FLOOR: f64 = 1e-6;
pub const GAMMA_CAP: f64 = 1e6;

// ---------------------------------------------------------------------------
// Concavity certificate

#[derive(Clone, Debug)]
pub enum KOutcome {
    Solved(MatrixTrajectory),
    Escaped(EscapeRecord),
}

#[derive(Clone, Debug)]
pub struct ConcavityCertificate {
    pub gamma: f64,
    pub k: KOutcome,
}

impl ConcavityCertificate {
    pub fn is_solvable(&self) -> bool {
        matches!(self.k, KOutcome::Solved(_))
    }

    pub fn trajectory(&self) -> Option<&MatrixTrajectory> {
        match &self.k {
            KOutcome::Solved(k) => Some(k),
            KOutcome::Escaped(_) => None,
        }
    }

    pub fn escape(&self) -> Option<EscapeRecord> {
        match self.k {
            KOutcome::Solved(_) => None,
            KOutcome::Escaped(e) => Some(e),
        }
    }
}

/// `K̇ + KA + AᵀK + CᵀKC + Q + γ⁻² K E R2⁻¹ Eᵀ K = 0`, `K(T) = G`, with a
/// symmetrizing projection after every step.
pub fn concavity_problem<'a, P: Coefficients>(p: &'a P, gamma: f64) -> OdeProblem<'a> {
    let g = p.coeff(p.coeff(0.0).t_final).g.clone();
    OdeProblem::new(vec![g], Direction::Backward, move |t, y| {
        let c = p.coeff(t);
        let k = &y[0];
        let r2inv = c.r2.clone().lu().try_inverse().unwrap_or_else(|| c.r2.map(|_| f64::NAN));
        let sv = &c.e * r2inv * c.e.transpose() / (gamma * gamma);
        let rhs = k * &c.a + c.a.transpose() * k + c.c.transpose() * k * &c.c + &c.q + k * sv * k;
        vec![-rhs]
    })
    .with_projection(|y| y[0] = symmetrize(&y[0]))
}

/// Backward RK4 of the concavity equation on the parameter grid.
pub fn solve_concavity(p: &ModelParams, gamma: f64) -> Result<ConcavityCertificate> {
    solve_concavity_with(p, gamma, EscapePolicy::default())
}

pub fn solve_concavity_with(p: &ModelParams, gamma: f64, escape: EscapePolicy) -> Result<ConcavityCertificate> {
    if !(gamma > 0.0) {
        return Err(Error::Value(format!("gamma must be positive, got {gamma}")));
    }
    let prob = concavity_problem(p, gamma);
    let k = match integrate(&prob, &p.grid(), escape)? {
        Integration::Completed(mut tr) => KOutcome::Solved(tr.remove(0)),
        Integration::Escaped(e) => KOutcome::Escaped(e),
    };
    Ok(ConcavityCertificate { gamma, k })
}

// ---------------------------------------------------------------------------
// Critical level γ̂

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaTrial {
    pub gamma: f64,
    pub solvable: bool,
    pub t_escape: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GammaHat {
    pub gamma_hat: f64,
    /// `(lo, hi)` with `lo` escaped and `hi` solvable; `lo = 0` when no escape was found.
    pub bracket: (f64, f64),
    pub trace: Vec<GammaTrial>,
    /// The concavity equation was solvable down to the γ floor; `gamma_hat` is reported as 0.
    pub no_escape: bool,
}

/// Interior points evaluated per bisection round; they run concurrently and
/// are reduced in index order, so the trace does not depend on scheduling.
const SECTIONS: usize = 4;

fn trial(p: &ModelParams, gamma: f64) -> Result<GammaTrial> {
    let cert = solve_concavity(p, gamma)?;
    Ok(GammaTrial {
        gamma,
        solvable: cert.is_solvable(),
        t_escape: cert.escape().map(|e| e.t_escape),
    })
}

/// Bracket the infimum of γ for which the concavity equation has no finite escape.
///
/// Starting at γ = 1, doubles until solvable or halves until escaped, then
/// shrinks the bracket by concurrent multisection until `hi − lo ≤ tol`.
pub fn estimate_gamma_hat(p: &ModelParams, bracket_tol: f64) -> Result<GammaHat> {
    if !(bracket_tol > 0.0) {
        return Err(Error::Value("bracket_tol must be positive".into()));
    }
    let mut trace = Vec::new();
    let first = trial(p, 1.0)?;
    trace.push(first);
    let (mut lo, mut hi);
    if first.solvable {
        hi = 1.0;
        loop {
            let g = hi / 2.0;
            if g < GAMMA_FLOOR {
                return Ok(GammaHat {
                    gamma_hat: 0.0,
                    bracket: (0.0, hi),
                    trace,
                    no_escape: true,
                });
            }
            let tr = trial(p, g)?;
            trace.push(tr);
            if tr.solvable {
                hi = g;
            } else {
                lo = g;
                break;
            }
        }
    } else {
        lo = 1.0;
        loop {
            let g = lo * 2.0;
            if g > GAMMA_CAP {
                return Err(Error::NotSolvableAtCap { cap: GAMMA_CAP });
            }
            let tr = trial(p, g)?;
            trace.push(tr);
            if tr.solvable {
                hi = g;
                break;
            }
            lo = g;
        }
    }
    while hi - lo > bracket_tol {
        let w = (hi - lo) / SECTIONS as f64;
        let gammas: Vec<f64> = (1..SECTIONS).map(|i| lo + w * i as f64).collect();
        let trials = gammas
            .par_iter()
            .map(|&g| trial(p, g))
            .collect::<Result<Vec<_>>>()?;
        let (mut new_lo, mut new_hi) = (lo, hi);
        for tr in &trials {
            if tr.solvable {
                new_hi = new_hi.min(tr.gamma);
            } else {
                new_lo = new_lo.max(tr.gamma);
            }
        }
        trace.extend(trials);
        if new_lo >= new_hi {
            // non-monotone solvability; keep the tightest consistent bracket
            new_lo = trace
                .iter()
                .filter(|t| !t.solvable && t.gamma < new_hi)
                .map(|t| t.gamma)
                .fold(lo, f64::max);
        }
        lo = new_lo;
        hi = new_hi;
    }
    Ok(GammaHat {
        gamma_hat: 0.5 * (lo + hi),
        bracket: (lo, hi),
        trace,
        no_escape: false,
    })
}

// ---------------------------------------------------------------------------
// Block Riccati system

/// Node quantities shared by the block equations and the gains.
pub struct BlockTerms {
    /// `R0 + Dᵀ P1 D` and its inverse.
    pub n0: DMatrix<f64>,
    pub n0inv: DMatrix<f64>,
    pub r1inv: DMatrix<f64>,
    /// `Bᵀ P1 + H̃ᵀ P2 + Dᵀ P1 C`
    pub x1: DMatrix<f64>,
    /// `Bᵀ Π1 + H̃ᵀ Π2`
    pub x2: DMatrix<f64>,
    /// `Hᵀ P1 + B̃ᵀ P2`
    pub y1: DMatrix<f64>,
    /// `Hᵀ Π1 + B̃ᵀ Π2`
    pub y2: DMatrix<f64>,
}

fn nan_like(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|_| f64::NAN)
}

impl BlockTerms {
    pub fn new(c: &ModelParams, p1: &DMatrix<f64>, pi1: &DMatrix<f64>, p2: &DMatrix<f64>, pi2: &DMatrix<f64>) -> Self {
        let n0 = &c.r0 + c.d.transpose() * p1 * &c.d;
        let n0inv = n0.clone().lu().try_inverse().unwrap_or_else(|| nan_like(&n0));
        let r1inv = c.r1.clone().lu().try_inverse().unwrap_or_else(|| nan_like(&c.r1));
        BlockTerms {
            x1: c.b.transpose() * p1 + c.ht.transpose() * p2 + c.d.transpose() * p1 * &c.c,
            x2: c.b.transpose() * pi1 + c.ht.transpose() * pi2,
            y1: c.h.transpose() * p1 + c.bt.transpose() * p2,
            y2: c.h.transpose() * pi1 + c.bt.transpose() * pi2,
            n0,
            n0inv,
            r1inv,
        }
    }
}

/// `γ⁻² E R2⁻¹ Eᵀ`
pub fn disturbance_weight(c: &ModelParams, gamma: f64) -> DMatrix<f64> {
    let r2inv = c.r2.clone().lu().try_inverse().unwrap_or_else(|| nan_like(&c.r2));
    &c.e * r2inv * c.e.transpose() / (gamma * gamma)
}

/// Time derivatives of `(P1, Π1, P2, Π2)` from the four coupled equations.
pub fn block_rhs(c: &ModelParams, gamma: f64, y: &[DMatrix<f64>]) -> State {
    let (p1, pi1, p2, pi2) = (&y[0], &y[1], &y[2], &y[3]);
    let bt = BlockTerms::new(c, p1, pi1, p2, pi2);
    let sv = disturbance_weight(c, gamma);
    let af = &c.at + &c.ft;
    let z1 = p1 * &c.b + pi1 * &c.ht + c.c.transpose() * p1 * &c.d;
    let z2 = p1 * &c.h + pi1 * &c.bt;
    let w1 = p2 * &c.b + pi2 * &c.ht;
    let w2 = p2 * &c.h + pi2 * &c.bt;
    let (a, f, q, g1) = (&c.a, &c.f, &c.q, &c.gamma1);

    let dp1 = p1 * a + a.transpose() * p1 + c.c.transpose() * p1 * &c.c + q + p1 * &sv * p1
        - &z1 * &bt.n0inv * &bt.x1
        - &z2 * &bt.r1inv * &bt.y1;
    let dpi1 = pi1 * &af + a.transpose() * pi1 + p1 * f - q * g1 + p1 * &sv * pi1
        - &z1 * &bt.n0inv * &bt.x2
        - &z2 * &bt.r1inv * &bt.y2;
    let dp2 = p2 * a + af.transpose() * p2 + f.transpose() * p1 - g1.transpose() * q + p2 * &sv * p1
        - &w1 * &bt.n0inv * &bt.x1
        - &w2 * &bt.r1inv * &bt.y1;
    let dpi2 = pi2 * &af + af.transpose() * pi2 + p2 * f + f.transpose() * pi1 + g1.transpose() * q * g1
        + p2 * &sv * pi1
        - &w1 * &bt.n0inv * &bt.x2
        - &w2 * &bt.r1inv * &bt.y2;
    vec![-dp1, -dpi1, -dp2, -dpi2]
}

/// Terminal data `P1 = G`, `Π1 = −GΓ2`, `P2 = −Γ2ᵀG`, `Π2 = Γ2ᵀGΓ2`.
pub fn block_terminal(c: &ModelParams) -> State {
    vec![
        c.g.clone(),
        -(&c.g * &c.gamma2),
        -(c.gamma2.transpose() * &c.g),
        c.gamma2.transpose() * &c.g * &c.gamma2,
    ]
}

pub fn block_problem<'a, P: Coefficients>(p: &'a P, gamma: f64) -> OdeProblem<'a> {
    let terminal = block_terminal(&p.coeff(p.coeff(0.0).t_final));
    OdeProblem::new(terminal, Direction::Backward, move |t, y| block_rhs(&p.coeff(t), gamma, y))
}

/// Matrices of the assembled `2n` Riccati equation.
pub struct Assembled {
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub cbar: DMatrix<f64>,
    pub dbar: DMatrix<f64>,
    pub qbar: DMatrix<f64>,
    pub rbar: DMatrix<f64>,
    pub gbar: DMatrix<f64>,
    pub ebar: DMatrix<f64>,
}

impl Assembled {
    pub fn new(c: &ModelParams) -> Self {
        let n = c.n;
        let z = DMatrix::zeros(n, n);
        let qg1 = &c.q * &c.gamma1;
        let gg2 = &c.g * &c.gamma2;
        Assembled {
            abar: block2(&c.a, &c.f, &z, &(&c.at + &c.ft)),
            bbar: block2(&c.b, &c.h, &c.ht, &c.bt),
            cbar: block_diag(&c.c, &z),
            dbar: block_diag(&c.d, &DMatrix::zeros(n, c.mf)),
            qbar: block2(&c.q, &-&qg1, &-qg1.transpose(), &(c.gamma1.transpose() * &qg1)),
            rbar: block_diag(&c.r0, &c.r1),
            gbar: block2(&c.g, &-&gg2, &-gg2.transpose(), &(c.gamma2.transpose() * &gg2)),
            ebar: vstack(&[&c.e, &DMatrix::zeros(n, c.nv)]),
        }
    }
}

/// Right-hand side of the assembled `2n` equation
/// `Ṗ + PĀ + ĀᵀP + C̄ᵀPC̄ + Q̄ + γ⁻²PĒR2⁻¹ĒᵀP − (PB̄ + C̄ᵀPD̄)(R̄ + D̄ᵀPD̄)⁻¹(B̄ᵀP + D̄ᵀPC̄) = 0`.
pub fn assembled_rhs(c: &ModelParams, m: &Assembled, gamma: f64, p: &DMatrix<f64>) -> DMatrix<f64> {
    let r2inv = c.r2.clone().lu().try_inverse().unwrap_or_else(|| nan_like(&c.r2));
    let sv = &m.ebar * r2inv * m.ebar.transpose() / (gamma * gamma);
    let nr = &m.rbar + m.dbar.transpose() * p * &m.dbar;
    let nrinv = nr.clone().lu().try_inverse().unwrap_or_else(|| nan_like(&nr));
    let left = p * &m.bbar + m.cbar.transpose() * p * &m.dbar;
    let right = m.bbar.transpose() * p + m.dbar.transpose() * p * &m.cbar;
    let r = p * &m.abar + m.abar.transpose() * p + m.cbar.transpose() * p * &m.cbar + &m.qbar + p * sv * p
        - left * nrinv * right;
    -r
}

pub fn assembled_problem<'a, P: Coefficients>(p: &'a P, gamma: f64) -> OdeProblem<'a> {
    let gbar = Assembled::new(&p.coeff(p.coeff(0.0).t_final)).gbar;
    OdeProblem::new(vec![gbar], Direction::Backward, move |t, y| {
        let c = p.coeff(t);
        vec![assembled_rhs(&c, &Assembled::new(&c), gamma, &y[0])]
    })
}

#[derive(Clone, Debug)]
pub struct BlockRiccatiSolution {
    pub gamma: f64,
    pub p1: MatrixTrajectory,
    pub pi1: MatrixTrajectory,
    pub p2: MatrixTrajectory,
    pub pi2: MatrixTrajectory,
    /// `[[P1, Π1], [P2, Π2]]` assembled from the blocks.
    pub p: MatrixTrajectory,
    /// Independent integration of the assembled `2n` equation.
    pub p_assembled: MatrixTrajectory,
    /// Condition number of `R0 + Dᵀ P1 D` at each node.
    pub gain_condition: Vec<f64>,
    /// `max_t ‖Π1ᵀ − P2‖ / (1 + ‖P2‖)`
    pub transpose_gap: f64,
    /// `max_t ‖P_blocks − P_assembled‖`
    pub assembled_gap: f64,
}

impl BlockRiccatiSolution {
    pub fn grid(&self) -> TimeGrid {
        self.p1.grid
    }

    pub fn blocks(&self) -> [&MatrixTrajectory; 4] {
        [&self.p1, &self.pi1, &self.p2, &self.pi2]
    }

    pub fn state(&self, k: usize) -> State {
        self.blocks().iter().map(|b| b.values[k].clone()).collect()
    }

    pub fn max_symmetry_defect_pi2(&self) -> f64 {
        self.pi2
            .values
            .iter()
            .map(|m| (m - m.transpose()).norm())
            .fold(0.0, f64::max)
    }
}

/// Backward RK4 of the four coupled block equations, assembled afterwards and
/// cross-checked against an integration of the `2n` form.
pub fn solve_block_riccati(p: &ModelParams, gamma: f64) -> Result<BlockRiccatiSolution> {
    let grid = p.grid();
    let blocks = integrate(&block_problem(p, gamma), &grid, EscapePolicy::default())?.completed()?;
    let mut it = blocks.into_iter();
    let (p1, pi1, p2, pi2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());

    let mut gain_condition = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let n0 = &p.r0 + p.d.transpose() * &p1.values[k] * &p.d;
        let cond = inverse_with_cond(&n0).map_or(f64::INFINITY, |(_, c)| c);
        if !(cond <= MAX_COND) {
            return Err(Error::SingularGain { t: grid.t(k), cond });
        }
        gain_condition.push(cond);
    }

    let pfull = MatrixTrajectory {
        grid,
        values: (0..grid.len())
            .map(|k| block2(&p1.values[k], &pi1.values[k], &p2.values[k], &pi2.values[k]))
            .collect(),
    };
    let p_assembled = integrate(&assembled_problem(p, gamma), &grid, EscapePolicy::default())?
        .completed()?
        .remove(0);

    let transpose_gap = (0..grid.len())
        .map(|k| (pi1.values[k].transpose() - &p2.values[k]).norm() / (1.0 + p2.values[k].norm()))
        .fold(0.0, f64::max);
    let assembled_gap = pfull.max_distance(&p_assembled);

    Ok(BlockRiccatiSolution {
        gamma,
        p1,
        pi1,
        p2,
        pi2,
        p: pfull,
        p_assembled,
        gain_condition,
        transpose_gap,
        assembled_gap,
    })
}

// ---------------------------------------------------------------------------
// Gains and value

#[derive(Clone, Debug)]
pub struct LeaderGains {
    pub theta11: MatrixTrajectory,
    pub theta12: MatrixTrajectory,
    pub theta21: MatrixTrajectory,
    pub theta22: MatrixTrajectory,
    /// Worst-case disturbance gains on `x0` (`γ⁻²R2⁻¹EᵀP1`) and on `m` (`γ⁻²R2⁻¹EᵀΠ1`).
    pub v_x0: MatrixTrajectory,
    pub v_m: MatrixTrajectory,
}

impl LeaderGains {
    pub fn grid(&self) -> TimeGrid {
        self.theta11.grid
    }
}

/// Nodewise saddle-point gains from the block solution.
pub fn leader_gains(sol: &BlockRiccatiSolution, p: &ModelParams) -> Result<LeaderGains> {
    let grid = sol.grid();
    let cap = grid.len();
    let mut g: [Vec<DMatrix<f64>>; 6] = Default::default();
    for k in 0..cap {
        let t = grid.t(k);
        let c = p.coeff(t);
        let (p1, pi1, p2, pi2) = (&sol.p1.values[k], &sol.pi1.values[k], &sol.p2.values[k], &sol.pi2.values[k]);
        let bt = BlockTerms::new(&c, p1, pi1, p2, pi2);
        let n0inv = crate::linalg::checked_inverse(&bt.n0, t)?;
        let r1inv = crate::linalg::checked_inverse(&c.r1, t)?;
        let r2inv = crate::linalg::checked_inverse(&c.r2, t)?;
        let vg = r2inv * c.e.transpose() / (sol.gamma * sol.gamma);
        g[0].push(-&n0inv * &bt.x1);
        g[1].push(-&n0inv * &bt.x2);
        g[2].push(-&r1inv * &bt.y1);
        g[3].push(-&r1inv * &bt.y2);
        g[4].push(&vg * p1);
        g[5].push(&vg * pi1);
    }
    let [t11, t12, t21, t22, vx, vm] = g;
    let tr = |values| MatrixTrajectory { grid, values };
    Ok(LeaderGains {
        theta11: tr(t11),
        theta12: tr(t12),
        theta21: tr(t21),
        theta22: tr(t22),
        v_x0: tr(vx),
        v_m: tr(vm),
    })
}

/// `V0 = ⟨P1(0)ξ, ξ⟩ + ⟨(Π1(0) + P2(0)ᵀ)x, ξ⟩ + ⟨Π2(0)x, x⟩`
pub fn leader_value(sol: &BlockRiccatiSolution, p: &ModelParams) -> f64 {
    let (xi, x) = (&p.xi, &p.x0init);
    let cross: DVector<f64> = (sol.pi1.first() + sol.p2.first().transpose()) * x;
    xi.dot(&(sol.p1.first() * xi)) + xi.dot(&cross) + x.dot(&(sol.pi2.first() * x))
}

/// Largest entry of the three stationarity lines, written as matrices acting
/// on `(x0, m)`:
///
/// - `Bᵀy + Dᵀz + H̃ᵀp + R0ū0`
/// - `Hᵀy + B̃ᵀp + R1ū1`
/// - `Eᵀy − γ²R2v`
///
/// with `y = P1x0 + Π1m`, `p = P2x0 + Π2m`, `z = P1(Cx0 + Dū0)`.
pub fn stationarity_residual(sol: &BlockRiccatiSolution, gains: &LeaderGains, p: &ModelParams) -> f64 {
    let grid = sol.grid();
    let mut worst: f64 = 0.0;
    for k in 0..grid.len() {
        let c = p.coeff(grid.t(k));
        let (p1, pi1, p2, pi2) = (&sol.p1.values[k], &sol.pi1.values[k], &sol.p2.values[k], &sol.pi2.values[k]);
        let hstack = |a: DMatrix<f64>, b: DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
            out.view_mut((0, 0), a.shape()).copy_from(&a);
            out.view_mut((0, a.ncols()), b.shape()).copy_from(&b);
            out
        };
        let y = hstack(p1.clone(), pi1.clone());
        let pp = hstack(p2.clone(), pi2.clone());
        let u0 = hstack(gains.theta11.values[k].clone(), gains.theta12.values[k].clone());
        let u1 = hstack(gains.theta21.values[k].clone(), gains.theta22.values[k].clone());
        let v = hstack(gains.v_x0.values[k].clone(), gains.v_m.values[k].clone());
        let cx = hstack(c.c.clone(), DMatrix::zeros(c.n, c.n));
        let z = p1 * (cx + &c.d * &u0);
        let l1 = c.b.transpose() * &y + c.d.transpose() * &z + c.ht.transpose() * &pp + &c.r0 * &u0;
        let l2 = c.h.transpose() * &y + c.bt.transpose() * &pp + &c.r1 * &u1;
        let l3 = c.e.transpose() * &y - &c.r2 * &v * (sol.gamma * sol.gamma);
        for l in [l1, l2, l3] {
            worst = worst.max(l.abs().max());
        }
    }
    worst
}

/// Everything the downstream stages need from the leader problem.
#[derive(Clone, Debug)]
pub struct LeaderSolution {
    pub riccati: BlockRiccatiSolution,
    pub gains: LeaderGains,
    pub value: f64,
}

pub fn solve_leader(p: &ModelParams, gamma: f64) -> Result<LeaderSolution> {
    let riccati = solve_block_riccati(p, gamma)?;
    let gains = leader_gains(&riccati, p)?;
    let value = leader_value(&riccati, p);
    Ok(LeaderSolution { riccati, gains, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_blocks_for_table1() {
        let t = block_terminal(&ModelParams::table1());
        let v: Vec<f64> = t.iter().map(|m| m[(0, 0)]).collect();
        assert_eq!(v[0], 1.0);
        assert!((v[1] + 0.01).abs() < 1e-15);
        assert!((v[2] + 0.01).abs() < 1e-15);
        assert!((v[3] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn assembled_rhs_matches_block_rhs() {
        let p = ModelParams::table1();
        let y: State = [1.3, -0.7, -0.6, 2.1].iter().map(|&x| DMatrix::from_element(1, 1, x)).collect();
        let b = block_rhs(&p, 5.0, &y);
        let full = block2(&y[0], &y[1], &y[2], &y[3]);
        let a = assembled_rhs(&p, &Assembled::new(&p), 5.0, &full);
        let bf = block2(&b[0], &b[1], &b[2], &b[3]);
        assert!((a - bf).norm() < 1e-12);
    }
}
