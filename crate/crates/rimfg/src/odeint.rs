//! Fixed-step RK4 for stacked matrix ODEs on the shared uniform grid, with
//! finite-escape detection and a derivative-residual diagnostic.

use nalgebra::DMatrix;

use crate::model::{MatrixTrajectory, TimeGrid};
use crate::{Error, Result};

pub type State = Vec<DMatrix<f64>>;
pub type Rhs<'a> = Box<dyn Fn(f64, &[DMatrix<f64>]) -> State + Send + Sync + 'a>;
pub type Projection<'a> = Box<dyn Fn(&mut [DMatrix<f64>]) + Send + Sync + 'a>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Boundary data given at `t = T`, integrate towards `0`.
    Backward,
    /// Boundary data given at `t = 0`, integrate towards `T`.
    Forward,
}

/// A stacked matrix ODE `Y' = rhs(t, Y)` with boundary data at one end.
pub struct OdeProblem<'a> {
    pub shapes: Vec<(usize, usize)>,
    pub rhs: Rhs<'a>,
    pub boundary: State,
    pub direction: Direction,
    /// Optional map applied after every accepted step (e.g. symmetrization).
    pub project: Option<Projection<'a>>,
}

impl<'a> OdeProblem<'a> {
    pub fn new(
        boundary: State,
        direction: Direction,
        rhs: impl Fn(f64, &[DMatrix<f64>]) -> State + Send + Sync + 'a,
    ) -> Self {
        OdeProblem {
            shapes: boundary.iter().map(|m| m.shape()).collect(),
            rhs: Box::new(rhs),
            boundary,
            direction,
            project: None,
        }
    }

    pub fn with_projection(mut self, f: impl Fn(&mut [DMatrix<f64>]) + Send + Sync + 'a) -> Self {
        self.project = Some(Box::new(f));
        self
    }

    fn check_shapes(&self, what: &str, y: &[DMatrix<f64>]) -> Result<()> {
        if y.len() != self.shapes.len() || y.iter().zip(&self.shapes).any(|(m, s)| m.shape() != *s) {
            return Err(Error::Dimension(format!("{what} shapes do not match the problem")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EscapePolicy {
    pub norm_threshold: f64,
}

impl Default for EscapePolicy {
    fn default() -> Self {
        EscapePolicy { norm_threshold: 1e8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EscapeRecord {
    pub t_escape: f64,
    pub norm: f64,
}

#[derive(Clone, Debug)]
pub enum Integration {
    Completed(Vec<MatrixTrajectory>),
    Escaped(EscapeRecord),
}

impl Integration {
    pub fn completed(self) -> Result<Vec<MatrixTrajectory>> {
        match self {
            Integration::Completed(tr) => Ok(tr),
            Integration::Escaped(e) => Err(Error::Escape {
                t_escape: e.t_escape,
                norm: e.norm,
            }),
        }
    }
}

fn max_norm(y: &[DMatrix<f64>]) -> f64 {
    y.iter()
        .map(|m| {
            if m.iter().all(|x| x.is_finite()) {
                m.norm()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn axpy(y: &[DMatrix<f64>], a: f64, k: &[DMatrix<f64>]) -> State {
    y.iter().zip(k).map(|(y, k)| y + k * a).collect()
}

pub enum StepOutcome {
    Ok(State),
    /// A stage state or the stage derivative blew up.
    Blowup(f64),
}

/// One classical RK4 step of signed size `dt` from `(t, y)`.
///
/// `rhs` must return finite values for finite, moderate inputs; a NaN from a
/// finite, below-threshold stage is reported as `NonFiniteRhs`.
pub fn rk4_step(
    rhs: &dyn Fn(f64, &[DMatrix<f64>]) -> State,
    t: f64,
    dt: f64,
    y: &[DMatrix<f64>],
    threshold: f64,
) -> Result<StepOutcome> {
    let eval = |ts: f64, ys: &[DMatrix<f64>]| -> Result<std::result::Result<State, f64>> {
        let n = max_norm(ys);
        if !n.is_finite() {
            return Ok(Err(n));
        }
        let k = rhs(ts, ys);
        if k.iter().any(|m| m.iter().any(|x| x.is_nan())) {
            if n <= threshold {
                return Err(Error::NonFiniteRhs { t: ts });
            }
            return Ok(Err(f64::INFINITY));
        }
        if k.iter().any(|m| m.iter().any(|x| x.is_infinite())) {
            return Ok(Err(f64::INFINITY));
        }
        Ok(Ok(k))
    };
    macro_rules! stage {
        ($ts:expr, $ys:expr) => {
            match eval($ts, $ys)? {
                Ok(k) => k,
                Err(n) => return Ok(StepOutcome::Blowup(n)),
            }
        };
    }
    let k1 = stage!(t, y);
    let y2 = axpy(y, 0.5 * dt, &k1);
    let k2 = stage!(t + 0.5 * dt, &y2);
    let y3 = axpy(y, 0.5 * dt, &k2);
    let k3 = stage!(t + 0.5 * dt, &y3);
    let y4 = axpy(y, dt, &k3);
    let k4 = stage!(t + dt, &y4);
    let out = y
        .iter()
        .enumerate()
        .map(|(i, yi)| yi + (&k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i]) * (dt / 6.0))
        .collect();
    Ok(StepOutcome::Ok(out))
}

/// Integrate over the whole grid. Escape is a regular outcome, reported at
/// the first node whose state exceeds the threshold or is non-finite.
pub fn integrate(problem: &OdeProblem, grid: &TimeGrid, escape: EscapePolicy) -> Result<Integration> {
    problem.check_shapes("boundary", &problem.boundary)?;
    let m = grid.steps;
    let (start, dt) = match problem.direction {
        Direction::Backward => (m, -grid.h),
        Direction::Forward => (0, grid.h),
    };
    let node = |j: usize| match problem.direction {
        Direction::Backward => m - j,
        Direction::Forward => j,
    };

    let k0 = (problem.rhs)(grid.t(start), &problem.boundary);
    problem.check_shapes("rhs output", &k0)?;
    if k0.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteRhs { t: grid.t(start) });
    }

    let mut nodes: Vec<State> = Vec::with_capacity(m + 1);
    let mut y = problem.boundary.clone();
    if let Some(project) = &problem.project {
        project(&mut y);
    }
    let n0 = max_norm(&y);
    if n0 > escape.norm_threshold {
        return Ok(Integration::Escaped(EscapeRecord {
            t_escape: grid.t(start),
            norm: n0,
        }));
    }
    nodes.push(y.clone());
    for j in 1..=m {
        let t = grid.t(node(j - 1));
        let next = match rk4_step(&*problem.rhs, t, dt, &y, escape.norm_threshold)? {
            StepOutcome::Ok(mut next) => {
                if let Some(project) = &problem.project {
                    project(&mut next);
                }
                next
            }
            StepOutcome::Blowup(norm) => {
                return Ok(Integration::Escaped(EscapeRecord {
                    t_escape: grid.t(node(j)),
                    norm,
                }))
            }
        };
        let n = max_norm(&next);
        if !(n <= escape.norm_threshold) {
            return Ok(Integration::Escaped(EscapeRecord {
                t_escape: grid.t(node(j)),
                norm: n,
            }));
        }
        y = next;
        nodes.push(y.clone());
    }
    if problem.direction == Direction::Backward {
        nodes.reverse();
    }
    Ok(Integration::Completed(unstack(grid, nodes)))
}

/// Turn a node-major list of stacked states into one trajectory per component.
pub fn unstack(grid: &TimeGrid, nodes: Vec<State>) -> Vec<MatrixTrajectory> {
    let comps = nodes[0].len();
    let mut cols: Vec<Vec<DMatrix<f64>>> = (0..comps).map(|_| Vec::with_capacity(nodes.len())).collect();
    for state in nodes {
        for (c, m) in state.into_iter().enumerate() {
            cols[c].push(m);
        }
    }
    cols.into_iter()
        .map(|values| MatrixTrajectory { grid: *grid, values })
        .collect()
}

/// Fourth-order finite-difference derivative of a node sequence at node `k`.
///
/// Central 5-point stencil in the interior, one-sided 5-point stencils next
/// to the ends; plain central differences when the grid has fewer than 4 steps.
pub fn fd_derivative(values: &[DMatrix<f64>], k: usize, h: f64) -> DMatrix<f64> {
    let m = values.len() - 1;
    let v = |i: usize| &values[i];
    if m < 4 {
        return (v(k + 1) - v(k - 1)) / (2.0 * h);
    }
    if k >= 2 && k + 2 <= m {
        (v(k - 2) - v(k + 2) + (v(k + 1) - v(k - 1)) * 8.0) / (12.0 * h)
    } else if k == 1 {
        (v(0) * -3.0 - v(1) * 10.0 + v(2) * 18.0 - v(3) * 6.0 + v(4)) / (12.0 * h)
    } else {
        // k == m-1, mirror of the k == 1 stencil
        (v(m) * 3.0 + v(m - 1) * 10.0 - v(m - 2) * 18.0 + v(m - 3) * 6.0 - v(m - 4)) / (12.0 * h)
    }
}

/// Relative residual `max_k ‖Y'(t_k) − rhs(t_k, Y(t_k))‖ / (1 + ‖rhs‖)` over
/// interior nodes, with `Y'` from [`fd_derivative`]. Norms are taken over the
/// whole stacked state.
pub fn residual(trajectory: &[MatrixTrajectory], problem: &OdeProblem) -> Result<f64> {
    let grid = trajectory
        .first()
        .ok_or_else(|| Error::GridMismatch("empty trajectory".into()))?
        .grid;
    if trajectory.len() != problem.shapes.len() {
        return Err(Error::GridMismatch("component count differs from problem".into()));
    }
    for (tr, s) in trajectory.iter().zip(&problem.shapes) {
        if tr.grid != grid || tr.values.len() != grid.len() {
            return Err(Error::GridMismatch("components live on different grids".into()));
        }
        if tr.shape() != *s {
            return Err(Error::GridMismatch("component shape differs from problem".into()));
        }
    }
    let mut worst: f64 = 0.0;
    for k in 1..grid.steps {
        let y: State = trajectory.iter().map(|tr| tr.values[k].clone()).collect();
        let f = (problem.rhs)(grid.t(k), &y);
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, tr) in trajectory.iter().enumerate() {
            let d = fd_derivative(&tr.values, k, grid.h);
            num += (d - &f[c]).norm_squared();
            den += f[c].norm_squared();
        }
        let r = num.sqrt() / (1.0 + den.sqrt());
        worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn zero_rhs_gives_constant_trajectory() {
        let grid = TimeGrid::new(10.0, 100);
        let prob = OdeProblem::new(vec![scalar(1.0)], Direction::Backward, |_, y| {
            vec![DMatrix::zeros(y[0].nrows(), y[0].ncols())]
        });
        let tr = integrate(&prob, &grid, EscapePolicy::default()).unwrap().completed().unwrap();
        assert!(tr[0].values.iter().all(|v| v[(0, 0)] == 1.0));
        assert_eq!(residual(&tr, &prob).unwrap(), 0.0);
    }

    #[test]
    fn forward_direction_matches_closed_form() {
        let grid = TimeGrid::new(1.0, 100);
        let prob = OdeProblem::new(vec![scalar(1.0)], Direction::Forward, |_, y| vec![&y[0] * 1.0]);
        let tr = integrate(&prob, &grid, EscapePolicy::default()).unwrap().completed().unwrap();
        assert!((tr[0].last()[(0, 0)] - 1f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn nan_rhs_is_an_error_not_an_escape() {
        let grid = TimeGrid::new(1.0, 10);
        let prob = OdeProblem::new(vec![scalar(1.0)], Direction::Backward, |t, _| {
            vec![scalar(if t < 0.5 { f64::NAN } else { 0.0 })]
        });
        assert!(matches!(
            integrate(&prob, &grid, EscapePolicy::default()),
            Err(Error::NonFiniteRhs { .. })
        ));
    }
}
