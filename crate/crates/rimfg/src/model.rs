//! Model parameters, assumption checks, the time grid, and matrix trajectories.
//!
//! Everything is stored as a matrix internally; 1×1 matrices and scalars are
//! interchangeable only at the JSON boundary.

use std::borrow::Cow;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{asymmetry, min_sym_eigenvalue};
use crate::{Error, Result};

/// Default threshold δ for the uniform positive-definiteness checks.
pub const DEFAULT_PD_THRESHOLD: f64 = 1e-10;

/// Absolute tolerance for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Leader and follower dynamics, cost weights, initial states, horizon and γ.
///
/// Field names follow the usual notation, with a `t` suffix for the tilde
/// (follower) symbols: `at` is Ã, `gamma1t` is Γ̃₁, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub n: usize,
    pub ml: usize,
    pub mf: usize,
    pub nv: usize,

    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,

    pub at: DMatrix<f64>,
    pub bt: DMatrix<f64>,
    pub ft: DMatrix<f64>,
    pub ht: DMatrix<f64>,
    pub sigma: DMatrix<f64>,

    pub q: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub r0: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub gamma2: DMatrix<f64>,
    pub g: DMatrix<f64>,

    pub qt: DMatrix<f64>,
    pub gamma1t: DMatrix<f64>,
    pub r0t: DMatrix<f64>,
    pub r1t: DMatrix<f64>,
    pub gamma2t: DMatrix<f64>,
    pub gt: DMatrix<f64>,

    pub xi: DVector<f64>,
    pub x0init: DVector<f64>,

    pub t_final: f64,
    pub gamma: f64,
    pub grid_steps: usize,
    pub pd_threshold: f64,
}

/// Evaluator interface for (possibly time-varying) coefficients.
///
/// Every solver reads coefficients through `coeff(t)`; constant parameters
/// return themselves, so piecewise-constant extensions need no solver changes.
pub trait Coefficients: Sync {
    fn coeff(&self, t: f64) -> Cow<'_, ModelParams>;
}

impl Coefficients for ModelParams {
    fn coeff(&self, _t: f64) -> Cow<'_, ModelParams> {
        Cow::Borrowed(self)
    }
}

impl ModelParams {
    /// Parameters of the numerical example used throughout the tests and the
    /// `reproduce-paper` command.
    pub fn table1() -> Self {
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        ModelParams {
            n: 1,
            ml: 1,
            mf: 1,
            nv: 1,
            a: s(0.3),
            b: s(0.5),
            f: s(0.6),
            h: s(0.7),
            e: s(-0.5),
            c: s(1.0),
            d: s(0.5),
            at: s(0.25),
            bt: s(0.5),
            ft: s(0.4),
            ht: s(0.2),
            sigma: s(0.6),
            q: s(0.4),
            gamma1: s(1.0),
            r0: s(0.6),
            r1: s(0.5),
            r2: s(0.4),
            gamma2: s(0.01),
            g: s(1.0),
            qt: s(0.01),
            gamma1t: s(0.99998),
            r0t: s(0.15),
            r1t: s(0.6),
            gamma2t: s(1.0),
            gt: s(0.01),
            xi: DVector::from_element(1, 1.0),
            x0init: DVector::from_element(1, 1.0),
            t_final: 10.0,
            gamma: 5.0,
            grid_steps: 1000,
            pd_threshold: DEFAULT_PD_THRESHOLD,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t_final, self.grid_steps)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        ModelParams {
            gamma,
            ..self.clone()
        }
    }

    fn matrices(&self) -> Vec<(&'static str, &DMatrix<f64>, (usize, usize))> {
        let (n, ml, mf, nv) = (self.n, self.ml, self.mf, self.nv);
        vec![
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, ml)),
            ("F", &self.f, (n, n)),
            ("H", &self.h, (n, mf)),
            ("E", &self.e, (n, nv)),
            ("C", &self.c, (n, n)),
            ("D", &self.d, (n, ml)),
            ("At", &self.at, (n, n)),
            ("Bt", &self.bt, (n, mf)),
            ("Ft", &self.ft, (n, n)),
            ("Ht", &self.ht, (n, ml)),
            ("Sigma", &self.sigma, (n, n)),
            ("Q", &self.q, (n, n)),
            ("Gamma1", &self.gamma1, (n, n)),
            ("R0", &self.r0, (ml, ml)),
            ("R1", &self.r1, (mf, mf)),
            ("R2", &self.r2, (nv, nv)),
            ("Gamma2", &self.gamma2, (n, n)),
            ("G", &self.g, (n, n)),
            ("Qt", &self.qt, (n, n)),
            ("Gamma1t", &self.gamma1t, (n, n)),
            ("R0t", &self.r0t, (ml, ml)),
            ("R1t", &self.r1t, (mf, mf)),
            ("Gamma2t", &self.gamma2t, (n, n)),
            ("Gt", &self.gt, (n, n)),
        ]
    }

    /// Shape, finiteness and scalar-range checks. Assumption checks live in
    /// [`validate_assumptions`].
    pub fn check_well_formed(&self) -> Result<()> {
        if self.n == 0 || self.ml == 0 || self.mf == 0 || self.nv == 0 {
            return Err(Error::Dimension("all dimensions must be positive".into()));
        }
        for (name, m, shape) in self.matrices() {
            if m.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    shape.0,
                    shape.1
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!("{name} has a non-finite entry")));
            }
        }
        for (name, v) in [("xi", &self.xi), ("x", &self.x0init)] {
            if v.len() != self.n {
                return Err(Error::Dimension(format!(
                    "{name} has length {}, expected {}",
                    v.len(),
                    self.n
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!("{name} has a non-finite entry")));
            }
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::Value(format!("horizon T must be positive, got {}", self.t_final)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Value(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.grid_steps < 2 {
            return Err(Error::Value(format!("grid_steps must be at least 2, got {}", self.grid_steps)));
        }
        if !(self.pd_threshold.is_finite() && self.pd_threshold > 0.0) {
            return Err(Error::Value("pd_threshold must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Assumption validation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: &'static str,
    pub item: String,
    pub check: String,
    /// Positive (or zero) margin means the check passes.
    pub margin: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn find(&self, item: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.item == item)
    }
}

/// Report on (A1)–(A4): boundedness of the dynamics, symmetry of the weights,
/// and the sign conditions on the leader and follower weights.
///
/// Failures are report entries; this never errors.
pub fn validate_assumptions(p: &ModelParams) -> ValidationReport {
    let mut checks = Vec::new();
    let delta = p.pd_threshold;

    for (name, m) in [
        ("A", &p.a),
        ("B", &p.b),
        ("F", &p.f),
        ("H", &p.h),
        ("E", &p.e),
        ("C", &p.c),
        ("D", &p.d),
        ("At", &p.at),
        ("Bt", &p.bt),
        ("Ft", &p.ft),
        ("Ht", &p.ht),
        ("Sigma", &p.sigma),
    ] {
        let finite = m.iter().all(|x| x.is_finite());
        checks.push(AssumptionCheck {
            assumption: "A1",
            item: name.to_string(),
            check: "bounded (finite entries)".into(),
            margin: if finite { 0.0 } else { f64::NEG_INFINITY },
            passed: finite,
        });
    }

    for (name, m) in [
        ("Q", &p.q),
        ("Gamma1", &p.gamma1),
        ("Qt", &p.qt),
        ("Gamma1t", &p.gamma1t),
        ("R0", &p.r0),
        ("R0t", &p.r0t),
        ("R1", &p.r1),
        ("R1t", &p.r1t),
        ("R2", &p.r2),
        ("Gamma2", &p.gamma2),
        ("G", &p.g),
        ("Gamma2t", &p.gamma2t),
        ("Gt", &p.gt),
    ] {
        let defect = if m.is_square() { asymmetry(m) } else { f64::INFINITY };
        let margin = SYMMETRY_TOL - defect;
        checks.push(AssumptionCheck {
            assumption: "A2",
            item: format!("{name} symmetric"),
            check: format!("max|{name}-{name}^T| <= {SYMMETRY_TOL:e}"),
            margin,
            passed: margin >= 0.0,
        });
    }

    let psd = |assumption: &'static str, name: &str, m: &DMatrix<f64>| {
        let lam = min_sym_eigenvalue(m);
        let tol = SYMMETRY_TOL * (1.0 + m.abs().max());
        AssumptionCheck {
            assumption,
            item: name.to_string(),
            check: format!("lambda_min({name}) >= 0"),
            margin: lam,
            passed: lam >= -tol,
        }
    };
    let pd = |assumption: &'static str, name: &str, m: &DMatrix<f64>| {
        let lam = min_sym_eigenvalue(m);
        AssumptionCheck {
            assumption,
            item: name.to_string(),
            check: format!("lambda_min({name}) >= {delta:e}"),
            margin: lam,
            passed: lam >= delta,
        }
    };

    checks.push(psd("A3", "Q", &p.q));
    checks.push(psd("A3", "G", &p.g));
    checks.push(pd("A3", "R0", &p.r0));
    checks.push(pd("A3", "R1", &p.r1));
    checks.push(pd("A3", "R2", &p.r2));
    checks.push(psd("A4", "Qt", &p.qt));
    checks.push(psd("A4", "Gt", &p.gt));
    checks.push(pd("A4", "R0t", &p.r0t));
    checks.push(pd("A4", "R1t", &p.r1t));

    ValidationReport { checks }
}

// ---------------------------------------------------------------------------
// Config file

/// A matrix at the JSON boundary: a bare number (1×1 only), a flat array
/// (column vectors only), or row-major nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Mat {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl Mat {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        if m.shape() == (1, 1) {
            Mat::Scalar(m[(0, 0)])
        } else {
            Mat::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        if v.len() == 1 {
            Mat::Scalar(v[0])
        } else {
            Mat::Flat(v.iter().copied().collect())
        }
    }

    fn into_matrix(self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let shape_err = |got: String| {
            Error::Dimension(format!("{name}: expected {rows}x{cols}, got {got}"))
        };
        let m = match self {
            Mat::Scalar(x) => {
                if (rows, cols) != (1, 1) {
                    return Err(shape_err("a scalar".into()));
                }
                DMatrix::from_element(1, 1, x)
            }
            Mat::Flat(v) => {
                if cols != 1 || v.len() != rows {
                    return Err(shape_err(format!("a flat array of length {}", v.len())));
                }
                DMatrix::from_column_slice(rows, 1, &v)
            }
            Mat::Rows(r) => {
                let nr = r.len();
                let nc = r.first().map_or(0, |row| row.len());
                if nr != rows || r.iter().any(|row| row.len() != cols) {
                    return Err(shape_err(format!("{nr}x{nc}")));
                }
                DMatrix::from_row_iterator(rows, cols, r.into_iter().flatten())
            }
        };
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::Value(format!("{name} has a non-finite entry")));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimensionsFile {
    n: usize,
    #[serde(rename = "mL")]
    ml: usize,
    #[serde(rename = "mF")]
    mf: usize,
    nv: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct LeaderDynamicsFile {
    A: Mat,
    B: Mat,
    F: Mat,
    H: Mat,
    E: Mat,
    C: Mat,
    D: Mat,
    xi: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct FollowerDynamicsFile {
    At: Mat,
    Bt: Mat,
    Ft: Mat,
    Ht: Mat,
    Sigma: Mat,
    x: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct LeaderCostFile {
    Q: Mat,
    Gamma1: Mat,
    R0: Mat,
    R1: Mat,
    R2: Mat,
    Gamma2: Mat,
    G: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct FollowerCostFile {
    Qt: Mat,
    Gamma1t: Mat,
    R0t: Mat,
    R1t: Mat,
    Gamma2t: Mat,
    Gt: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct HorizonFile {
    T: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    dimensions: DimensionsFile,
    leader_dynamics: LeaderDynamicsFile,
    follower_dynamics: FollowerDynamicsFile,
    leader_cost: LeaderCostFile,
    follower_cost: FollowerCostFile,
    horizon: HorizonFile,
    gamma: f64,
    grid_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pd_threshold: Option<f64>,
}

fn to_vector(m: Mat, name: &str, n: usize) -> Result<DVector<f64>> {
    let m = m.into_matrix(name, n, 1)?;
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Parse a config document and check shapes and finiteness. Does not run the
/// assumption checks; see [`load_config`].
pub fn parse_config(text: &str) -> Result<ModelParams> {
    let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let DimensionsFile { n, ml, mf, nv } = cfg.dimensions;
    if n == 0 || ml == 0 || mf == 0 || nv == 0 {
        return Err(Error::Dimension("all dimensions must be positive".into()));
    }
    let ld = cfg.leader_dynamics;
    let fd = cfg.follower_dynamics;
    let lc = cfg.leader_cost;
    let fc = cfg.follower_cost;
    let p = ModelParams {
        n,
        ml,
        mf,
        nv,
        a: ld.A.into_matrix("A", n, n)?,
        b: ld.B.into_matrix("B", n, ml)?,
        f: ld.F.into_matrix("F", n, n)?,
        h: ld.H.into_matrix("H", n, mf)?,
        e: ld.E.into_matrix("E", n, nv)?,
        c: ld.C.into_matrix("C", n, n)?,
        d: ld.D.into_matrix("D", n, ml)?,
        xi: to_vector(ld.xi, "xi", n)?,
        at: fd.At.into_matrix("At", n, n)?,
        bt: fd.Bt.into_matrix("Bt", n, mf)?,
        ft: fd.Ft.into_matrix("Ft", n, n)?,
        ht: fd.Ht.into_matrix("Ht", n, ml)?,
        sigma: fd.Sigma.into_matrix("Sigma", n, n)?,
        x0init: to_vector(fd.x, "x", n)?,
        q: lc.Q.into_matrix("Q", n, n)?,
        gamma1: lc.Gamma1.into_matrix("Gamma1", n, n)?,
        r0: lc.R0.into_matrix("R0", ml, ml)?,
        r1: lc.R1.into_matrix("R1", mf, mf)?,
        r2: lc.R2.into_matrix("R2", nv, nv)?,
        gamma2: lc.Gamma2.into_matrix("Gamma2", n, n)?,
        g: lc.G.into_matrix("G", n, n)?,
        qt: fc.Qt.into_matrix("Qt", n, n)?,
        gamma1t: fc.Gamma1t.into_matrix("Gamma1t", n, n)?,
        r0t: fc.R0t.into_matrix("R0t", ml, ml)?,
        r1t: fc.R1t.into_matrix("R1t", mf, mf)?,
        gamma2t: fc.Gamma2t.into_matrix("Gamma2t", n, n)?,
        gt: fc.Gt.into_matrix("Gt", n, n)?,
        t_final: cfg.horizon.T,
        gamma: cfg.gamma,
        grid_steps: cfg.grid_steps,
        pd_threshold: cfg.pd_threshold.unwrap_or(DEFAULT_PD_THRESHOLD),
    };
    p.check_well_formed()?;
    Ok(p)
}

/// Serialize parameters; `parse_config(&to_config_string(p)) == p` bitwise.
pub fn to_config_string(p: &ModelParams) -> String {
    let cfg = ConfigFile {
        dimensions: DimensionsFile {
            n: p.n,
            ml: p.ml,
            mf: p.mf,
            nv: p.nv,
        },
        leader_dynamics: LeaderDynamicsFile {
            A: Mat::from_matrix(&p.a),
            B: Mat::from_matrix(&p.b),
            F: Mat::from_matrix(&p.f),
            H: Mat::from_matrix(&p.h),
            E: Mat::from_matrix(&p.e),
            C: Mat::from_matrix(&p.c),
            D: Mat::from_matrix(&p.d),
            xi: Mat::from_vector(&p.xi),
        },
        follower_dynamics: FollowerDynamicsFile {
            At: Mat::from_matrix(&p.at),
            Bt: Mat::from_matrix(&p.bt),
            Ft: Mat::from_matrix(&p.ft),
            Ht: Mat::from_matrix(&p.ht),
            Sigma: Mat::from_matrix(&p.sigma),
            x: Mat::from_vector(&p.x0init),
        },
        leader_cost: LeaderCostFile {
            Q: Mat::from_matrix(&p.q),
            Gamma1: Mat::from_matrix(&p.gamma1),
            R0: Mat::from_matrix(&p.r0),
            R1: Mat::from_matrix(&p.r1),
            R2: Mat::from_matrix(&p.r2),
            Gamma2: Mat::from_matrix(&p.gamma2),
            G: Mat::from_matrix(&p.g),
        },
        follower_cost: FollowerCostFile {
            Qt: Mat::from_matrix(&p.qt),
            Gamma1t: Mat::from_matrix(&p.gamma1t),
            R0t: Mat::from_matrix(&p.r0t),
            R1t: Mat::from_matrix(&p.r1t),
            Gamma2t: Mat::from_matrix(&p.gamma2t),
            Gt: Mat::from_matrix(&p.gt),
        },
        horizon: HorizonFile { T: p.t_final },
        gamma: p.gamma,
        grid_steps: p.grid_steps,
        pd_threshold: (p.pd_threshold != DEFAULT_PD_THRESHOLD).then_some(p.pd_threshold),
    };
    serde_json::to_string_pretty(&cfg).expect("config serialization cannot fail")
}

/// Read and parse a config file without running the assumption checks.
pub fn read_config(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Read, parse and validate a config file. Any failed assumption is a `ValueError`.
pub fn load_config(path: &Path) -> Result<ModelParams> {
    let p = read_config(path)?;
    let report = validate_assumptions(&p);
    if !report.all_passed() {
        let msg = report
            .failures()
            .map(|c| format!("{} {} ({}: margin {:e})", c.assumption, c.item, c.check, c.margin))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Value(msg));
    }
    Ok(p)
}

pub fn save_config(p: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_config_string(p)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Time grid and trajectories

/// Uniform grid on `[0, T]` with `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub steps: usize,
    pub h: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Self {
        assert!(steps >= 1 && t_final > 0.0, "grid needs T>0 and at least one step");
        TimeGrid {
            t_final,
            steps,
            h: t_final / steps as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of node `k`; the last node is exactly `T`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_final
        } else {
            k as f64 * self.h
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Matrix-valued function sampled on every node of a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension("trajectory values differ in shape".into()));
        }
        if let Some(k) = values.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Value(format!("non-finite trajectory value at node {k}")));
        }
        Ok(MatrixTrajectory { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(usize) -> DMatrix<f64>) -> Result<Self> {
        Self::new(grid, (0..grid.len()).map(f).collect())
    }

    pub fn constant(grid: TimeGrid, m: DMatrix<f64>) -> Self {
        MatrixTrajectory {
            grid,
            values: vec![m; grid.len()],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn node(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        &self.values[self.grid.steps]
    }

    /// Linear interpolation; times outside `[0, T]` are clamped. O(h²) error
    /// for smooth trajectories.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let s = (t / self.grid.h).clamp(0.0, self.grid.steps as f64);
        let k = (s.floor() as usize).min(self.grid.steps - 1);
        let w = s - k as f64;
        &self.values[k] * (1.0 - w) + &self.values[k + 1] * w
    }

    /// Largest Frobenius norm over the grid.
    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest nodewise Frobenius distance to `other`.
    pub fn max_distance(&self, other: &MatrixTrajectory) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> MatrixTrajectory {
        MatrixTrajectory {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }
}
