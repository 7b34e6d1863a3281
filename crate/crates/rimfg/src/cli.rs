//! Command-line front end: config → solvers → simulator → CSV/JSON artifacts.
//!
//! Every command writes into one output directory containing a copy of the
//! config actually used (`config.json`), the artifacts, and `manifest.json`.
//! Stage-level checks decide the exit status; when a stage fails, whatever
//! was produced is still written and the manifest is marked `FAILED`.
//!
//! CSV files share one header contract: a `t` column followed by one column
//! per series. Matrix-valued series are flattened row-major as
//! `name_<row><col>` (1-based); scalar series keep the bare name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::incentive::{solve_follower_side, FollowerSide, IncentiveOptions};
use crate::leader::{
    block_problem, concavity_problem, estimate_gamma_hat, solve_concavity, solve_leader, stationarity_residual,
    GammaHat, LeaderSolution,
};
use crate::model::{load_config, parse_config, to_config_string, validate_assumptions, MatrixTrajectory, TimeGrid};
use crate::odeint::residual;
use crate::sim::{
    follower_running_cost, incentive_match, leader_running_cost, limit_costs, mean_stderr, population_stats,
    saddle_check, simulate_limit, simulate_population, sweep_mean_field_gap, sweep_optimality_gap, SaddleReport,
    Disturbance, SimConfig, Strategy, SweepReport, VecSeries,
};
use crate::{Error, ModelParams, Result};

/// The numerical example bundled with the binary.
pub const TABLE1_CONFIG: &str = include_str!("../../../configs/table1.json");

/// Prefix of environment variables that override the global flags.
pub const ENV_PREFIX: &str = "RIMFG_";

#[derive(Parser, Debug, Clone)]
#[command(name = "rimfg", version, about = "Robust incentive Stackelberg mean-field game solver")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Model config (JSON); defaults to the bundled Table 1 example.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the config's grid_steps.
    #[arg(long, global = true)]
    pub grid_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum StrategyArg {
    Team,
    Incentive,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Team => Strategy::Team,
            StrategyArg::Incentive => Strategy::Incentive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DisturbanceArg {
    Zero,
    Worst,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
pub enum Command {
    /// Bracket the critical attenuation level γ̂.
    GammaHat {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Solve the leader's Riccati equations and saddle-point gains.
    SolveLeader {
        /// Attenuation level (default: the config's gamma).
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Solve the incentive matrices and follower-side Riccati quantities.
    SolveIncentive {
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Monte Carlo simulation of the limit system and the population.
    Simulate {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Paths for cost statistics (figure series always use path 0).
        #[arg(long, default_value_t = 500)]
        paths: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Incentive)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 1)]
        em_substeps: usize,
        #[arg(long, value_enum, default_value_t = DisturbanceArg::Worst)]
        disturbance: DisturbanceArg,
        /// Open-loop disturbance series (CSV: t, then nv columns, one row per
        /// grid node); overrides --disturbance.
        #[arg(long)]
        disturbance_csv: Option<PathBuf>,
    },
    /// Mean-field gap (and optionally optimality-gap proxy) versus N.
    SweepN {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,40,160,640")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        paths: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Team)]
        strategy: StrategyArg,
        /// Also run the optimality-gap proxy sweep.
        #[arg(long)]
        optimality: bool,
    },
    /// Run the full numerical example and write every figure series.
    ReproducePaper,
    /// Check the config against the standing assumptions.
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GammaHat { .. } => "gamma-hat",
            Command::SolveLeader { .. } => "solve-leader",
            Command::SolveIncentive { .. } => "solve-incentive",
            Command::Simulate { .. } => "simulate",
            Command::SweepN { .. } => "sweep-n",
            Command::ReproducePaper => "reproduce-paper",
            Command::Validate => "validate",
        }
    }
}

fn env_value<T: std::str::FromStr>(key: &str) -> Result<Option<T>> {
    let name = format!("{ENV_PREFIX}{key}");
    match std::env::var(&name) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Parse(format!("cannot parse environment variable {name}={v}"))),
        Err(_) => Ok(None),
    }
}

impl GlobalArgs {
    /// Environment variables `RIMFG_CONFIG`, `RIMFG_OUT`, `RIMFG_SEED`,
    /// `RIMFG_THREADS`, `RIMFG_GRID_STEPS` override the corresponding flags.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(v) = env_value::<PathBuf>("CONFIG")? {
            self.config = Some(v);
        }
        if let Some(v) = env_value::<PathBuf>("OUT")? {
            self.out = v;
        }
        if let Some(v) = env_value("SEED")? {
            self.seed = v;
        }
        if let Some(v) = env_value("THREADS")? {
            self.threads = Some(v);
        }
        if let Some(v) = env_value("GRID_STEPS")? {
            self.grid_steps = Some(v);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checks and manifest

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub stage: String,
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub config_file: String,
    /// SHA-256 of `config_file` as stored.
    pub config_digest: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
    /// `OK` or `FAILED`.
    pub status: String,
    pub failures: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Output directory that records every file written into it.
pub struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable");
        self.write(name, text.as_bytes())
    }

    /// `t`-indexed CSV from named columns of equal length.
    pub fn series(&mut self, name: &str, grid: &TimeGrid, cols: &[Column]) -> Result<()> {
        let times = grid.times();
        let mut out = String::from("t");
        for c in cols {
            out.push(',');
            out.push_str(&c.0);
        }
        out.push('\n');
        for (k, t) in times.iter().enumerate() {
            out.push_str(&t.to_string());
            for c in cols {
                out.push(',');
                out.push_str(&c.1[k].to_string());
            }
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        self.write(name, out.as_bytes())
    }
}

pub type Column = (String, Vec<f64>);

/// Row-major flattening of a matrix trajectory into columns.
pub fn traj_columns(name: &str, tr: &MatrixTrajectory) -> Vec<Column> {
    let (r, c) = tr.shape();
    let mut cols = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let label = if r * c == 1 {
                name.to_string()
            } else {
                format!("{name}_{}{}", i + 1, j + 1)
            };
            cols.push((label, tr.values.iter().map(|m| m[(i, j)]).collect()));
        }
    }
    cols
}

fn vec_columns(name: &str, s: &VecSeries) -> Vec<Column> {
    (0..s.dim)
        .map(|j| {
            let label = if s.dim == 1 { name.to_string() } else { format!("{name}_{}", j + 1) };
            (label, (0..s.len()).map(|k| s.node(k)[j]).collect())
        })
        .collect()
}

/// Read a `t`-indexed CSV with `dim` value columns, one row per grid node,
/// as a `dim×1` trajectory.
pub fn read_series_csv(path: &Path, grid: &TimeGrid, dim: usize) -> Result<MatrixTrajectory> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read series {}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Dimension(format!(
                "{} row {}: expected {} columns, found {}",
                path.display(),
                i + 1,
                dim + 1,
                fields.len()
            )));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 1)))?;
        values.push(DMatrix::from_column_slice(dim, 1, &nums));
    }
    if values.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} has {} rows, grid has {} nodes",
            path.display(),
            values.len(),
            grid.len()
        )));
    }
    MatrixTrajectory::new(*grid, values)
}

fn max_norm(trs: &[&MatrixTrajectory]) -> f64 {
    trs.iter().map(|t| t.max_norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Stages

/// State shared by the stages of one run.
pub struct Run {
    pub params: ModelParams,
    pub seed: u64,
    pub out: OutDir,
    pub checks: Vec<Check>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl Run {
    fn check(&mut self, stage: &str, name: &str, value: f64, limit: impl Into<String>, passed: bool, detail: Option<String>) {
        self.checks.push(Check {
            stage: stage.into(),
            name: name.into(),
            value,
            limit: limit.into(),
            passed,
            detail,
        });
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn gamma_hat(&mut self, tol: f64) -> Result<GammaHat> {
        let gh = estimate_gamma_hat(&self.params, tol)?;
        let rows: Vec<Vec<String>> = gh
            .trace
            .iter()
            .map(|t| {
                vec![
                    t.gamma.to_string(),
                    (t.solvable as u8).to_string(),
                    t.t_escape.map_or(String::new(), |x| x.to_string()),
                ]
            })
            .collect();
        self.out.table("gamma_trace.csv", &["gamma", "solvable", "t_escape"], &rows)?;
        let gamma = self.params.gamma;
        self.check(
            "gamma-hat",
            "configured gamma exceeds gamma_hat",
            gh.gamma_hat,
            format!("< {gamma}"),
            gh.gamma_hat < gamma,
            Some(format!("bracket [{}, {}]", gh.bracket.0, gh.bracket.1)),
        );
        self.note(
            "gamma_hat",
            serde_json::json!({
                "gamma_hat": gh.gamma_hat,
                "bracket": [gh.bracket.0, gh.bracket.1],
                "no_escape": gh.no_escape,
                "trials": gh.trace.len(),
            }),
        );
        Ok(gh)
    }

    pub fn solve_leader(&mut self, gamma: f64) -> Result<LeaderSolution> {
        let p = self.params.with_gamma(gamma);
        let stage = "solve-leader";
        let cert = solve_concavity(&p, gamma)?;
        match (cert.trajectory(), cert.escape()) {
            (Some(k), _) => {
                let r = residual(std::slice::from_ref(k), &concavity_problem(&p, gamma))?;
                self.check(stage, "concavity residual", r, "<= 1e-6", r <= 1e-6, None);
                self.out.series("concavity_k.csv", &p.grid(), &traj_columns("K", k))?;
                self.check(stage, "concavity solvable", 1.0, "solvable", true, None);
            }
            (None, esc) => {
                let detail = esc.map(|e| format!("Escape: t_escape={} norm={:e}", e.t_escape, e.norm));
                self.check(stage, "concavity solvable", 0.0, "solvable", false, detail);
            }
        }
        let ls = solve_leader(&p, gamma)?;
        let sol = &ls.riccati;
        let grid = sol.grid();
        let r = residual(
            &[sol.p1.clone(), sol.pi1.clone(), sol.p2.clone(), sol.pi2.clone()],
            &block_problem(&p, gamma),
        )?;
        self.check(stage, "block riccati residual", r, "<= 1e-6", r <= 1e-6, None);
        self.check(stage, "transpose identity", sol.transpose_gap, "<= 1e-8", sol.transpose_gap <= 1e-8, None);
        self.check(stage, "assembled agreement", sol.assembled_gap, "<= 1e-8", sol.assembled_gap <= 1e-8, None);
        let s = stationarity_residual(sol, &ls.gains, &p);
        self.check(stage, "stationarity", s, "<= 1e-10", s <= 1e-10, None);

        let mut cols = traj_columns("P1", &sol.p1);
        cols.extend(traj_columns("Pi1", &sol.pi1));
        cols.extend(traj_columns("P2", &sol.p2));
        cols.extend(traj_columns("Pi2", &sol.pi2));
        self.out.series("riccati_p.csv", &grid, &cols)?;
        let g = &ls.gains;
        let mut cols = traj_columns("Theta11", &g.theta11);
        cols.extend(traj_columns("Theta12", &g.theta12));
        cols.extend(traj_columns("Theta21", &g.theta21));
        cols.extend(traj_columns("Theta22", &g.theta22));
        cols.extend(traj_columns("Vx0", &g.v_x0));
        cols.extend(traj_columns("Vm", &g.v_m));
        self.out.series("gains.csv", &grid, &cols)?;
        let p0: Vec<f64> = sol.p.first().transpose().iter().copied().collect();
        self.note(
            "leader",
            serde_json::json!({
                "gamma": gamma,
                "V0": ls.value,
                "P0_row_major": p0,
                "max_gain_condition": sol.gain_condition.iter().copied().fold(0.0, f64::max),
            }),
        );
        Ok(ls)
    }

    pub fn solve_incentive(&mut self, ls: &LeaderSolution) -> Result<FollowerSide> {
        let p = self.params.with_gamma(ls.riccati.gamma);
        let opts = IncentiveOptions::default();
        let fs = solve_follower_side(&p, &ls.riccati, &opts)?;
        let stage = "solve-incentive";
        let max_res = fs.dt.max_matching_residual();
        let threshold = 100.0 * opts.newton_tol;
        self.check(
            stage,
            "matching residual",
            max_res,
            format!("<= {threshold:e}"),
            fs.matching_failure.is_none(),
            fs.matching_failure.clone(),
        );
        self.check(
            stage,
            "theta = psi",
            fs.spp.theta_psi_gap,
            "<= 1e-6",
            fs.spp.theta_psi_gap <= 1e-6,
            None,
        );
        self.check(
            stage,
            "delta = sigma + phi",
            fs.spp.delta_split_gap,
            "<= 1e-6",
            fs.spp.delta_split_gap <= 1e-6,
            None,
        );
        let grid = ls.riccati.grid();
        let mut cols = traj_columns("L", &fs.inc.l);
        cols.extend(traj_columns("zeta", &fs.inc.zeta));
        cols.extend(traj_columns("eta", &fs.inc.eta));
        cols.extend(traj_columns("Delta", &fs.dt.delta));
        cols.extend(traj_columns("Theta", &fs.dt.theta));
        cols.extend(traj_columns("Sigma", &fs.spp.sigma));
        cols.extend(traj_columns("Phi", &fs.spp.phi));
        cols.extend(traj_columns("Psi", &fs.spp.psi));
        let res = &fs.dt.matching_residual;
        cols.push(("matching_residual_1".into(), res.values.iter().map(|m| m[(0, 0)]).collect()));
        cols.push(("matching_residual_2".into(), res.values.iter().map(|m| m[(1, 0)]).collect()));
        cols.push(("cleared_residual".into(), fs.dt.cleared_residual.clone()));
        cols.push(("leader_gap".into(), fs.dt.leader_gap.clone()));
        self.out.series("incentive.csv", &grid, &cols)?;
        self.note(
            "incentive",
            serde_json::json!({
                "max_matching_residual": max_res,
                "fraction_within_threshold": fs.dt.fraction_within(threshold),
                "theta_psi_gap": fs.spp.theta_psi_gap,
                "delta_split_gap": fs.spp.delta_split_gap,
                "L_T": fs.inc.l.last().iter().copied().collect::<Vec<f64>>(),
                "failure": fs.matching_failure,
            }),
        );
        Ok(fs)
    }

    pub fn simulate(
        &mut self,
        ls: &LeaderSolution,
        fs: Option<&FollowerSide>,
        n: usize,
        paths: usize,
        strategy: Strategy,
        em_substeps: usize,
        disturbance: Disturbance,
    ) -> Result<()> {
        let stage = "simulate";
        let p = self.params.with_gamma(ls.riccati.gamma);
        let grid = ls.gains.grid();
        let fgains = fs.map(|f| &f.gains);
        let inc = fs.map(|f| &f.inc);
        let base = SimConfig {
            n_agents: n,
            master_seed: self.seed,
            em_substeps,
            strategy,
            disturbance,
            ..SimConfig::default()
        };

        // figure series: path 0 of the limit system and of the population
        let fig = SimConfig {
            n_paths: 1,
            store_all_agents: n <= 100,
            ..base.clone()
        };
        let limit = simulate_limit(&p, &ls.gains, &fig)?;
        let pop = simulate_population(&p, &ls.gains, fgains, inc, &fig)?;
        let lp = &limit.paths[0];
        let pp = &pop.paths[0];

        let mut cols = vec_columns("x0_star", &lp.x0);
        cols.extend(vec_columns("m_star", &lp.m));
        self.out.series("limit_states.csv", &grid, &cols)?;

        let mut cols = vec_columns("x0", &pp.x0);
        cols.extend(vec_columns("m", &pp.m));
        cols.extend(vec_columns("xbar", pp.xbar.as_ref().expect("population path")));
        for a in &pp.agents {
            cols.extend(vec_columns(&format!("x{}", a.index), &a.x));
        }
        self.out.series("population_states.csv", &grid, &cols)?;

        let mut cols = vec_columns("u0bar_star", &lp.u0);
        cols.extend(vec_columns("u1bar_star", &lp.u1));
        cols.extend(vec_columns("v_star", &lp.v));
        cols.extend(vec_columns("u0_N", &pp.u0));
        cols.extend(vec_columns("u1_N", &pp.u1));
        cols.extend(vec_columns("v_N", &pp.v));
        // mean-field follower controls along the population path: what the
        // followers' limit strategy delivers and what the leader wants
        let along = |a: &MatrixTrajectory, b: &MatrixTrajectory| -> VecSeries {
            let mut s = VecSeries {
                dim: a.shape().0,
                data: Vec::new(),
            };
            for k in 0..grid.len() {
                let x0 = DMatrix::from_column_slice(p.n, 1, pp.x0.node(k));
                let m = DMatrix::from_column_slice(p.n, 1, pp.m.node(k));
                let u = &a.values[k] * x0 + &b.values[k] * m;
                s.data.extend(u.iter());
            }
            s
        };
        cols.extend(vec_columns("u1bar_desired", &along(&ls.gains.theta21, &ls.gains.theta22)));
        if let Some(fg) = fgains {
            cols.extend(vec_columns("u1bar_plus", &along(&fg.gx0bar, &fg.gmbar)));
        }
        for a in &pp.agents {
            cols.extend(vec_columns(&format!("u1_{}", a.index), &a.u1));
        }
        self.out.series("controls.csv", &grid, &cols)?;

        let mut cols: Vec<Column> = vec![
            ("limit_leader_running".into(), leader_running_cost(lp, &p, &grid)),
            ("population_leader_running".into(), leader_running_cost(pp, &p, &grid)),
        ];
        if !pp.agents.is_empty() {
            let per: Vec<Vec<f64>> = pp.agents.iter().map(|a| follower_running_cost(pp, a, &p, &grid)).collect();
            let mean = (0..grid.len())
                .map(|k| per.iter().map(|c| c[k]).sum::<f64>() / per.len() as f64)
                .collect();
            cols.push(("follower_running_mean".into(), mean));
        }
        self.out.series("costs.csv", &grid, &cols)?;

        // cost statistics
        let stats_cfg = SimConfig {
            n_paths: paths,
            store_agents: 0,
            ..base.clone()
        };
        let lim = limit_costs(&p, &ls.gains, &stats_cfg)?;
        let (lim_mean, lim_se) = mean_stderr(&lim);
        let ps = population_stats(&p, &ls.gains, fgains, inc, &stats_cfg)?;
        let (pop_mean, pop_se) = mean_stderr(&ps.j0);
        let (f_mean, f_se) = mean_stderr(&ps.jf);
        let dev = (lim_mean - ls.value).abs();
        self.check(
            stage,
            "limit cost matches V0",
            dev,
            format!("<= 3 stderr = {}", 3.0 * lim_se),
            dev <= 3.0 * lim_se,
            None,
        );

        let saddle = saddle_check(&p, &ls.gains, &stats_cfg, &[0.1, 0.5])?;
        self.check(stage, "saddle inequalities", 0.0, "signs within 3 stderr", saddle.signs_ok(), None);
        for (shape, raw, _) in &saddle.control_ratios {
            self.check(
                stage,
                &format!("control margin ratio ({shape:?})"),
                *raw,
                "in [20, 30]",
                (20.0..=30.0).contains(raw),
                None,
            );
        }

        let gap = fgains.map(|fg| incentive_match(&ls.gains, fg));
        if let Some(gap) = gap {
            let scale = 1.0 + max_norm(&[&ls.gains.theta21, &ls.gains.theta22]);
            self.check(
                stage,
                "incentive match",
                gap,
                format!("<= {:e}", 1e-4 * scale),
                gap <= 1e-4 * scale,
                None,
            );
        }
        self.note(
            "simulate",
            serde_json::json!({
                "N": n,
                "paths": paths,
                "seed": self.seed,
                "strategy": strategy,
                "em_substeps": em_substeps,
                "V0": ls.value,
                "limit_J0_mean": lim_mean,
                "limit_J0_stderr": lim_se,
                "population_J0_mean": pop_mean,
                "population_J0_stderr": pop_se,
                "follower_J_mean": f_mean,
                "follower_J_stderr": f_se,
                "incentive_match_gap": gap,
                "saddle": saddle_summary(&saddle),
            }),
        );
        Ok(())
    }

    pub fn sweep(
        &mut self,
        ls: &LeaderSolution,
        fs: Option<&FollowerSide>,
        ns: &[usize],
        paths: usize,
        strategy: Strategy,
        optimality: bool,
    ) -> Result<()> {
        let p = self.params.with_gamma(ls.riccati.gamma);
        let cfg = SimConfig {
            n_paths: paths,
            master_seed: self.seed,
            strategy,
            store_agents: 0,
            ..SimConfig::default()
        };
        let fgains = fs.map(|f| &f.gains);
        let inc = fs.map(|f| &f.inc);
        let mf = sweep_mean_field_gap(&p, &ls.gains, fgains, inc, ns, &cfg)?;
        self.write_sweep("sweep.csv", &mf)?;
        self.check(
            "sweep-n",
            "mean-field gap slope",
            mf.slope,
            "in [-1.25, -0.75]",
            (-1.25..=-0.75).contains(&mf.slope),
            Some(format!("95% half-width {}", mf.slope_halfwidth)),
        );
        self.note("sweep_mean_field", &mf);
        if optimality {
            let og = sweep_optimality_gap(&p, &ls.gains, fgains, inc, ns, &cfg)?;
            self.write_sweep("sweep_optimality.csv", &og)?;
            self.check(
                "sweep-n",
                "optimality-gap proxy slope",
                og.slope,
                "in [-1.3, -0.2]",
                (-1.3..=-0.2).contains(&og.slope),
                Some(og.note.clone()),
            );
            self.note("sweep_optimality_proxy", &og);
        }
        Ok(())
    }

    fn write_sweep(&mut self, name: &str, r: &SweepReport) -> Result<()> {
        let rows: Vec<Vec<String>> = r
            .points
            .iter()
            .map(|pt| vec![pt.n.to_string(), pt.gap.to_string(), pt.stderr.to_string()])
            .collect();
        self.out.table(name, &["N", "gap", "stderr"], &rows)
    }

    pub fn validate(&mut self) {
        let report = validate_assumptions(&self.params);
        for c in &report.checks {
            self.check(
                "validate",
                &format!("{} {} {}", c.assumption, c.item, c.check),
                c.margin,
                "margin >= 0",
                c.passed,
                None,
            );
        }
    }
}

fn saddle_summary(s: &SaddleReport) -> serde_json::Value {
    serde_json::json!({
        "n_paths": s.n_paths,
        "entries": s.entries,
        "control_ratios": s.control_ratios.iter().map(|(shape, raw, curv)| serde_json::json!({
            "shape": shape, "raw": raw, "curvature": curv
        })).collect::<Vec<_>>(),
    })
}

// ---------------------------------------------------------------------------
// Entry points

/// Result of one command invocation.
#[derive(Debug)]
pub struct Outcome {
    pub checks: Vec<Check>,
    /// Stage error that stopped the run, as `"<stage>: <kind>: <message>"`.
    pub error: Option<String>,
    pub manifest: Option<RunManifest>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.error.is_some() {
            2
        } else if self.passed() {
            0
        } else {
            1
        }
    }
}

fn load_params(g: &GlobalArgs) -> Result<(ModelParams, String)> {
    let mut p = match &g.config {
        Some(path) => load_config(path)?,
        None => parse_config(TABLE1_CONFIG)?,
    };
    if let Some(steps) = g.grid_steps {
        if steps < 2 {
            return Err(Error::Value("grid_steps must be at least 2".into()));
        }
        p.grid_steps = steps;
    }
    let text = to_config_string(&p);
    Ok((p, text))
}

fn stage_error(stage: &str, e: &Error) -> String {
    format!("{stage}: {}: {e}", e.kind())
}

/// Execute a parsed command. Output files and the manifest are written even
/// when a stage fails.
pub fn execute(cli: &Cli) -> Outcome {
    match cli.global.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build() {
            Ok(pool) => pool.install(|| execute_inner(cli)),
            Err(e) => Outcome {
                checks: Vec::new(),
                error: Some(format!("setup: ValueError: cannot build thread pool: {e}")),
                manifest: None,
            },
        },
        None => execute_inner(cli),
    }
}

fn execute_inner(cli: &Cli) -> Outcome {
    let started = now_unix();
    let (params, config_text) = match load_params(&cli.global) {
        Ok(v) => v,
        Err(e) => {
            return Outcome {
                checks: Vec::new(),
                error: Some(stage_error("config", &e)),
                manifest: None,
            }
        }
    };
    let out = match OutDir::create(&cli.global.out) {
        Ok(o) => o,
        Err(e) => {
            return Outcome {
                checks: Vec::new(),
                error: Some(stage_error("output", &e)),
                manifest: None,
            }
        }
    };
    let mut run = Run {
        params,
        seed: cli.global.seed,
        out,
        checks: Vec::new(),
        summary: BTreeMap::new(),
    };
    let error = dispatch(&mut run, &cli.command, &config_text).err();

    let mut outcome = Outcome {
        checks: run.checks.clone(),
        error,
        manifest: None,
    };
    run.note("checks", &run.checks.clone());
    run.note("status", if outcome.passed() { "OK" } else { "FAILED" });
    if let Some(e) = &outcome.error {
        run.note("error", e);
    }
    let summary = std::mem::take(&mut run.summary);
    if let Err(e) = run.out.json("summary.json", &summary) {
        outcome.error.get_or_insert(stage_error("output", &e));
    }
    let manifest = RunManifest {
        tool: "rimfg".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: cli.command.name().into(),
        flags: serde_json::json!({ "global": cli.global, "command": cli.command }),
        config_file: "config.json".into(),
        config_digest: digest_hex(config_text.as_bytes()),
        started_unix: started,
        finished_unix: now_unix(),
        outputs: run.out.files.clone(),
        status: if outcome.passed() { "OK" } else { "FAILED" }.into(),
        failures: outcome
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.stage, c.name))
            .collect(),
        error: outcome.error.clone(),
    };
    if let Err(e) = run.out.json(MANIFEST_FILE, &manifest) {
        outcome.error.get_or_insert(stage_error("output", &e));
    }
    outcome.manifest = Some(manifest);
    outcome
}

fn dispatch(run: &mut Run, cmd: &Command, config_text: &str) -> std::result::Result<(), String> {
    let wrap = |stage: &'static str| move |e: Error| stage_error(stage, &e);
    run.out
        .write("config.json", config_text.as_bytes())
        .map_err(wrap("output"))?;
    let gamma_of = |run: &Run, g: &Option<f64>| g.unwrap_or(run.params.gamma);
    match cmd {
        Command::Validate => run.validate(),
        Command::GammaHat { tol } => {
            let gh = run.gamma_hat(*tol).map_err(wrap("gamma-hat"))?;
            println!(
                "gamma_hat={} bracket=[{}, {}] trials={}",
                gh.gamma_hat,
                gh.bracket.0,
                gh.bracket.1,
                gh.trace.len()
            );
        }
        Command::SolveLeader { gamma } => {
            let g = gamma_of(run, gamma);
            let ls = run.solve_leader(g).map_err(wrap("solve-leader"))?;
            println!("V0={}", ls.value);
        }
        Command::SolveIncentive { gamma } => {
            let g = gamma_of(run, gamma);
            let ls = run.solve_leader(g).map_err(wrap("solve-leader"))?;
            let fs = run.solve_incentive(&ls).map_err(wrap("solve-incentive"))?;
            let threshold = 100.0 * IncentiveOptions::default().newton_tol;
            let max = fs.dt.max_matching_residual();
            println!(
                "max_matching_residual={max:e} threshold={threshold:e} {}",
                if fs.matching_failure.is_none() { "PASS" } else { "FAIL" }
            );
        }
        Command::Simulate {
            gamma,
            n,
            paths,
            strategy,
            em_substeps,
            disturbance,
            disturbance_csv,
        } => {
            let g = gamma_of(run, gamma);
            let dist = match disturbance_csv {
                Some(path) => {
                    let grid = run.params.grid();
                    Disturbance::Custom(read_series_csv(path, &grid, run.params.nv).map_err(wrap("config"))?)
                }
                None => match disturbance {
                    DisturbanceArg::Zero => Disturbance::Zero,
                    DisturbanceArg::Worst => Disturbance::Worst,
                },
            };
            let ls = run.solve_leader(g).map_err(wrap("solve-leader"))?;
            let fs = match strategy {
                StrategyArg::Incentive => Some(run.solve_incentive(&ls).map_err(wrap("solve-incentive"))?),
                StrategyArg::Team => None,
            };
            run.simulate(&ls, fs.as_ref(), *n, *paths, (*strategy).into(), *em_substeps, dist)
                .map_err(wrap("simulate"))?;
        }
        Command::SweepN {
            gamma,
            ns,
            paths,
            strategy,
            optimality,
        } => {
            let g = gamma_of(run, gamma);
            let ls = run.solve_leader(g).map_err(wrap("solve-leader"))?;
            let fs = match strategy {
                StrategyArg::Incentive => Some(run.solve_incentive(&ls).map_err(wrap("solve-incentive"))?),
                StrategyArg::Team => None,
            };
            run.sweep(&ls, fs.as_ref(), ns, *paths, (*strategy).into(), *optimality)
                .map_err(wrap("sweep-n"))?;
            if let Some(v) = run.summary.get("sweep_mean_field") {
                println!("mean-field gap slope={}", v["slope"]);
            }
        }
        Command::ReproducePaper => reproduce(run).map_err(|e| e.to_string())?,
    }
    Ok(())
}

/// Stage error carrying the stage name.
#[derive(Debug)]
struct StageError(String);

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn reproduce(run: &mut Run) -> std::result::Result<(), StageError> {
    let wrap = |stage: &'static str| move |e: Error| StageError(stage_error(stage, &e));
    run.gamma_hat(1e-4).map_err(wrap("gamma-hat"))?;
    let gamma = run.params.gamma;
    let ls = run.solve_leader(gamma).map_err(wrap("solve-leader"))?;
    let fs = run.solve_incentive(&ls).map_err(wrap("solve-incentive"))?;
    run.simulate(&ls, Some(&fs), 100, 500, Strategy::Incentive, 1, Disturbance::Worst)
        .map_err(wrap("simulate"))?;
    run.sweep(&ls, None, &[10, 40, 160, 640], 200, Strategy::Team, false)
        .map_err(wrap("sweep-n"))?;
    Ok(())
}

/// Run the full numerical example into `outdir` (bundled config, default seed).
pub fn reproduce_paper(outdir: &Path, threads: Option<usize>) -> Outcome {
    let cli = Cli {
        global: GlobalArgs {
            config: None,
            out: outdir.to_path_buf(),
            seed: 42,
            threads,
            grid_steps: None,
        },
        command: Command::ReproducePaper,
    };
    execute(&cli)
}

/// Print the outcome in a human-readable form.
pub fn report(outcome: &Outcome) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    for c in &outcome.checks {
        let detail = c.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default();
        let _ = writeln!(
            out,
            "[{}] {}: {} = {:e} (limit {}){}",
            if c.passed { "PASS" } else { "FAIL" },
            c.stage,
            c.name,
            c.value,
            c.limit,
            detail
        );
    }
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
}
