//! Run configuration, command orchestration and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::CharChain;
use crate::data::{InitialData, InitialDataSpec};
use crate::error::{Error, Result};
use crate::fixedpoint::{
    self, ConstantOptions, ContractionConstants, FixedPointOptions, FixedPointReport,
};
use crate::fv::{self, FvOptions};
use crate::io::{self, SeriesRow};
use crate::model::{Component, Hooks, ModelParams};
use crate::solution::{BoundsReport, Problem, Solution};
use crate::trajectory::{FrozenControls, MaturityTrajectory};
use crate::verify::{self, SuiteOptions, SuiteReport};

/// Which solver produces the artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Char,
    Fv,
    #[default]
    Both,
}

impl Method {
    pub fn uses_char(self) -> bool {
        matches!(self, Method::Char | Method::Both)
    }

    pub fn uses_fv(self) -> bool {
        matches!(self, Method::Fv | Method::Both)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Method::Char),
            "fv" => Ok(Method::Fv),
            "both" => Ok(Method::Both),
            _ => Err(Error::InvalidConfig(format!(
                "unknown method {s:?}; expected char, fv or both"
            ))),
        }
    }
}

/// Finite-volume settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvSettings {
    /// Cells per axis for `run`.
    pub resolution: usize,
    pub cfl: f64,
    /// Cells per axis for `converge`.
    pub resolutions: Vec<usize>,
}

impl Default for FvSettings {
    fn default() -> Self {
        FvSettings {
            resolution: 128,
            cfl: 0.9,
            resolutions: vec![64, 128, 256],
        }
    }
}

fn default_output_samples() -> usize {
    17
}

fn default_snapshot_resolution() -> usize {
    32
}

fn default_bound_samples() -> usize {
    1000
}

/// JSON run configuration. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: PathBuf,
    #[serde(default)]
    pub initial_data: InitialDataSpec,
    #[serde(default)]
    pub method: Method,
    /// Maturity series times; empty means `output_samples` uniform times on `[0, T]`.
    #[serde(default)]
    pub output_times: Vec<f64>,
    #[serde(default = "default_output_samples")]
    pub output_samples: usize,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Cells per axis of characteristic snapshots.
    #[serde(default = "default_snapshot_resolution")]
    pub snapshot_resolution: usize,
    /// Times of the L1 comparison in `converge`; empty means `[T]`.
    #[serde(default)]
    pub converge_times: Vec<f64>,
    #[serde(default)]
    pub fv: FvSettings,
    #[serde(default)]
    pub fixed_point: FixedPointOptions,
    #[serde(default)]
    pub constants: ConstantOptions,
    #[serde(default)]
    pub hooks: Hooks,
    #[serde(default)]
    pub freeze_controls: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Random space-time samples of the density bound during `run`.
    #[serde(default = "default_bound_samples")]
    pub bound_samples: usize,
    #[serde(default)]
    pub verify: SuiteOptions,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("run config: {e}")))
    }
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub freeze_controls: Option<PathBuf>,
    pub fp_tol: Option<f64>,
    pub fp_max_iter: Option<usize>,
    pub window_safety: Option<f64>,
    pub disable_mitosis: bool,
    pub zero_loss: bool,
    pub seed: Option<u64>,
}

/// A validated configuration with everything loaded.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub problem: Problem,
    pub frozen: Option<Arc<FrozenControls>>,
    pub output_times: Vec<f64>,
    pub snapshot_times: Vec<f64>,
    pub converge_times: Vec<f64>,
}

impl Setup {
    pub fn params(&self) -> &ModelParams {
        &self.problem.params
    }
}

fn check_times(name: &str, times: &[f64], horizon: f64) -> Result<Vec<f64>> {
    let mut v = times.to_vec();
    for &t in &v {
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::InvalidConfig(format!(
                "{name} entry {t} outside [0, {horizon}]"
            )));
        }
    }
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Reads and validates a run configuration.
pub fn load(path: &Path, ov: &Overrides) -> Result<Setup> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let config = RunConfig::from_json_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    setup_from(config, &base, path, ov)
}

/// Validates an in-memory configuration whose relative paths resolve against `base`.
pub fn setup_from(
    mut config: RunConfig,
    base: &Path,
    config_path: &Path,
    ov: &Overrides,
) -> Result<Setup> {
    if let Some(m) = ov.method {
        config.method = m;
    }
    if let Some(t) = ov.fp_tol {
        config.fixed_point.tol = t;
    }
    if let Some(n) = ov.fp_max_iter {
        config.fixed_point.max_iter = n;
    }
    if let Some(w) = ov.window_safety {
        config.constants.window_safety = w;
    }
    if let Some(s) = ov.seed {
        config.seed = s;
    }
    if ov.disable_mitosis {
        config.hooks.mitosis_factor = 1.0;
    }
    if ov.zero_loss {
        config.hooks.zero_loss = true;
    }
    config.fixed_point.seed = config.seed;
    config.verify.seed = config.seed;

    let params_path = base.join(&config.params);
    if !params_path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "parameter file {} not found",
            params_path.display()
        )));
    }
    let params = ModelParams::from_file(&params_path)?;
    let data = InitialData::from_spec(&params, &config.initial_data)?;
    data.check_nonnegative()?;
    if !(config.hooks.mitosis_factor > 0.0 && config.hooks.mitosis_factor.is_finite()) {
        return Err(Error::InvalidConfig(
            "hooks.mitosis_factor must be positive".into(),
        ));
    }
    if !(config.fixed_point.tol > 0.0) || config.fixed_point.max_iter == 0 {
        return Err(Error::InvalidConfig(
            "fixed_point tol and max_iter must be positive".into(),
        ));
    }
    if !(config.constants.window_safety > 0.0 && config.constants.window_safety <= 1.0) {
        return Err(Error::InvalidConfig(
            "window_safety must lie in (0, 1]".into(),
        ));
    }
    if config.fv.resolution < 2 || config.snapshot_resolution < 1 {
        return Err(Error::InvalidConfig("resolutions must be positive".into()));
    }

    let frozen_path = match &ov.freeze_controls {
        Some(p) => Some(p.clone()),
        None => config.freeze_controls.as_ref().map(|p| base.join(p)),
    };
    let frozen = match frozen_path {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!(
                    "frozen control file {} not found",
                    p.display()
                )));
            }
            let fc = FrozenControls::from_csv(&p)?;
            if fc.follicles() != params.follicles {
                return Err(Error::InvalidConfig(
                    "frozen controls have the wrong follicle count".into(),
                ));
            }
            if fc.times[0] > 0.0 || *fc.times.last().unwrap() < params.horizon {
                return Err(Error::InvalidConfig(
                    "frozen controls must cover [0, T]".into(),
                ));
            }
            config.freeze_controls = Some(p);
            Some(Arc::new(fc))
        }
        None => None,
    };

    let horizon = params.horizon;
    let output_times = if config.output_times.is_empty() {
        let n = config.output_samples.max(2);
        (0..n)
            .map(|i| horizon * i as f64 / (n - 1) as f64)
            .collect()
    } else {
        check_times("output_times", &config.output_times, horizon)?
    };
    let snapshot_times = check_times("snapshot_times", &config.snapshot_times, horizon)?;
    let converge_times = if config.converge_times.is_empty() {
        vec![horizon]
    } else {
        check_times("converge_times", &config.converge_times, horizon)?
    };

    let problem = Problem::new(params, data)
        .with_hooks(config.hooks.clone())
        .with_frozen(frozen.clone());
    Ok(Setup {
        config,
        config_path: config_path.to_path_buf(),
        problem,
        frozen,
        output_times,
        snapshot_times,
        converge_times,
    })
}

/// Sets the size of the global worker pool. Later calls have no effect.
pub fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// Process exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParams(_) | Error::InvalidConfig(_) | Error::Io(_) => 2,
        Error::AssumptionViolated(_) | Error::NonpositiveK2(_) | Error::DegenerateVelocity(_) => 3,
        Error::NoConvergence { .. } => 4,
        Error::BoundViolation(_) => 5,
        _ => 1,
    }
}

/// Characteristic solution of a configured problem.
#[derive(Debug, Clone)]
pub struct CharRun {
    pub solution: Solution,
    pub trajectory: Option<MaturityTrajectory>,
    pub constants: ContractionConstants,
    pub reports: Vec<FixedPointReport>,
    pub window: Option<f64>,
}

/// Constants of the configured problem.
pub fn cmd_constants(setup: &Setup) -> Result<ContractionConstants> {
    let pr = &setup.problem;
    fixedpoint::compute_constants(&pr.params, &pr.data, &pr.hooks, &setup.config.constants)
}

/// Closed-loop march, or an open-loop solve when controls are frozen.
pub fn solve_char(setup: &Setup) -> Result<CharRun> {
    let constants = cmd_constants(setup)?;
    let fp = &setup.config.fixed_point;
    match &setup.frozen {
        Some(frozen) => {
            let sol = fixedpoint::open_loop(
                &setup.problem,
                frozen.clone(),
                fp.knots_per_window,
                fp.steps_per_knot,
                fp.panels.unwrap_or(1),
            )?;
            Ok(CharRun {
                solution: sol,
                trajectory: None,
                constants,
                reports: Vec::new(),
                window: None,
            })
        }
        None => {
            let out = fixedpoint::march(&setup.problem, &constants, fp)?;
            Ok(CharRun {
                solution: out.solution,
                trajectory: Some(out.trajectory),
                constants,
                reports: out.reports,
                window: Some(out.window),
            })
        }
    }
}

fn char_series(sol: &Solution, times: &[f64]) -> Result<Vec<SeriesRow>> {
    let snaps = sol.maturity_series(times, sol.panels())?;
    snaps
        .into_iter()
        .map(|s| {
            let (u, big_u) = sol.tracer().table().controls(s.t)?;
            Ok(SeriesRow {
                t: s.t,
                m_f: s.m_f,
                u,
                big_u,
            })
        })
        .collect()
}

/// Chains at a 3x3 lattice of points for every component.
#[derive(Debug, Clone, Serialize)]
pub struct ChainDump {
    pub component: String,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub chain: CharChain,
}

fn dump_chains(sol: &Solution, times: &[f64]) -> Result<Vec<ChainDump>> {
    let p = sol.params();
    let mut out = Vec::new();
    for &t in times {
        for c in Component::all(p.follicles, p.cycles) {
            for x in [0.25, 0.5, 0.75] {
                for y in [0.25, 0.5, 0.75] {
                    out.push(ChainDump {
                        component: c.label(),
                        t,
                        x,
                        y,
                        chain: sol.backtrace(c, t, x, y)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Finite-volume details in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct FvManifest {
    pub resolution: usize,
    pub cfl: f64,
    pub steps: usize,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_path: String,
    pub config: RunConfig,
    pub params: ModelParams,
    pub output_times: Vec<f64>,
    pub snapshot_times: Vec<f64>,
    pub constants: ContractionConstants,
    pub open_loop: bool,
    pub window: Option<f64>,
    pub picard: Vec<FixedPointReport>,
    pub bounds: Option<BoundsReport>,
    pub linearity_error: Option<f64>,
    pub fv: Option<FvManifest>,
    pub files: Vec<String>,
}

fn manifest_base(setup: &Setup, command: &str, constants: ContractionConstants) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config_path: setup.config_path.display().to_string(),
        config: setup.config.clone(),
        params: (*setup.problem.params).clone(),
        output_times: setup.output_times.clone(),
        snapshot_times: setup.snapshot_times.clone(),
        constants,
        open_loop: setup.frozen.is_some(),
        window: None,
        picard: Vec::new(),
        bounds: None,
        linearity_error: None,
        fv: None,
        files: Vec::new(),
    }
}

fn merged_times(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = a.iter().chain(b).copied().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// `run`: maturity series and snapshots for the configured method(s).
pub fn cmd_run(setup: &Setup, out: &Path, chains: bool) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let p = setup.problem.params.clone();
    let method = setup.config.method;
    let constants = cmd_constants(setup)?;
    let mut manifest = manifest_base(setup, "run", constants);
    let mut files = Vec::new();

    if method.uses_char() {
        let run = solve_char(setup)?;
        let sol = &run.solution;
        manifest.window = run.window;
        manifest.picard = run.reports.clone();
        if let Some(traj) = &run.trajectory {
            let mut rng = ChaCha8Rng::seed_from_u64(setup.config.seed);
            manifest.bounds = Some(sol.check_bounds(
                traj,
                &run.constants,
                setup.config.bound_samples,
                &mut rng,
            )?);
        }
        if let Some(frozen) = &setup.frozen {
            let mut rng = ChaCha8Rng::seed_from_u64(setup.config.seed);
            manifest.linearity_error = Some(verify::linearity(
                &setup.problem,
                frozen.clone(),
                50,
                &mut rng,
            )?);
        }
        let rows = char_series(sol, &setup.output_times)?;
        let name = "maturity_char.csv";
        io::write_maturity_csv(&out.join(name), p.follicles, &rows)?;
        files.push(name.to_string());
        for (i, &t) in setup.snapshot_times.iter().enumerate() {
            let snap = sol.snapshot(t, setup.config.snapshot_resolution)?;
            let name = format!("snapshot_char_{i:03}.csv");
            io::write_snapshot_csv(&out.join(&name), t, &snap)?;
            files.push(name);
        }
        if chains {
            let times = if setup.snapshot_times.is_empty() {
                vec![p.horizon]
            } else {
                setup.snapshot_times.clone()
            };
            let dump = dump_chains(sol, &times)?;
            io::write_json(&out.join("chains.json"), &dump)?;
            files.push("chains.json".into());
        }
    }

    if method.uses_fv() {
        let s = &setup.config.fv;
        let opts = FvOptions {
            cfl: s.cfl,
            ..FvOptions::new(s.resolution)
        };
        let times = merged_times(&setup.output_times, &setup.snapshot_times);
        let run = fv::run(&setup.problem, &times, &opts)?;
        let mut rows = Vec::new();
        for &t in &setup.output_times {
            let (snap, u, big_u) = &run.series[times.iter().position(|&s| s == t).expect("merged")];
            rows.push(SeriesRow {
                t,
                m_f: snap.m_f.clone(),
                u: u.clone(),
                big_u: *big_u,
            });
        }
        let name = "maturity_fv.csv";
        io::write_maturity_csv(&out.join(name), p.follicles, &rows)?;
        files.push(name.to_string());
        for (i, &t) in setup.snapshot_times.iter().enumerate() {
            let grid = &run.grids[times.iter().position(|&s| s == t).expect("merged")];
            let name = format!("snapshot_fv_{i:03}.csv");
            io::write_snapshot_csv(&out.join(&name), t, &grid.snapshot(&p))?;
            files.push(name);
        }
        manifest.fv = Some(FvManifest {
            resolution: s.resolution,
            cfl: s.cfl,
            steps: run.steps,
        });
    }

    files.push("manifest.json".into());
    manifest.files = files;
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// One row of the L1 convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L1Row {
    pub t: f64,
    pub resolution: usize,
    pub h: f64,
    pub l1_error: f64,
    pub order: f64,
}

/// One row of the maturity convergence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaturityRow {
    pub resolution: usize,
    pub h: f64,
    /// Sup over output times and follicles of `|M_f - M_f^char|`.
    pub linf_error: f64,
    pub order: f64,
}

/// Output of `converge`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergeReport {
    pub method: Method,
    pub resolutions: Vec<usize>,
    pub l1: Vec<L1Row>,
    pub maturity: Vec<MaturityRow>,
}

fn order(prev: Option<(f64, f64)>, h: f64, e: f64) -> f64 {
    match prev {
        Some((hp, ep)) if ep > 0.0 && e > 0.0 => (ep / e).ln() / (hp / h).ln(),
        _ => f64::NAN,
    }
}

/// Characteristic values at the cell centres of an `n x n` grid, in the FV layout.
pub fn char_cells(sol: &Solution, t: f64, n: usize) -> Result<Vec<f64>> {
    let p = sol.params();
    let comps = Component::all(p.follicles, p.cycles);
    let h = 1.0 / n as f64;
    let blocks: Result<Vec<Vec<f64>>> = comps
        .par_iter()
        .map(|&c| {
            let mut v = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    v.push(sol.eval(c, t, (i as f64 + 0.5) * h, (j as f64 + 0.5) * h)?);
                }
            }
            Ok(v)
        })
        .collect();
    Ok(blocks?.concat())
}

/// `converge`: error of the chosen method against the characteristic solution.
pub fn cmd_converge(
    setup: &Setup,
    out: &Path,
    resolutions: Option<&[usize]>,
) -> Result<ConvergeReport> {
    fs::create_dir_all(out)?;
    let res: Vec<usize> = resolutions
        .map(|r| r.to_vec())
        .unwrap_or_else(|| setup.config.fv.resolutions.clone());
    if res.len() < 3 || res.iter().any(|&n| n < 2) {
        return Err(Error::InvalidConfig(
            "converge needs at least three resolutions of 2 or more cells".into(),
        ));
    }
    let method = setup.config.method;
    let reference = solve_char(setup)?;
    let sol = &reference.solution;
    let ref_series = sol.maturity_series(&setup.output_times, sol.panels())?;
    let times = merged_times(&setup.output_times, &setup.converge_times);
    let mut l1 = Vec::new();
    let mut maturity = Vec::new();
    let mut prev_m: Option<(f64, f64)> = None;
    let mut prev_l1: Vec<Option<(f64, f64)>> = vec![None; setup.converge_times.len()];
    for &n in &res {
        let h = 1.0 / n as f64;
        let fv_run = if method.uses_fv() {
            let opts = FvOptions {
                cfl: setup.config.fv.cfl,
                ..FvOptions::new(n)
            };
            Some(fv::run(&setup.problem, &times, &opts)?)
        } else {
            None
        };
        let idx = |t: f64| times.iter().position(|&s| s == t).expect("merged");
        let mut linf: f64 = 0.0;
        for (k, &t) in setup.output_times.iter().enumerate() {
            let cand = match &fv_run {
                Some(r) => r.series[idx(t)].0.m_f.clone(),
                None => sol.maturity_series(&[t], sol.panels())?.remove(0).m_f,
            };
            for (a, b) in cand.iter().zip(&ref_series[k].m_f) {
                linf = linf.max((a - b).abs());
            }
        }
        maturity.push(MaturityRow {
            resolution: n,
            h,
            linf_error: linf,
            order: order(prev_m, h, linf),
        });
        prev_m = Some((h, linf));
        for (k, &t) in setup.converge_times.iter().enumerate() {
            let reference_cells = char_cells(sol, t, n)?;
            let cand = match &fv_run {
                Some(r) => r.grids[idx(t)].cells.concat(),
                None => reference_cells.clone(),
            };
            let err = h
                * h
                * cand
                    .iter()
                    .zip(&reference_cells)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            l1.push(L1Row {
                t,
                resolution: n,
                h,
                l1_error: err,
                order: order(prev_l1[k], h, err),
            });
            prev_l1[k] = Some((h, err));
        }
    }
    l1.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.resolution.cmp(&b.resolution)));
    let rows: Vec<Vec<f64>> = l1
        .iter()
        .map(|r| vec![r.t, r.resolution as f64, r.h, r.l1_error, r.order])
        .collect();
    io::write_table_csv(
        &out.join("converge_l1.csv"),
        &["t", "resolution", "h", "l1_error", "order"],
        &rows,
    )?;
    let rows: Vec<Vec<f64>> = maturity
        .iter()
        .map(|r| vec![r.resolution as f64, r.h, r.linf_error, r.order])
        .collect();
    io::write_table_csv(
        &out.join("converge_maturity.csv"),
        &["resolution", "h", "linf_error", "order"],
        &rows,
    )?;
    let report = ConvergeReport {
        method,
        resolutions: res,
        l1,
        maturity,
    };
    io::write_json(&out.join("converge.json"), &report)?;
    Ok(report)
}

/// `verify`: the property suite, written to `verify.json`.
pub fn cmd_verify(setup: &Setup, out: &Path) -> Result<SuiteReport> {
    fs::create_dir_all(out)?;
    let closed = setup.problem.clone().with_frozen(None);
    let constants = cmd_constants(setup)?;
    let outcome = fixedpoint::march(&closed, &constants, &setup.config.fixed_point)?;
    let report = verify::run_suite(
        &closed,
        &outcome,
        &setup.config.fixed_point,
        &setup.config.verify,
        setup.frozen.clone(),
    )?;
    io::write_json(&out.join("verify.json"), &report)?;
    Ok(report)
}
