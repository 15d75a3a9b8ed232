//! Contraction constants, the maturity map G, Picard iteration on one window
//! and the marching of windows over the whole horizon.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Field, GridField, InitialData};
use crate::error::{Error, Result};
use crate::model::{Component, Hooks, ModelParams, Phase};
use crate::solution::{MaturitySnapshot, Problem, Solution};
use crate::trajectory::{ControlSource, ControlTable, FrozenControls, MaturityTrajectory};

/// Sampling and safety settings for [`compute_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantOptions {
    /// Grid points per axis of the control box.
    pub resolution: usize,
    pub k1_inflation: f64,
    pub k2_deflation: f64,
    /// Factor applied to `min{1/(2 K1), T}`.
    pub window_safety: f64,
}

impl Default for ConstantOptions {
    fn default() -> Self {
        ConstantOptions {
            resolution: 64,
            k1_inflation: 1.05,
            k2_deflation: 0.95,
            window_safety: 0.9,
        }
    }
}

/// A-priori bound, velocity bounds, window length and contraction coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionConstants {
    pub k: f64,
    pub k1: f64,
    pub k2: f64,
    pub delta: f64,
    /// Largest window with `n t max_f (C1f + C2f) <= 1/2`; informational.
    pub delta_c: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// L-infinity bound on each follicle's densities over `[0, T]`.
    pub phi_bound: Vec<f64>,
    pub horizon: f64,
    pub options: ConstantOptions,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 || b <= a {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Running `sup |f|` plus one `sup |df/dv|` per variable.
#[derive(Debug, Clone, Default)]
struct C1Acc {
    sup: f64,
    inf: f64,
    grads: [f64; 3],
}

impl C1Acc {
    fn new() -> Self {
        C1Acc {
            sup: 0.0,
            inf: f64::INFINITY,
            grads: [0.0; 3],
        }
    }

    fn push(&mut self, v: f64, g: [f64; 3]) {
        self.sup = self.sup.max(v.abs());
        self.inf = self.inf.min(v);
        for (a, b) in self.grads.iter_mut().zip(g) {
            *a = a.max(b.abs());
        }
    }

    fn merge(mut self, o: C1Acc) -> C1Acc {
        self.sup = self.sup.max(o.sup);
        self.inf = self.inf.min(o.inf);
        for (a, b) in self.grads.iter_mut().zip(o.grads) {
            *a = a.max(b);
        }
        self
    }

    fn norm(&self) -> f64 {
        self.sup + self.grads.iter().sum::<f64>()
    }
}

/// `sup|f| + sum sup|df|` of `f(y, M_f, M)` over `ys x ma x mb` by central differences.
fn sample_c1<F: Fn(f64, f64, f64) -> f64 + Sync>(
    ys: &[f64],
    ma: &[f64],
    mb: &[f64],
    scale: f64,
    f: F,
) -> C1Acc {
    let hy = 1e-6;
    let hm = 1e-6 * scale.max(1.0);
    ys.par_iter()
        .map(|&y| {
            let mut acc = C1Acc::new();
            for &a in ma {
                for &b in mb {
                    let v = f(y, a, b);
                    let dy = if ys.len() > 1 {
                        (f(y + hy, a, b) - f(y - hy, a, b)) / (2.0 * hy)
                    } else {
                        0.0
                    };
                    let da = if ma.len() > 1 {
                        (f(y, a + hm, b) - f(y, (a - hm).max(0.0), b))
                            / (a + hm - (a - hm).max(0.0))
                    } else {
                        0.0
                    };
                    let db = (f(y, a, b + hm) - f(y, a, (b - hm).max(0.0)))
                        / (b + hm - (b - hm).max(0.0));
                    acc.push(v, [dy, da, db]);
                }
            }
            acc
        })
        .reduce(C1Acc::new, C1Acc::merge)
}

/// Per-follicle sums of data norms `(sum_k |bar|, sum_{k>=2} |hat|, sum_k |tilde|)`.
fn sup_sums(p: &ModelParams, data: &InitialData, f: usize) -> (f64, f64, f64) {
    let mut s = (0.0, 0.0, 0.0);
    for k in 1..=p.cycles {
        s.0 += data.field(Component::new(f, Phase::One, k)).sup_norm();
        if k >= 2 {
            s.1 += data.field(Component::new(f, Phase::Two, k)).sup_norm();
        }
        s.2 += data.field(Component::new(f, Phase::Three, k)).sup_norm();
    }
    s
}

/// Contraction coefficients `(C1f, C2f)` for window length `t`.
pub fn contraction_coefficients(
    p: &ModelParams,
    data: &InitialData,
    k1: f64,
    k2: f64,
    t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let gm2 = p.gamma_m * p.gamma_m;
    let (a1, a2) = (p.a1, p.a2);
    let d = 1.0 - t * k1;
    let mut c1 = Vec::with_capacity(p.follicles);
    let mut c2 = Vec::with_capacity(p.follicles);
    for f in 0..p.follicles {
        let (sb, sh, st) = sup_sums(p, data, f);
        let k1s = k1 * k1;
        c1.push(
            a1 * gm2 * (2.0 * k1s - t * k1s + 3.0 * k1 + t * k1s * k2 + 9.0 * k1 * k2) / (k2 * d)
                * sb
                + 2.0 * (a2 - a1) * gm2 * (k1s + 2.0 * t * k1s * k2 + 4.0 * k1 * k2) / (k2 * d)
                    * sh
                + a2 * gm2 * (2.0 * k1 + 2.0 * t * k1s) / d * st,
        );
        c2.push(
            a1 * gm2 * (2.0 * k1s + 2.0 * k1 + 12.0 * k1 * k2 - 2.0 * t * k1s * k2) / (k2 * d) * sb
                + 2.0 * (a2 - a1) * gm2 * (k1s + 6.0 * k1 * k2) / (k2 * d) * sh
                + 4.0 * a2 * gm2 * k1 / d * st,
        );
    }
    (c1, c2)
}

/// Computes `K`, `K1`, `K2`, the window length and the contraction coefficients.
pub fn compute_constants(
    p: &ModelParams,
    data: &InitialData,
    hooks: &Hooks,
    opts: &ConstantOptions,
) -> Result<ContractionConstants> {
    let mut k = 0.0;
    for f in 0..p.follicles {
        for kk in 1..=p.cycles {
            k += p.a1 * data.field(Component::new(f, Phase::One, kk)).l1_norm()
                + (p.a2 - p.a1) * data.field(Component::new(f, Phase::Two, kk)).l1_norm()
                + p.a2 * data.field(Component::new(f, Phase::Three, kk)).l1_norm();
        }
    }
    let g = p.gamma_0() + p.gamma_s;
    k *= 2f64.powi(p.cycles as i32) * g * g;
    let r = opts.resolution.max(2);
    let ms = linspace(0.0, k, r);
    let ys = linspace(0.0, 1.0, r);
    let one = [0.0];
    let mut k1: f64 = 0.0;
    let mut k2 = f64::INFINITY;
    let big_u = |m: f64| {
        if hooks.zero_loss {
            1.0
        } else {
            p.global_control(m)
        }
    };
    let u_of = |mf: f64, m: f64| p.local_gain(mf) * big_u(m);
    for f in 0..p.follicles {
        k1 = k1.max(p.ghat(f));
        let gb = sample_c1(&one, &ms, &ms, k, |_, mf, m| p.gbar(f, u_of(mf, m)));
        let hb = sample_c1(&ys, &ms, &ms, k, |y, mf, m| p.hbar(f, y, u_of(mf, m)));
        let ht = sample_c1(&ys, &ms, &ms, k, |y, mf, m| p.htilde(f, y, u_of(mf, m)));
        k1 = k1.max(gb.norm()).max(hb.norm()).max(ht.norm());
        k2 = k2.min(gb.inf).min(hb.inf);
    }
    let lb = sample_c1(&ys, &one, &ms, k, |y, _, m| p.lbar(y, big_u(m)));
    let lt = sample_c1(&ys, &one, &ms, k, |y, _, m| p.ltilde(y, big_u(m)));
    k1 = k1.max(lb.norm()).max(lt.norm());
    if !(k2 > 0.0) {
        return Err(Error::NonpositiveK2(k2));
    }
    let k1 = k1 * opts.k1_inflation;
    let k2 = k2 * opts.k2_deflation;
    let delta = opts.window_safety * (1.0 / (2.0 * k1)).min(p.horizon);
    let (c1, c2) = contraction_coefficients(p, data, k1, k2, delta);
    let delta_c = contraction_window(p, data, k1, k2);
    let phi_bound = phi_bounds(p, data, k1, k2, p.horizon);
    Ok(ContractionConstants {
        k,
        k1,
        k2,
        delta,
        delta_c,
        c1,
        c2,
        phi_bound,
        horizon: p.horizon,
        options: *opts,
    })
}

/// Largest `t < 1/K1` with `n t max_f (C1f(t) + C2f(t)) <= 1/2`, by bisection.
fn contraction_window(p: &ModelParams, data: &InitialData, k1: f64, k2: f64) -> f64 {
    let n = p.follicles as f64;
    let g = |t: f64| {
        let (c1, c2) = contraction_coefficients(p, data, k1, k2, t);
        let m = c1.iter().zip(&c2).fold(0.0f64, |a, (x, y)| a.max(x + y));
        n * t * m - 0.5
    };
    let hi0 = (1.0 - 1e-9) / k1;
    if g(hi0) <= 0.0 {
        return hi0;
    }
    let (mut lo, mut hi) = (0.0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// `e^{2(N+1) T K1} max_k {...}` per follicle.
pub fn phi_bounds(p: &ModelParams, data: &InitialData, k1: f64, k2: f64, horizon: f64) -> Vec<f64> {
    let n = p.cycles as i32;
    let growth = (2.0 * (p.cycles as f64 + 1.0) * horizon * k1).exp();
    (0..p.follicles)
        .map(|f| {
            let fb = (2.0 * k1 / k2 + p.a1 * k1 / p.tau_g[f]).powi(n);
            let fh = (2.0 * k1 / k2 + 2.0 * p.tau_g[f] / (p.a1 * k2)).powi(n);
            let mut m: f64 = 0.0;
            for kk in 1..=p.cycles {
                m = m
                    .max(fb * data.field(Component::new(f, Phase::One, kk)).sup_norm())
                    .max(fh * data.field(Component::new(f, Phase::Two, kk)).sup_norm())
                    .max(data.field(Component::new(f, Phase::Three, kk)).sup_norm());
            }
            growth * m
        })
        .collect()
}

/// Settings of the fixed-point solver and window marching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointOptions {
    /// Residual tolerance relative to `max(1, K)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Trajectory sample intervals per window.
    pub knots_per_window: usize,
    /// Integration steps per trajectory interval.
    pub steps_per_knot: usize,
    /// Fixed quadrature level; `None` selects it by the Richardson estimate.
    pub panels: Option<usize>,
    pub richardson_tol: f64,
    /// Windows composed by back-tracing before the solution is resampled.
    pub max_chain_windows: usize,
    pub resample_resolution: usize,
    /// Random pairs used to confirm the contraction before each window.
    pub contraction_pairs: usize,
    pub seed: u64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-10,
            max_iter: 200,
            knots_per_window: 96,
            steps_per_knot: 2,
            panels: None,
            richardson_tol: 1e-7,
            max_chain_windows: 8,
            resample_resolution: 1024,
            contraction_pairs: 0,
            seed: 0,
        }
    }
}

/// Progress of one Picard solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub window: (f64, f64),
    pub iterations: usize,
    /// `sup |G(M^i) - M^i|` per iteration.
    pub residuals: Vec<f64>,
    pub final_residual: f64,
    /// Ratio of the second residual to the first.
    pub contraction_ratio: f64,
    pub panels: usize,
    pub tolerance: f64,
}

/// Uniform knots covering `[start, end]`.
pub fn window_knots(start: f64, end: f64, intervals: usize) -> Vec<f64> {
    let n = intervals.max(1);
    let mut v: Vec<f64> = (0..=n)
        .map(|i| start + (end - start) * i as f64 / n as f64)
        .collect();
    v[n] = end;
    v
}

/// The map G on one window, given the history before it.
#[derive(Debug, Clone)]
pub struct GMap {
    problem: Problem,
    /// Accepted trajectory up to the window start.
    prior: Option<MaturityTrajectory>,
    epochs: Vec<(f64, Arc<InitialData>)>,
    knots: Vec<f64>,
    max_step: f64,
    panels: usize,
}

impl GMap {
    pub fn new(
        problem: Problem,
        prior: Option<MaturityTrajectory>,
        epochs: Vec<(f64, Arc<InitialData>)>,
        knots: Vec<f64>,
        steps_per_knot: usize,
        panels: usize,
    ) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidConfig(
                "window needs at least two knots".into(),
            ));
        }
        if let Some(pr) = &prior {
            if (pr.end() - knots[0]).abs() > 1e-12 {
                return Err(Error::InvalidConfig(
                    "prior trajectory must end at the window start".into(),
                ));
            }
        }
        let max_step = (knots[1] - knots[0]) / steps_per_knot.max(1) as f64;
        Ok(GMap {
            problem,
            prior,
            epochs,
            knots,
            max_step,
            panels: panels.max(1),
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn set_panels(&mut self, panels: usize) {
        self.panels = panels.max(1);
    }

    /// Prior history followed by the window samples of `m` after the window start.
    pub fn full_trajectory(&self, m: &MaturityTrajectory) -> Result<MaturityTrajectory> {
        if m.times().len() != self.knots.len() {
            return Err(Error::InvalidConfig(
                "trajectory does not match window knots".into(),
            ));
        }
        match &self.prior {
            None => Ok(m.clone()),
            Some(pr) => {
                let mut full = pr.clone();
                full.extend(&m.times()[1..], &m.values()[1..])?;
                Ok(full)
            }
        }
    }

    /// Solution with controls frozen along `m`.
    pub fn solution(&self, m: &MaturityTrajectory) -> Result<Solution> {
        let full = Arc::new(self.full_trajectory(m)?);
        let table = Arc::new(ControlTable::new(
            self.problem.params.clone(),
            self.problem.hooks.clone(),
            ControlSource::ClosedLoop(full.clone()),
            full.times(),
            self.max_step,
        )?);
        Solution::new(
            self.problem.clone(),
            table,
            self.epochs.clone(),
            Some(full),
            self.panels,
        )
    }

    /// `G(m)` sampled on the window knots.
    pub fn apply(&self, m: &MaturityTrajectory) -> Result<MaturityTrajectory> {
        let sol = self.solution(m)?;
        let snaps = sol.maturity_series(&self.knots, self.panels)?;
        let mut values: Vec<Vec<f64>> = snaps.into_iter().map(|s| s.m_f).collect();
        if let Some(pr) = &self.prior {
            // The window start belongs to the accepted history.
            values[0] = pr.values().last().unwrap().clone();
        }
        MaturityTrajectory::new(self.knots.clone(), values)
    }

    /// Smallest level in {1, 2, 4, 8, 16} whose Richardson estimate at the
    /// window end is below `tol`, for the solution along `m`.
    pub fn select_panels(&mut self, m: &MaturityTrajectory, tol: f64) -> Result<usize> {
        let sol = self.solution(m)?;
        let t = *self.knots.last().unwrap();
        let mut p = 1;
        while p < 16 {
            if sol.richardson(t, p)? < tol {
                break;
            }
            p *= 2;
        }
        self.panels = p;
        Ok(p)
    }
}

/// Constant trajectory on `knots` with value `m0`.
pub fn constant_guess(knots: &[f64], m0: &[f64]) -> Result<MaturityTrajectory> {
    MaturityTrajectory::constant(knots.to_vec(), m0)
}

/// Random continuous trajectory with values in `[0, k]`.
pub fn random_trajectory<R: Rng>(
    knots: &[f64],
    follicles: usize,
    k: f64,
    rng: &mut R,
) -> Result<MaturityTrajectory> {
    let coarse = 5usize;
    let anchors: Vec<Vec<f64>> = (0..=coarse)
        .map(|_| (0..follicles).map(|_| rng.gen_range(0.0..=k)).collect())
        .collect();
    let (a, b) = (knots[0], *knots.last().unwrap());
    let values = knots
        .iter()
        .map(|&t| {
            let s = if b > a {
                (t - a) / (b - a) * coarse as f64
            } else {
                0.0
            };
            let i = (s.floor() as usize).min(coarse - 1);
            let w = s - i as f64;
            (0..follicles)
                .map(|f| (1.0 - w) * anchors[i][f] + w * anchors[i + 1][f])
                .collect()
        })
        .collect();
    MaturityTrajectory::new(knots.to_vec(), values)
}

/// Picard iteration `M <- G(M)` from `guess`.
pub fn picard_solve(
    g: &GMap,
    guess: MaturityTrajectory,
    k: f64,
    opts: &FixedPointOptions,
) -> Result<(MaturityTrajectory, FixedPointReport)> {
    let tol = opts.tol * k.max(1.0);
    let mut m = guess;
    let mut residuals = Vec::new();
    for it in 1..=opts.max_iter {
        let next = g.apply(&m)?;
        let r = next.distance(&m);
        residuals.push(r);
        m = next;
        if r < tol {
            let ratio = if residuals.len() >= 2 {
                residuals[1] / residuals[0]
            } else {
                0.0
            };
            let report = FixedPointReport {
                window: (g.knots[0], *g.knots.last().unwrap()),
                iterations: it,
                final_residual: r,
                residuals,
                contraction_ratio: ratio,
                panels: g.panels,
                tolerance: tol,
            };
            return Ok((m, report));
        }
    }
    Err(Error::NoConvergence {
        residual: *residuals.last().unwrap_or(&f64::NAN),
        iterations: opts.max_iter,
        tolerance: tol,
    })
}

/// `||G(a) - G(b)|| / ||a - b||` for one pair.
pub fn contraction_ratio(g: &GMap, a: &MaturityTrajectory, b: &MaturityTrajectory) -> Result<f64> {
    let d = a.distance(b);
    if d == 0.0 {
        return Ok(0.0);
    }
    Ok(g.apply(a)?.distance(&g.apply(b)?) / d)
}

/// Result of [`march`].
#[derive(Debug, Clone)]
pub struct MarchOutcome {
    pub solution: Solution,
    pub trajectory: MaturityTrajectory,
    pub reports: Vec<FixedPointReport>,
    pub constants: ContractionConstants,
    /// Window length actually used (after contraction checks).
    pub window: f64,
    /// Sampled contraction ratios per window (empty when not checked).
    pub contraction_checks: Vec<Vec<f64>>,
}

/// Solves successive windows of length `delta` up to the horizon.
pub fn march(
    problem: &Problem,
    constants: &ContractionConstants,
    opts: &FixedPointOptions,
) -> Result<MarchOutcome> {
    use rand::SeedableRng;
    let p = problem.params.clone();
    let horizon = p.horizon;
    if problem.frozen.is_some() {
        return Err(Error::InvalidConfig(
            "march needs closed-loop controls; use open_loop".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut epochs: Vec<(f64, Arc<InitialData>)> = vec![(0.0, problem.data.clone())];
    let mut accepted: Option<MaturityTrajectory> = None;
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    let mut start = 0.0;
    let mut window = constants.delta;
    let mut chained = 0usize;
    let mut panels = opts.panels.unwrap_or(1);
    let mut last_solution: Option<Solution> = None;
    // Maturity at the first window start comes from the data alone.
    let m_start = initial_maturity(problem, panels)?;
    let mut m_now = m_start.m_f.clone();
    while start < horizon - 1e-12 * horizon.max(1.0) {
        if chained >= opts.max_chain_windows {
            let sol = last_solution.as_ref().expect("a window was solved");
            let data = resample(sol, start, opts.resample_resolution)?;
            epochs.push((start, Arc::new(data)));
            chained = 0;
        }
        let mut end = (start + window).min(horizon);
        if horizon - end < 1e-9 * window {
            end = horizon;
        }
        let knots = window_knots(start, end, opts.knots_per_window);
        let mut g = GMap::new(
            problem.clone(),
            accepted.clone(),
            epochs.clone(),
            knots.clone(),
            opts.steps_per_knot,
            panels,
        )?;
        let guess = constant_guess(&knots, &m_now)?;
        if opts.panels.is_none() {
            panels = g.select_panels(&guess, opts.richardson_tol)?;
        }
        if opts.contraction_pairs > 0 {
            let mut ratios = Vec::new();
            for _ in 0..opts.contraction_pairs {
                let a = random_trajectory(&knots, p.follicles, constants.k, &mut rng)?;
                let b = random_trajectory(&knots, p.follicles, constants.k, &mut rng)?;
                ratios.push(contraction_ratio(&g, &a, &b)?);
            }
            let worst = ratios.iter().fold(0.0f64, |a, &b| a.max(b));
            checks.push(ratios);
            if worst > 0.5 {
                window *= 0.5;
                continue;
            }
        }
        let (m, report) = picard_solve(&g, guess, constants.k, opts)?;
        reports.push(report);
        m_now = m.values().last().unwrap().clone();
        let full = g.full_trajectory(&m)?;
        last_solution = Some(g.solution(&m)?);
        accepted = Some(full);
        start = end;
        chained += 1;
    }
    let trajectory = accepted.ok_or_else(|| Error::InvalidConfig("empty horizon".into()))?;
    let solution = last_solution.expect("at least one window");
    Ok(MarchOutcome {
        solution,
        trajectory,
        reports,
        constants: constants.clone(),
        window,
        contraction_checks: checks,
    })
}

/// Maturity of the initial data.
pub fn initial_maturity(problem: &Problem, panels: usize) -> Result<MaturitySnapshot> {
    let p = &problem.params;
    let mut m_f = vec![0.0; p.follicles];
    for c in Component::all(p.follicles, p.cycles) {
        let field = problem.data.field(c);
        if field.is_zero() {
            continue;
        }
        let (bx, by) = field.breaks();
        let mut nodes = Vec::new();
        crate::quadrature::rectangle((0.0, 1.0), (0.0, 1.0), &bx, &by, 4 * panels, &mut nodes);
        m_f[c.follicle] += nodes
            .iter()
            .map(|n| n.w * p.maturity_weight(c.phase, n.y) * field.eval(n.x, n.y))
            .sum::<f64>();
    }
    let m = m_f.iter().sum();
    Ok(MaturitySnapshot { t: 0.0, m_f, m })
}

/// Solution restricted to time `t` as grid data on `(r+1)^2` nodes per component.
pub fn resample(sol: &Solution, t: f64, r: usize) -> Result<InitialData> {
    let p = sol.params().clone();
    let comps = Component::all(p.follicles, p.cycles);
    let fields: Result<Vec<Field>> = comps
        .par_iter()
        .map(|&c| {
            let mut values = Vec::with_capacity((r + 1) * (r + 1));
            for i in 0..=r {
                for j in 0..=r {
                    values.push(sol.eval(c, t, i as f64 / r as f64, j as f64 / r as f64)?);
                }
            }
            Ok(Field::Grid(Arc::new(GridField {
                resolution: r,
                values,
            })))
        })
        .collect();
    InitialData::from_fields(&p, fields?)
}

/// Open-loop solution on `[0, T]` with prescribed controls.
pub fn open_loop(
    problem: &Problem,
    frozen: Arc<FrozenControls>,
    intervals: usize,
    steps_per_knot: usize,
    panels: usize,
) -> Result<Solution> {
    let horizon = problem.params.horizon;
    let mut knots = window_knots(0.0, horizon, intervals);
    knots.extend(
        frozen
            .times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t < horizon),
    );
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let max_step = horizon / (intervals.max(1) * steps_per_knot.max(1)) as f64;
    let table = Arc::new(ControlTable::new(
        problem.params.clone(),
        problem.hooks.clone(),
        ControlSource::OpenLoop(frozen),
        &knots,
        max_step,
    )?);
    Solution::new(
        problem.clone(),
        table,
        vec![(0.0, problem.data.clone())],
        None,
        panels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataTerm, InitialDataSpec, Piecewise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cycles: usize, follicles: usize) -> ModelParams {
        let mut p =
            ModelParams::from_json_str(include_str!("../configs/default_params.json")).unwrap();
        p.cycles = cycles;
        p.follicles = follicles;
        p.tau_g.truncate(follicles);
        p.tau_h.truncate(follicles);
        p
    }

    fn bumps(p: &ModelParams, amplitude: f64) -> InitialData {
        let b = Piecewise::unit_bump();
        let spec = InitialDataSpec {
            all: vec![DataTerm::Polynomial {
                amplitude,
                x: b.clone(),
                y: b,
            }],
            components: vec![],
        };
        InitialData::from_spec(p, &spec).unwrap()
    }

    fn small_opts() -> FixedPointOptions {
        FixedPointOptions {
            knots_per_window: 16,
            panels: Some(1),
            ..FixedPointOptions::default()
        }
    }

    #[test]
    fn k_formula_single_cycle_unit_masses() {
        let p = params(1, 1);
        let c = compute_constants(
            &p,
            &bumps(&p, 1.0),
            &Hooks::default(),
            &ConstantOptions::default(),
        )
        .unwrap();
        let g = p.gamma_0() + p.gamma_s;
        assert!((c.k - 2.0 * g * g * (p.a1 + (p.a2 - p.a1) + p.a2)).abs() < 1e-12);
    }

    #[test]
    fn constants_respect_window_rule() {
        let p = params(2, 2);
        let c = compute_constants(
            &p,
            &bumps(&p, 1.0),
            &Hooks::default(),
            &ConstantOptions::default(),
        )
        .unwrap();
        assert!(c.k1 >= c.k2 && c.k2 > 0.0);
        assert!(c.delta <= (1.0 / (2.0 * c.k1)).min(p.horizon));
        assert!((c.delta - 0.9 * (1.0 / (2.0 * c.k1)).min(p.horizon)).abs() < 1e-15);
        assert!(c.c1.iter().chain(&c.c2).all(|v| *v > 0.0));
    }

    #[test]
    fn k1_within_five_percent_of_finer_grid() {
        let p = params(2, 2);
        let d = bumps(&p, 1.0);
        let coarse = ConstantOptions {
            resolution: 16,
            ..ConstantOptions::default()
        };
        let fine = ConstantOptions {
            resolution: 160,
            ..ConstantOptions::default()
        };
        let a = compute_constants(&p, &d, &Hooks::default(), &coarse).unwrap();
        let b = compute_constants(&p, &d, &Hooks::default(), &fine).unwrap();
        assert!((a.k1 - b.k1).abs() <= 0.05 * b.k1, "{} vs {}", a.k1, b.k1);
        assert!((a.k2 - b.k2).abs() <= 0.05 * b.k2, "{} vs {}", a.k2, b.k2);
    }

    #[test]
    fn zero_data_has_zero_fixed_point() {
        let p = params(2, 2);
        let d = InitialData::zero(&p);
        let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
        assert_eq!(c.k, 0.0);
        let problem = Problem::new(p.clone(), d.clone());
        let knots = window_knots(0.0, c.delta, 16);
        let g = GMap::new(problem, None, vec![(0.0, Arc::new(d))], knots.clone(), 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_trajectory(&knots, 2, 10.0, &mut rng).unwrap();
        assert_eq!(g.apply(&m).unwrap().sup(), 0.0);
        let (fp, report) = picard_solve(
            &g,
            constant_guess(&knots, &[0.0, 0.0]).unwrap(),
            c.k,
            &small_opts(),
        )
        .unwrap();
        assert_eq!(report.iterations, 1);
        assert_eq!(fp.sup(), 0.0);
    }

    #[test]
    fn g_at_time_zero_is_initial_maturity() {
        let p = params(2, 2);
        let d = bumps(&p, 1.0);
        let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
        let problem = Problem::new(p.clone(), d.clone());
        let m0 = initial_maturity(&problem, 1).unwrap();
        let knots = window_knots(0.0, c.delta, 16);
        let g = GMap::new(problem, None, vec![(0.0, Arc::new(d))], knots.clone(), 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2 {
            let m = random_trajectory(&knots, 2, c.k, &mut rng).unwrap();
            let gm = g.apply(&m).unwrap();
            for f in 0..2 {
                assert!((gm.values()[0][f] - m0.m_f[f]).abs() < 1e-12);
            }
        }
        // Unit bumps: each follicle carries a1 + (a2 - a1) + a2 (gamma_0 + gamma_s) per cycle at y-centroid 1/2.
        let per_cycle = p.a1 * p.gamma_s * p.gamma_s * 0.5
            + (p.a2 - p.a1) * p.gamma_s * p.gamma_s * 0.5
            + p.a2 * p.gamma_0() * (p.gamma_0() * 0.5 + p.gamma_s);
        assert!((m0.m_f[0] - 2.0 * per_cycle).abs() < 1e-12);
    }

    #[test]
    fn picard_contracts_on_a_short_window() {
        let p = params(2, 2);
        let d = bumps(&p, 1.0);
        let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
        let problem = Problem::new(p.clone(), d.clone());
        let knots = window_knots(0.0, c.delta, 16);
        let g = GMap::new(
            problem.clone(),
            None,
            vec![(0.0, Arc::new(d))],
            knots.clone(),
            2,
            1,
        )
        .unwrap();
        let m0 = initial_maturity(&problem, 1).unwrap();
        let (m, report) = picard_solve(
            &g,
            constant_guess(&knots, &m0.m_f).unwrap(),
            c.k,
            &small_opts(),
        )
        .unwrap();
        assert!(report.contraction_ratio <= 0.5);
        assert!(report.final_residual < 1e-10 * c.k);
        assert!(g.apply(&m).unwrap().distance(&m) < 1e-10 * c.k);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_trajectory(&knots, 2, c.k, &mut rng).unwrap();
        let b = random_trajectory(&knots, 2, c.k, &mut rng).unwrap();
        assert!(contraction_ratio(&g, &a, &b).unwrap() <= 0.5);
    }

    #[test]
    fn picard_reports_no_convergence() {
        let p = params(1, 1);
        let d = bumps(&p, 1.0);
        let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
        let problem = Problem::new(p, d.clone());
        let knots = window_knots(0.0, c.delta, 8);
        let g = GMap::new(problem, None, vec![(0.0, Arc::new(d))], knots.clone(), 2, 1).unwrap();
        let opts = FixedPointOptions {
            max_iter: 1,
            ..small_opts()
        };
        let r = picard_solve(&g, constant_guess(&knots, &[c.k]).unwrap(), c.k, &opts);
        assert!(matches!(r, Err(Error::NoConvergence { iterations: 1, .. })));
    }

    #[test]
    fn march_rejects_frozen_controls() {
        let p = params(1, 1);
        let d = bumps(&p, 1.0);
        let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
        let fc = FrozenControls::new(
            vec![0.0, p.horizon],
            vec![vec![0.7], vec![0.7]],
            vec![0.8, 0.8],
        )
        .unwrap();
        let problem = Problem::new(p, d).with_frozen(Some(Arc::new(fc)));
        assert!(matches!(
            march(&problem, &c, &small_opts()),
            Err(Error::InvalidConfig(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn knots_cover_window(a in 0.0f64..1.0, len in 1e-3f64..1.0, n in 1usize..200) {
                let k = window_knots(a, a + len, n);
                prop_assert_eq!(k.len(), n + 1);
                prop_assert_eq!(k[0], a);
                prop_assert_eq!(*k.last().unwrap(), a + len);
                prop_assert!(k.windows(2).all(|w| w[1] > w[0]));
            }

            #[test]
            fn random_trajectories_stay_admissible(seed in 0u64..1000, k in 0.0f64..300.0) {
                let knots = window_knots(0.0, 0.1, 32);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_trajectory(&knots, 2, k, &mut rng).unwrap();
                for v in m.values() {
                    prop_assert!(v.iter().all(|x| *x >= 0.0 && *x <= k));
                }
            }
        }
    }
}
