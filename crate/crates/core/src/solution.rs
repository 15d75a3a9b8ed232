//! Evaluation of the constructed solution, maturity quadrature, the weak-form
//! residual and the a-priori bound checks.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::characteristics::{CharChain, Tracer};
use crate::data::InitialData;
use crate::error::{Error, Result};
use crate::model::{Component, ControlSnap, Hooks, ModelParams, Phase};
use crate::quadrature::{self, Node2};
use crate::trajectory::{ControlTable, FrozenControls, MaturityTrajectory};

/// Everything that defines a Cauchy problem apart from the control history.
#[derive(Debug, Clone)]
pub struct Problem {
    pub params: Arc<ModelParams>,
    pub data: Arc<InitialData>,
    pub hooks: Hooks,
    /// Open-loop controls; `None` means feedback through the maturity.
    pub frozen: Option<Arc<FrozenControls>>,
}

impl Problem {
    pub fn new(params: ModelParams, data: InitialData) -> Self {
        Problem {
            params: Arc::new(params),
            data: Arc::new(data),
            hooks: Hooks::default(),
            frozen: None,
        }
    }

    pub fn with_hooks(mut self, hooks: Hooks) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn with_frozen(mut self, frozen: Option<Arc<FrozenControls>>) -> Self {
        self.frozen = frozen;
        self
    }
}

/// `(component, x, y, value)` at a cell centre.
pub type SnapshotRow = (Component, f64, f64, f64);

/// Maturities at one time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaturitySnapshot {
    pub t: f64,
    pub m_f: Vec<f64>,
    pub m: f64,
}

/// A solution handle: control history, data epochs and quadrature level.
#[derive(Debug, Clone)]
pub struct Solution {
    problem: Problem,
    tracer: Tracer,
    epoch_data: Vec<Arc<InitialData>>,
    trajectory: Option<Arc<MaturityTrajectory>>,
    panels: usize,
}

impl Solution {
    /// `epochs` pairs each epoch start time with the data anchoring it.
    pub fn new(
        problem: Problem,
        table: Arc<ControlTable>,
        epochs: Vec<(f64, Arc<InitialData>)>,
        trajectory: Option<Arc<MaturityTrajectory>>,
        panels: usize,
    ) -> Result<Self> {
        let starts = epochs.iter().map(|e| e.0).collect();
        let tracer = Tracer::new(table, starts)?;
        Ok(Solution {
            problem,
            tracer,
            epoch_data: epochs.into_iter().map(|e| e.1).collect(),
            trajectory,
            panels: panels.max(1),
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn params(&self) -> &ModelParams {
        &self.problem.params
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn trajectory(&self) -> Option<&Arc<MaturityTrajectory>> {
        self.trajectory.as_ref()
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn set_panels(&mut self, panels: usize) {
        self.panels = panels.max(1);
    }

    pub fn horizon(&self) -> f64 {
        self.tracer.table().end()
    }

    pub fn epoch_data(&self) -> &[Arc<InitialData>] {
        &self.epoch_data
    }

    /// Density of component `c` at `(t, x, y)`.
    pub fn eval(&self, c: Component, t: f64, x: f64, y: f64) -> Result<f64> {
        let (tv, _) = self.tracer.trace(c, t, x, y, None)?;
        Ok(match tv.anchor {
            Some((e, comp, x0, y0)) => tv.factor * self.epoch_data[e].field(comp).eval(x0, y0),
            None => 0.0,
        })
    }

    pub fn backtrace(&self, c: Component, t: f64, x: f64, y: f64) -> Result<CharChain> {
        self.tracer.backtrace(c, t, x, y)
    }

    /// Quadrature nodes covering the support of component `c` at time `t`.
    pub fn nodes(&self, c: Component, t: f64, panels: usize) -> Result<Vec<Node2>> {
        let mut out = Vec::new();
        match c.phase {
            Phase::One => self.nodes_p1(c, t, panels, &mut out)?,
            Phase::Two => self.nodes_p2(c, t, panels, &mut out)?,
            Phase::Three => self.nodes_p3(c, t, panels, &mut out)?,
        }
        Ok(out)
    }

    /// Data breakpoints of `c` carried from the epoch start `te` to `t`; x moves by `shift`.
    fn moved_breaks(
        &self,
        c: Component,
        te: f64,
        t: f64,
        shift: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (bx, by) = self.epoch_data[self.tracer.epoch_of(t)].field(c).breaks();
        let bx = bx.iter().map(|b| b + shift).filter(|&b| b < 1.0).collect();
        let mut ys = Vec::with_capacity(by.len());
        for b in by {
            if b > 0.0 && b < 1.0 {
                ys.push(self.tracer.y_at(c.phase, c.follicle, te, b, t)?);
            }
        }
        Ok((bx, ys))
    }

    fn nodes_p1(&self, c: Component, t: f64, panels: usize, out: &mut Vec<Node2>) -> Result<()> {
        let tr = &self.tracer;
        let f = c.follicle;
        let te = tr.epoch_start(t);
        let xa = tr.age_between(f, te, t)?;
        let y0 = tr.p1_bottom_curve(f, t)?;
        if xa < 1.0 && y0 < 1.0 {
            let (bx, by) = self.moved_breaks(c, te, t, xa)?;
            quadrature::rectangle((xa, 1.0), (y0.max(0.0), 1.0), &bx, &by, panels, out);
        }
        if c.cycle > 1 && xa > 0.0 {
            let xm = xa.min(1.0);
            let mut breaks = Vec::new();
            if let Some(th) = tr.entry_time_from_left(Phase::One, f, t, 1.0, te)? {
                breaks.push(tr.age_between(f, th, t)?);
            }
            let tsw = te + 1.0 / tr.kinematics(f).ghat;
            if tsw < t {
                breaks.push(tr.age_between(f, tsw, t)?);
            }
            for (x, wx) in quadrature::composite(0.0, xm, &breaks, panels) {
                let eta = match tr.p1_eta(f, t, x)? {
                    Some(e) => e,
                    None => continue,
                };
                if eta >= 1.0 {
                    continue;
                }
                for (y, wy) in quadrature::composite(eta.max(0.0), 1.0, &[], panels) {
                    out.push(Node2 { x, y, w: wx * wy });
                }
            }
        }
        Ok(())
    }

    fn nodes_p2(&self, c: Component, t: f64, panels: usize, out: &mut Vec<Node2>) -> Result<()> {
        let tr = &self.tracer;
        let f = c.follicle;
        let te = tr.epoch_start(t);
        let ghat = tr.kinematics(f).ghat;
        let xa = ghat * (t - te);
        if xa < 1.0 {
            let field = self.epoch_data[tr.epoch_of(t)].field(c);
            let (bx, by) = field.breaks();
            let bx: Vec<f64> = bx.iter().map(|b| b + xa).collect();
            quadrature::rectangle((xa, 1.0), (0.0, 1.0), &bx, &by, panels, out);
        }
        if xa > 0.0 {
            let xm = xa.min(1.0);
            let mut breaks = Vec::new();
            let base = tr.table().age_advance(f, te)?;
            if let Some(ts) = tr.table().age_inverse(f, base + 1.0)? {
                if ts < t {
                    breaks.push(ghat * (t - ts));
                }
            }
            for (x, wx) in quadrature::composite(0.0, xm, &breaks, panels) {
                let tau = (t - x / ghat).max(te);
                let age = tr.age_between(f, te, tau)?;
                let lo = if age <= 1.0 {
                    tr.p1_bottom_curve(f, tau)?
                } else {
                    match tr.p1_eta(f, tau, 1.0)? {
                        Some(e) => e,
                        None => continue,
                    }
                };
                if lo >= 1.0 {
                    continue;
                }
                for (y, wy) in quadrature::composite(lo.max(0.0), 1.0, &[], panels) {
                    out.push(Node2 { x, y, w: wx * wy });
                }
            }
        }
        Ok(())
    }

    fn nodes_p3(&self, c: Component, t: f64, panels: usize, out: &mut Vec<Node2>) -> Result<()> {
        let tr = &self.tracer;
        let p = self.params();
        let f = c.follicle;
        let te = tr.epoch_start(t);
        let gt = tr.kinematics(f).gtilde;
        let xa = gt * (t - te);
        let alpha = p.a1 / p.a2;
        let (y1, y2) = tr.p3_bottom_curves(f, t)?;
        if xa < 1.0 && y1 < 1.0 {
            let (bx, by) = self.moved_breaks(c, te, t, xa)?;
            quadrature::rectangle((xa, 1.0), (y1.max(0.0), y2.min(1.0)), &bx, &by, panels, out);
        }
        if y1 > 0.0 {
            let ym = y1.min(1.0);
            let mut breaks = Vec::new();
            for lag in [(1.0 - alpha) / gt, 1.0 / gt] {
                let t0 = t - lag;
                if t0 > te {
                    breaks.push(tr.y_at(Phase::Three, f, t0, 0.0, t)?);
                }
            }
            for (y, wy) in quadrature::composite(0.0, ym, &breaks, panels) {
                let t0 = match tr.entry_time_from_left(Phase::Three, f, t, y, te)? {
                    Some(s) => s,
                    None => continue,
                };
                let xlo = gt * (t - t0);
                if xlo >= 1.0 {
                    continue;
                }
                let xhi = (xlo + alpha).min(1.0);
                let inner = [xlo + alpha * tr.age_between(f, te, t0)?];
                for (x, wx) in quadrature::composite(xlo, xhi, &inner, panels) {
                    out.push(Node2 { x, y, w: wx * wy });
                }
            }
        }
        if c.cycle > 1 && xa > 0.0 {
            let xm = xa.min(1.0);
            let mut breaks = Vec::new();
            let tsw = te + 1.0 / gt;
            if tsw < t {
                breaks.push(gt * (t - tsw));
            }
            for (x, wx) in quadrature::composite(0.0, xm, &breaks, panels) {
                let (e1, e2) = match tr.p3_eta(f, t, x)? {
                    Some(v) => v,
                    None => continue,
                };
                let (lo, hi) = (e1.max(0.0), e2.min(1.0));
                if hi <= lo {
                    continue;
                }
                for (y, wy) in quadrature::composite(lo, hi, &[y1, y2], panels) {
                    out.push(Node2 { x, y, w: wx * wy });
                }
            }
        }
        Ok(())
    }

    /// Nodes with density values for component `c` at time `t`.
    pub fn sampled_nodes(
        &self,
        c: Component,
        t: f64,
        panels: usize,
    ) -> Result<(Vec<Node2>, Vec<f64>)> {
        let nodes = self.nodes(c, t, panels)?;
        let mut vals = Vec::with_capacity(nodes.len());
        for n in &nodes {
            vals.push(self.eval(c, t, n.x, n.y)?);
        }
        Ok((nodes, vals))
    }

    /// Integral of `weight(y) * phi_c(t, x, y)` over the unit square.
    pub fn component_integral<W: Fn(f64) -> f64>(
        &self,
        c: Component,
        t: f64,
        panels: usize,
        weight: W,
    ) -> Result<f64> {
        let (nodes, vals) = self.sampled_nodes(c, t, panels)?;
        Ok(nodes
            .iter()
            .zip(&vals)
            .map(|(n, v)| n.w * weight(n.y) * v)
            .sum())
    }

    /// Maturity snapshot at `t` with the solution's quadrature level.
    pub fn maturity(&self, t: f64) -> Result<MaturitySnapshot> {
        self.maturity_with(t, self.panels)
    }

    pub fn maturity_with(&self, t: f64, panels: usize) -> Result<MaturitySnapshot> {
        let p = self.params();
        let comps = Component::all(p.follicles, p.cycles);
        let mut m_f = vec![0.0; p.follicles];
        for c in comps {
            let v = self.component_integral(c, t, panels, |y| p.maturity_weight(c.phase, y))?;
            m_f[c.follicle] += v;
        }
        let m = m_f.iter().sum();
        Ok(MaturitySnapshot { t, m_f, m })
    }

    /// Maturities at many times, evaluated in parallel (order preserved).
    pub fn maturity_series(&self, times: &[f64], panels: usize) -> Result<Vec<MaturitySnapshot>> {
        times
            .par_iter()
            .map(|&t| self.maturity_with(t, panels))
            .collect()
    }

    /// Relative Richardson estimate `|I_P - I_2P| / max(|I_2P|, tiny)` over follicles.
    pub fn richardson(&self, t: f64, panels: usize) -> Result<f64> {
        let a = self.maturity_with(t, panels)?;
        let b = self.maturity_with(t, 2 * panels)?;
        let mut worst: f64 = 0.0;
        for (x, y) in a.m_f.iter().zip(&b.m_f) {
            let scale = y.abs().max(1e-300);
            if *y == 0.0 && *x == 0.0 {
                continue;
            }
            worst = worst.max((x - y).abs() / scale);
        }
        Ok(worst)
    }

    /// Total cell mass in original units.
    pub fn mass(&self, t: f64, panels: usize) -> Result<f64> {
        let p = self.params();
        let mut total = 0.0;
        for c in Component::all(p.follicles, p.cycles) {
            total += p.mass_weight(c.phase) * self.component_integral(c, t, panels, |_| 1.0)?;
        }
        Ok(total)
    }

    /// Density values on the cell centres of a `resolution^2` grid.
    pub fn snapshot(&self, t: f64, resolution: usize) -> Result<Vec<SnapshotRow>> {
        let p = self.params();
        let comps = Component::all(p.follicles, p.cycles);
        let h = 1.0 / resolution as f64;
        let rows: Result<Vec<Vec<SnapshotRow>>> = comps
            .par_iter()
            .map(|&c| {
                let mut v = Vec::with_capacity(resolution * resolution);
                for i in 0..resolution {
                    for j in 0..resolution {
                        let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
                        v.push((c, x, y, self.eval(c, t, x, y)?));
                    }
                }
                Ok(v)
            })
            .collect();
        Ok(rows?.into_iter().flatten().collect())
    }
}

/// One-dimensional quintic in Bernstein form on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quintic {
    pub c: [f64; 6],
}

const BINOM5: [f64; 6] = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];

impl Quintic {
    pub fn eval(&self, s: f64) -> f64 {
        let r = 1.0 - s;
        let mut acc = 0.0;
        for (i, &ci) in self.c.iter().enumerate() {
            acc += ci * BINOM5[i] * s.powi(i as i32) * r.powi(5 - i as i32);
        }
        acc
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let r = 1.0 - s;
        let mut acc = 0.0;
        for i in 0..5 {
            let d = self.c[i + 1] - self.c[i];
            acc += d * [1.0, 4.0, 6.0, 4.0, 1.0][i] * s.powi(i as i32) * r.powi(4 - i as i32);
        }
        5.0 * acc
    }

    fn random<R: Rng>(rng: &mut R, zero_at_0: bool, zero_at_1: bool) -> Self {
        let mut c = [0.0; 6];
        for v in c.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        if zero_at_0 {
            c[0] = 0.0;
        }
        if zero_at_1 {
            c[5] = 0.0;
        }
        Quintic { c }
    }
}

/// Product test function `T(t / tau) X(x) Y(y)` of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestFactors {
    pub t: Quintic,
    pub x: Quintic,
    pub y: Quintic,
}

/// Admissible test functions for the weak formulation of one follicle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestFunction {
    pub follicle: usize,
    pub tau: f64,
    /// Indexed by `(cycle - 1) * 3 + phase index`.
    pub factors: Vec<TestFactors>,
}

impl TestFunction {
    pub fn random<R: Rng>(p: &ModelParams, follicle: usize, tau: f64, rng: &mut R) -> Self {
        let mut factors = Vec::with_capacity(3 * p.cycles);
        for k in 1..=p.cycles {
            for phase in Phase::ALL {
                let zero_back = k == 1 && phase != Phase::Two;
                let zero_y = phase != Phase::Three;
                factors.push(TestFactors {
                    t: Quintic::random(rng, false, true),
                    x: Quintic::random(rng, zero_back, true),
                    y: Quintic::random(rng, zero_y, zero_y),
                });
            }
        }
        TestFunction {
            follicle,
            tau,
            factors,
        }
    }

    fn idx(phase: Phase, k: usize) -> usize {
        (k - 1) * 3 + phase.index()
    }

    pub fn value(&self, phase: Phase, k: usize, t: f64, x: f64, y: f64) -> f64 {
        let f = &self.factors[Self::idx(phase, k)];
        f.t.eval(t / self.tau) * f.x.eval(x) * f.y.eval(y)
    }

    /// `(phi, phi_t, phi_x, phi_y)`.
    pub fn jet(&self, phase: Phase, k: usize, t: f64, x: f64, y: f64) -> (f64, f64, f64, f64) {
        let f = &self.factors[Self::idx(phase, k)];
        let s = t / self.tau;
        let (a, da) = (f.t.eval(s), f.t.deriv(s) / self.tau);
        let (b, db) = (f.x.eval(x), f.x.deriv(x));
        let (c, dc) = (f.y.eval(y), f.y.deriv(y));
        (a * b * c, da * b * c, a * db * c, a * b * dc)
    }

    /// Checks the vanishing conditions on a sample grid.
    pub fn validate(&self, cycles: usize) -> Result<()> {
        const TOL: f64 = 1e-12;
        let grid: Vec<f64> = (0..=16).map(|i| i as f64 / 16.0).collect();
        for k in 1..=cycles {
            for phase in Phase::ALL {
                for &a in &grid {
                    for &b in &grid {
                        let t = a * self.tau;
                        let mut checks = vec![
                            self.value(phase, k, self.tau, a, b),
                            self.value(phase, k, t, 1.0, b),
                        ];
                        if k == 1 && phase != Phase::Two {
                            checks.push(self.value(phase, k, t, 0.0, b));
                        }
                        if phase != Phase::Three {
                            checks.push(self.value(phase, k, t, b, 0.0));
                            checks.push(self.value(phase, k, t, b, 1.0));
                        }
                        if let Some(v) = checks.iter().find(|v| v.abs() > TOL) {
                            return Err(Error::InvalidTestFunction(format!(
                                "{phase} k={k}: value {v:e} on a vanishing face"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Term magnitudes of the weak-form identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakResidual {
    pub interior: f64,
    pub initial: f64,
    pub p3_inflow: f64,
    pub mitosis: f64,
    pub p3_transfer: f64,
    pub p1_to_p2: f64,
    /// Absolute value of the sum.
    pub residual: f64,
    pub max_term: f64,
}

impl WeakResidual {
    pub fn relative(&self) -> f64 {
        if self.max_term == 0.0 {
            0.0
        } else {
            self.residual / self.max_term
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    comp: Component,
    t: f64,
    w: f64,
    snap: ControlSnap,
    nodes: Vec<Node2>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TraceKind {
    P3Inflow,
    Mitosis,
    P3Transfer,
    P1ToP2,
}

/// Boundary integral samples: density of `source` on a face, paired with the
/// test function of `target` on its inflow face.
#[derive(Debug, Clone)]
struct TraceBlock {
    kind: TraceKind,
    source: Component,
    target: Component,
    t: f64,
    /// Time weight times the flux coefficient.
    w: f64,
    /// `(s, weight)` along the face of the target, with the source value.
    points: Vec<(f64, f64, f64)>,
}

/// Solution samples needed by the weak-form residual of one follicle, reusable
/// across test functions.
#[derive(Debug, Clone)]
pub struct WeakFormCache {
    follicle: usize,
    tau: f64,
    cycles: usize,
    params: Arc<ModelParams>,
    kin: crate::model::Kinematics,
    blocks: Vec<Block>,
    traces: Vec<TraceBlock>,
    initial: Vec<(Component, Vec<Node2>, Vec<f64>)>,
}

impl Solution {
    /// Time breakpoints for integrals over `[0, tau]`.
    fn time_breaks(&self, f: usize, tau: f64) -> Result<Vec<f64>> {
        let tr = &self.tracer;
        let mut b: Vec<f64> = tr.table().nodes().to_vec();
        if let Some(traj) = &self.trajectory {
            b.extend_from_slice(traj.times());
        }
        let k = tr.kinematics(f);
        for &e in tr.epochs() {
            b.push(e);
            b.push(e + 1.0 / k.ghat);
            b.push(e + 1.0 / k.gtilde);
            b.push(e + (1.0 - self.params().a1 / self.params().a2) / k.gtilde);
            let base = tr.table().age_advance(f, e)?;
            if let Some(s) = tr.table().age_inverse(f, base + 1.0)? {
                b.push(s);
            }
        }
        // Keep knot intervals only: table nodes are too fine to split on.
        let knots: Vec<f64> = match &self.trajectory {
            Some(traj) => traj.times().to_vec(),
            None => Vec::new(),
        };
        let mut out: Vec<f64> = b
            .into_iter()
            .filter(|&s| s > 0.0 && s < tau)
            .filter(|s| knots.is_empty() || !tr.table().nodes().contains(s) || knots.contains(s))
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup();
        Ok(out)
    }

    /// Samples the solution for weak-form checks of follicle `f` on `[0, tau]`.
    pub fn weak_form_cache(&self, f: usize, tau: f64, panels: usize) -> Result<WeakFormCache> {
        let p = self.params().clone();
        let tr = &self.tracer;
        if !(tau > 0.0 && tau <= self.horizon() + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "tau={tau} outside (0, horizon]"
            )));
        }
        let tbreaks = self.time_breaks(f, tau)?;
        let tnodes = quadrature::composite(tr.table().start(), tau, &tbreaks, 1);
        let comps: Vec<Component> = (1..=p.cycles)
            .flat_map(|k| {
                Phase::ALL
                    .into_iter()
                    .map(move |ph| Component::new(f, ph, k))
            })
            .collect();
        let mut jobs = Vec::new();
        for &(t, w) in &tnodes {
            for &c in &comps {
                jobs.push((c, t, w));
            }
        }
        let blocks: Result<Vec<Block>> = jobs
            .par_iter()
            .map(|&(c, t, w)| {
                let (nodes, values) = self.sampled_nodes(c, t, panels)?;
                Ok(Block {
                    comp: c,
                    t,
                    w,
                    snap: tr.table().snap_at(f, t)?,
                    nodes,
                    values,
                })
            })
            .collect();
        let blocks = blocks?;
        // Boundary traces.
        let alpha = p.a1 / p.a2;
        let kin = *tr.kinematics(f);
        let mut tjobs = Vec::new();
        for &(t, w) in &tnodes {
            for k in 1..=p.cycles {
                tjobs.push((TraceKind::P3Inflow, k, t, w));
                tjobs.push((TraceKind::P1ToP2, k, t, w));
                if k >= 2 {
                    tjobs.push((TraceKind::Mitosis, k, t, w));
                    tjobs.push((TraceKind::P3Transfer, k, t, w));
                }
            }
        }
        let traces: Result<Vec<TraceBlock>> = tjobs
            .par_iter()
            .map(|&(kind, k, t, w)| {
                let te = tr.epoch_start(t);
                let snap = tr.table().snap_at(f, t)?;
                let (source, target, coef, breaks, span) = match kind {
                    TraceKind::P3Inflow => {
                        let xa = tr.age_between(f, te, t)?;
                        let mut b = vec![alpha * xa];
                        if let Some(th) = tr.entry_time_from_left(Phase::One, f, t, 1.0, te)? {
                            b.push(alpha * tr.age_between(f, th, t)?);
                        }
                        let coef = kin.vy(Phase::Three, 0.0, &snap);
                        (
                            Component::new(f, Phase::One, k),
                            Component::new(f, Phase::Three, k),
                            coef,
                            b,
                            alpha,
                        )
                    }
                    TraceKind::Mitosis => {
                        let coef = self.problem.hooks.mitosis_factor * p.tau_g[f] / p.a1;
                        (
                            Component::new(f, Phase::Two, k - 1),
                            Component::new(f, Phase::One, k),
                            coef,
                            vec![],
                            1.0,
                        )
                    }
                    TraceKind::P3Transfer => {
                        let (y1, y2) = tr.p3_bottom_curves(f, t)?;
                        (
                            Component::new(f, Phase::Three, k - 1),
                            Component::new(f, Phase::Three, k),
                            kin.gtilde,
                            vec![y1, y2],
                            1.0,
                        )
                    }
                    TraceKind::P1ToP2 => {
                        let xa = tr.age_between(f, te, t)?;
                        let b = if xa <= 1.0 {
                            vec![tr.p1_bottom_curve(f, t)?]
                        } else {
                            tr.p1_eta(f, t, 1.0)?.into_iter().collect()
                        };
                        let coef = p.a1 * kin.ghat * snap.gbar / p.tau_g[f];
                        (
                            Component::new(f, Phase::One, k),
                            Component::new(f, Phase::Two, k),
                            coef,
                            b,
                            1.0,
                        )
                    }
                };
                let mut points = Vec::new();
                for (s, ws) in quadrature::composite(0.0, span, &breaks, panels) {
                    let v = match kind {
                        TraceKind::P3Inflow => self.eval(source, t, (s / alpha).min(1.0), 1.0)?,
                        _ => self.eval(source, t, 1.0, s)?,
                    };
                    points.push((s, ws, v));
                }
                Ok(TraceBlock {
                    kind,
                    source,
                    target,
                    t,
                    w: w * coef,
                    points,
                })
            })
            .collect();
        let mut initial = Vec::new();
        let data = &self.epoch_data[0];
        for &c in &comps {
            let field = data.field(c);
            let (bx, by) = field.breaks();
            let mut nodes = Vec::new();
            quadrature::rectangle((0.0, 1.0), (0.0, 1.0), &bx, &by, 4 * panels, &mut nodes);
            let vals = nodes.iter().map(|n| field.eval(n.x, n.y)).collect();
            initial.push((c, nodes, vals));
        }
        Ok(WeakFormCache {
            follicle: f,
            tau,
            cycles: p.cycles,
            params: self.problem.params.clone(),
            kin,
            blocks,
            traces: traces?,
            initial,
        })
    }
}

impl WeakFormCache {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn follicle(&self) -> usize {
        self.follicle
    }

    /// Weak-form terms for `test`; values of `scaled.0` are multiplied by `scaled.1`.
    pub fn residual(
        &self,
        test: &TestFunction,
        scaled: Option<(Component, f64)>,
    ) -> Result<WeakResidual> {
        if test.follicle != self.follicle || (test.tau - self.tau).abs() > 1e-15 {
            return Err(Error::InvalidTestFunction(
                "test function does not match cache".into(),
            ));
        }
        test.validate(self.cycles)?;
        let scale = |c: Component| match scaled {
            Some((sc, s)) if sc == c => s,
            _ => 1.0,
        };
        let mut interior = 0.0;
        for b in &self.blocks {
            let sc = scale(b.comp);
            let mut acc = 0.0;
            for (n, v) in b.nodes.iter().zip(&b.values) {
                if *v == 0.0 {
                    continue;
                }
                let (phi, dt, dx, dy) = test.jet(b.comp.phase, b.comp.cycle, b.t, n.x, n.y);
                let r = self.kin.rates(b.comp.phase, n.y, &b.snap);
                acc += n.w * v * (dt + r.vx * dx + r.vy * dy - r.loss * phi);
            }
            interior += b.w * sc * acc;
        }
        let mut initial = 0.0;
        for (c, nodes, vals) in &self.initial {
            for (n, v) in nodes.iter().zip(vals) {
                initial += n.w * v * test.value(c.phase, c.cycle, 0.0, n.x, n.y);
            }
        }
        let (mut p3_inflow, mut mitosis, mut p3_transfer, mut p1_to_p2) = (0.0, 0.0, 0.0, 0.0);
        for tb in &self.traces {
            let sc = scale(tb.source);
            let mut acc = 0.0;
            for &(s, ws, v) in &tb.points {
                let phi = match tb.kind {
                    TraceKind::P3Inflow => {
                        test.value(tb.target.phase, tb.target.cycle, tb.t, s, 0.0)
                    }
                    _ => test.value(tb.target.phase, tb.target.cycle, tb.t, 0.0, s),
                };
                acc += ws * v * phi;
            }
            let val = tb.w * sc * acc;
            match tb.kind {
                TraceKind::P3Inflow => p3_inflow += val,
                TraceKind::Mitosis => mitosis += val,
                TraceKind::P3Transfer => p3_transfer += val,
                TraceKind::P1ToP2 => p1_to_p2 += val,
            }
        }
        let terms = [interior, initial, p3_inflow, mitosis, p3_transfer, p1_to_p2];
        let max_term = terms.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let _ = &self.params;
        Ok(WeakResidual {
            interior,
            initial,
            p3_inflow,
            mitosis,
            p3_transfer,
            p1_to_p2,
            residual: terms.iter().sum::<f64>().abs(),
            max_term,
        })
    }
}

/// Outcome of the a-priori bound checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub k: f64,
    pub max_maturity: f64,
    /// `K - max M`.
    pub maturity_slack: f64,
    pub min_maturity: f64,
    pub phi_bound: Vec<f64>,
    /// Largest sampled density per follicle.
    pub max_density: Vec<f64>,
    pub min_density: f64,
    pub samples: usize,
}

impl Solution {
    /// Checks `0 <= M <= K` on `trajectory` and the density bound at `samples`
    /// random space-time points.
    pub fn check_bounds<R: Rng>(
        &self,
        trajectory: &MaturityTrajectory,
        constants: &crate::fixedpoint::ContractionConstants,
        samples: usize,
        rng: &mut R,
    ) -> Result<BoundsReport> {
        let p = self.params();
        let mut max_m: f64 = 0.0;
        let mut min_m = f64::INFINITY;
        for (t, v) in trajectory.times().iter().zip(trajectory.values()) {
            let m: f64 = v.iter().sum();
            max_m = max_m.max(m);
            min_m = min_m.min(v.iter().fold(f64::INFINITY, |a, &b| a.min(b)));
            if m > constants.k * (1.0 + 1e-12) || min_m < 0.0 {
                return Err(Error::BoundViolation(format!(
                    "M({t}) = {m} outside [0, K = {}]",
                    constants.k
                )));
            }
        }
        let comps = Component::all(p.follicles, p.cycles);
        let (t0, t1) = (self.tracer.table().start(), self.horizon());
        let pts: Vec<(Component, f64, f64, f64)> = (0..samples)
            .map(|_| {
                let c = comps[rng.gen_range(0..comps.len())];
                (
                    c,
                    rng.gen_range(t0..=t1),
                    rng.gen::<f64>(),
                    rng.gen::<f64>(),
                )
            })
            .collect();
        let vals: Result<Vec<f64>> = pts
            .par_iter()
            .map(|&(c, t, x, y)| self.eval(c, t, x, y))
            .collect();
        let vals = vals?;
        let mut max_d = vec![0.0f64; p.follicles];
        let mut min_d = f64::INFINITY;
        for (&(c, t, x, y), &v) in pts.iter().zip(&vals) {
            min_d = min_d.min(v);
            max_d[c.follicle] = max_d[c.follicle].max(v);
            if v < 0.0 || v > constants.phi_bound[c.follicle] {
                return Err(Error::BoundViolation(format!(
                    "{c} at ({t}, {x}, {y}) = {v}, bound {}",
                    constants.phi_bound[c.follicle]
                )));
            }
        }
        Ok(BoundsReport {
            k: constants.k,
            max_maturity: max_m,
            maturity_slack: constants.k - max_m,
            min_maturity: if min_m.is_finite() { min_m } else { 0.0 },
            phi_bound: constants.phi_bound.clone(),
            max_density: max_d,
            min_density: if min_d.is_finite() { min_d } else { 0.0 },
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DataTerm, InitialDataSpec, Piecewise};
    use crate::fixedpoint::{compute_constants, initial_maturity, open_loop, ConstantOptions};
    use crate::verify::{freeze, phase2_exactness, trace_compatibility};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        ModelParams::from_json_str(include_str!("../configs/default_params.json")).unwrap()
    }

    fn poly_data(p: &ModelParams, amplitude: f64, piece: Piecewise) -> InitialData {
        let spec = InitialDataSpec {
            all: vec![DataTerm::Polynomial {
                amplitude,
                x: piece.clone(),
                y: piece,
            }],
            components: vec![],
        };
        InitialData::from_spec(p, &spec).unwrap()
    }

    /// `s^2 (1-s)^2` rescaled onto `[0.2, 0.6]`, expanded in the global variable.
    fn compact_bump() -> Piecewise {
        // (s - 0.2)^2 (0.6 - s)^2
        let a = [0.04, -0.4, 1.0];
        let b = [0.36, -1.2, 1.0];
        let mut c = vec![0.0; 5];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                c[i + j] += x * y;
            }
        }
        Piecewise {
            breaks: vec![0.2, 0.6],
            coeffs: vec![c],
        }
    }

    fn constant_controls(problem: &Problem) -> Arc<FrozenControls> {
        let m0 = initial_maturity(problem, 2).unwrap();
        let h = problem.params.horizon;
        let traj = MaturityTrajectory::constant(vec![0.0, h], &m0.m_f).unwrap();
        Arc::new(freeze(problem, &traj).unwrap())
    }

    fn solve(problem: &Problem) -> Solution {
        open_loop(problem, constant_controls(problem), 16, 2, 2).unwrap()
    }

    fn bump_problem() -> Problem {
        let p = params();
        let d = poly_data(&p, 1.0, Piecewise::unit_bump());
        Problem::new(p, d)
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let p = params();
        let d = poly_data(&p, 0.0, Piecewise::unit_bump());
        let sol = solve(&Problem::new(p.clone(), d));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = Component::new(
                rng.gen_range(0..2),
                Phase::ALL[rng.gen_range(0..3)],
                rng.gen_range(1..=2),
            );
            let v = sol
                .eval(c, rng.gen_range(0.0..p.horizon), rng.gen(), rng.gen())
                .unwrap();
            assert_eq!(v, 0.0);
        }
        assert_eq!(sol.maturity(p.horizon).unwrap().m, 0.0);
        let cache = sol.weak_form_cache(0, p.horizon, 1).unwrap();
        let test = TestFunction::random(&p, 0, p.horizon, &mut rng);
        let r = cache.residual(&test, None).unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.relative(), 0.0);
    }

    #[test]
    fn density_is_nonnegative() {
        let sol = solve(&bump_problem());
        let h = sol.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in Component::all(2, 2) {
            for _ in 0..100 {
                let v = sol
                    .eval(c, rng.gen_range(0.0..h), rng.gen(), rng.gen())
                    .unwrap();
                assert!(v >= 0.0, "{c}: {v}");
            }
        }
    }

    #[test]
    fn maturity_at_zero_matches_data() {
        let problem = bump_problem();
        let sol = solve(&problem);
        let a = sol.maturity_with(0.0, 4).unwrap();
        let b = initial_maturity(&problem, 4).unwrap();
        for (x, y) in a.m_f.iter().zip(&b.m_f) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn phase2_and_trace_are_exact() {
        let sol = solve(&bump_problem());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(phase2_exactness(&sol, 200, &mut rng).unwrap() < 1e-10);
        assert!(trace_compatibility(&sol, 200, &mut rng).unwrap() < 1e-10);
    }

    #[test]
    fn first_cycle_is_empty_below_inflow() {
        // First-cycle Phase 1 has no inflow through the back face, so points traced
        // back to it carry no mass.
        let sol = solve(&bump_problem());
        let h = sol.horizon();
        let c = Component::new(0, Phase::One, 1);
        let chain = sol.backtrace(c, h, 1e-4, 0.5).unwrap();
        assert!(matches!(
            chain.anchor,
            crate::characteristics::Anchor::Zero { .. }
        ));
        assert_eq!(sol.eval(c, h, 1e-4, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn weak_residual_is_small_and_detects_scaling() {
        let problem = bump_problem();
        let sol = solve(&problem);
        let tau = 0.5 * sol.horizon();
        let cache = sol.weak_form_cache(0, tau, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Component::new(0, Phase::One, 1);
        for _ in 0..5 {
            let test = TestFunction::random(sol.params(), 0, tau, &mut rng);
            let r = cache.residual(&test, None).unwrap();
            assert!(r.relative() < 1e-5, "relative residual {}", r.relative());
            let bad = cache.residual(&test, Some((target, 1.01))).unwrap();
            assert!(bad.residual > r.residual);
        }
    }

    #[test]
    fn invalid_test_function_is_rejected() {
        let p = params();
        let sol = solve(&bump_problem());
        let tau = 0.5 * p.horizon;
        let cache = sol.weak_form_cache(0, tau, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut test = TestFunction::random(&p, 0, tau, &mut rng);
        test.factors[0].x.c[5] = 1.0;
        assert!(matches!(
            test.validate(p.cycles),
            Err(Error::InvalidTestFunction(_))
        ));
        assert!(matches!(
            cache.residual(&test, None),
            Err(Error::InvalidTestFunction(_))
        ));
        let other = TestFunction::random(&p, 1, tau, &mut rng);
        assert!(matches!(
            cache.residual(&other, None),
            Err(Error::InvalidTestFunction(_))
        ));
    }

    #[test]
    fn bounds_hold_on_the_open_loop_solution() {
        let problem = bump_problem();
        let sol = solve(&problem);
        let c = compute_constants(
            &problem.params,
            &problem.data,
            &problem.hooks,
            &ConstantOptions::default(),
        )
        .unwrap();
        let m0 = initial_maturity(&problem, 2).unwrap();
        let traj = MaturityTrajectory::constant(vec![0.0, sol.horizon()], &m0.m_f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = sol.check_bounds(&traj, &c, 500, &mut rng).unwrap();
        assert!(r.min_density >= 0.0);
        assert!(r.maturity_slack > 0.0);
        let big = MaturityTrajectory::constant(vec![0.0, sol.horizon()], &[c.k, c.k]).unwrap();
        assert!(matches!(
            sol.check_bounds(&big, &c, 10, &mut rng),
            Err(Error::BoundViolation(_))
        ));
    }

    #[test]
    fn mass_is_conserved_without_losses_or_division() {
        let p = params();
        let d = poly_data(&p, 1.0, compact_bump());
        let hooks = Hooks {
            mitosis_factor: 1.0,
            zero_loss: true,
            ..Hooks::default()
        };
        let problem = Problem::new(p, d).with_hooks(hooks);
        let sol = solve(&problem);
        let h = sol.horizon();
        let m0 = sol.mass(0.0, 4).unwrap();
        assert!(m0 > 0.0);
        for t in [0.25 * h, 0.5 * h] {
            let m = sol.mass(t, 4).unwrap();
            assert!((m - m0).abs() <= 1e-6 * m0, "mass {m} vs {m0} at t={t}");
        }
    }

    #[test]
    fn quintic_derivative_matches_difference() {
        let q = Quintic {
            c: [0.3, -0.2, 0.9, 0.1, -0.7, 0.4],
        };
        for s in [0.1, 0.37, 0.8] {
            let fd = (q.eval(s + 1e-6) - q.eval(s - 1e-6)) / 2e-6;
            assert!((fd - q.deriv(s)).abs() < 1e-7);
        }
        assert_eq!(q.eval(0.0), 0.3);
        assert!((q.eval(1.0) - 0.4).abs() < 1e-15);
    }
}
