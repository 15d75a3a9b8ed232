//! First-order upwind finite-volume scheme for the coupled system, used as an
//! independent reference for the characteristics solver.
//!
//! Dimensional splitting (x sweep, y sweep, exact exponential decay), controls
//! lagged by one step, coupling through inflow fluxes.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::InitialData;
use crate::error::{Error, Result};
use crate::model::{Component, ControlSnap, Kinematics, ModelParams, Phase};
use crate::quadrature;
use crate::solution::{MaturitySnapshot, Problem, SnapshotRow};

/// Scheme settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FvOptions {
    /// Cells per unit length in each direction.
    pub resolution: usize,
    pub cfl: f64,
    /// Suppress the outflux that leaves the last cycle.
    pub closed_domain: bool,
    /// Record a [`StepAudit`] per step.
    pub audit: bool,
}

impl FvOptions {
    pub fn new(resolution: usize) -> Self {
        FvOptions {
            resolution,
            cfl: 0.9,
            closed_domain: false,
            audit: false,
        }
    }
}

/// Cell averages of every component on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n: usize,
    pub t: f64,
    /// `cells[c][i * n + j]`, `i` along x, `j` along y; `c` is the flat component index.
    pub cells: Vec<Vec<f64>>,
}

impl Grid {
    /// Cell averages of the data by a 3x3 Gauss rule per cell.
    pub fn from_data(p: &ModelParams, data: &InitialData, n: usize) -> Self {
        let (gx, gw) = quadrature::gauss_legendre(3);
        let h = 1.0 / n as f64;
        let cells = Component::all(p.follicles, p.cycles)
            .par_iter()
            .map(|&c| {
                let field = data.field(c);
                let mut v = vec![0.0; n * n];
                if field.is_zero() {
                    return v;
                }
                for i in 0..n {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for (a, wa) in gx.iter().zip(&gw) {
                            for (b, wb) in gx.iter().zip(&gw) {
                                let x = (i as f64 + 0.5 + 0.5 * a) * h;
                                let y = (j as f64 + 0.5 + 0.5 * b) * h;
                                acc += 0.25 * wa * wb * field.eval(x, y);
                            }
                        }
                        v[i * n + j] = acc;
                    }
                }
                v
            })
            .collect();
        Grid { n, t: 0.0, cells }
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn component(&self, p: &ModelParams, c: Component) -> &[f64] {
        &self.cells[c.flat_index(p.cycles)]
    }

    /// Midpoint-rule maturities.
    pub fn maturity(&self, p: &ModelParams) -> MaturitySnapshot {
        let h = self.h();
        let mut m_f = vec![0.0; p.follicles];
        for c in Component::all(p.follicles, p.cycles) {
            let v = self.component(p, c);
            let mut acc = 0.0;
            for j in 0..self.n {
                let w = p.maturity_weight(c.phase, (j as f64 + 0.5) * h);
                let mut col = 0.0;
                for i in 0..self.n {
                    col += v[i * self.n + j];
                }
                acc += w * col;
            }
            m_f[c.follicle] += acc * h * h;
        }
        let m = m_f.iter().sum();
        MaturitySnapshot { t: self.t, m_f, m }
    }

    /// Total cell mass in original units.
    pub fn mass(&self, p: &ModelParams) -> f64 {
        let h2 = self.h() * self.h();
        Component::all(p.follicles, p.cycles)
            .iter()
            .map(|&c| p.mass_weight(c.phase) * self.component(p, c).iter().sum::<f64>() * h2)
            .sum()
    }

    /// Cell-centre values `(component, x, y, value)`.
    pub fn snapshot(&self, p: &ModelParams) -> Vec<SnapshotRow> {
        let h = self.h();
        let mut out = Vec::with_capacity(self.cells.len() * self.n * self.n);
        for c in Component::all(p.follicles, p.cycles) {
            let v = self.component(p, c);
            for i in 0..self.n {
                for j in 0..self.n {
                    out.push((
                        c,
                        (i as f64 + 0.5) * h,
                        (j as f64 + 0.5) * h,
                        v[i * self.n + j],
                    ));
                }
            }
        }
        out
    }
}

/// Interface mass bookkeeping of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAudit {
    pub t: f64,
    pub dt: f64,
    /// `(follicle, k, mass into cycle k Phase 1, mass out of cycle k-1 Phase 2)` for `k >= 2`.
    pub mitosis: Vec<(usize, usize, f64, f64)>,
    /// Mass leaving through the last cycle's outflow faces.
    pub terminal_outflow: f64,
    /// Mass removed by the loss terms.
    pub loss: f64,
    pub mass_before: f64,
    pub mass_after: f64,
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct FvRun {
    pub grid: Grid,
    /// Maturity and controls `(snapshot, u, U)` at each output time.
    pub series: Vec<(MaturitySnapshot, Vec<f64>, f64)>,
    /// Grids at the output times.
    pub grids: Vec<Grid>,
    pub audits: Vec<StepAudit>,
    pub steps: usize,
}

/// Controls at time `t` from the grid state or the frozen schedule.
pub fn controls(problem: &Problem, grid: &Grid) -> Result<(Vec<f64>, f64)> {
    let p = &problem.params;
    let (u, big_u) = match &problem.frozen {
        Some(fc) => {
            let mut u = Vec::with_capacity(p.follicles);
            let mut bu = 1.0;
            for f in 0..p.follicles {
                let (uf, b) = fc.at(f, grid.t)?;
                u.push(uf);
                bu = b;
            }
            if problem.hooks.zero_loss {
                bu = 1.0;
            }
            (u, bu)
        }
        None => problem.hooks.controls(p, &grid.maturity(p).m_f),
    };
    for (f, &uf) in u.iter().enumerate() {
        p.check_control(f, uf)?;
    }
    Ok((u, big_u))
}

fn snaps(problem: &Problem, u: &[f64], big_u: f64) -> Vec<ControlSnap> {
    let p = &problem.params;
    u.iter()
        .enumerate()
        .map(|(f, &uf)| problem.hooks.snap(p, f, uf, big_u))
        .collect()
}

/// Largest stable step for the given controls.
pub fn stable_dt(problem: &Problem, n: usize, u: &[f64], big_u: f64, cfl: f64) -> f64 {
    let p = &problem.params;
    let h = 1.0 / n as f64;
    let mut vmax: f64 = 0.0;
    for (f, s) in snaps(problem, u, big_u).iter().enumerate() {
        let kin = Kinematics::new(p, f);
        for phase in Phase::ALL {
            vmax = vmax.max(kin.vx(phase, s).abs());
            for j in 0..=n {
                vmax = vmax.max(kin.vy(phase, j as f64 * h, s).abs());
            }
        }
    }
    if vmax == 0.0 {
        f64::INFINITY
    } else {
        cfl * h / vmax
    }
}

/// Overlaps of Phase 1 columns (age-dilated) with Phase 3 columns: `(i1, i3, fraction)`.
fn remap_weights(n: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    let h = 1.0 / n as f64;
    let mut out = Vec::new();
    for i1 in 0..n {
        let (lo, hi) = (ratio * i1 as f64 * h, ratio * (i1 as f64 + 1.0) * h);
        let width = hi - lo;
        let first = ((lo / h).floor() as usize).min(n - 1);
        let mut i3 = first;
        while i3 < n {
            let (a, b) = (i3 as f64 * h, (i3 as f64 + 1.0) * h);
            let ov = hi.min(b) - lo.max(a);
            if ov > 0.0 {
                out.push((i1, i3, ov / width));
            }
            if b >= hi {
                break;
            }
            i3 += 1;
        }
    }
    out
}

/// Advances `grid` by `dt` with the given controls.
pub fn step(
    problem: &Problem,
    grid: &Grid,
    dt: f64,
    u: &[f64],
    big_u: f64,
    opts: &FvOptions,
    audit: Option<&mut StepAudit>,
) -> Result<Grid> {
    let p = &*problem.params;
    let n = grid.n;
    let h = grid.h();
    let lim = stable_dt(problem, n, u, big_u, 1.0);
    if dt > lim * (1.0 + 1e-12) {
        return Err(Error::CflViolation(dt / lim));
    }
    let sn = snaps(problem, u, big_u);
    let kins: Vec<Kinematics> = (0..p.follicles).map(|f| Kinematics::new(p, f)).collect();
    let comps = Component::all(p.follicles, p.cycles);
    let idx = |c: Component| c.flat_index(p.cycles);
    let r = dt / h;
    let mitosis = problem.hooks.mitosis_factor;
    let last = p.cycles;

    // x sweep: inflow flux per row of each component, from the pre-sweep state.
    let x_in = |c: Component| -> Vec<f64> {
        let f = c.follicle;
        let s = &sn[f];
        let src = |cc: Component| &grid.cells[idx(cc)];
        let mut v = vec![0.0; n];
        match c.phase {
            Phase::One if c.cycle > 1 => {
                let prev = src(Component::new(f, Phase::Two, c.cycle - 1));
                let coef = mitosis * p.tau_g[f] / p.a1;
                for j in 0..n {
                    v[j] = coef * prev[(n - 1) * n + j];
                }
            }
            Phase::Two => {
                let prev = src(Component::new(f, Phase::One, c.cycle));
                let coef = kins[f].ghat * p.a1 * s.gbar / p.tau_g[f];
                for j in 0..n {
                    v[j] = coef * prev[(n - 1) * n + j];
                }
            }
            Phase::Three if c.cycle > 1 => {
                let prev = src(Component::new(f, Phase::Three, c.cycle - 1));
                for j in 0..n {
                    v[j] = kins[f].gtilde * prev[(n - 1) * n + j];
                }
            }
            _ => {}
        }
        v
    };
    let closed_out = |c: Component| opts.closed_domain && c.cycle == last && c.phase != Phase::One;
    let after_x: Vec<Vec<f64>> = comps
        .par_iter()
        .map(|&c| {
            let old = &grid.cells[idx(c)];
            let vx = kins[c.follicle].vx(c.phase, &sn[c.follicle]);
            let inflow = x_in(c);
            let mut new = old.clone();
            for j in 0..n {
                let mut left = inflow[j];
                for i in 0..n {
                    let right = if i == n - 1 && closed_out(c) {
                        0.0
                    } else {
                        vx * old[i * n + j]
                    };
                    new[i * n + j] = old[i * n + j] - r * (right - left);
                    left = right;
                }
            }
            new
        })
        .collect();

    // y sweep. Phase 1 top outflux feeds the Phase 3 bottom of the same cycle.
    let ratio = p.a1 / p.a2;
    let weights = remap_weights(n, ratio);
    let y_faces: Vec<f64> = (0..=n).map(|j| j as f64 * h).collect();
    let after_y: Vec<Vec<f64>> = comps
        .par_iter()
        .map(|&c| {
            let old = &after_x[idx(c)];
            if c.phase == Phase::Two {
                return old.clone();
            }
            let f = c.follicle;
            let kin = &kins[f];
            let vf: Vec<f64> = y_faces
                .iter()
                .map(|&y| kin.vy(c.phase, y, &sn[f]))
                .collect();
            let bottom_in: Vec<f64> = if c.phase == Phase::Three && vf[0] > 0.0 {
                let src = &after_x[idx(Component::new(f, Phase::One, c.cycle))];
                let ktop = kin.vy(Phase::One, 1.0, &sn[f]);
                let mut g = vec![0.0; n];
                if ktop > 0.0 {
                    let m1 = p.mass_weight(Phase::One);
                    let m3 = p.mass_weight(Phase::Three);
                    for &(i1, i3, w) in &weights {
                        g[i3] += w * m1 * ktop * src[i1 * n + n - 1] / m3;
                    }
                }
                g
            } else {
                vec![0.0; n]
            };
            let mut new = old.clone();
            for i in 0..n {
                let col = &old[i * n..(i + 1) * n];
                let flux = |jf: usize| -> f64 {
                    let v = vf[jf];
                    if jf == 0 {
                        if v > 0.0 {
                            bottom_in[i]
                        } else {
                            v * col[0]
                        }
                    } else if jf == n {
                        if v > 0.0 {
                            v * col[n - 1]
                        } else {
                            0.0
                        }
                    } else if v > 0.0 {
                        v * col[jf - 1]
                    } else {
                        v * col[jf]
                    }
                };
                let mut lo = flux(0);
                for j in 0..n {
                    let hi = flux(j + 1);
                    new[i * n + j] = col[j] - r * (hi - lo);
                    lo = hi;
                }
            }
            new
        })
        .collect();

    // Exact decay.
    let mut cells = after_y;
    let mut loss_mass = 0.0;
    for &c in &comps {
        if c.phase == Phase::Two {
            continue;
        }
        let f = c.follicle;
        let v = &mut cells[idx(c)];
        let mw = p.mass_weight(c.phase) * h * h;
        for j in 0..n {
            let lam = kins[f].loss_at(c.phase, (j as f64 + 0.5) * h, &sn[f]);
            if lam == 0.0 {
                continue;
            }
            let d = (-lam * dt).exp();
            for i in 0..n {
                let before = v[i * n + j];
                v[i * n + j] = before * d;
                loss_mass += mw * (before - before * d);
            }
        }
    }
    let next = Grid {
        n,
        t: grid.t + dt,
        cells,
    };
    if next.cells.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonfiniteState(format!("after step to t={}", next.t)));
    }
    if let Some(a) = audit {
        let mut mit = Vec::new();
        let mut terminal = 0.0;
        for f in 0..p.follicles {
            for k in 2..=p.cycles {
                let prev = &grid.cells[idx(Component::new(f, Phase::Two, k - 1))];
                let col: f64 = (0..n).map(|j| prev[(n - 1) * n + j]).sum();
                let into = p.mass_weight(Phase::One) * mitosis * p.tau_g[f] / p.a1 * col * h * dt;
                let out = p.mass_weight(Phase::Two) * kins[f].ghat * col * h * dt;
                mit.push((f, k, into, out));
            }
            if !opts.closed_domain {
                for phase in [Phase::Two, Phase::Three] {
                    let v = &grid.cells[idx(Component::new(f, phase, last))];
                    let col: f64 = (0..n).map(|j| v[(n - 1) * n + j]).sum();
                    terminal += p.mass_weight(phase) * kins[f].vx(phase, &sn[f]) * col * h * dt;
                }
            }
        }
        *a = StepAudit {
            t: grid.t,
            dt,
            mitosis: mit,
            terminal_outflow: terminal,
            loss: loss_mass,
            mass_before: grid.mass(p),
            mass_after: next.mass(p),
        };
    }
    Ok(next)
}

/// Runs the scheme from the initial data to each time in `outputs` (sorted, in `[0, T]`).
pub fn run(problem: &Problem, outputs: &[f64], opts: &FvOptions) -> Result<FvRun> {
    let p = &*problem.params;
    if outputs.windows(2).any(|w| w[1] < w[0]) || outputs.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidConfig(
            "output times must be sorted and nonnegative".into(),
        ));
    }
    let mut grid = Grid::from_data(p, &problem.data, opts.resolution);
    let mut series = Vec::with_capacity(outputs.len());
    let mut grids = Vec::with_capacity(outputs.len());
    let mut audits = Vec::new();
    let mut steps = 0;
    for &target in outputs {
        loop {
            let (u, bu) = controls(problem, &grid)?;
            let remaining = target - grid.t;
            if remaining <= 1e-14 * target.max(1.0) {
                grid.t = target;
                series.push((grid.maturity(p), u, bu));
                grids.push(grid.clone());
                break;
            }
            let dt_max = stable_dt(problem, grid.n, &u, bu, opts.cfl);
            let dt = if remaining <= dt_max {
                remaining
            } else {
                remaining / (remaining / dt_max).ceil()
            };
            let mut audit = StepAudit {
                t: grid.t,
                dt,
                mitosis: Vec::new(),
                terminal_outflow: 0.0,
                loss: 0.0,
                mass_before: 0.0,
                mass_after: 0.0,
            };
            let next = step(
                problem,
                &grid,
                dt,
                &u,
                bu,
                opts,
                opts.audit.then_some(&mut audit),
            )?;
            if opts.audit {
                audits.push(audit);
            }
            grid = next;
            if remaining <= dt_max {
                grid.t = target;
            }
            steps += 1;
        }
    }
    Ok(FvRun {
        grid,
        series,
        grids,
        audits,
        steps,
    })
}
