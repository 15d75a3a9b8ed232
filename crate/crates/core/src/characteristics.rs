//! Characteristic curves, back-tracing through the coupled boundaries, region
//! classification and change-of-variables factors.
//!
//! Curves are integrated with classical RK4 on the step grid of a
//! [`ControlTable`], augmented with the loss integral and the divergence
//! integral (the log of the flow Jacobian). Face crossings are located by
//! bisection on the cubic Hermite interpolant of the step.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Component, ControlSnap, Kinematics, ModelParams, Phase, Rates};
use crate::trajectory::ControlTable;

/// Faces of the space-time cylinder over the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Face {
    /// t = epoch start.
    Bottom,
    /// x = 0.
    Back,
    /// x = 1.
    Front,
    /// y = 0.
    Left,
    /// y = 1.
    Right,
}

/// Bit masks selecting which faces stop an integration.
pub mod mask {
    pub const NONE: u8 = 0;
    pub const BACK: u8 = 1;
    pub const FRONT: u8 = 2;
    pub const LEFT: u8 = 4;
    pub const RIGHT: u8 = 8;
    pub const ALL: u8 = 15;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Point on a characteristic with the integrals accumulated from its start.
///
/// `loss` and `div` are signed integrals from the start time to `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathState {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub loss: f64,
    pub div: f64,
}

impl PathState {
    pub fn at(s: f64, x: f64, y: f64) -> Self {
        PathState {
            s,
            x,
            y,
            loss: 0.0,
            div: 0.0,
        }
    }
}

/// Result of [`Tracer::flow`].
#[derive(Debug, Clone, Serialize)]
pub struct FlowPath {
    pub samples: Vec<PathState>,
    pub end: PathState,
    pub exit: Option<Face>,
}

/// Region of a point in the partition of the unit square at fixed time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RegionLabel {
    P1Omega1,
    P1Omega2,
    P1Omega3,
    P2InteriorLeft,
    P2InteriorRight,
    P3Omega1,
    P3Omega2,
    P3Omega3,
    P3Omega4,
}

/// One back-traced segment inside a single component.
#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    pub component: Component,
    /// Later end `(t, x, y)`.
    pub start: (f64, f64, f64),
    /// Earlier end, on `entry_face` (or on the bottom).
    pub entry: (f64, f64, f64),
    pub entry_face: Face,
    /// Face the later end lies on, if the segment was reached through a hop.
    pub exit_face: Option<Face>,
    /// Positive integral of the loss rate along the segment.
    pub loss_integral: f64,
    /// Integral of d(vy)/dy along the segment, from entry to start.
    pub div_integral: f64,
    /// exp(-(loss_integral + div_integral)).
    pub exp_factor: f64,
    /// Boundary-condition factor applied when crossing `entry_face` upstream.
    pub boundary_factor: f64,
    /// Face-normal velocity at the entry point (1 for the bottom face).
    pub entry_velocity: f64,
    /// Face-normal velocity at the later end (1 for interior points).
    pub exit_velocity: f64,
}

/// Where a chain ends.
#[derive(Debug, Clone, Serialize)]
pub enum Anchor {
    /// Initial datum of `component` in epoch `epoch`.
    Initial {
        epoch: usize,
        component: Component,
        t: f64,
        x: f64,
        y: f64,
    },
    /// A face carrying zero inflow.
    Zero { component: Component, face: Face },
}

/// A back-traced characteristic path through the coupled components.
#[derive(Debug, Clone, Serialize)]
pub struct CharChain {
    pub terminal: Component,
    pub point: (f64, f64, f64),
    pub segments: Vec<Segment>,
    pub anchor: Anchor,
}

impl CharChain {
    pub fn hops(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    /// Product of boundary factors and segment exponentials (zero for zero anchors).
    pub fn factor(&self) -> f64 {
        if matches!(self.anchor, Anchor::Zero { .. }) {
            return 0.0;
        }
        self.segments
            .iter()
            .map(|s| s.boundary_factor * s.exp_factor)
            .product()
    }
}

/// Outcome of a value-only trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceValue {
    /// `(epoch, component, x, y)` of the initial-data anchor, if any.
    pub anchor: Option<(usize, Component, f64, f64)>,
    pub factor: f64,
}

/// Characteristic integrator for one frozen control history.
#[derive(Debug, Clone)]
pub struct Tracer {
    params: Arc<ModelParams>,
    table: Arc<ControlTable>,
    kin: Vec<Kinematics>,
    epochs: Vec<f64>,
}

#[inline]
fn hermite(q0: f64, q1: f64, d0: f64, d1: f64, h: f64, th: f64) -> f64 {
    let t2 = th * th;
    let t3 = t2 * th;
    (2.0 * t3 - 3.0 * t2 + 1.0) * q0
        + (t3 - 2.0 * t2 + th) * h * d0
        + (-2.0 * t3 + 3.0 * t2) * q1
        + (t3 - t2) * h * d1
}

#[inline]
fn outside(m: u8, x: f64, y: f64) -> bool {
    (m & mask::BACK != 0 && x < 0.0)
        || (m & mask::FRONT != 0 && x > 1.0)
        || (m & mask::LEFT != 0 && y < 0.0)
        || (m & mask::RIGHT != 0 && y > 1.0)
}

impl Tracer {
    /// `epochs` lists the start times of the data epochs (the first must be the table start).
    pub fn new(table: Arc<ControlTable>, epochs: Vec<f64>) -> Result<Self> {
        let params = table.params_arc().clone();
        if epochs.is_empty()
            || epochs[0] != table.start()
            || epochs.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::InvalidConfig(
                "epoch starts must begin at the table start and increase".into(),
            ));
        }
        let kin = (0..params.follicles)
            .map(|f| Kinematics::new(&params, f))
            .collect();
        Ok(Tracer {
            params,
            table,
            kin,
            epochs,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn table(&self) -> &ControlTable {
        &self.table
    }

    pub fn table_arc(&self) -> &Arc<ControlTable> {
        &self.table
    }

    pub fn epochs(&self) -> &[f64] {
        &self.epochs
    }

    pub fn kinematics(&self, f: usize) -> &Kinematics {
        &self.kin[f]
    }

    /// Index of the epoch containing `t`.
    pub fn epoch_of(&self, t: f64) -> usize {
        self.epochs.partition_point(|&e| e <= t).max(1) - 1
    }

    pub fn epoch_start(&self, t: f64) -> f64 {
        self.epochs[self.epoch_of(t)]
    }

    fn snap(&self, f: usize, s: f64) -> Result<ControlSnap> {
        let nodes = self.table.nodes();
        let j = nodes.partition_point(|&v| v < s);
        if j < nodes.len() && nodes[j] == s {
            return Ok(*self.table.node_snap(f, j));
        }
        self.table.snap_at(f, s)
    }

    /// Integrates from `start` to `t_end` (either direction), stopping at the
    /// first crossing of a face selected by `m`.
    pub fn integrate(
        &self,
        phase: Phase,
        f: usize,
        start: PathState,
        t_end: f64,
        m: u8,
        mut samples: Option<&mut Vec<PathState>>,
    ) -> Result<(PathState, Option<Face>)> {
        let table = &*self.table;
        table.check_time(start.s)?;
        table.check_time(t_end)?;
        let mut start = start;
        start.s = start.s.clamp(table.start(), table.end());
        let t_end = t_end.clamp(table.start(), table.end());
        if let Some(v) = samples.as_deref_mut() {
            v.push(start);
        }
        if t_end == start.s {
            return Ok((start, None));
        }
        let kin = &self.kin[f];
        let nodes = table.nodes();
        let fwd = t_end > start.s;
        let mut st = start;
        let snap_a = self.snap(f, st.s)?;
        let mut ra = kin.rates(phase, st.y, &snap_a);
        loop {
            let s = st.s;
            let (i, node_b) = if fwd {
                let j = nodes.partition_point(|&v| v <= s).min(nodes.len() - 1);
                (j - 1, j)
            } else {
                let j = nodes.partition_point(|&v| v < s).max(1);
                (j - 1, j - 1)
            };
            let sb = if fwd {
                nodes[node_b].min(t_end)
            } else {
                nodes[node_b].max(t_end)
            };
            let at_node_a = if fwd {
                s == nodes[i]
            } else {
                s == nodes[i + 1]
            };
            let b_is_node = sb == nodes[node_b];
            let sm_owned;
            let sm: &ControlSnap = if at_node_a && b_is_node {
                table.mid_snap(f, i)
            } else {
                sm_owned = table.snap_at(f, 0.5 * (s + sb))?;
                &sm_owned
            };
            let sb_owned;
            let snap_b: &ControlSnap = if b_is_node {
                table.node_snap(f, node_b)
            } else {
                sb_owned = table.snap_at(f, sb)?;
                &sb_owned
            };
            let h = sb - s;
            let k1 = ra;
            let k2 = kin.rates(phase, st.y + 0.5 * h * k1.vy, sm);
            let k3 = kin.rates(phase, st.y + 0.5 * h * k2.vy, sm);
            let k4 = kin.rates(phase, st.y + h * k3.vy, snap_b);
            let c = h / 6.0;
            let next = PathState {
                s: sb,
                x: st.x + c * (k1.vx + 2.0 * k2.vx + 2.0 * k3.vx + k4.vx),
                y: st.y + c * (k1.vy + 2.0 * k2.vy + 2.0 * k3.vy + k4.vy),
                loss: st.loss + c * (k1.loss + 2.0 * k2.loss + 2.0 * k3.loss + k4.loss),
                div: st.div + c * (k1.div + 2.0 * k2.div + 2.0 * k3.div + k4.div),
            };
            if !(next.y.is_finite() && next.x.is_finite()) {
                return Err(Error::StepFailure(format!("non-finite state at s={sb}")));
            }
            let rb = kin.rates(phase, next.y, snap_b);
            if m != mask::NONE && outside(m, next.x, next.y) {
                let (p, face) = Self::locate(m, &st, &next, &ra, &rb, h);
                if let Some(v) = samples.as_deref_mut() {
                    v.push(p);
                }
                return Ok((p, Some(face)));
            }
            st = next;
            ra = rb;
            if let Some(v) = samples.as_deref_mut() {
                v.push(st);
            }
            if st.s == t_end {
                return Ok((st, None));
            }
        }
    }

    /// Earliest face crossing inside one step, by bisection on the Hermite interpolant.
    fn locate(
        m: u8,
        a: &PathState,
        b: &PathState,
        ra: &Rates,
        rb: &Rates,
        h: f64,
    ) -> (PathState, Face) {
        let xq = |th: f64| hermite(a.x, b.x, ra.vx, rb.vx, h, th);
        let yq = |th: f64| hermite(a.y, b.y, ra.vy, rb.vy, h, th);
        let mut best = (f64::INFINITY, Face::Back);
        let candidates: [(u8, Face, bool, f64, bool); 4] = [
            (mask::BACK, Face::Back, b.x < 0.0, 0.0, true),
            (mask::FRONT, Face::Front, b.x > 1.0, 1.0, true),
            (mask::LEFT, Face::Left, b.y < 0.0, 0.0, false),
            (mask::RIGHT, Face::Right, b.y > 1.0, 1.0, false),
        ];
        for (bit, face, crossed, level, is_x) in candidates {
            if m & bit == 0 || !crossed {
                continue;
            }
            // inside(th) is true while the point is on the domain side of the face.
            let inside = |th: f64| {
                let v = if is_x { xq(th) } else { yq(th) };
                if level == 0.0 {
                    v >= 0.0
                } else {
                    v <= 1.0
                }
            };
            let th = if !inside(0.0) {
                0.0
            } else {
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if inside(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            if th < best.0 {
                best = (th, face);
            }
        }
        let th = best.0;
        let mut p = PathState {
            s: a.s + th * h,
            x: xq(th),
            y: yq(th),
            loss: hermite(a.loss, b.loss, ra.loss, rb.loss, h, th),
            div: hermite(a.div, b.div, ra.div, rb.div, h, th),
        };
        match best.1 {
            Face::Back => p.x = 0.0,
            Face::Front => p.x = 1.0,
            Face::Left => p.y = 0.0,
            Face::Right => p.y = 1.0,
            Face::Bottom => {}
        }
        (p, best.1)
    }

    /// Integrates a characteristic of `phase` from `start` towards `t_end`,
    /// returning the sampled path and the first face crossing.
    pub fn flow(
        &self,
        phase: Phase,
        f: usize,
        start: (f64, f64, f64),
        t_end: f64,
    ) -> Result<FlowPath> {
        let (t0, x0, y0) = start;
        if !(0.0..=1.0).contains(&x0) || !(0.0..=1.0).contains(&y0) {
            return Err(Error::OutOfDomain(format!("flow start ({x0}, {y0})")));
        }
        let mut samples = Vec::new();
        let (end, exit) = self.integrate(
            phase,
            f,
            PathState::at(t0, x0, y0),
            t_end,
            mask::ALL,
            Some(&mut samples),
        )?;
        Ok(FlowPath { samples, end, exit })
    }

    /// y-coordinate at `s1` of the y-characteristic through `(s0, y0)`; faces ignored.
    pub fn y_at(&self, phase: Phase, f: usize, s0: f64, y0: f64, s1: f64) -> Result<f64> {
        Ok(self
            .integrate(phase, f, PathState::at(s0, 0.5, y0), s1, mask::NONE, None)?
            .0
            .y)
    }

    /// Time at which the backward y-characteristic through `(t, y)` reaches `y = 0`,
    /// if that happens at or after `floor`.
    pub fn entry_time_from_left(
        &self,
        phase: Phase,
        f: usize,
        t: f64,
        y: f64,
        floor: f64,
    ) -> Result<Option<f64>> {
        let (p, face) =
            self.integrate(phase, f, PathState::at(t, 0.5, y), floor, mask::LEFT, None)?;
        Ok(face.map(|_| p.s))
    }

    /// Phase 1 age advance since `from`.
    pub fn age_between(&self, f: usize, from: f64, to: f64) -> Result<f64> {
        Ok(self.table.age_advance(f, to)? - self.table.age_advance(f, from)?)
    }

    /// Time `s <= t` with `age_between(f, s, t) = x`, if not before `floor`.
    pub fn age_back(&self, f: usize, t: f64, x: f64, floor: f64) -> Result<Option<f64>> {
        let target = self.table.age_advance(f, t)? - x;
        let base = self.table.age_advance(f, floor)?;
        if target < base {
            return Ok(None);
        }
        self.table.age_inverse(f, target)
    }

    /// Phase 1 curve separating data-anchored points from zero: y at `t` of the
    /// characteristic leaving `(epoch start, y = 0)`.
    pub fn p1_bottom_curve(&self, f: usize, t: f64) -> Result<f64> {
        let te = self.epoch_start(t);
        self.y_at(Phase::One, f, te, 0.0, t)
    }

    /// Phase 1 curve `eta(t, x)` for `x` below the age advance, else `None`.
    pub fn p1_eta(&self, f: usize, t: f64, x: f64) -> Result<Option<f64>> {
        let te = self.epoch_start(t);
        match self.age_back(f, t, x, te)? {
            Some(theta) => Ok(Some(self.y_at(Phase::One, f, theta, 0.0, t)?)),
            None => Ok(None),
        }
    }

    /// Phase 3 curves from the bottom corners `(epoch start, 0, 0)` and `(epoch start, 0, 1)`.
    pub fn p3_bottom_curves(&self, f: usize, t: f64) -> Result<(f64, f64)> {
        let te = self.epoch_start(t);
        Ok((
            self.y_at(Phase::Three, f, te, 0.0, t)?,
            self.y_at(Phase::Three, f, te, 1.0, t)?,
        ))
    }

    /// Phase 3 curves from `(t - x / gtilde, 0, 0)` and `(t - x / gtilde, 0, 1)`.
    pub fn p3_eta(&self, f: usize, t: f64, x: f64) -> Result<Option<(f64, f64)>> {
        let te = self.epoch_start(t);
        let theta = t - x / self.kin[f].gtilde;
        if theta < te {
            return Ok(None);
        }
        Ok(Some((
            self.y_at(Phase::Three, f, theta, 0.0, t)?,
            self.y_at(Phase::Three, f, theta, 1.0, t)?,
        )))
    }

    fn face_velocity(&self, phase: Phase, f: usize, face: Face, s: f64) -> Result<f64> {
        let k = &self.kin[f];
        Ok(match face {
            Face::Bottom => 1.0,
            Face::Back | Face::Front => k.vx(phase, &self.snap(f, s)?),
            Face::Left => k.vy(phase, 0.0, &self.snap(f, s)?),
            Face::Right => k.vy(phase, 1.0, &self.snap(f, s)?),
        })
    }

    fn check_point(c: Component, t: f64, x: f64, y: f64, p: &ModelParams) -> Result<()> {
        if !(-1e-12..=1.0 + 1e-12).contains(&x)
            || !(-1e-12..=1.0 + 1e-12).contains(&y)
            || !t.is_finite()
        {
            return Err(Error::OutOfDomain(format!("({t}, {x}, {y}) for {c}")));
        }
        if c.follicle >= p.follicles || c.cycle < 1 || c.cycle > p.cycles {
            return Err(Error::OutOfDomain(format!("component {c}")));
        }
        Ok(())
    }

    /// Back-traces `(t, x, y)` of component `c` to its anchor.
    ///
    /// With `chain = Some(..)` the full hop record is filled in.
    pub fn trace(
        &self,
        c: Component,
        t: f64,
        x: f64,
        y: f64,
        mut chain: Option<&mut Vec<Segment>>,
    ) -> Result<(TraceValue, Option<Anchor>)> {
        let p = &*self.params;
        Self::check_point(c, t, x, y, p)?;
        let epoch = self.epoch_of(t);
        let floor = self.epochs[epoch];
        let budget = 2 * p.cycles;
        let (mut comp, mut t, mut x, mut y) = (c, t, x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
        let mut log_exp = 0.0;
        let mut factor = 1.0;
        let mut exit_face: Option<Face> = None;
        let mut exit_velocity = 1.0;
        for _ in 0..=budget {
            let f = comp.follicle;
            let start = PathState::at(t, x, y);
            let (end, face) = self.integrate(comp.phase, f, start, floor, mask::ALL, None)?;
            let loss = -end.loss;
            let div = -end.div;
            log_exp += loss + div;
            let face = face.unwrap_or(Face::Bottom);
            // Next component and the boundary factor at the entry face.
            let hop: Option<(Component, f64, f64, f64, f64)> = match (comp.phase, face) {
                (_, Face::Bottom) => None,
                (Phase::One, Face::Back) if comp.cycle > 1 => {
                    let gb = self.snap(f, end.s)?.gbar;
                    let fac = self.table.hooks().mitosis_factor * p.tau_g[f] / (p.a1 * gb);
                    Some((
                        Component::new(f, Phase::Two, comp.cycle - 1),
                        end.s,
                        1.0,
                        end.y,
                        fac,
                    ))
                }
                (Phase::Two, Face::Back) => {
                    let gb = self.snap(f, end.s)?.gbar;
                    let fac = p.a1 * gb / p.tau_g[f];
                    Some((
                        Component::new(f, Phase::One, comp.cycle),
                        end.s,
                        1.0,
                        end.y,
                        fac,
                    ))
                }
                (Phase::Three, Face::Back) if comp.cycle > 1 => Some((
                    Component::new(f, Phase::Three, comp.cycle - 1),
                    end.s,
                    1.0,
                    end.y,
                    1.0,
                )),
                (Phase::Three, Face::Left) => {
                    let xbar = p.a2 / p.a1 * end.x;
                    if xbar <= 1.0 + 1e-12 {
                        Some((
                            Component::new(f, Phase::One, comp.cycle),
                            end.s,
                            xbar.min(1.0),
                            1.0,
                            1.0,
                        ))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            let is_zero = face != Face::Bottom && hop.is_none();
            if let Some(v) = chain.as_deref_mut() {
                let entry_velocity = self.face_velocity(comp.phase, f, face, end.s)?;
                v.push(Segment {
                    component: comp,
                    start: (t, x, y),
                    entry: (end.s, end.x, end.y),
                    entry_face: face,
                    exit_face,
                    loss_integral: loss,
                    div_integral: div,
                    exp_factor: (-(loss + div)).exp(),
                    boundary_factor: hop.map(|h| h.4).unwrap_or(1.0),
                    entry_velocity,
                    exit_velocity,
                });
            }
            match hop {
                None if face == Face::Bottom => {
                    let value = TraceValue {
                        anchor: Some((epoch, comp, end.x.clamp(0.0, 1.0), end.y.clamp(0.0, 1.0))),
                        factor: factor * (-log_exp).exp(),
                    };
                    let anchor = Anchor::Initial {
                        epoch,
                        component: comp,
                        t: end.s,
                        x: end.x.clamp(0.0, 1.0),
                        y: end.y.clamp(0.0, 1.0),
                    };
                    return Ok((value, Some(anchor)));
                }
                None => {
                    debug_assert!(is_zero);
                    return Ok((
                        TraceValue {
                            anchor: None,
                            factor: 0.0,
                        },
                        Some(Anchor::Zero {
                            component: comp,
                            face,
                        }),
                    ));
                }
                Some((next, nt, nx, ny, fac)) => {
                    factor *= fac;
                    let entry_face_next = match (comp.phase, face) {
                        (Phase::Three, Face::Left) => Face::Right,
                        _ => Face::Front,
                    };
                    if chain.is_some() {
                        exit_velocity =
                            self.face_velocity(next.phase, next.follicle, entry_face_next, nt)?;
                    }
                    exit_face = Some(entry_face_next);
                    comp = next;
                    t = nt;
                    x = nx;
                    y = ny;
                }
            }
        }
        Err(Error::ChainOverflow { budget })
    }

    /// Full back-trace record.
    pub fn backtrace(&self, c: Component, t: f64, x: f64, y: f64) -> Result<CharChain> {
        let mut segs = Vec::new();
        let (_, anchor) = self.trace(c, t, x, y, Some(&mut segs))?;
        Ok(CharChain {
            terminal: c,
            point: (t, x, y),
            segments: segs,
            anchor: anchor.expect("trace always yields an anchor"),
        })
    }

    /// Change-of-variables factor between the entry-face coordinates and the
    /// later-end coordinates of a segment.
    pub fn jacobian_factor(&self, seg: &Segment) -> Result<f64> {
        let vin = seg.entry_velocity.abs();
        let vout = seg.exit_velocity.abs();
        for v in [vin, vout] {
            if v < 1e-14 {
                return Err(Error::DegenerateVelocity(v));
            }
        }
        let j = vin * seg.div_integral.exp() / vout;
        Ok(j * (1.0 + self.table.hooks().jacobian_perturbation))
    }

    /// Region label of `(t, x, y)` for the phase of `c`.
    pub fn classify(&self, c: Component, t: f64, x: f64, y: f64) -> Result<RegionLabel> {
        const TIE: f64 = 1e-10;
        let f = c.follicle;
        let te = self.epoch_start(t);
        let (label, dist) = match c.phase {
            Phase::One => {
                let xa = self.age_between(f, te, t)?;
                if x >= xa {
                    let y0 = self.p1_bottom_curve(f, t)?;
                    let l = if y >= y0 {
                        RegionLabel::P1Omega1
                    } else {
                        RegionLabel::P1Omega3
                    };
                    (l, (y - y0).abs().min(x - xa))
                } else {
                    let eta = self.p1_eta(f, t, x)?.unwrap_or(f64::INFINITY);
                    let l = if y >= eta {
                        RegionLabel::P1Omega2
                    } else {
                        RegionLabel::P1Omega3
                    };
                    (l, (y - eta).abs().min(xa - x))
                }
            }
            Phase::Two => {
                let xa = self.kin[f].ghat * (t - te);
                let l = if x >= xa {
                    RegionLabel::P2InteriorRight
                } else {
                    RegionLabel::P2InteriorLeft
                };
                (l, (x - xa).abs())
            }
            Phase::Three => {
                let xa = self.kin[f].gtilde * (t - te);
                if x >= xa {
                    let (y1, y2) = self.p3_bottom_curves(f, t)?;
                    let l = if y < y1 {
                        RegionLabel::P3Omega2
                    } else if y <= y2 {
                        RegionLabel::P3Omega1
                    } else {
                        RegionLabel::P3Omega4
                    };
                    (l, (y - y1).abs().min((y - y2).abs()).min(x - xa))
                } else {
                    let (e1, e2) = self.p3_eta(f, t, x)?.unwrap_or((0.0, 1.0));
                    let l = if y < e1 {
                        RegionLabel::P3Omega2
                    } else if y <= e2 {
                        RegionLabel::P3Omega3
                    } else {
                        RegionLabel::P3Omega4
                    };
                    (l, (y - e1).abs().min((y - e2).abs()).min(xa - x))
                }
            }
        };
        if dist < TIE {
            return self.classify_by_trace(c, t, x, y);
        }
        Ok(label)
    }

    /// Region label from the entry face of the first back-traced segment.
    pub fn classify_by_trace(&self, c: Component, t: f64, x: f64, y: f64) -> Result<RegionLabel> {
        let te = self.epoch_start(t);
        let (_, face) = self.integrate(
            c.phase,
            c.follicle,
            PathState::at(t, x, y),
            te,
            mask::ALL,
            None,
        )?;
        let face = face.unwrap_or(Face::Bottom);
        Ok(match (c.phase, face) {
            (Phase::One, Face::Bottom) => RegionLabel::P1Omega1,
            (Phase::One, Face::Back) => RegionLabel::P1Omega2,
            (Phase::One, _) => RegionLabel::P1Omega3,
            (Phase::Two, Face::Bottom) => RegionLabel::P2InteriorRight,
            (Phase::Two, _) => RegionLabel::P2InteriorLeft,
            (Phase::Three, Face::Bottom) => RegionLabel::P3Omega1,
            (Phase::Three, Face::Left) => RegionLabel::P3Omega2,
            (Phase::Three, Face::Back) => RegionLabel::P3Omega3,
            (Phase::Three, _) => RegionLabel::P3Omega4,
        })
    }
}

/// Coordinates on a face used by the finite-difference Jacobian check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FaceCoords {
    pub face: Face,
    pub a: f64,
    pub b: f64,
}

impl Tracer {
    /// Maps entry-face coordinates forward along `phase` until `t_end` or an
    /// exit face, returning the exit coordinates and the augmented state.
    ///
    /// Entry coordinates: bottom `(x0, y0)`, back `(tau0, y)`, left/right `(t0, x)`.
    /// Exit coordinates: interior `(x, y)`, front `(tau, y)`, right/left `(x, t)`.
    pub fn segment_map(
        &self,
        phase: Phase,
        f: usize,
        entry: FaceCoords,
        t_bottom: f64,
        t_end: f64,
    ) -> Result<((f64, f64), Option<Face>, PathState)> {
        let start = match entry.face {
            Face::Bottom => PathState::at(t_bottom, entry.a, entry.b),
            Face::Back => PathState::at(entry.a, 0.0, entry.b),
            Face::Left => PathState::at(entry.a, entry.b, 0.0),
            Face::Right => PathState::at(entry.a, entry.b, 1.0),
            Face::Front => return Err(Error::InvalidConfig("front face is never an entry".into())),
        };
        let out_mask = match phase {
            Phase::One => mask::FRONT | mask::RIGHT,
            Phase::Two => mask::FRONT,
            Phase::Three => mask::FRONT,
        };
        let (end, face) = self.integrate(phase, f, start, t_end, out_mask, None)?;
        let coords = match face {
            None => (end.x, end.y),
            Some(Face::Front) => (end.s, end.y),
            Some(_) => (end.x, end.s),
        };
        Ok((coords, face, end))
    }

    /// Analytic factor of [`Tracer::segment_map`] at the given entry.
    pub fn segment_map_factor(
        &self,
        phase: Phase,
        f: usize,
        entry: FaceCoords,
        t_bottom: f64,
        t_end: f64,
    ) -> Result<f64> {
        let (_, exit, end) = self.segment_map(phase, f, entry, t_bottom, t_end)?;
        let t_in = match entry.face {
            Face::Bottom => t_bottom,
            _ => entry.a,
        };
        let seg = Segment {
            component: Component::new(f, phase, 1),
            start: (end.s, end.x, end.y),
            entry: (t_in, 0.0, 0.0),
            entry_face: entry.face,
            exit_face: exit,
            loss_integral: end.loss,
            div_integral: end.div,
            exp_factor: 1.0,
            boundary_factor: 1.0,
            entry_velocity: self.face_velocity(phase, f, entry.face, t_in)?,
            exit_velocity: match exit {
                None => 1.0,
                Some(face) => self.face_velocity(phase, f, face, end.s)?,
            },
        };
        self.jacobian_factor(&seg)
    }

    /// |det| of the segment map by central finite differences.
    pub fn segment_map_fd(
        &self,
        phase: Phase,
        f: usize,
        entry: FaceCoords,
        t_bottom: f64,
        t_end: f64,
        eps: f64,
    ) -> Result<f64> {
        let eval = |a: f64, b: f64| -> Result<(f64, f64)> {
            let e = FaceCoords {
                face: entry.face,
                a,
                b,
            };
            Ok(self.segment_map(phase, f, e, t_bottom, t_end)?.0)
        };
        let pa = eval(entry.a + eps, entry.b)?;
        let ma = eval(entry.a - eps, entry.b)?;
        let pb = eval(entry.a, entry.b + eps)?;
        let mb = eval(entry.a, entry.b - eps)?;
        let j11 = (pa.0 - ma.0) / (2.0 * eps);
        let j21 = (pa.1 - ma.1) / (2.0 * eps);
        let j12 = (pb.0 - mb.0) / (2.0 * eps);
        let j22 = (pb.1 - mb.1) / (2.0 * eps);
        Ok((j11 * j22 - j12 * j21).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hooks;
    use crate::trajectory::{ControlSource, MaturityTrajectory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> Arc<ModelParams> {
        Arc::new(
            ModelParams::from_json_str(include_str!("../configs/default_params.json")).unwrap(),
        )
    }

    fn knots() -> Vec<f64> {
        (0..=20).map(|i| 0.01 * i as f64).collect()
    }

    /// Varying closed-loop controls on [0, 0.2].
    fn tracer_with(hooks: Hooks, max_step: f64) -> Tracer {
        let ks = knots();
        let vals = ks
            .iter()
            .map(|&t| vec![3.0 + 15.0 * t, 5.0 - 10.0 * t + 40.0 * t * t])
            .collect();
        let tr = Arc::new(MaturityTrajectory::new(ks.clone(), vals).unwrap());
        let table = ControlTable::new(
            params(),
            hooks,
            ControlSource::ClosedLoop(tr),
            &ks,
            max_step,
        )
        .unwrap();
        Tracer::new(Arc::new(table), vec![0.0]).unwrap()
    }

    fn tracer() -> Tracer {
        tracer_with(Hooks::default(), 0.005)
    }

    fn constant_tracer() -> (Tracer, f64) {
        let ks = knots();
        let tr = Arc::new(MaturityTrajectory::constant(ks.clone(), &[4.0, 6.0]).unwrap());
        let p = params();
        let u = p.local_control(4.0, 10.0);
        let table = ControlTable::new(
            p.clone(),
            Hooks::default(),
            ControlSource::ClosedLoop(tr),
            &ks,
            0.005,
        )
        .unwrap();
        (
            Tracer::new(Arc::new(table), vec![0.0]).unwrap(),
            p.gbar(0, u),
        )
    }

    #[test]
    fn semigroup() {
        let tr = tracer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let phase = [Phase::One, Phase::Two, Phase::Three][rng.gen_range(0..3)];
            let f = rng.gen_range(0..2);
            let s0 = rng.gen_range(0.0..0.05);
            let s1 = rng.gen_range(0.06..0.12);
            let s2 = rng.gen_range(0.13..0.2);
            let start = PathState::at(s0, rng.gen(), rng.gen());
            let (direct, _) = tr.integrate(phase, f, start, s2, mask::NONE, None).unwrap();
            let (mid, _) = tr.integrate(phase, f, start, s1, mask::NONE, None).unwrap();
            let (two, _) = tr.integrate(phase, f, mid, s2, mask::NONE, None).unwrap();
            assert!((direct.x - two.x).abs() < 1e-10 && (direct.y - two.y).abs() < 1e-10);
            assert!((direct.div - two.div).abs() < 1e-10 && (direct.loss - two.loss).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_backward_round_trip() {
        let tr = tracer();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let phase = [Phase::One, Phase::Two, Phase::Three][rng.gen_range(0..3)];
            let f = rng.gen_range(0..2);
            let s0 = rng.gen_range(0.0..0.1);
            let s1 = rng.gen_range(s0..0.2);
            let (x0, y0) = (rng.gen::<f64>(), rng.gen::<f64>());
            let (fwd, _) = tr
                .integrate(phase, f, PathState::at(s0, x0, y0), s1, mask::NONE, None)
                .unwrap();
            let (back, _) = tr
                .integrate(
                    phase,
                    f,
                    PathState::at(s1, fwd.x, fwd.y),
                    s0,
                    mask::NONE,
                    None,
                )
                .unwrap();
            assert!((back.x - x0).abs() < 1e-9 && (back.y - y0).abs() < 1e-9);
        }
    }

    #[test]
    fn phase2_exits_front_at_constant_speed() {
        let tr = tracer();
        let p = params();
        for f in 0..2 {
            let g = p.ghat(f);
            let (t0, x0) = (0.02, 1.0 - 0.1 * g);
            let path = tr.flow(Phase::Two, f, (t0, x0, 0.4), 0.2).unwrap();
            assert_eq!(path.exit, Some(Face::Front));
            assert!((path.end.s - (t0 + (1.0 - x0) / g)).abs() < 1e-12);
        }
    }

    #[test]
    fn phase1_age_moves_linearly_under_constant_controls() {
        let (tr, gb) = constant_tracer();
        let (end, face) = tr
            .integrate(
                Phase::One,
                0,
                PathState::at(0.01, 0.2, 0.3),
                0.15,
                mask::NONE,
                None,
            )
            .unwrap();
        assert!(face.is_none());
        assert!((end.x - (0.2 + gb * 0.14)).abs() < 1e-13);
    }

    #[test]
    fn phase3_matches_finer_reference() {
        let coarse = tracer();
        let fine = tracer_with(Hooks::default(), 0.0005);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let f = rng.gen_range(0..2);
            let start = PathState::at(rng.gen_range(0.0..0.05), rng.gen(), rng.gen());
            let (a, _) = coarse
                .integrate(Phase::Three, f, start, 0.2, mask::NONE, None)
                .unwrap();
            let (b, _) = fine
                .integrate(Phase::Three, f, start, 0.2, mask::NONE, None)
                .unwrap();
            assert!((a.y - b.y).abs() < 1e-9, "{} vs {}", a.y, b.y);
            assert!((a.div - b.div).abs() < 1e-9 && (a.loss - b.loss).abs() < 1e-9);
        }
    }

    #[test]
    fn classify_agrees_with_backtrace() {
        let tr = tracer();
        let p = params();
        let comps = Component::all(p.follicles, p.cycles);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let c = comps[rng.gen_range(0..comps.len())];
            let (t, x, y) = (rng.gen_range(0.0..=0.2), rng.gen::<f64>(), rng.gen::<f64>());
            assert_eq!(
                tr.classify(c, t, x, y).unwrap(),
                tr.classify_by_trace(c, t, x, y).unwrap(),
                "{c:?} at ({t}, {x}, {y})"
            );
        }
    }

    #[test]
    fn chains_respect_hop_budget() {
        let tr = tracer();
        let p = params();
        let comps = Component::all(p.follicles, p.cycles);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let c = comps[rng.gen_range(0..comps.len())];
            let chain = tr
                .backtrace(c, rng.gen_range(0.0..=0.2), rng.gen(), rng.gen())
                .unwrap();
            assert!(chain.hops() <= 2 * p.cycles);
            assert!(chain.factor() >= 0.0);
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let tr = tracer();
        assert!(matches!(
            tr.flow(Phase::One, 0, (0.0, 1.5, 0.5), 0.1),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let tr = tracer();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = crate::verify::jacobian_samples(&tr, 27, 1e-6, &mut rng).unwrap();
        assert_eq!(samples.len(), 27);
        for s in &samples {
            assert!(s.relative_error < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn perturbed_jacobian_is_detected() {
        let hooks = Hooks {
            jacobian_perturbation: 0.01,
            ..Hooks::default()
        };
        let tr = tracer_with(hooks, 0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = crate::verify::jacobian_samples(&tr, 9, 1e-6, &mut rng).unwrap();
        assert!(samples
            .iter()
            .all(|s| (s.relative_error - 0.01).abs() < 1e-5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn y_stays_in_unit_interval(phase in 1usize..=3, f in 0usize..2, x in 0.0f64..=1.0, y in 0.0f64..=1.0, s in 0.0f64..0.2) {
                let tr = tracer();
                let ph = Phase::from_number(phase).unwrap();
                let path = tr.flow(ph, f, (s, x, y), 0.2).unwrap();
                for q in path.samples.iter().chain(std::iter::once(&path.end)) {
                    prop_assert!(q.y >= -1e-12 && q.y <= 1.0 + 1e-12);
                    prop_assert!(q.x >= -1e-12 && q.x <= 1.0 + 1e-12);
                }
            }

            #[test]
            fn age_round_trip(f in 0usize..2, t in 0.05f64..=0.2, frac in 0.0f64..1.0) {
                let tr = tracer();
                let x = frac * tr.age_between(f, 0.0, t).unwrap();
                let s = tr.age_back(f, t, x, 0.0).unwrap().unwrap();
                prop_assert!((tr.age_between(f, s, t).unwrap() - x).abs() < 1e-12);
            }
        }
    }
}
