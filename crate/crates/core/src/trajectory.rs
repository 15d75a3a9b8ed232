//! Maturity trajectories and the control tables derived from them.
//!
//! A [`ControlTable`] freezes the controls along a fixed step grid so that
//! every characteristic integrated against the same trajectory sees exactly the
//! same velocity samples.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlSnap, Hooks, ModelParams};

/// Piecewise-linear maturity trajectory t -> (M_1, ..., M_n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityTrajectory {
    times: Vec<f64>,
    /// `values[j][f]` is M_f at `times[j]`.
    values: Vec<Vec<f64>>,
}

impl MaturityTrajectory {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::InvalidConfig(
                "trajectory needs matching non-empty times and values".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig(
                "trajectory times must increase".into(),
            ));
        }
        let n = values[0].len();
        if n == 0 || values.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidConfig("ragged trajectory values".into()));
        }
        if values
            .iter()
            .flatten()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "trajectory values must be finite and nonnegative".into(),
            ));
        }
        Ok(MaturityTrajectory { times, values })
    }

    /// Constant trajectory on the given times.
    pub fn constant(times: Vec<f64>, m0: &[f64]) -> Result<Self> {
        let values = vec![m0.to_vec(); times.len()];
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn follicles(&self) -> usize {
        self.values[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Locates `t`, returning `(j, w)` with `t = (1-w) t_j + w t_{j+1}`.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = (self.start(), self.end());
        let slack = 1e-12 * (1.0 + hi.abs());
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::WindowExceeded { t, lo, hi });
        }
        if self.times.len() == 1 {
            return Ok((0, 0.0));
        }
        let j = self
            .times
            .partition_point(|&s| s <= t)
            .clamp(1, self.times.len() - 1)
            - 1;
        let w = ((t - self.times[j]) / (self.times[j + 1] - self.times[j])).clamp(0.0, 1.0);
        Ok((j, w))
    }

    /// M_f(t) for every follicle.
    pub fn values_at(&self, t: f64) -> Result<Vec<f64>> {
        let (j, w) = self.locate(t)?;
        if w == 0.0 {
            return Ok(self.values[j].clone());
        }
        Ok(self.values[j]
            .iter()
            .zip(&self.values[j + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect())
    }

    pub fn value(&self, f: usize, t: f64) -> Result<f64> {
        Ok(self.values_at(t)?[f])
    }

    /// Global maturity M(t).
    pub fn total(&self, t: f64) -> Result<f64> {
        Ok(self.values_at(t)?.iter().sum())
    }

    /// max_j max_f M_f(t_j).
    pub fn sup(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }

    /// Sup-norm distance on common sample times.
    pub fn distance(&self, other: &MaturityTrajectory) -> f64 {
        assert_eq!(self.times.len(), other.times.len());
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }

    /// Appends samples strictly after the current end.
    pub fn extend(&mut self, times: &[f64], values: &[Vec<f64>]) -> Result<()> {
        let mut t = self.times.clone();
        let mut v = self.values.clone();
        t.extend_from_slice(times);
        v.extend_from_slice(values);
        *self = Self::new(t, v)?;
        Ok(())
    }

    /// Replaces the values at the last `values.len()` samples.
    pub fn set_tail(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let n = self.values.len();
        if values.len() > n {
            return Err(Error::InvalidConfig("tail longer than trajectory".into()));
        }
        for (dst, src) in self.values[n - values.len()..].iter_mut().zip(values) {
            if src.len() != dst.len() || src.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig("invalid tail values".into()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

/// Open-loop controls prescribed as piecewise-linear functions of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenControls {
    pub times: Vec<f64>,
    /// `u[j][f]`.
    pub u: Vec<Vec<f64>>,
    pub big_u: Vec<f64>,
}

impl FrozenControls {
    pub fn new(times: Vec<f64>, u: Vec<Vec<f64>>, big_u: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || u.len() != times.len() || big_u.len() != times.len() {
            return Err(Error::InvalidConfig(
                "frozen controls need at least two rows".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig(
                "frozen control times must increase".into(),
            ));
        }
        let n = u[0].len();
        if u.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig("ragged frozen controls".into()));
        }
        Ok(FrozenControls { times, u, big_u })
    }

    /// Reads a CSV with header `t,u_1,...,u_n,U`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 3 || &headers[0] != "t" || &headers[cols - 1] != "U" {
            return Err(Error::InvalidConfig(
                "frozen control CSV header must be t,u_1..u_n,U".into(),
            ));
        }
        let (mut times, mut u, mut big_u) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::InvalidConfig(format!("frozen controls: {e}")))?;
            if vals.len() != cols {
                return Err(Error::InvalidConfig("frozen control row width".into()));
            }
            times.push(vals[0]);
            u.push(vals[1..cols - 1].to_vec());
            big_u.push(vals[cols - 1]);
        }
        Self::new(times, u, big_u)
    }

    pub fn follicles(&self) -> usize {
        self.u[0].len()
    }

    /// `(u_f(t), U(t))`.
    pub fn at(&self, f: usize, t: f64) -> Result<(f64, f64)> {
        let (lo, hi) = (self.times[0], *self.times.last().unwrap());
        let slack = 1e-12 * (1.0 + hi.abs());
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::WindowExceeded { t, lo, hi });
        }
        let j = self
            .times
            .partition_point(|&s| s <= t)
            .clamp(1, self.times.len() - 1)
            - 1;
        let w = ((t - self.times[j]) / (self.times[j + 1] - self.times[j])).clamp(0.0, 1.0);
        let u = self.u[j][f] + w * (self.u[j + 1][f] - self.u[j][f]);
        let bu = self.big_u[j] + w * (self.big_u[j + 1] - self.big_u[j]);
        Ok((u, bu))
    }
}

/// Where the controls come from.
#[derive(Debug, Clone)]
pub enum ControlSource {
    /// Feedback through the maturity trajectory.
    ClosedLoop(Arc<MaturityTrajectory>),
    /// Prescribed controls; the model becomes linear in the data.
    OpenLoop(Arc<FrozenControls>),
}

/// Controls sampled on the integration grid (nodes and midpoints), plus the
/// cumulative Phase 1 age advance used by the region geometry.
#[derive(Debug, Clone)]
pub struct ControlTable {
    params: Arc<ModelParams>,
    hooks: Hooks,
    source: ControlSource,
    nodes: Vec<f64>,
    /// `snaps[f][2i]` at node i, `snaps[f][2i+1]` at the midpoint of step i.
    snaps: Vec<Vec<ControlSnap>>,
    /// `age[f][i]` = integral of gbar from `nodes[0]` to `nodes[i]` (Simpson per step).
    age: Vec<Vec<f64>>,
}

impl ControlTable {
    /// Builds the table on `knots`, each knot interval split into equal steps no longer than `max_step`.
    pub fn new(
        params: Arc<ModelParams>,
        hooks: Hooks,
        source: ControlSource,
        knots: &[f64],
        max_step: f64,
    ) -> Result<Self> {
        if knots.is_empty() || !(max_step > 0.0) {
            return Err(Error::InvalidConfig(
                "control table needs knots and a step".into(),
            ));
        }
        let mut nodes = vec![knots[0]];
        for w in knots.windows(2) {
            let m = ((w[1] - w[0]) / max_step - 1e-9).ceil().max(1.0) as usize;
            for i in 1..m {
                nodes.push(w[0] + (w[1] - w[0]) * i as f64 / m as f64);
            }
            nodes.push(w[1]);
        }
        let n = params.follicles;
        let mut table = ControlTable {
            params,
            hooks,
            source,
            nodes,
            snaps: vec![Vec::new(); n],
            age: vec![Vec::new(); n],
        };
        let len = table.nodes.len();
        let mut points = Vec::with_capacity(2 * len - 1);
        for i in 0..len {
            points.push(table.nodes[i]);
            if i + 1 < len {
                points.push(0.5 * (table.nodes[i] + table.nodes[i + 1]));
            }
        }
        for &s in &points {
            let snaps = table.compute(s)?;
            for (f, sn) in snaps.into_iter().enumerate() {
                table.snaps[f].push(sn);
            }
        }
        for f in 0..n {
            let mut acc = vec![0.0; len];
            for i in 0..len - 1 {
                let h = table.nodes[i + 1] - table.nodes[i];
                let sn = &table.snaps[f];
                acc[i + 1] = acc[i]
                    + h / 6.0 * (sn[2 * i].gbar + 4.0 * sn[2 * i + 1].gbar + sn[2 * i + 2].gbar);
            }
            table.age[f] = acc;
        }
        Ok(table)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_arc(&self) -> &Arc<ModelParams> {
        &self.params
    }

    pub fn hooks(&self) -> &Hooks {
        &self.hooks
    }

    pub fn source(&self) -> &ControlSource {
        &self.source
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Raw controls `(u_f, U)` for all follicles at `s`.
    pub fn controls(&self, s: f64) -> Result<(Vec<f64>, f64)> {
        match &self.source {
            ControlSource::ClosedLoop(traj) => {
                let m = traj.values_at(s)?;
                Ok(self.hooks.controls(&self.params, &m))
            }
            ControlSource::OpenLoop(fc) => {
                let mut u = Vec::with_capacity(self.params.follicles);
                let mut bu = 1.0;
                for f in 0..self.params.follicles {
                    let (uf, b) = fc.at(f, s)?;
                    u.push(uf);
                    bu = b;
                }
                if self.hooks.zero_loss {
                    bu = 1.0;
                }
                Ok((u, bu))
            }
        }
    }

    fn compute(&self, s: f64) -> Result<Vec<ControlSnap>> {
        let (u, bu) = self.controls(s)?;
        let mut out = Vec::with_capacity(u.len());
        for (f, &uf) in u.iter().enumerate() {
            self.params.check_control(f, uf).map_err(|e| match e {
                Error::AssumptionViolated(m) => Error::AssumptionViolated(format!("{m} at t={s}")),
                other => other,
            })?;
            out.push(self.hooks.snap(&self.params, f, uf, bu));
        }
        Ok(out)
    }

    /// Controls of follicle `f` at an arbitrary time (computed directly).
    pub fn snap_at(&self, f: usize, s: f64) -> Result<ControlSnap> {
        let (u, bu) = self.controls(s)?;
        self.params.check_control(f, u[f])?;
        Ok(self.hooks.snap(&self.params, f, u[f], bu))
    }

    /// Snap at node `i`.
    #[inline]
    pub fn node_snap(&self, f: usize, i: usize) -> &ControlSnap {
        &self.snaps[f][2 * i]
    }

    /// Snap at the midpoint of step `i`.
    #[inline]
    pub fn mid_snap(&self, f: usize, i: usize) -> &ControlSnap {
        &self.snaps[f][2 * i + 1]
    }

    /// Checks `s` lies in the table range.
    pub fn check_time(&self, s: f64) -> Result<()> {
        let (lo, hi) = (self.start(), self.end());
        let slack = 1e-12 * (1.0 + hi.abs());
        if !(s >= lo - slack && s <= hi + slack) {
            return Err(Error::WindowExceeded { t: s, lo, hi });
        }
        Ok(())
    }

    /// Index `i` with `nodes[i] <= s < nodes[i+1]` (last step for `s = end`).
    #[inline]
    pub fn step_index(&self, s: f64) -> usize {
        let len = self.nodes.len();
        if len < 2 {
            return 0;
        }
        self.nodes.partition_point(|&v| v <= s).clamp(1, len - 1) - 1
    }

    /// Cumulative Phase 1 age advance from the table start to `s`.
    pub fn age_advance(&self, f: usize, s: f64) -> Result<f64> {
        self.check_time(s)?;
        let i = self.step_index(s);
        let a = self.nodes[i];
        if s == a {
            return Ok(self.age[f][i]);
        }
        if i + 1 < self.nodes.len() && s == self.nodes[i + 1] {
            return Ok(self.age[f][i + 1]);
        }
        Ok(self.age[f][i] + self.partial_age(f, i, s)?)
    }

    fn partial_age(&self, f: usize, i: usize, s: f64) -> Result<f64> {
        let a = self.nodes[i];
        let g0 = self.node_snap(f, i).gbar;
        let gm = self.snap_at(f, 0.5 * (a + s))?.gbar;
        let g1 = self.snap_at(f, s)?.gbar;
        Ok((s - a) / 6.0 * (g0 + 4.0 * gm + g1))
    }

    /// Earliest time `s` with `age_advance(f, s) = v`, or `None` if out of range.
    pub fn age_inverse(&self, f: usize, v: f64) -> Result<Option<f64>> {
        let ages = &self.age[f];
        if v < 0.0 || v > *ages.last().unwrap() {
            return Ok(None);
        }
        let j = ages.partition_point(|&a| a < v);
        if j < ages.len() && ages[j] == v {
            return Ok(Some(self.nodes[j]));
        }
        let i = j - 1;
        let (mut lo, mut hi) = (self.nodes[i], self.nodes[i + 1]);
        let target = v - ages[i];
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.partial_age(f, i, mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    }
}
