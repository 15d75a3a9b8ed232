//! Initial data: closed-form families evaluable at any point, plus grid data
//! used when a long run re-anchors on a sampled snapshot.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Component, ModelParams, Phase};
use crate::quadrature;

/// Piecewise polynomial on `[breaks[0], breaks.last()]`, zero outside.
///
/// `coeffs[i]` holds monomial coefficients (lowest degree first) in the
/// global variable on `[breaks[i], breaks[i+1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piecewise {
    pub breaks: Vec<f64>,
    pub coeffs: Vec<Vec<f64>>,
}

impl Piecewise {
    /// `30 s^2 (1-s)^2`: a C1 bump with unit integral on `[0, 1]`.
    pub fn unit_bump() -> Self {
        Piecewise {
            breaks: vec![0.0, 1.0],
            coeffs: vec![vec![0.0, 0.0, 30.0, -60.0, 30.0]],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.breaks.len() < 2
            || self.coeffs.len() + 1 != self.breaks.len()
            || self.breaks.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::InvalidConfig(
                "piecewise polynomial needs increasing breaks and one coefficient list per piece"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn eval(&self, s: f64) -> f64 {
        let n = self.breaks.len();
        if s < self.breaks[0] || s > self.breaks[n - 1] {
            return 0.0;
        }
        let i = self.breaks.partition_point(|&b| b <= s).clamp(1, n - 1) - 1;
        self.coeffs[i].iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    fn sup_abs(&self) -> f64 {
        // Dense sampling plus a Lipschitz allowance makes this an upper bound.
        let mut best: f64 = 0.0;
        for (i, w) in self.breaks.windows(2).enumerate() {
            let c = &self.coeffs[i];
            let m = 400;
            let h = (w[1] - w[0]) / m as f64;
            let mut lip: f64 = 0.0;
            let mut top: f64 = 0.0;
            for j in 0..=m {
                let s = w[0] + h * j as f64;
                top = top.max(c.iter().rev().fold(0.0, |acc, &cc| acc * s + cc).abs());
                let d = c
                    .iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (k, &cc)| acc * s + k as f64 * cc);
                lip = lip.max(d.abs());
            }
            best = best.max(top + 0.5 * h * lip);
        }
        best
    }
}

/// One term of a component's initial datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataTerm {
    /// `amplitude * exp(-((x-cx)/sx)^2/2 - ((y-cy)/sy)^2/2)`.
    Gaussian {
        amplitude: f64,
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
    },
    /// `amplitude` on `[x0, x1] x [y0, y1]`, zero elsewhere.
    Indicator {
        amplitude: f64,
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    },
    /// `amplitude * p(x) q(y)` with piecewise polynomials `p`, `q`.
    Polynomial {
        amplitude: f64,
        x: Piecewise,
        y: Piecewise,
    },
}

impl DataTerm {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            DataTerm::Gaussian {
                amplitude,
                cx,
                cy,
                sx,
                sy,
            } => {
                let zx = (x - cx) / sx;
                let zy = (y - cy) / sy;
                amplitude * (-0.5 * (zx * zx + zy * zy)).exp()
            }
            DataTerm::Indicator {
                amplitude,
                x0,
                x1,
                y0,
                y1,
            } => {
                if x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1 {
                    *amplitude
                } else {
                    0.0
                }
            }
            DataTerm::Polynomial {
                amplitude,
                x: px,
                y: py,
            } => {
                let a = px.eval(x);
                if a == 0.0 {
                    return 0.0;
                }
                amplitude * a * py.eval(y)
            }
        }
    }

    fn scaled(&self, s: f64) -> DataTerm {
        let mut t = self.clone();
        match &mut t {
            DataTerm::Gaussian { amplitude, .. }
            | DataTerm::Indicator { amplitude, .. }
            | DataTerm::Polynomial { amplitude, .. } => *amplitude *= s,
        }
        t
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataTerm::Gaussian {
                amplitude, sx, sy, ..
            } => {
                if !(*sx > 0.0 && *sy > 0.0 && amplitude.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "gaussian widths must be positive".into(),
                    ));
                }
            }
            DataTerm::Indicator {
                x0,
                x1,
                y0,
                y1,
                amplitude,
            } => {
                if !(x1 > x0 && y1 > y0 && amplitude.is_finite()) {
                    return Err(Error::InvalidConfig("indicator box is empty".into()));
                }
            }
            DataTerm::Polynomial { x, y, amplitude } => {
                x.validate()?;
                y.validate()?;
                if !amplitude.is_finite() {
                    return Err(Error::InvalidConfig("polynomial amplitude".into()));
                }
            }
        }
        Ok(())
    }

    fn breaks(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DataTerm::Gaussian { .. } => (vec![], vec![]),
            DataTerm::Indicator { x0, x1, y0, y1, .. } => (vec![*x0, *x1], vec![*y0, *y1]),
            DataTerm::Polynomial { x, y, .. } => (x.breaks.clone(), y.breaks.clone()),
        }
    }

    /// Upper bound of `|term|` on the unit square.
    fn sup_bound(&self) -> f64 {
        match self {
            DataTerm::Gaussian {
                amplitude,
                cx,
                cy,
                sx,
                sy,
            } => {
                let zx = (cx.clamp(0.0, 1.0) - cx) / sx;
                let zy = (cy.clamp(0.0, 1.0) - cy) / sy;
                amplitude.abs() * (-0.5 * (zx * zx + zy * zy)).exp()
            }
            DataTerm::Indicator { amplitude, .. } => amplitude.abs(),
            DataTerm::Polynomial { amplitude, x, y } => amplitude.abs() * x.sup_abs() * y.sup_abs(),
        }
    }
}

/// Node values on a uniform `(r+1) x (r+1)` grid over the unit square, bilinear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return 0.0;
        }
        let r = self.resolution;
        let fx = x * r as f64;
        let fy = y * r as f64;
        let i = (fx.floor() as usize).min(r - 1);
        let j = (fy.floor() as usize).min(r - 1);
        let (wx, wy) = (fx - i as f64, fy - j as f64);
        let v = |a: usize, b: usize| self.values[a * (r + 1) + b];
        (1.0 - wx) * ((1.0 - wy) * v(i, j) + wy * v(i, j + 1))
            + wx * ((1.0 - wy) * v(i + 1, j) + wy * v(i + 1, j + 1))
    }
}

/// The datum of one component.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Terms(Vec<DataTerm>),
    Grid(Arc<GridField>),
}

impl Field {
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Field::Terms(ts) => ts.iter().map(|t| t.eval(x, y)).sum(),
            Field::Grid(g) => g.eval(x, y),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Field::Terms(ts) => ts.iter().all(|t| t.sup_bound() == 0.0),
            Field::Grid(g) => g.values.iter().all(|&v| v == 0.0),
        }
    }

    /// Discontinuity or kink lines `(x_breaks, y_breaks)`.
    pub fn breaks(&self) -> (Vec<f64>, Vec<f64>) {
        let mut bx = Vec::new();
        let mut by = Vec::new();
        if let Field::Terms(ts) = self {
            for t in ts {
                let (a, b) = t.breaks();
                bx.extend(a);
                by.extend(b);
            }
        }
        (bx, by)
    }

    /// Upper bound of the sup norm.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Field::Terms(ts) => ts.iter().map(DataTerm::sup_bound).sum(),
            Field::Grid(g) => g.values.iter().fold(0.0, |a, &b| a.max(b.abs())),
        }
    }

    /// Integral of `|field|` over the unit square.
    pub fn l1_norm(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let (bx, by) = match self {
            Field::Grid(g) => {
                let r = g.resolution;
                let b: Vec<f64> = (1..r).map(|i| i as f64 / r as f64).collect();
                (b.clone(), b)
            }
            _ => self.breaks(),
        };
        let panels = if matches!(self, Field::Grid(_)) {
            1
        } else {
            16
        };
        let xs = quadrature::composite(0.0, 1.0, &bx, panels);
        let ys = quadrature::composite(0.0, 1.0, &by, panels);
        let mut acc = 0.0;
        for &(x, wx) in &xs {
            for &(y, wy) in &ys {
                acc += wx * wy * self.eval(x, y).abs();
            }
        }
        acc
    }
}

/// Initial data for every component.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    follicles: usize,
    cycles: usize,
    fields: Vec<Field>,
}

/// JSON form of one component's datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// 1-based follicle index.
    pub follicle: usize,
    pub phase: usize,
    pub cycle: usize,
    pub terms: Vec<DataTerm>,
}

/// JSON form of the initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InitialDataSpec {
    /// Terms applied to every component before `components`.
    #[serde(default)]
    pub all: Vec<DataTerm>,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
}

impl InitialData {
    pub fn zero(p: &ModelParams) -> Self {
        InitialData {
            follicles: p.follicles,
            cycles: p.cycles,
            fields: vec![Field::Terms(vec![]); p.component_count()],
        }
    }

    pub fn from_fields(p: &ModelParams, fields: Vec<Field>) -> Result<Self> {
        if fields.len() != p.component_count() {
            return Err(Error::InvalidConfig(format!(
                "expected {} component fields, got {}",
                p.component_count(),
                fields.len()
            )));
        }
        Ok(InitialData {
            follicles: p.follicles,
            cycles: p.cycles,
            fields,
        })
    }

    pub fn from_spec(p: &ModelParams, spec: &InitialDataSpec) -> Result<Self> {
        let mut fields = vec![Vec::new(); p.component_count()];
        for t in &spec.all {
            t.validate()?;
            for f in fields.iter_mut() {
                f.push(t.clone());
            }
        }
        for cs in &spec.components {
            let phase = Phase::from_number(cs.phase)
                .ok_or_else(|| Error::InvalidConfig(format!("phase {} not in 1..=3", cs.phase)))?;
            if cs.follicle < 1 || cs.follicle > p.follicles || cs.cycle < 1 || cs.cycle > p.cycles {
                return Err(Error::InvalidConfig(format!(
                    "component follicle {} cycle {} out of range",
                    cs.follicle, cs.cycle
                )));
            }
            let c = Component::new(cs.follicle - 1, phase, cs.cycle);
            for t in &cs.terms {
                t.validate()?;
                fields[c.flat_index(p.cycles)].push(t.clone());
            }
        }
        let data = InitialData {
            follicles: p.follicles,
            cycles: p.cycles,
            fields: fields.into_iter().map(Field::Terms).collect(),
        };
        data.check_nonnegative()?;
        Ok(data)
    }

    /// Sampled nonnegativity check on a 129^2 grid plus the term breakpoints,
    /// up to relative roundoff.
    pub fn check_nonnegative(&self) -> Result<()> {
        for (i, f) in self.fields.iter().enumerate() {
            let (bx, by) = f.breaks();
            let mut xs: Vec<f64> = (0..=128).map(|j| j as f64 / 128.0).collect();
            let mut ys = xs.clone();
            xs.extend(bx.into_iter().filter(|v| (0.0..=1.0).contains(v)));
            ys.extend(by.into_iter().filter(|v| (0.0..=1.0).contains(v)));
            let vals: Vec<(f64, f64, f64)> = xs
                .iter()
                .flat_map(|&x| ys.iter().map(move |&y| (x, y, f.eval(x, y))))
                .collect();
            // Roundoff at the roots of a monomial expansion is tolerated.
            let floor = -1e-12 * vals.iter().fold(0.0f64, |a, v| a.max(v.2.abs()));
            for &(x, y, v) in &vals {
                {
                    if !(v >= floor) || !v.is_finite() {
                        return Err(Error::InvalidConfig(format!(
                            "initial datum {i} is negative or non-finite ({v}) at ({x}, {y})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn field(&self, c: Component) -> &Field {
        &self.fields[c.flat_index(self.cycles)]
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn follicles(&self) -> usize {
        self.follicles
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    pub fn is_zero(&self) -> bool {
        self.fields.iter().all(Field::is_zero)
    }

    /// `alpha * self + beta * other` for closed-form data.
    pub fn combine(&self, alpha: f64, other: &InitialData, beta: f64) -> Result<InitialData> {
        let mut fields = Vec::with_capacity(self.fields.len());
        for (a, b) in self.fields.iter().zip(&other.fields) {
            match (a, b) {
                (Field::Terms(ta), Field::Terms(tb)) => {
                    let mut t: Vec<DataTerm> = ta.iter().map(|x| x.scaled(alpha)).collect();
                    t.extend(tb.iter().map(|x| x.scaled(beta)));
                    fields.push(Field::Terms(t));
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "only closed-form data can be combined".into(),
                    ))
                }
            }
        }
        Ok(InitialData {
            follicles: self.follicles,
            cycles: self.cycles,
            fields,
        })
    }
}
