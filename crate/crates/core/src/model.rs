//! Model parameters, feedback controls and velocity closures.
//!
//! Everything here is a pure function of its arguments. The normalized
//! velocities live on the unit square of each phase: Phase 1 and Phase 2 use
//! `y = gamma / gamma_s`, Phase 3 uses `y = (gamma - gamma_s) / gamma_0`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar constants of the follicle model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Duration of the first proliferation sub-phase.
    pub a1: f64,
    /// Duration of a full cell cycle.
    pub a2: f64,
    /// Maturity threshold separating proliferation from differentiation.
    pub gamma_s: f64,
    /// Maximal maturity.
    pub gamma_m: f64,
    /// Per-follicle age velocity scale.
    pub tau_g: Vec<f64>,
    /// Per-follicle maturity velocity scale.
    pub tau_h: Vec<f64>,
    pub g1: f64,
    pub c1: f64,
    pub c2: f64,
    pub u_bar: f64,
    pub k_lambda: f64,
    pub gamma_bar: f64,
    pub u0: f64,
    pub us: f64,
    pub c: f64,
    pub m: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    /// Number of cell cycles N.
    pub cycles: usize,
    /// Number of follicles n.
    pub follicles: usize,
    /// Time horizon T.
    pub horizon: f64,
}

/// Cell-cycle phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// First proliferation sub-phase (ages `[(k-1)a2, (k-1)a2 + a1]`).
    One,
    /// Second proliferation sub-phase, pure age transport.
    Two,
    /// Differentiation phase (maturity above `gamma_s`).
    Three,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::One, Phase::Two, Phase::Three];

    pub fn index(self) -> usize {
        match self {
            Phase::One => 0,
            Phase::Two => 1,
            Phase::Three => 2,
        }
    }

    pub fn from_number(p: usize) -> Option<Phase> {
        match p {
            1 => Some(Phase::One),
            2 => Some(Phase::Two),
            3 => Some(Phase::Three),
            _ => None,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.number())
    }
}

/// One density component: follicle (0-based), phase, cycle (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Component {
    pub follicle: usize,
    pub phase: Phase,
    pub cycle: usize,
}

impl Component {
    pub fn new(follicle: usize, phase: Phase, cycle: usize) -> Self {
        Component {
            follicle,
            phase,
            cycle,
        }
    }

    /// Position inside the flat component list of `all_components`.
    pub fn flat_index(&self, cycles: usize) -> usize {
        (self.follicle * cycles + (self.cycle - 1)) * 3 + self.phase.index()
    }

    /// All components ordered by follicle, then cycle, then phase.
    pub fn all(follicles: usize, cycles: usize) -> Vec<Component> {
        let mut out = Vec::with_capacity(follicles * cycles * 3);
        for f in 0..follicles {
            for k in 1..=cycles {
                for p in Phase::ALL {
                    out.push(Component::new(f, p, k));
                }
            }
        }
        out
    }

    /// Short label such as `f1.P3.k2` (1-based follicle).
    pub fn label(&self) -> String {
        format!("f{}.{}.k{}", self.follicle + 1, self.phase, self.cycle)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Instantaneous control state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub t: f64,
    pub m_f: Vec<f64>,
    pub m: f64,
}

impl ControlState {
    pub fn new(t: f64, m_f: Vec<f64>) -> Result<Self> {
        if m_f.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "negative follicular maturity at t={t}"
            )));
        }
        let m = m_f.iter().sum();
        Ok(ControlState { t, m_f, m })
    }
}

impl ModelParams {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn gamma_0(&self) -> f64 {
        self.gamma_m - self.gamma_s
    }

    /// Structural checks. Control-dependent sign conditions are checked at run time.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.a1 > 0.0 && self.a2 > self.a1) {
            return bad(format!(
                "need a2 > a1 > 0, got a1={}, a2={}",
                self.a1, self.a2
            ));
        }
        if !(self.gamma_s > 0.0 && self.gamma_m > self.gamma_s) {
            return bad(format!(
                "need gamma_m > gamma_s > 0, got gamma_s={}, gamma_m={}",
                self.gamma_s, self.gamma_m
            ));
        }
        if self.cycles < 1 || self.follicles < 1 {
            return bad("need at least one cycle and one follicle".into());
        }
        if self.tau_g.len() != self.follicles || self.tau_h.len() != self.follicles {
            return bad(format!(
                "tau_g and tau_h need {} entries, got {} and {}",
                self.follicles,
                self.tau_g.len(),
                self.tau_h.len()
            ));
        }
        if self
            .tau_g
            .iter()
            .chain(&self.tau_h)
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return bad("tau_g and tau_h must be positive".into());
        }
        let positive = [
            ("g1", self.g1),
            ("c1", self.c1),
            ("c2", self.c2),
            ("u_bar", self.u_bar),
            ("k_lambda", self.k_lambda),
            ("gamma_bar", self.gamma_bar),
            ("u0", self.u0),
            ("us", self.us),
            ("c", self.c),
            ("m", self.m),
            ("b1", self.b1),
            ("b2", self.b2),
            ("b3", self.b3),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    /// Global control U(M).
    pub fn global_control(&self, m_total: f64) -> f64 {
        self.u0 + self.us + (1.0 - self.us) / (1.0 + (self.c * (m_total - self.m)).exp())
    }

    /// Saturating local amplification b(M_f).
    pub fn local_gain(&self, m_f: f64) -> f64 {
        (self.b1 + (self.b2 * m_f).exp() / self.b3).min(1.0)
    }

    /// Local control u_f = b(M_f) U(M).
    pub fn local_control(&self, m_f: f64, m_total: f64) -> f64 {
        self.local_gain(m_f) * self.global_control(m_total)
    }

    /// E(u) = 1 - exp(-u / u_bar).
    pub fn maturation_level(&self, u: f64) -> f64 {
        -(-u / self.u_bar).exp_m1()
    }

    /// Upper root of h_f(., u).
    pub fn gamma_plus(&self, u: f64) -> f64 {
        let e = self.maturation_level(u);
        0.5 * (self.c1 * e + (self.c1 * self.c1 * e * e + 4.0 * self.c2 * e).sqrt())
    }

    /// Lower root of h_f(., u), never positive.
    pub fn gamma_minus(&self, u: f64) -> f64 {
        let e = self.maturation_level(u);
        0.5 * (self.c1 * e - (self.c1 * self.c1 * e * e + 4.0 * self.c2 * e).sqrt())
    }

    /// Original-coordinate age velocity in Phase 1.
    pub fn age_velocity(&self, f: usize, u: f64) -> f64 {
        self.tau_g[f] * (1.0 - self.g1 * (1.0 - u))
    }

    /// Original-coordinate maturity velocity h_f(gamma, u).
    pub fn maturity_velocity(&self, f: usize, gamma: f64, u: f64) -> f64 {
        let e = self.maturation_level(u);
        self.tau_h[f] * (-gamma * gamma + (self.c1 * gamma + self.c2) * e)
    }

    /// d h_f / d gamma.
    pub fn maturity_velocity_slope(&self, f: usize, gamma: f64, u: f64) -> f64 {
        let e = self.maturation_level(u);
        self.tau_h[f] * (-2.0 * gamma + self.c1 * e)
    }

    /// Loss rate lambda(gamma, U).
    pub fn loss_rate(&self, gamma: f64, big_u: f64) -> f64 {
        let z = (gamma - self.gamma_s) / self.gamma_bar;
        self.k_lambda * (-z * z).exp() * (1.0 - big_u)
    }

    pub fn gbar(&self, f: usize, u: f64) -> f64 {
        self.age_velocity(f, u) / self.a1
    }

    pub fn ghat(&self, f: usize) -> f64 {
        self.tau_g[f] / (self.a2 - self.a1)
    }

    pub fn gtilde(&self, f: usize) -> f64 {
        self.tau_g[f] / self.a2
    }

    pub fn hbar(&self, f: usize, y: f64, u: f64) -> f64 {
        self.maturity_velocity(f, self.gamma_s * y, u) / self.gamma_s
    }

    pub fn hbar_y(&self, f: usize, y: f64, u: f64) -> f64 {
        self.maturity_velocity_slope(f, self.gamma_s * y, u)
    }

    pub fn htilde(&self, f: usize, y: f64, u: f64) -> f64 {
        self.maturity_velocity(f, self.gamma_0() * y + self.gamma_s, u) / self.gamma_0()
    }

    pub fn htilde_y(&self, f: usize, y: f64, u: f64) -> f64 {
        self.maturity_velocity_slope(f, self.gamma_0() * y + self.gamma_s, u)
    }

    pub fn lbar(&self, y: f64, big_u: f64) -> f64 {
        self.loss_rate(self.gamma_s * y, big_u)
    }

    pub fn ltilde(&self, y: f64, big_u: f64) -> f64 {
        self.loss_rate(self.gamma_0() * y + self.gamma_s, big_u)
    }

    /// Sign conditions needed for well-posedness, for follicle `f` at control `u`.
    ///
    /// `hbar` is concave in `y`, so positivity at both ends covers `[0, 1]`.
    pub fn check_control(&self, f: usize, u: f64) -> Result<()> {
        let fail = |m: String| Err(Error::AssumptionViolated(m));
        if !(u > 0.0) || !u.is_finite() {
            return fail(format!("local control u_{} = {u} is not positive", f + 1));
        }
        let gb = self.gbar(f, u);
        if !(gb > 0.0) {
            return fail(format!("gbar_{}(u={u}) = {gb} is not positive", f + 1));
        }
        let h0 = self.hbar(f, 0.0, u);
        let h1 = self.hbar(f, 1.0, u);
        if !(h0 > 0.0 && h1 > 0.0) {
            return fail(format!(
                "hbar_{} not positive on [0,1] at u={u} (gamma_plus={} <= gamma_s={})",
                f + 1,
                self.gamma_plus(u),
                self.gamma_s
            ));
        }
        let ht1 = self.htilde(f, 1.0, u);
        if !(ht1 < 0.0) {
            return fail(format!(
                "htilde_{}(1, u={u}) = {ht1} is not negative (gamma_plus={} >= gamma_m={})",
                f + 1,
                self.gamma_plus(u),
                self.gamma_m
            ));
        }
        Ok(())
    }

    /// Maps original (age, maturity) into the unit square of `phase`, cycle `k`.
    pub fn rescale_to_unit(
        &self,
        a: f64,
        gamma: f64,
        phase: Phase,
        k: usize,
    ) -> Result<(f64, f64)> {
        let base = (k as f64 - 1.0) * self.a2;
        let (x, y) = match phase {
            Phase::One => ((a - base) / self.a1, gamma / self.gamma_s),
            Phase::Two => (
                (a - base - self.a1) / (self.a2 - self.a1),
                gamma / self.gamma_s,
            ),
            Phase::Three => (
                (a - base) / self.a2,
                (gamma - self.gamma_s) / self.gamma_0(),
            ),
        };
        check_unit(x, y)?;
        Ok((x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)))
    }

    /// Inverse of [`ModelParams::rescale_to_unit`].
    pub fn rescale_from_unit(&self, x: f64, y: f64, phase: Phase, k: usize) -> Result<(f64, f64)> {
        check_unit(x, y)?;
        let base = (k as f64 - 1.0) * self.a2;
        Ok(match phase {
            Phase::One => (base + self.a1 * x, self.gamma_s * y),
            Phase::Two => (base + self.a1 + (self.a2 - self.a1) * x, self.gamma_s * y),
            Phase::Three => (base + self.a2 * x, self.gamma_s + self.gamma_0() * y),
        })
    }

    /// Maturity weight `w(y)` so that M_f = sum over components of the integral of `w * phi`.
    pub fn maturity_weight(&self, phase: Phase, y: f64) -> f64 {
        match phase {
            Phase::One => self.a1 * self.gamma_s * self.gamma_s * y,
            Phase::Two => (self.a2 - self.a1) * self.gamma_s * self.gamma_s * y,
            Phase::Three => self.a2 * self.gamma_0() * (self.gamma_0() * y + self.gamma_s),
        }
    }

    /// Jacobian of the original-coordinate cell mass per unit normalized area.
    pub fn mass_weight(&self, phase: Phase) -> f64 {
        match phase {
            Phase::One => self.a1 * self.gamma_s,
            Phase::Two => (self.a2 - self.a1) * self.gamma_s,
            Phase::Three => self.a2 * self.gamma_0(),
        }
    }

    pub fn component_count(&self) -> usize {
        3 * self.cycles * self.follicles
    }
}

fn check_unit(x: f64, y: f64) -> Result<()> {
    const TOL: f64 = 1e-12;
    if !((-TOL..=1.0 + TOL).contains(&x) && (-TOL..=1.0 + TOL).contains(&y)) {
        return Err(Error::OutOfDomain(format!(
            "({x}, {y}) not in the unit square"
        )));
    }
    Ok(())
}

/// Control values at one instant for one follicle, in the form the integrators need.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlSnap {
    pub u: f64,
    pub big_u: f64,
    /// Normalized Phase 1 age velocity.
    pub gbar: f64,
    /// E(u) = 1 - exp(-u / u_bar).
    pub level: f64,
    /// 1 - U.
    pub one_minus_u: f64,
}

/// Per-follicle constants for fast velocity evaluation along characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub tau_h: f64,
    pub c1: f64,
    pub c2: f64,
    pub gamma_s: f64,
    pub gamma_0: f64,
    pub k_lambda: f64,
    pub gamma_bar: f64,
    pub ghat: f64,
    pub gtilde: f64,
}

/// Velocities and rates of one phase at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rates {
    pub vx: f64,
    pub vy: f64,
    pub loss: f64,
    /// d vy / d y.
    pub div: f64,
}

impl Kinematics {
    pub fn new(p: &ModelParams, f: usize) -> Self {
        Kinematics {
            tau_h: p.tau_h[f],
            c1: p.c1,
            c2: p.c2,
            gamma_s: p.gamma_s,
            gamma_0: p.gamma_0(),
            k_lambda: p.k_lambda,
            gamma_bar: p.gamma_bar,
            ghat: p.ghat(f),
            gtilde: p.gtilde(f),
        }
    }

    #[inline]
    fn h(&self, gamma: f64, level: f64) -> f64 {
        self.tau_h * (-gamma * gamma + (self.c1 * gamma + self.c2) * level)
    }

    #[inline]
    fn h_gamma(&self, gamma: f64, level: f64) -> f64 {
        self.tau_h * (-2.0 * gamma + self.c1 * level)
    }

    #[inline]
    fn loss(&self, gamma: f64, one_minus_u: f64) -> f64 {
        if one_minus_u == 0.0 {
            return 0.0;
        }
        let z = (gamma - self.gamma_s) / self.gamma_bar;
        self.k_lambda * (-z * z).exp() * one_minus_u
    }

    /// Maturity coordinate for `y` in `phase`.
    #[inline]
    pub fn gamma_of(&self, phase: Phase, y: f64) -> f64 {
        match phase {
            Phase::One | Phase::Two => self.gamma_s * y,
            Phase::Three => self.gamma_0 * y + self.gamma_s,
        }
    }

    /// Normalized y-velocity of `phase` (zero in Phase 2).
    #[inline]
    pub fn vy(&self, phase: Phase, y: f64, s: &ControlSnap) -> f64 {
        match phase {
            Phase::One => self.h(self.gamma_s * y, s.level) / self.gamma_s,
            Phase::Two => 0.0,
            Phase::Three => self.h(self.gamma_0 * y + self.gamma_s, s.level) / self.gamma_0,
        }
    }

    /// Normalized x-velocity of `phase`.
    #[inline]
    pub fn vx(&self, phase: Phase, s: &ControlSnap) -> f64 {
        match phase {
            Phase::One => s.gbar,
            Phase::Two => self.ghat,
            Phase::Three => self.gtilde,
        }
    }

    #[inline]
    pub fn rates(&self, phase: Phase, y: f64, s: &ControlSnap) -> Rates {
        match phase {
            Phase::One => {
                let g = self.gamma_s * y;
                Rates {
                    vx: s.gbar,
                    vy: self.h(g, s.level) / self.gamma_s,
                    loss: self.loss(g, s.one_minus_u),
                    div: self.h_gamma(g, s.level),
                }
            }
            Phase::Two => Rates {
                vx: self.ghat,
                vy: 0.0,
                loss: 0.0,
                div: 0.0,
            },
            Phase::Three => {
                let g = self.gamma_0 * y + self.gamma_s;
                Rates {
                    vx: self.gtilde,
                    vy: self.h(g, s.level) / self.gamma_0,
                    loss: self.loss(g, s.one_minus_u),
                    div: self.h_gamma(g, s.level),
                }
            }
        }
    }

    /// Loss rate of `phase` at `y`.
    #[inline]
    pub fn loss_at(&self, phase: Phase, y: f64, s: &ControlSnap) -> f64 {
        match phase {
            Phase::Two => 0.0,
            _ => self.loss(self.gamma_of(phase, y), s.one_minus_u),
        }
    }
}

/// Test hooks that alter the model for verification runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hooks {
    /// Factor at the Phase 2 to Phase 1 cycle transfer (2 is cell division).
    pub mitosis_factor: f64,
    /// Force U = 1, which switches all losses off.
    pub zero_loss: bool,
    /// Relative perturbation applied to every Jacobian factor (mutation testing).
    pub jacobian_perturbation: f64,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks {
            mitosis_factor: 2.0,
            zero_loss: false,
            jacobian_perturbation: 0.0,
        }
    }
}

impl Hooks {
    pub fn snap(&self, p: &ModelParams, f: usize, u: f64, big_u: f64) -> ControlSnap {
        ControlSnap {
            u,
            big_u,
            gbar: p.gbar(f, u),
            level: p.maturation_level(u),
            one_minus_u: 1.0 - big_u,
        }
    }

    /// Closed-loop controls from maturities, with the hooks applied.
    pub fn controls(&self, p: &ModelParams, m_f: &[f64]) -> (Vec<f64>, f64) {
        let m: f64 = m_f.iter().sum();
        let big_u = if self.zero_loss {
            1.0
        } else {
            p.global_control(m)
        };
        let u = m_f.iter().map(|&mf| p.local_gain(mf) * big_u).collect();
        (u, big_u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk() -> ModelParams {
        ModelParams::from_json_str(include_str!("../configs/default_params.json")).unwrap()
    }

    #[test]
    fn global_control_midpoint_and_tail() {
        let p = desk();
        let mid = p.global_control(p.m);
        assert!((mid - (p.u0 + p.us + (1.0 - p.us) / 2.0)).abs() < 1e-15);
        assert!((p.global_control(1e6) - (p.u0 + p.us)).abs() < 1e-15);
    }

    #[test]
    fn global_control_reference_value() {
        // 0.05 + 0.5 + 0.5/(1 + e^-10), evaluated at 50 digits.
        let mut p = desk();
        p.u0 = 0.05;
        p.us = 0.5;
        p.c = 1.0;
        p.m = 10.0;
        let want = 1.049_977_301_065_648_8_f64;
        assert!((p.global_control(0.0) - want).abs() < 1e-15);
    }

    #[test]
    fn local_control_saturation() {
        let p = desk();
        let m = 3.0;
        assert_eq!(p.local_control(1e4, m), p.global_control(m));
        let want = (p.b1 + 1.0 / p.b3).min(1.0) * p.global_control(m);
        assert!((p.local_control(0.0, m) - want).abs() < 1e-15);
        let mut last = 0.0;
        for i in 0..200 {
            let u = p.local_control(i as f64 * 0.5, m);
            assert!(u >= last);
            last = u;
        }
    }

    #[test]
    fn gamma_plus_limits_and_root() {
        let p = desk();
        assert_eq!(p.gamma_plus(0.0), 0.0);
        let lim = 0.5 * (p.c1 + (p.c1 * p.c1 + 4.0 * p.c2).sqrt());
        assert!((p.gamma_plus(1e3) - lim).abs() < 1e-14);
        for i in 0..20 {
            let u = 0.05 + 0.1 * i as f64;
            let g = p.gamma_plus(u);
            assert!(p.maturity_velocity(0, g, u).abs() < 1e-12 * p.tau_h[0]);
            let gm = p.gamma_minus(u);
            assert!(gm <= 0.0);
            // factorization
            for &gamma in &[0.3, 1.0, 1.7] {
                let lhs = p.maturity_velocity(0, gamma, u);
                let rhs = p.tau_h[0] * (g - gamma) * (gamma - gm);
                assert!((lhs - rhs).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn gamma_plus_monotone() {
        let p = desk();
        let mut last = -1.0;
        for i in 0..=1000 {
            let g = p.gamma_plus(i as f64 * 0.005);
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn velocity_identities() {
        let p = desk();
        assert!((p.gbar(0, 1.0) - p.tau_g[0] / p.a1).abs() < 1e-15);
        for i in 0..=10 {
            assert_eq!(p.lbar(i as f64 / 10.0, 1.0), 0.0);
            assert_eq!(p.ltilde(i as f64 / 10.0, 1.0), 0.0);
        }
        for f in 0..p.follicles {
            assert_eq!(p.ghat(f) * (p.a2 - p.a1), p.tau_g[f]);
            assert_eq!(p.gtilde(f) * p.a2, p.tau_g[f]);
        }
    }

    #[test]
    fn sign_pattern_when_root_inside() {
        let p = desk();
        for i in 0..50 {
            let u = 0.3 + 0.014 * i as f64;
            let gp = p.gamma_plus(u);
            if gp > p.gamma_s && gp < p.gamma_m {
                assert!(p.htilde(0, 0.0, u) > 0.0);
                assert!(p.htilde(0, 1.0, u) < 0.0);
                for j in 0..=20 {
                    assert!(p.hbar(0, j as f64 / 20.0, u) > 0.0);
                }
                assert!(p.check_control(0, u).is_ok());
            } else {
                assert!(p.check_control(0, u).is_err());
            }
        }
    }

    #[test]
    fn rescale_edges() {
        let p = desk();
        let (x, _) = p.rescale_to_unit(2.0 * p.a2, 0.5, Phase::One, 3).unwrap();
        assert_eq!(x, 0.0);
        let (_, y) = p.rescale_to_unit(0.5, p.gamma_m, Phase::Three, 1).unwrap();
        assert_eq!(y, 1.0);
        assert!(matches!(
            p.rescale_to_unit(5.0, 0.5, Phase::One, 1),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn strict_json() {
        let text = include_str!("../configs/default_params.json");
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        v["bogus"] = serde_json::json!(1.0);
        assert!(ModelParams::from_json_str(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        v["tau_g"] = serde_json::json!([1.0]);
        assert!(matches!(
            ModelParams::from_json_str(&v.to_string()),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn component_indexing() {
        let all = Component::all(2, 3);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.flat_index(3), i);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rescale_round_trip(x in 0.0f64..=1.0, y in 0.0f64..=1.0, ph in 1usize..=3, k in 1usize..=4) {
                let p = desk();
                let phase = Phase::from_number(ph).unwrap();
                let (a, g) = p.rescale_from_unit(x, y, phase, k).unwrap();
                let (x2, y2) = p.rescale_to_unit(a, g, phase, k).unwrap();
                prop_assert!((x2 - x).abs() <= 1e-14 * x.abs().max(1.0));
                prop_assert!((y2 - y).abs() <= 1e-14 * y.abs().max(1.0));
                let (a2, g2) = p.rescale_from_unit(x2, y2, phase, k).unwrap();
                prop_assert!((a2 - a).abs() <= 1e-14 * a.abs().max(1.0));
                prop_assert!((g2 - g).abs() <= 1e-14 * g.abs().max(1.0));
            }

            #[test]
            fn losses_nonnegative(y in 0.0f64..=1.0, big_u in 0.0f64..=1.0) {
                let p = desk();
                prop_assert!(p.lbar(y, big_u) >= 0.0);
                prop_assert!(p.ltilde(y, big_u) >= 0.0);
                if big_u < 1.0 {
                    prop_assert!(p.lbar(y, big_u) > 0.0);
                }
            }

            #[test]
            fn kinematics_match_closures(y in 0.0f64..=1.0, u in 0.2f64..1.05, big_u in 0.0f64..1.0) {
                let p = desk();
                let k = Kinematics::new(&p, 1);
                let s = Hooks::default().snap(&p, 1, u, big_u);
                let r1 = k.rates(Phase::One, y, &s);
                prop_assert!((r1.vy - p.hbar(1, y, u)).abs() < 1e-14);
                prop_assert!((r1.div - p.hbar_y(1, y, u)).abs() < 1e-14);
                prop_assert!((r1.loss - p.lbar(y, big_u)).abs() < 1e-15);
                let r3 = k.rates(Phase::Three, y, &s);
                prop_assert!((r3.vy - p.htilde(1, y, u)).abs() < 1e-14);
                prop_assert!((r3.div - p.htilde_y(1, y, u)).abs() < 1e-14);
                prop_assert!((r3.loss - p.ltilde(y, big_u)).abs() < 1e-15);
            }
        }
    }
}
