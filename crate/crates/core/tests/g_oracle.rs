//! The maturity map G on a one-cycle, one-follicle instance against a
//! Lagrangian oracle that pushes the initial data forward along its own
//! RK4 characteristics and sums the transported maturity.

use follicle::data::{ComponentSpec, DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{compute_constants, window_knots, ConstantOptions, GMap};
use follicle::model::{Hooks, ModelParams};
use follicle::solution::Problem;
use follicle::trajectory::MaturityTrajectory;

const AMP: [f64; 3] = [1.0, 0.7, 1.3];

fn params() -> ModelParams {
    let mut p = ModelParams::from_json_str(include_str!("../configs/default_params.json")).unwrap();
    p.cycles = 1;
    p.follicles = 1;
    p.tau_g = vec![1.0];
    p.tau_h = vec![1.0];
    p
}

fn bump(s: f64) -> f64 {
    30.0 * s * s * (1.0 - s) * (1.0 - s)
}

fn data(p: &ModelParams) -> InitialData {
    let components = (1..=3)
        .map(|phase| ComponentSpec {
            follicle: 1,
            phase,
            cycle: 1,
            terms: vec![DataTerm::Polynomial {
                amplitude: AMP[phase - 1],
                x: Piecewise::unit_bump(),
                y: Piecewise::unit_bump(),
            }],
        })
        .collect();
    InitialData::from_spec(
        p,
        &InitialDataSpec {
            all: vec![],
            components,
        },
    )
    .unwrap()
}

/// Gauss-Legendre nodes on [-1, 1] by Newton iteration on the Legendre recurrence.
fn gauss(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

struct Oracle<'a> {
    p: &'a ModelParams,
    m: &'a MaturityTrajectory,
    gl: Vec<(f64, f64)>,
    panels: usize,
    /// Times where the control history has a kink.
    kinks: Vec<f64>,
    h: f64,
    /// Age advance tabulated on `grid(0, end)`.
    age_s: Vec<f64>,
    age_a: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Ph {
    One,
    Three,
}

impl<'a> Oracle<'a> {
    fn new(p: &'a ModelParams, m: &'a MaturityTrajectory, panels: usize) -> Self {
        let t = m.times();
        let v = m.values();
        let mut kinks = Vec::new();
        for i in 1..t.len() - 1 {
            let s0 = (v[i][0] - v[i - 1][0]) / (t[i] - t[i - 1]);
            let s1 = (v[i + 1][0] - v[i][0]) / (t[i + 1] - t[i]);
            if (s1 - s0).abs() > 1e-12 * (1.0 + s0.abs()) {
                kinks.push(t[i]);
            }
        }
        let mut o = Oracle {
            p,
            m,
            gl: gauss(8),
            panels,
            kinks,
            h: 2e-4,
            age_s: Vec::new(),
            age_a: Vec::new(),
        };
        o.age_s = o.grid(0.0, m.end());
        let mut acc = vec![0.0];
        for w in o.age_s.windows(2) {
            acc.push(acc.last().unwrap() + o.gl_step(w[0], w[1]));
        }
        o.age_a = acc;
        o
    }

    fn gbar(&self, s: f64) -> f64 {
        self.p.gbar(0, self.controls(s).0)
    }

    /// One Gauss-Legendre rule for the age advance over `[a, b]` inside a step.
    fn gl_step(&self, a: f64, b: f64) -> f64 {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        self.gl
            .iter()
            .map(|&(x, w)| r * w * self.gbar(c + r * x))
            .sum()
    }

    fn controls(&self, s: f64) -> (f64, f64) {
        let mm = self.m.value(0, s).unwrap();
        let big_u = self.p.global_control(mm);
        (self.p.local_gain(mm) * big_u, big_u)
    }

    fn rhs(&self, ph: Ph, s: f64, y: f64) -> (f64, f64) {
        let (u, bu) = self.controls(s);
        match ph {
            Ph::One => (self.p.hbar(0, y, u), self.p.lbar(y, bu)),
            Ph::Three => (self.p.htilde(0, y, u), self.p.ltilde(y, bu)),
        }
    }

    fn rk4_step(&self, ph: Ph, s: f64, y: f64, l: f64, h: f64) -> (f64, f64) {
        let (k1, q1) = self.rhs(ph, s, y);
        let (k2, q2) = self.rhs(ph, s + h / 2.0, y + h / 2.0 * k1);
        let (k3, q3) = self.rhs(ph, s + h / 2.0, y + h / 2.0 * k2);
        let (k4, q4) = self.rhs(ph, s + h, y + h * k3);
        (
            y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
            l + h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4),
        )
    }

    /// Step times from `s0` to `s1`, landing on every kink in between.
    fn grid(&self, s0: f64, s1: f64) -> Vec<f64> {
        let mut pts = vec![s0];
        pts.extend(self.kinks.iter().copied().filter(|&k| k > s0 && k < s1));
        pts.push(s1);
        let mut out = vec![s0];
        for w in pts.windows(2) {
            let n = ((w[1] - w[0]) / self.h).ceil().max(1.0) as usize;
            for i in 1..=n {
                out.push(w[0] + (w[1] - w[0]) * i as f64 / n as f64);
            }
        }
        out
    }

    /// `(y, loss integral)` along the path with samples on `grid(s0, s1)`.
    fn path(&self, ph: Ph, s0: f64, y0: f64, s1: f64) -> Vec<(f64, f64, f64)> {
        let g = self.grid(s0, s1);
        let mut out = vec![(s0, y0, 0.0)];
        let (mut y, mut l) = (y0, 0.0);
        for w in g.windows(2) {
            (y, l) = self.rk4_step(ph, w[0], y, l, w[1] - w[0]);
            out.push((w[1], y, l));
        }
        out
    }

    fn at(&self, ph: Ph, path: &[(f64, f64, f64)], s: f64) -> (f64, f64) {
        let j = path.partition_point(|q| q.0 <= s).clamp(1, path.len()) - 1;
        let (sj, yj, lj) = path[j];
        if s == sj {
            return (yj, lj);
        }
        self.rk4_step(ph, sj, yj, lj, s - sj)
    }

    /// Time the P1 path from `(0, y0)` reaches `y = 1`, if before `t`.
    fn top_hit(&self, path: &[(f64, f64, f64)]) -> Option<f64> {
        let j = path.iter().position(|q| q.1 >= 1.0)?;
        if j == 0 {
            return Some(0.0);
        }
        let (mut lo, mut hi) = (path[j - 1].0, path[j].0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.at(Ph::One, path, mid).0 >= 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Initial y whose P1 path reaches y = 1 exactly at `s`.
    fn y_hitting_at(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        if self.path(Ph::One, 0.0, 0.0, s).last().unwrap().1 >= 1.0 {
            return 0.0;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.path(Ph::One, 0.0, mid, s).last().unwrap().1 >= 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Phase 1 age advance `A(s)`.
    fn age(&self, s: f64) -> f64 {
        let j = self
            .age_s
            .partition_point(|&q| q <= s)
            .clamp(1, self.age_s.len())
            - 1;
        self.age_a[j] + self.gl_step(self.age_s[j], s)
    }

    /// Time with `A(s) = v`: table lookup, then Newton inside the step.
    fn age_inverse(&self, v: f64) -> f64 {
        let j = self
            .age_a
            .partition_point(|&a| a <= v)
            .clamp(1, self.age_a.len() - 1)
            - 1;
        let (lo, hi) = (self.age_s[j], self.age_s[j + 1]);
        let mut s = lo + (hi - lo) * (v - self.age_a[j]) / (self.age_a[j + 1] - self.age_a[j]);
        for _ in 0..20 {
            let ds = (self.age_a[j] + self.gl_step(lo, s) - v) / self.gbar(s);
            s = (s - ds).clamp(lo, hi);
            if ds.abs() < 1e-16 {
                break;
            }
        }
        s
    }

    fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, breaks: &[f64], mut f: F) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut pts = vec![a];
        let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
        inner.sort_by(f64::total_cmp);
        pts.extend(inner);
        pts.push(b);
        let mut sum = 0.0;
        for w in pts.windows(2) {
            let hw = (w[1] - w[0]) / self.panels as f64;
            for i in 0..self.panels {
                let c = w[0] + hw * (i as f64 + 0.5);
                for &(x, wt) in &self.gl {
                    sum += 0.5 * hw * wt * f(c + 0.5 * hw * x);
                }
            }
        }
        sum
    }

    fn g(&self, t: f64) -> f64 {
        let p = self.p;
        let (gs, g0) = (p.gamma_s, p.gamma_0());
        let (a1, a2) = (p.a1, p.a2);
        let at = self.age(t);
        let ghat = p.ghat(0);
        let gtil = p.gtilde(0);
        let phi = |k: usize, x: f64, y: f64| AMP[k] * bump(x) * bump(y);
        let kinks_t: Vec<f64> = self.kinks.iter().copied().filter(|&k| k < t).collect();
        let y1 = self.y_hitting_at(t);
        // Initial y values whose top hit happens at a control kink.
        let ybreaks: Vec<f64> = kinks_t.iter().map(|&k| self.y_hitting_at(k)).collect();
        // x0 values whose front hit happens at a control kink.
        let xbreaks: Vec<f64> = kinks_t.iter().map(|&k| 1.0 - self.age(k)).collect();

        // P1 data: stays in P1, leaves through the front into P2, or through the top into P3.
        let mut ybr = ybreaks.clone();
        ybr.push(y1);
        let p1 = self.integrate(0.0, 1.0, &ybr, |y0| {
            let path = self.path(Ph::One, 0.0, y0, t);
            let t0 = self.top_hit(&path).filter(|&s| s < t);
            let mut v = 0.0;
            match t0 {
                None => {
                    let (yt, lt) = *path.last().map(|q| (q.1, q.2)).as_ref().unwrap();
                    let stay = self.integrate(0.0, 1.0 - at, &[], |x0| phi(0, x0, y0));
                    v += a1 * gs * gs * yt * (-lt).exp() * stay;
                    v += self.integrate(1.0 - at, 1.0, &xbreaks, |x0| {
                        let tau = self.age_inverse(1.0 - x0);
                        assert!(ghat * (t - tau) < 1.0);
                        let (yf, lf) = self.at(Ph::One, &path, tau);
                        a1 * gs * gs * yf * (-lf).exp() * phi(0, x0, y0)
                    });
                }
                Some(t0) => {
                    let a0 = self.age(t0);
                    v += self.integrate(1.0 - a0, 1.0, &xbreaks, |x0| {
                        let tau = self.age_inverse(1.0 - x0);
                        let (yf, lf) = self.at(Ph::One, &path, tau);
                        a1 * gs * gs * yf * (-lf).exp() * phi(0, x0, y0)
                    });
                    let (_, l1) = self.at(Ph::One, &path, t0);
                    let p3 = self.path(Ph::Three, t0, 0.0, t);
                    let (_, y3, l3) = *p3.last().unwrap();
                    assert!(a1 / a2 * 1.0 + gtil * (t - t0) < 1.0);
                    let mass = self.integrate(0.0, 1.0 - a0, &[], |x0| phi(0, x0, y0));
                    v += a1 * gs * (g0 * y3 + gs) * (-(l1 + l3)).exp() * mass;
                }
            }
            v
        });

        // P2 data translates in x without loss until it leaves at the front.
        let p2 = self.integrate(0.0, 1.0, &[], |y0| {
            let mass = self.integrate(0.0, (1.0 - ghat * t).max(0.0), &[], |x0| phi(1, x0, y0));
            (a2 - a1) * gs * gs * y0 * mass
        });

        // P3 data.
        let p3 = self.integrate(0.0, 1.0, &[], |y0| {
            let path = self.path(Ph::Three, 0.0, y0, t);
            let (_, yt, lt) = *path.last().unwrap();
            let mass = self.integrate(0.0, (1.0 - gtil * t).max(0.0), &[], |x0| phi(2, x0, y0));
            a2 * g0 * (g0 * yt + gs) * (-lt).exp() * mass
        });
        p1 + p2 + p3
    }
}

fn setup() -> (ModelParams, InitialData, f64, f64) {
    let p = params();
    let d = data(&p);
    let c = compute_constants(&p, &d, &Hooks::default(), &ConstantOptions::default()).unwrap();
    (p, d, c.k, c.delta)
}

fn compare(m_of: impl Fn(f64) -> f64, label: &str) {
    let (p, d, k, delta) = setup();
    let knots = window_knots(0.0, delta, 48);
    let values: Vec<Vec<f64>> = knots.iter().map(|&t| vec![m_of(t).clamp(0.0, k)]).collect();
    let m = MaturityTrajectory::new(knots.clone(), values).unwrap();
    let problem = Problem::new(p.clone(), d.clone());
    let g = GMap::new(
        problem,
        None,
        vec![(0.0, std::sync::Arc::new(d))],
        knots.clone(),
        2,
        2,
    )
    .unwrap();
    let gm = g.apply(&m).unwrap();
    let oracle = Oracle::new(&p, &m, 4);
    let fine = Oracle::new(&p, &m, 8);
    for &i in &[0usize, 12, 31, 48] {
        let t = knots[i];
        let lib = gm.values()[i][0];
        let o = oracle.g(t);
        let of = fine.g(t);
        assert!(
            (o - of).abs() < 1e-9 * of.abs(),
            "{label}: oracle not converged at t={t}: {o} vs {of}"
        );
        let rel = (lib - of).abs() / of.abs();
        println!("{label} t={t:.6} library={lib:.15} oracle={of:.15} rel={rel:.2e}");
        assert!(
            rel < 1e-6,
            "{label}: t={t} library {lib} oracle {of} rel {rel:e}"
        );
    }
}

#[test]
fn g_matches_literal_oracle_for_linear_history() {
    compare(|t| 2.5 + 40.0 * t, "linear");
}

#[test]
fn g_matches_literal_oracle_with_kinks() {
    let anchors = [
        (0.0, 3.0),
        (0.02, 1.0),
        (0.045, 6.0),
        (0.06, 4.5),
        (1.0, 4.5),
    ];
    compare(
        |t| {
            let j = anchors
                .iter()
                .position(|a| a.0 > t)
                .unwrap_or(anchors.len() - 1)
                .max(1);
            let (a, b) = (anchors[j - 1], anchors[j]);
            a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
        },
        "kinked",
    );
}

#[test]
fn gauss_rule_is_exact_for_degree_15() {
    let s: f64 = gauss(8).iter().map(|&(x, w)| w * x.powi(14)).sum();
    assert!((s - 2.0 / 15.0).abs() < 1e-14);
}
