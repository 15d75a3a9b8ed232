//! Composite Gauss-Legendre rules with breakpoints.

use std::sync::OnceLock;

/// Points per panel.
pub const ORDER: usize = 7;

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

/// Sorted cut points of `[a, b]`: the ends plus the interior breakpoints.
pub fn cuts(a: f64, b: f64, breaks: &[f64]) -> Vec<f64> {
    let tol = 1e-12 * (b - a).abs().max(1e-300);
    let mut pts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|&c| c.is_finite() && c > a + tol && c < b - tol)
        .collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts.dedup_by(|x, y| (*x - *y).abs() <= tol);
    let mut out = Vec::with_capacity(pts.len() + 2);
    out.push(a);
    out.extend(pts);
    out.push(b);
    out
}

/// Appends `(node, weight)` pairs of the composite rule on `[a, b]` to `out`.
///
/// Each piece between consecutive cut points is split into `panels` equal panels.
pub fn composite_into(a: f64, b: f64, breaks: &[f64], panels: usize, out: &mut Vec<(f64, f64)>) {
    if !(b > a) {
        return;
    }
    let (xs, ws) = rule();
    let c = cuts(a, b, breaks);
    for w in c.windows(2) {
        let len = (w[1] - w[0]) / panels as f64;
        for p in 0..panels {
            let lo = w[0] + len * p as f64;
            let half = 0.5 * len;
            let mid = lo + half;
            for (x, wt) in xs.iter().zip(ws) {
                out.push((mid + half * x, half * wt));
            }
        }
    }
}

pub fn composite(a: f64, b: f64, breaks: &[f64], panels: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    composite_into(a, b, breaks, panels, &mut out);
    out
}

/// Integrates `f` over `[a, b]` with the composite rule.
pub fn integrate<F: FnMut(f64) -> f64>(
    a: f64,
    b: f64,
    breaks: &[f64],
    panels: usize,
    mut f: F,
) -> f64 {
    composite(a, b, breaks, panels)
        .into_iter()
        .map(|(x, w)| w * f(x))
        .sum()
}

/// A weighted point of a 2-D rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node2 {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

/// Tensor rule on a rectangle.
pub fn rectangle(
    x: (f64, f64),
    y: (f64, f64),
    x_breaks: &[f64],
    y_breaks: &[f64],
    panels: usize,
    out: &mut Vec<Node2>,
) {
    let xs = composite(x.0, x.1, x_breaks, panels);
    let ys = composite(y.0, y.1, y_breaks, panels);
    for &(xx, wx) in &xs {
        for &(yy, wy) in &ys {
            out.push(Node2 {
                x: xx,
                y: yy,
                w: wx * wy,
            });
        }
    }
}
