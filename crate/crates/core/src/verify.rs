//! Property suite behind the `verify` command.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{mask, Face, FaceCoords, PathState, Tracer};
use crate::data::{DataTerm, InitialData, InitialDataSpec};
use crate::error::Result;
use crate::fixedpoint::{self, FixedPointOptions, GMap, MarchOutcome};
use crate::fv::{self, FvOptions};
use crate::model::{Component, Hooks, Phase};
use crate::solution::{Problem, Solution, TestFunction};
use crate::trajectory::{FrozenControls, MaturityTrajectory};

/// Sizes of the property checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub contraction_pairs: usize,
    pub jacobian_segments: usize,
    pub jacobian_eps: f64,
    pub weak_tests: usize,
    pub bound_samples: usize,
    pub trace_samples: usize,
    pub linearity_samples: usize,
    pub fv_resolution: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            contraction_pairs: 20,
            jacobian_segments: 100,
            jacobian_eps: 1e-6,
            weak_tests: 10,
            bound_samples: 10_000,
            trace_samples: 200,
            linearity_samples: 200,
            fv_resolution: 64,
            seed: 0,
        }
    }
}

/// Pass/fail of one property with its measured value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl PropertyResult {
    fn below(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        PropertyResult {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail,
        }
    }
}

/// Suite output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

/// GMap of the first window `[0, delta]`.
pub fn first_window(
    problem: &Problem,
    delta: f64,
    opts: &FixedPointOptions,
    panels: usize,
) -> Result<GMap> {
    let knots = fixedpoint::window_knots(
        0.0,
        delta.min(problem.params.horizon),
        opts.knots_per_window,
    );
    GMap::new(
        problem.clone(),
        None,
        vec![(0.0, problem.data.clone())],
        knots,
        opts.steps_per_knot,
        panels,
    )
}

/// `||G(a) - G(b)|| / ||a - b||` for random pairs in the admissible set.
pub fn contraction_ratios(
    g: &GMap,
    k: f64,
    follicles: usize,
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let a = fixedpoint::random_trajectory(g.knots(), follicles, k, rng)?;
        let b = fixedpoint::random_trajectory(g.knots(), follicles, k, rng)?;
        out.push(fixedpoint::contraction_ratio(g, &a, &b)?);
    }
    Ok(out)
}

/// One Jacobian comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianSample {
    pub phase: Phase,
    pub entry: FaceCoords,
    pub exit: Option<Face>,
    pub t_bottom: f64,
    pub t_end: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

fn away_from_nodes(nodes: &[f64], s: f64, margin: f64) -> bool {
    let i = nodes.partition_point(|&v| v < s);
    let near = |j: usize| nodes.get(j).is_some_and(|&v| (v - s).abs() < margin);
    !(near(i) || (i > 0 && near(i - 1)))
}

/// Random segments over every entry face and exit type, analytic factor vs
/// central differences of the segment map.
pub fn jacobian_samples(
    tracer: &Tracer,
    count: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<JacobianSample>> {
    let table = tracer.table();
    let (t0, t1) = (table.start(), table.end());
    let nodes = table.nodes().to_vec();
    let f_count = tracer.params().follicles;
    let gap = nodes
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let margin = (50.0 * eps).min(0.25 * gap);
    let mut out = Vec::with_capacity(count);
    let mut kind = 0usize;
    let mut attempts = 0usize;
    while out.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let f = rng.gen_range(0..f_count);
        let span = t1 - t0;
        let (phase, face) = match kind % 9 {
            0..=2 => (Phase::One, Face::Bottom),
            3 => (Phase::One, Face::Back),
            4 => (Phase::Two, Face::Bottom),
            5 => (Phase::Two, Face::Back),
            6 => (Phase::Three, Face::Bottom),
            7 => (Phase::Three, Face::Back),
            _ => (Phase::Three, Face::Left),
        };
        let sub = kind % 9;
        let s_in = t0 + rng.gen_range(0.0..0.6) * span;
        let t_end = rng.gen_range(s_in + 0.2 * span..=t1);
        let (a, b) = match face {
            Face::Bottom => {
                // Bias the start so Phase 1 also leaves by the front and the top.
                let x = match sub {
                    1 => rng.gen_range(0.85..0.99),
                    _ => rng.gen_range(0.05..0.95),
                };
                let y = match sub {
                    2 => rng.gen_range(0.85..0.99),
                    _ => rng.gen_range(0.05..0.95),
                };
                (x, y)
            }
            Face::Back => (s_in, rng.gen_range(0.05..0.95)),
            _ => (s_in, rng.gen_range(0.05..0.95)),
        };
        let entry = FaceCoords { face, a, b };
        let t_bottom = s_in;
        let entry_time = if face == Face::Bottom { t_bottom } else { a };
        if !away_from_nodes(&nodes, entry_time, margin) || !away_from_nodes(&nodes, t_end, margin) {
            continue;
        }
        let (_, exit, end) = tracer.segment_map(phase, f, entry, t_bottom, t_end)?;
        // The exit must not switch under the perturbations.
        if exit.is_some()
            && ((t_end - end.s) < 1e3 * eps || !away_from_nodes(&nodes, end.s, margin))
        {
            continue;
        }
        if exit.is_none() {
            let edge = end.x.min(1.0 - end.x).min(end.y).min(1.0 - end.y);
            if edge < 1e3 * eps && phase != Phase::Three {
                continue;
            }
        }
        let mut consistent = true;
        for (da, db) in [(eps, 0.0), (-eps, 0.0), (0.0, eps), (0.0, -eps)] {
            let e = FaceCoords {
                face,
                a: a + da,
                b: b + db,
            };
            if tracer.segment_map(phase, f, e, t_bottom, t_end)?.1 != exit {
                consistent = false;
                break;
            }
        }
        if !consistent {
            continue;
        }
        let analytic = tracer.segment_map_factor(phase, f, entry, t_bottom, t_end)?;
        let fd = tracer.segment_map_fd(phase, f, entry, t_bottom, t_end, eps)?;
        out.push(JacobianSample {
            phase,
            entry,
            exit,
            t_bottom,
            t_end,
            analytic,
            finite_difference: fd,
            relative_error: (analytic - fd).abs() / fd.abs().max(1e-300),
        });
        kind += 1;
    }
    Ok(out)
}

/// Worst relative weak residual over random test functions, and the smallest
/// inflation when one component is scaled by 1.01.
pub fn weak_residual_check(
    sol: &Solution,
    tau: f64,
    tests: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let p = sol.params().clone();
    let mut worst: f64 = 0.0;
    let mut min_inflation = f64::INFINITY;
    for f in 0..p.follicles {
        let cache = sol.weak_form_cache(f, tau, sol.panels())?;
        let scaled = Component::new(f, Phase::One, 1);
        for _ in 0..tests.div_ceil(p.follicles) {
            let tf = TestFunction::random(&p, f, tau, rng);
            let r = cache.residual(&tf, None)?;
            let rp = cache.residual(&tf, Some((scaled, 1.01)))?;
            worst = worst.max(r.relative());
            if r.max_term > 0.0 {
                min_inflation = min_inflation.min(rp.residual / r.residual.max(f64::MIN_POSITIVE));
            }
        }
    }
    Ok((worst, min_inflation))
}

/// Largest `|phi_hat_k(t,0,y) - a1 gbar / tau_g * phi_bar_k(t,1,y)|`.
pub fn trace_compatibility(sol: &Solution, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = sol.params().clone();
    let (t0, t1) = (sol.tracer().table().start(), sol.horizon());
    let pts: Vec<(usize, usize, f64, f64)> = (0..samples)
        .map(|_| {
            (
                rng.gen_range(0..p.follicles),
                rng.gen_range(1..=p.cycles),
                rng.gen_range(t0..=t1),
                rng.gen::<f64>(),
            )
        })
        .collect();
    let errs: Result<Vec<f64>> = pts
        .par_iter()
        .map(|&(f, k, t, y)| {
            let hat = sol.eval(Component::new(f, Phase::Two, k), t, 0.0, y)?;
            let bar = sol.eval(Component::new(f, Phase::One, k), t, 1.0, y)?;
            let gb = sol.tracer().table().snap_at(f, t)?.gbar;
            Ok((hat - p.a1 * gb / p.tau_g[f] * bar).abs())
        })
        .collect();
    Ok(errs?.into_iter().fold(0.0, f64::max))
}

/// Largest `|phi_hat(t,x,y) - phi_hat0(x - ghat t, y)|` for `x >= ghat t`.
pub fn phase2_exactness(sol: &Solution, samples: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = sol.params().clone();
    let data = sol.epoch_data()[0].clone();
    let te = sol.tracer().epochs()[0];
    let t_hi = sol
        .tracer()
        .epochs()
        .get(1)
        .copied()
        .unwrap_or(sol.horizon());
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let f = rng.gen_range(0..p.follicles);
        let k = rng.gen_range(1..=p.cycles);
        let t = rng.gen_range(te..=t_hi);
        let shift = p.ghat(f) * (t - te);
        if shift >= 1.0 {
            continue;
        }
        let x = rng.gen_range(shift..=1.0);
        let y = rng.gen::<f64>();
        let c = Component::new(f, Phase::Two, k);
        let v = sol.eval(c, t, x, y)?;
        worst = worst.max((v - data.field(c).eval(x - shift, y)).abs());
    }
    Ok(worst)
}

/// Controls of a closed-loop trajectory, frozen at its sample times.
pub fn freeze(problem: &Problem, traj: &MaturityTrajectory) -> Result<FrozenControls> {
    let mut u = Vec::with_capacity(traj.times().len());
    let mut bu = Vec::with_capacity(traj.times().len());
    for v in traj.values() {
        let (uf, b) = problem.hooks.controls(&problem.params, v);
        u.push(uf);
        bu.push(b);
    }
    FrozenControls::new(traj.times().to_vec(), u, bu)
}

/// A second smooth datum for the linearity check.
pub fn companion_data(problem: &Problem) -> Result<InitialData> {
    let spec = InitialDataSpec {
        all: vec![DataTerm::Gaussian {
            amplitude: 0.7,
            cx: 0.4,
            cy: 0.6,
            sx: 0.15,
            sy: 0.2,
        }],
        components: Vec::new(),
    };
    InitialData::from_spec(&problem.params, &spec)
}

/// Largest deviation from linearity of open-loop evaluation.
pub fn linearity(
    problem: &Problem,
    frozen: Arc<FrozenControls>,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let p = problem.params.clone();
    let other = companion_data(problem)?;
    let (alpha, beta) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
    let comb = problem.data.combine(alpha, &other, beta)?;
    let intervals = frozen.times.len().saturating_sub(1).max(1);
    let make = |d: InitialData| -> Result<Solution> {
        let mut pr = problem.clone().with_frozen(Some(frozen.clone()));
        pr.data = Arc::new(d);
        fixedpoint::open_loop(&pr, frozen.clone(), intervals, 2, 1)
    };
    let s1 = make((*problem.data).clone())?;
    let s2 = make(other)?;
    let s3 = make(comb)?;
    let comps = Component::all(p.follicles, p.cycles);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let c = comps[rng.gen_range(0..comps.len())];
        let t = rng.gen_range(0.0..=p.horizon);
        let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
        let lhs = s3.eval(c, t, x, y)?;
        let rhs = alpha * s1.eval(c, t, x, y)? + beta * s2.eval(c, t, x, y)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Worst per-step `|mass_after - mass_before|` for a closed domain without losses or doubling.
pub fn mass_audit(problem: &Problem, resolution: usize, horizon: f64) -> Result<f64> {
    let hooks = Hooks {
        mitosis_factor: 1.0,
        zero_loss: true,
        ..problem.hooks.clone()
    };
    let pr = problem.clone().with_hooks(hooks).with_frozen(None);
    let opts = FvOptions {
        closed_domain: true,
        audit: true,
        ..FvOptions::new(resolution)
    };
    let run = fv::run(&pr, &[horizon], &opts)?;
    Ok(run
        .audits
        .iter()
        .map(|a| (a.mass_after - a.mass_before).abs())
        .fold(0.0, f64::max))
}

/// Worst `|into / out - mitosis factor|` over steps and interfaces with nonzero flux.
pub fn doubling_audit(problem: &Problem, resolution: usize, horizon: f64) -> Result<f64> {
    let hooks = Hooks {
        zero_loss: true,
        ..problem.hooks.clone()
    };
    let pr = problem.clone().with_hooks(hooks);
    let opts = FvOptions {
        audit: true,
        ..FvOptions::new(resolution)
    };
    let run = fv::run(&pr, &[horizon], &opts)?;
    let target = problem.hooks.mitosis_factor;
    let mut worst: f64 = 0.0;
    for a in &run.audits {
        for &(_, _, into, out) in &a.mitosis {
            if out > 0.0 {
                worst = worst.max((into / out - target).abs());
            } else {
                worst = worst.max(into.abs());
            }
        }
    }
    Ok(worst)
}

/// Runs every property on a solved problem. Linearity uses `frozen` when
/// given, otherwise the controls of the closed-loop solution.
pub fn run_suite(
    problem: &Problem,
    outcome: &MarchOutcome,
    fp: &FixedPointOptions,
    opts: &SuiteOptions,
    frozen: Option<Arc<FrozenControls>>,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let c = &outcome.constants;
    let p = problem.params.clone();
    let sol = &outcome.solution;
    let mut props = Vec::new();
    let panels = outcome.reports.first().map_or(1, |r| r.panels);

    let g = first_window(problem, c.delta, fp, panels)?;
    let ratios = contraction_ratios(&g, c.k, p.follicles, opts.contraction_pairs, &mut rng)?;
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    props.push(PropertyResult::below(
        "contraction",
        worst,
        0.5,
        format!("{} pairs, window {}", ratios.len(), c.delta),
    ));

    let selfmap = {
        let m = fixedpoint::random_trajectory(g.knots(), p.follicles, c.k, &mut rng)?;
        let gm = g.apply(&m)?;
        gm.values()
            .iter()
            .map(|v| v.iter().sum::<f64>())
            .fold(0.0, f64::max)
    };
    props.push(PropertyResult::below(
        "self_map",
        selfmap,
        c.k,
        "sup of G(M) for a random M".into(),
    ));

    let m0 = fixedpoint::initial_maturity(problem, panels)?;
    let (a, ra) =
        fixedpoint::picard_solve(&g, fixedpoint::constant_guess(g.knots(), &m0.m_f)?, c.k, fp)?;
    let other = fixedpoint::random_trajectory(g.knots(), p.follicles, c.k, &mut rng)?;
    let (b, _) = fixedpoint::picard_solve(&g, other, c.k, fp)?;
    props.push(PropertyResult::below(
        "fixed_point_unique",
        a.distance(&b),
        1e-9,
        format!(
            "{} iterations, residual {:e}",
            ra.iterations, ra.final_residual
        ),
    ));
    let mut geometric: f64 = 0.0;
    for w in ra.residuals.windows(2).skip(1) {
        if w[0] > 100.0 * ra.tolerance {
            geometric = geometric.max(w[1] / w[0] - ra.contraction_ratio);
        }
    }
    props.push(PropertyResult::below(
        "picard_geometric",
        geometric,
        0.05,
        format!("observed ratio {}", ra.contraction_ratio),
    ));

    let jac = jacobian_samples(
        sol.tracer(),
        opts.jacobian_segments,
        opts.jacobian_eps,
        &mut rng,
    )?;
    let worst = jac.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    let mut faces: Vec<String> = jac
        .iter()
        .map(|s| format!("{:?}>{:?}", s.entry.face, s.exit))
        .collect();
    faces.sort();
    faces.dedup();
    let mut r = PropertyResult::below(
        "jacobian",
        worst,
        1e-6,
        format!("{} segments, kinds {}", jac.len(), faces.join(" ")),
    );
    r.passed &= jac.len() == opts.jacobian_segments;
    props.push(r);

    let (rel, infl) = weak_residual_check(sol, sol.horizon(), opts.weak_tests, &mut rng)?;
    props.push(PropertyResult::below(
        "weak_residual",
        rel,
        1e-5,
        format!("{} test functions", opts.weak_tests),
    ));
    if problem.data.is_zero() {
        props.push(PropertyResult::below(
            "weak_residual_power",
            0.0,
            0.0,
            "zero data".into(),
        ));
    } else {
        props.push(PropertyResult {
            name: "weak_residual_power".into(),
            passed: infl >= 10.0,
            value: infl,
            threshold: 10.0,
            detail: "smallest residual inflation under a 1% perturbation".into(),
        });
    }

    let bounds = sol.check_bounds(&outcome.trajectory, c, opts.bound_samples, &mut rng);
    match bounds {
        Ok(b) => props.push(PropertyResult {
            name: "bounds".into(),
            passed: true,
            value: b.max_maturity,
            threshold: c.k,
            detail: format!(
                "slack {}, max density {:?} vs {:?}",
                b.maturity_slack, b.max_density, b.phi_bound
            ),
        }),
        Err(e) => props.push(PropertyResult {
            name: "bounds".into(),
            passed: false,
            value: f64::NAN,
            threshold: c.k,
            detail: e.to_string(),
        }),
    }

    let tc = trace_compatibility(sol, opts.trace_samples, &mut rng)?;
    props.push(PropertyResult::below(
        "trace_compatibility",
        tc,
        1e-8,
        String::new(),
    ));

    let ph2 = phase2_exactness(sol, opts.trace_samples, &mut rng)?;
    props.push(PropertyResult::below(
        "phase2_exact",
        ph2,
        1e-12,
        String::new(),
    ));

    let frozen = match frozen {
        Some(f) => f,
        None => Arc::new(freeze(problem, &outcome.trajectory)?),
    };
    let lin = linearity(problem, frozen, opts.linearity_samples, &mut rng)?;
    props.push(PropertyResult::below(
        "open_loop_linearity",
        lin,
        1e-12,
        String::new(),
    ));

    let drift = mass_audit(problem, opts.fv_resolution, p.horizon)?;
    props.push(PropertyResult::below(
        "mass_audit",
        drift,
        1e-10,
        "closed domain, no loss, no doubling".into(),
    ));
    let dbl = doubling_audit(problem, opts.fv_resolution, p.horizon)?;
    props.push(PropertyResult::below(
        "doubling_audit",
        dbl,
        1e-12,
        "mitosis interface flux ratio".into(),
    ));

    let passed = props.iter().all(|r| r.passed);
    Ok(SuiteReport {
        passed,
        properties: props,
    })
}

/// Forward-backward round trip error of one characteristic.
pub fn round_trip(
    tracer: &Tracer,
    phase: Phase,
    f: usize,
    start: (f64, f64, f64),
    t_end: f64,
) -> Result<f64> {
    let (s0, x0, y0) = start;
    let (fwd, _) =
        tracer.integrate(phase, f, PathState::at(s0, x0, y0), t_end, mask::NONE, None)?;
    let (back, _) = tracer.integrate(
        phase,
        f,
        PathState::at(fwd.s, fwd.x, fwd.y),
        s0,
        mask::NONE,
        None,
    )?;
    Ok((back.x - x0).abs().max((back.y - y0).abs()))
}
