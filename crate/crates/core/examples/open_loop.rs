//! With frozen controls the solution operator is linear in the initial data.

use std::sync::Arc;

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{initial_maturity, open_loop};
use follicle::model::{Component, ModelParams, Phase};
use follicle::solution::Problem;
use follicle::trajectory::{FrozenControls, MaturityTrajectory};
use follicle::verify::freeze;

fn solve(
    p: &ModelParams,
    data: InitialData,
    frozen: &Arc<FrozenControls>,
) -> anyhow::Result<follicle::solution::Solution> {
    let problem = Problem::new(p.clone(), data).with_frozen(Some(frozen.clone()));
    Ok(open_loop(&problem, frozen.clone(), 32, 2, 1)?)
}

fn main() -> anyhow::Result<()> {
    let p = ModelParams::from_json_str(include_str!("../configs/default_params.json"))?;
    let b = Piecewise::unit_bump();
    let bump = InitialData::from_spec(
        &p,
        &InitialDataSpec {
            all: vec![DataTerm::Polynomial {
                amplitude: 1.0,
                x: b.clone(),
                y: b,
            }],
            components: vec![],
        },
    )?;
    let gauss = InitialData::from_spec(
        &p,
        &InitialDataSpec {
            all: vec![DataTerm::Gaussian {
                amplitude: 0.7,
                cx: 0.4,
                cy: 0.6,
                sx: 0.15,
                sy: 0.2,
            }],
            components: vec![],
        },
    )?;
    let base = Problem::new(p.clone(), bump.clone());
    let m0 = initial_maturity(&base, 2)?;
    let traj = MaturityTrajectory::constant(vec![0.0, p.horizon], &m0.m_f)?;
    let frozen = Arc::new(freeze(&base, &traj)?);

    let (alpha, beta) = (0.3, 1.7);
    let s1 = solve(&p, bump.clone(), &frozen)?;
    let s2 = solve(&p, gauss.clone(), &frozen)?;
    let s3 = solve(&p, bump.combine(alpha, &gauss, beta)?, &frozen)?;
    let c = Component::new(1, Phase::Three, 2);
    for (t, x, y) in [(0.05, 0.3, 0.4), (0.1, 0.7, 0.2), (p.horizon, 0.2, 0.1)] {
        let lhs = s3.eval(c, t, x, y)?;
        let rhs = alpha * s1.eval(c, t, x, y)? + beta * s2.eval(c, t, x, y)?;
        println!(
            "{c} at ({t:.3}, {x}, {y}): combined {lhs:.10}, sum {rhs:.10}, gap {:.1e}",
            (lhs - rhs).abs()
        );
    }
    Ok(())
}
