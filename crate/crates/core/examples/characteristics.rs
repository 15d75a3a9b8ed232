//! Back-trace a point through the coupled phases and show where its value comes from.

use std::sync::Arc;

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{initial_maturity, open_loop};
use follicle::model::{Component, ModelParams, Phase};
use follicle::solution::Problem;
use follicle::trajectory::MaturityTrajectory;
use follicle::verify::freeze;

fn main() -> anyhow::Result<()> {
    let p = ModelParams::from_json_str(include_str!("../configs/default_params.json"))?;
    let b = Piecewise::unit_bump();
    let spec = InitialDataSpec {
        all: vec![DataTerm::Polynomial {
            amplitude: 1.0,
            x: b.clone(),
            y: b,
        }],
        components: vec![],
    };
    let problem = Problem::new(p.clone(), InitialData::from_spec(&p, &spec)?);
    // Controls held at their initial values.
    let m0 = initial_maturity(&problem, 2)?;
    let traj = MaturityTrajectory::constant(vec![0.0, p.horizon], &m0.m_f)?;
    let sol = open_loop(&problem, Arc::new(freeze(&problem, &traj)?), 32, 2, 2)?;

    let t = p.horizon;
    for (c, x, y) in [
        (Component::new(0, Phase::One, 2), 0.05, 0.5),
        (Component::new(0, Phase::Two, 1), 0.9, 0.3),
        (Component::new(1, Phase::Three, 2), 0.1, 0.05),
    ] {
        let chain = sol.backtrace(c, t, x, y)?;
        println!(
            "{c} at (t={t:.4}, x={x}, y={y}): value {:.6}, region {:?}",
            sol.eval(c, t, x, y)?,
            sol.tracer().classify(c, t, x, y)?
        );
        for s in &chain.segments {
            println!(
                "  {} from ({:.4}, {:.4}, {:.4}) via {:?}, factor {:.4}",
                s.component,
                s.entry.0,
                s.entry.1,
                s.entry.2,
                s.entry_face,
                s.boundary_factor * s.exp_factor
            );
        }
        println!("  anchor {:?}", chain.anchor);
    }
    Ok(())
}
