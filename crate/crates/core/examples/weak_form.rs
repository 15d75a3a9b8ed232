//! Weak-form residual of the constructed solution against random test functions.

use std::sync::Arc;

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{initial_maturity, open_loop};
use follicle::model::{Component, ModelParams, Phase};
use follicle::solution::{Problem, TestFunction};
use follicle::trajectory::MaturityTrajectory;
use follicle::verify::freeze;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

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
    let m0 = initial_maturity(&problem, 2)?;
    let traj = MaturityTrajectory::constant(vec![0.0, p.horizon], &m0.m_f)?;
    let sol = open_loop(&problem, Arc::new(freeze(&problem, &traj)?), 32, 2, 2)?;

    let tau = p.horizon;
    let cache = sol.weak_form_cache(0, tau, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scaled = Component::new(0, Phase::One, 1);
    println!(
        "{:>12} {:>12} {:>12} {:>10}",
        "max term", "residual", "relative", "inflation"
    );
    for _ in 0..5 {
        let test = TestFunction::random(&p, 0, tau, &mut rng);
        let r = cache.residual(&test, None)?;
        let bad = cache.residual(&test, Some((scaled, 1.01)))?;
        println!(
            "{:>12.4e} {:>12.4e} {:>12.4e} {:>10.1}",
            r.max_term,
            r.residual,
            r.relative(),
            bad.residual / r.residual
        );
    }
    Ok(())
}
