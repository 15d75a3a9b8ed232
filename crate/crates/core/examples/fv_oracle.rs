//! Finite-volume reference against the characteristic solution under frozen controls.

use std::sync::Arc;

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{initial_maturity, open_loop};
use follicle::fv::{self, FvOptions};
use follicle::model::ModelParams;
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
    let base = Problem::new(p.clone(), InitialData::from_spec(&p, &spec)?);
    let m0 = initial_maturity(&base, 2)?;
    let traj = MaturityTrajectory::constant(vec![0.0, p.horizon], &m0.m_f)?;
    let frozen = Arc::new(freeze(&base, &traj)?);
    let problem = base.with_frozen(Some(frozen.clone()));
    let sol = open_loop(&problem, frozen, 32, 2, 2)?;

    let t = p.horizon;
    let exact = sol.maturity(t)?;
    println!("characteristics: M(T) = {:.8}", exact.m);
    let mut prev: Option<f64> = None;
    for n in [32, 64, 128] {
        let run = fv::run(&problem, &[t], &FvOptions::new(n))?;
        let err = (run.series[0].0.m - exact.m).abs();
        let order = prev.map_or(f64::NAN, |e| (e / err).log2());
        println!(
            "n = {n:>4}: M(T) = {:.8}, error {err:.3e}, order {order:.2}, {} steps",
            run.series[0].0.m, run.steps
        );
        prev = Some(err);
    }
    Ok(())
}
