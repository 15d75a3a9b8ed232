//! Closed-loop solve: march Picard windows over [0, T] and print the maturities.

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{compute_constants, march, ConstantOptions, FixedPointOptions};
use follicle::model::{Hooks, ModelParams};
use follicle::solution::Problem;

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
    let data = InitialData::from_spec(&p, &spec)?;
    let c = compute_constants(&p, &data, &Hooks::default(), &ConstantOptions::default())?;
    let problem = Problem::new(p.clone(), data);
    let out = march(&problem, &c, &FixedPointOptions::default())?;
    for r in &out.reports {
        println!(
            "window [{:.4}, {:.4}]: {} iterations, residual {:.2e}, ratio {:.3}",
            r.window.0, r.window.1, r.iterations, r.final_residual, r.contraction_ratio
        );
    }
    println!("{:>8} {:>12} {:>12} {:>12}", "t", "M_1", "M_2", "M");
    for i in 0..=8 {
        let t = p.horizon * i as f64 / 8.0;
        let m = out.solution.maturity(t)?;
        println!(
            "{t:>8.4} {:>12.6} {:>12.6} {:>12.6}",
            m.m_f[0], m.m_f[1], m.m
        );
    }
    Ok(())
}
