//! Bounds, Lipschitz constants and the contraction window for the default problem.

use follicle::data::{DataTerm, InitialData, InitialDataSpec, Piecewise};
use follicle::fixedpoint::{compute_constants, ConstantOptions};
use follicle::model::{Hooks, ModelParams};

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
    println!("K      = {}", c.k);
    println!("K1     = {:.6}", c.k1);
    println!("K2     = {:.6}", c.k2);
    println!("delta  = {:.6}  (T = {:.6})", c.delta, p.horizon);
    for f in 0..p.follicles {
        println!(
            "follicle {}: C1 = {:.4}, C2 = {:.4}, density bound {:.4e}",
            f + 1,
            c.c1[f],
            c.c2[f],
            c.phi_bound[f]
        );
    }
    Ok(())
}
