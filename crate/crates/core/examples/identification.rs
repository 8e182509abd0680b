//! Direct, IPW, doubly robust and control-variate values of one policy on a
//! simulated design, next to the exact value.

use encourage::data::CostSpec;
use encourage::dgp::{generate, oracle_value, DgpSpec};
use encourage::estimators::{cv_value, dm_value, dr_value, ipw_value};
use encourage::threshold::solve_threshold_population;

fn main() -> encourage::Result<()> {
    let spec = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    let cost = CostSpec::default();
    let ds = generate(&spec, 50_000, 1)?;
    let eta = spec.oracle();
    let pi = solve_threshold_population(&spec, &cost, f64::INFINITY, false)?.policy;

    println!("exact value {:.4}", oracle_value(&spec, &pi, &cost));
    for (name, est) in [
        ("dm", dm_value(&ds, &pi, &eta, &cost)),
        ("ipw", ipw_value(&ds, &pi, &eta, &cost)),
        ("dr", dr_value(&ds, &pi, &eta, &cost)),
        ("cv", cv_value(&ds, &pi, &eta, &cost)),
    ] {
        println!("{name:>4} {:.4} (se {:.4})", est.point, est.standard_error);
    }
    Ok(())
}
