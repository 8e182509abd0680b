//! Treatment-parity constraints for every group at once, solved as a
//! saddle point, with the linear policy class for comparison.

use encourage::data::CostSpec;
use encourage::dgp::{generate, oracle_value, DgpSpec};
use encourage::redfair::{make_treatment_parity, redfair, PolicyClass, RedfairParams};

fn main() -> encourage::Result<()> {
    let spec = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    let cost = CostSpec::default();
    let ds = generate(&spec, 10_000, 5)?;
    let eta = spec.oracle();
    let sys = make_treatment_parity(ds.group_set(), 0.02)?;

    for class in [PolicyClass::Tabular, PolicyClass::Linear] {
        let params = RedfairParams { class, max_iter: 30_000, ..Default::default() };
        let r = redfair(&ds, &sys, &eta, &cost, &params)?;
        println!(
            "{class:?}: gap {:.4} (target {:.4}) after {} iterations, {} components",
            r.gap,
            r.gap_target,
            r.iterations,
            r.policy.components.len()
        );
        println!("  in-sample value {:.4}, exact value {:.4}", r.value, oracle_value(&spec, &r.policy, &cost));
        // The bounds include the finite-sample slack added to each row.
        for ((name, g), d) in sys.row_names.iter().zip(&r.gamma).zip(&r.d_hat) {
            println!("  {name:>3}: {g:+.4} (bound {d:.4})");
        }
    }
    Ok(())
}
