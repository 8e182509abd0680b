//! Which disparity budgets any deterministic policy can meet.

use encourage::dgp::{generate, oracle_disparity_range, DgpSpec};
use encourage::threshold::{feasible_epsilon_range, feasible_epsilon_range_population};

fn main() -> encourage::Result<()> {
    let spec = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    let (lo, hi) = feasible_epsilon_range_population(&spec)?;
    let (elo, ehi) = oracle_disparity_range(&spec)?;
    println!("closed form  [{lo:.4}, {hi:.4}]");
    println!("enumeration  [{elo:.4}, {ehi:.4}]");
    for n in [1_000, 10_000, 100_000] {
        let ds = generate(&spec, n, 3)?;
        let (a, b) = feasible_epsilon_range(&ds, &spec.oracle())?;
        println!("n = {n:>6}   [{a:.4}, {b:.4}]");
    }
    Ok(())
}
