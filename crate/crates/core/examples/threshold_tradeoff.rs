//! Value against take-up disparity along the threshold path, and the rule
//! that closes the gap entirely.

use encourage::data::CostSpec;
use encourage::dgp::{generate, DgpSpec};
use encourage::threshold::{solve_threshold, sweep_with, SweepEstimator};

fn main() -> encourage::Result<()> {
    let spec = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    let cost = CostSpec::default();
    let ds = generate(&spec, 20_000, 7)?;
    let eta = spec.oracle();

    let grid: Vec<f64> = (0..9).map(|k| 0.01 * k as f64).collect();
    let curve = sweep_with(&ds, &eta, &cost, &grid, SweepEstimator::Dr)?;
    print!("{}", curve.to_csv());

    let sol = solve_threshold(&ds, &eta, &cost, 0.0)?;
    println!(
        "parity rule: penalty {:.4}, value {:.4}, disparity {:.4}",
        sol.penalty, sol.value, sol.disparity
    );
    Ok(())
}
