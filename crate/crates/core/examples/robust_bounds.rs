//! Value bounds when some cells are almost never recommended, and the
//! policy that maximizes the worst case.

use encourage::data::CostSpec;
use encourage::dgp::{generate, Cell, DgpSpec};
use encourage::robust::{
    binary_constant_bound, detect_overlap, robust_lp_objective, solve_robust_threshold, UncertaintySet,
};
use encourage::threshold::solve_threshold;

fn main() -> encourage::Result<()> {
    let base = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    // Recommendation is nearly absent in the first cell of each group.
    let cells: Vec<Cell> = base
        .cells()
        .iter()
        .enumerate()
        .map(|(i, c)| Cell { e1: if i % 4 == 0 { 0.01 } else { c.e1 }, ..c.clone() })
        .collect();
    let spec = DgpSpec::new(cells, base.groups().to_vec(), base.outcome())?;
    let cost = CostSpec::default();
    let ds = generate(&spec, 20_000, 2)?;
    let eta = spec.oracle();

    let part = detect_overlap(&ds, &eta, 0.05);
    println!("rows without overlap: r=0 {}, r=1 {}", part.count(false), part.count(true));

    let set = UncertaintySet::constant(0.2, 0.9);
    let plug_in = solve_threshold(&ds, &eta, &cost, 0.02)?;
    let (lo, hi) = binary_constant_bound(&ds, &plug_in.policy, &eta, 0.2, 0.9, &part, &cost)?;
    let worst = robust_lp_objective(&ds, &plug_in.policy, &eta, &set, &part, &cost)?;
    println!("plug-in rule: value in [{lo:.4}, {hi:.4}], worst case {worst:.4}");

    let robust = solve_robust_threshold(&ds, &eta, &set, &part, &cost, 0.02)?;
    println!("robust rule: worst case {:.4}, worst disparity {:.4}", robust.value, robust.disparity);
    Ok(())
}
