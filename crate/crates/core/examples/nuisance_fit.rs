//! Cross-fitted nuisance models against the exact ones.

use encourage::dgp::{generate, DgpSpec};
use encourage::nuisance::{fit_nuisances, FittedNuisance, Nuisance, NuisanceConfig};

fn main() -> encourage::Result<()> {
    let spec = DgpSpec::parse(include_str!("../configs/eight_cell.dgp"))?;
    let ds = generate(&spec, 20_000, 9)?;
    let fit = fit_nuisances(&ds, &NuisanceConfig { folds: 5, ..Default::default() })?;
    println!("converged: {}", fit.converged());

    let eta = spec.oracle();
    let mut worst = [0.0f64; 5];
    for i in 0..ds.n() {
        let (a, b) = (fit.own(&ds, i), eta.own(&ds, i));
        for (w, d) in worst.iter_mut().zip([a.e1 - b.e1, a.p11 - b.p11, a.p10 - b.p10, a.mu1 - b.mu1, a.mu0 - b.mu0]) {
            *w = w.max(d.abs());
        }
    }
    // A logistic model in a scalar covariate cannot match every cell, so
    // some error remains even with plenty of data.
    for (name, w) in ["e1", "p11", "p10", "mu1", "mu0"].iter().zip(worst) {
        println!("largest |fit - exact| for {name}: {w:.3}");
    }

    let text = fit.to_text();
    assert_eq!(FittedNuisance::from_text(&text)?, fit);
    println!("saved form: {} lines", text.lines().count());
    Ok(())
}
