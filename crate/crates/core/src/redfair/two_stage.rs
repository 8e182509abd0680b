use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::constraints::{ConstraintSystem, Event, Moment, MomentKind};
use super::saddle::{RedfairParams, RedfairProblem, SaddleResult};
use crate::data::{CostSpec, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{baseline_score, pseudo_outcome};
use crate::nuisance::{fit_nuisances, Nuisance, NuisanceConfig, NuisanceTable};
use crate::policy::{Policy, RandomizedPolicy};
use crate::util::sample_variance;

/// Where the nuisances used by both stages come from.
#[derive(Clone, Copy)]
pub enum NuisanceSource<'a> {
    /// Cross-fit on the first half with this configuration.
    Fit(&'a NuisanceConfig),
    /// Known nuisances, such as the oracle of a synthetic design.
    Fixed(&'a dyn Nuisance),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageResult {
    pub stage1: SaddleResult,
    pub stage2: SaddleResult,
    /// `stage2.policy`, or the first-stage policy after a fallback.
    pub policy: RandomizedPolicy,
    /// Indices of the first-stage constraints treated as binding.
    pub binding: Vec<usize>,
    pub sigma2: Vec<f64>,
    /// Variance-inflated bounds used for the original rows in stage 2.
    pub d_hat: Vec<f64>,
    pub eps_n: f64,
    pub fallback: bool,
    /// Value of the first-stage policy on the second half.
    pub stage1_value: f64,
    pub first_rows: Vec<usize>,
    pub second_rows: Vec<usize>,
}

/// `d_k + 2 Σ_j |M_kj| σ̂²_j n^{−α}`.
pub fn inflated_bound(d: &[f64], matrix: &[Vec<f64>], sigma2: &[f64], n: usize, alpha: f64) -> Vec<f64> {
    let rate = (n as f64).powf(-alpha);
    d.iter()
        .zip(matrix)
        .map(|(dk, row)| dk + 2.0 * row.iter().zip(sigma2).map(|(m, s)| m.abs() * s).sum::<f64>() * rate)
        .collect()
}

fn row_probs<P: Policy + ?Sized>(ds: &Dataset, eta: &(impl Nuisance + ?Sized), pi: &P) -> Vec<f64> {
    let table = NuisanceTable::build(ds, eta);
    (0..ds.n()).map(|i| pi.prob_recommend(&table.input(ds, i))).collect()
}

/// Split-sample refinement: solve on one half, then re-solve on the other
/// half inside value and constraint slices around the first solution.
pub fn two_stage(
    ds: &Dataset,
    sys: &ConstraintSystem,
    source: NuisanceSource<'_>,
    cost: &CostSpec,
    params: &RedfairParams,
) -> Result<TwoStageResult> {
    params.validate()?;
    if ds.n() < 4 {
        return Err(Error::Domain("two-stage estimation needs at least two rows per half".into()));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
    let half = ds.n() / 2;
    let mut first_rows = order[..half].to_vec();
    let mut second_rows = order[half..].to_vec();
    first_rows.sort_unstable();
    second_rows.sort_unstable();
    let d1 = ds.subset(&first_rows)?;
    let d2 = ds.subset(&second_rows)?;

    let fitted;
    let eta: &dyn Nuisance = match source {
        NuisanceSource::Fit(cfg) => {
            fitted = fit_nuisances(&d1, cfg)?;
            &fitted
        }
        NuisanceSource::Fixed(e) => e,
    };

    let p1 = RedfairProblem::new(&d1, sys, eta, cost, params.pseudo, params.slack_constant, params.alpha)?;
    let stage1 = p1.solve(params)?;

    // Variance of each moment and of the value under the first-stage policy.
    let q1 = row_probs(&d1, eta, &stage1.policy);
    let counts = sys.event_counts(&d1)?;
    let n1 = d1.n() as f64;
    let mut per_moment = vec![Vec::with_capacity(d1.n()); sys.j()];
    let mut value_scores = Vec::with_capacity(d1.n());
    for (i, qi) in q1.iter().enumerate() {
        let q = eta.own(&d1, i);
        let a = d1.obs(i).a;
        for (j, m) in sys.moments.iter().enumerate() {
            let (s, c) = m.affine_at(a, i, &q);
            per_moment[j].push((s * qi + c) * n1 / counts[j] as f64);
        }
        value_scores
            .push(baseline_score(&d1, i, &q, cost, params.pseudo) + qi * pseudo_outcome(&d1, i, &q, cost, params.pseudo));
    }
    let sigma2: Vec<f64> = per_moment.iter().map(|v| sample_variance(v)).collect();
    let d_hat = inflated_bound(&sys.bound, &sys.matrix, &sigma2, d2.n(), params.alpha);
    let eps_n = 2.0 * sample_variance(&value_scores).sqrt() * n1.powf(-params.alpha);
    let binding: Vec<usize> =
        (0..sys.k()).filter(|&k| stage1.gamma[k] >= d_hat[k] - eps_n).collect();

    let augmented = augment(&d2, sys, eta, cost, params, &stage1.policy, &binding, &d_hat, eps_n)?;
    let stage2_params = RedfairParams { slack_constant: 0.0, ..params.clone() };
    let p2 = RedfairProblem::new(&d2, &augmented, eta, cost, params.pseudo, 0.0, params.alpha)?;
    let stage2 = p2.solve(&stage2_params)?;
    let stage1_value = p2.evaluate(&d2, eta, &stage1.policy)?.value;

    let fallback = stage2.max_violation() > (1.0 + 2.0 * stage2.gap_target) / params.bound;
    let policy = if fallback { stage1.policy.clone() } else { stage2.policy.clone() };
    Ok(TwoStageResult {
        stage1,
        stage2,
        policy,
        binding,
        sigma2,
        d_hat,
        eps_n,
        fallback,
        stage1_value,
        first_rows,
        second_rows,
    })
}

/// `M̃ = [M 0 0; 0 M_I 0; 0 0 1]`, `d̃ = [d̂, ε_n, ε_n]` on the second half.
#[allow(clippy::too_many_arguments)]
fn augment(
    d2: &Dataset,
    sys: &ConstraintSystem,
    eta: &dyn Nuisance,
    cost: &CostSpec,
    params: &RedfairParams,
    first: &RandomizedPolicy,
    binding: &[usize],
    d_hat: &[f64],
    eps_n: f64,
) -> Result<ConstraintSystem> {
    let j = sys.j();
    let q1 = row_probs(d2, eta, first);
    let mut moments = sys.moments.clone();
    for (jj, m) in sys.moments.iter().enumerate() {
        let (mut slope, mut intercept) = (Vec::with_capacity(d2.n()), Vec::with_capacity(d2.n()));
        for (i, qi) in q1.iter().enumerate() {
            let (s, _) = m.affine_at(d2.obs(i).a, i, &eta.own(d2, i));
            slope.push(-s);
            intercept.push(s * qi);
        }
        moments.push(Moment {
            name: format!("slice[{jj}]"),
            event: m.event,
            kind: MomentKind::Affine { slope, intercept, dataset_id: d2.id() },
        });
    }
    let psi: Vec<f64> = (0..d2.n()).map(|i| pseudo_outcome(d2, i, &eta.own(d2, i), cost, params.pseudo)).collect();
    moments.push(Moment {
        name: "slice[value]".into(),
        event: Event::All,
        kind: MomentKind::Affine {
            slope: psi.iter().map(|p| -p).collect(),
            intercept: psi.iter().zip(&q1).map(|(p, q)| p * q).collect(),
            dataset_id: d2.id(),
        },
    });

    let width = 2 * j + 1;
    let mut matrix = Vec::new();
    let mut bound = Vec::new();
    let mut names = Vec::new();
    for (k, row) in sys.matrix.iter().enumerate() {
        let mut r = vec![0.0; width];
        r[..j].copy_from_slice(row);
        matrix.push(r);
        bound.push(d_hat[k]);
        names.push(sys.row_names[k].clone());
    }
    for &k in binding {
        let mut r = vec![0.0; width];
        r[j..2 * j].copy_from_slice(&sys.matrix[k]);
        matrix.push(r);
        bound.push(eps_n);
        names.push(format!("slice:{}", sys.row_names[k]));
    }
    let mut r = vec![0.0; width];
    r[2 * j] = 1.0;
    matrix.push(r);
    bound.push(eps_n);
    names.push("slice:value".into());
    ConstraintSystem::new(matrix, bound, moments, names)
}
