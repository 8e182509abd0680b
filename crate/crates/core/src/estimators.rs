//! Policy-value and take-up estimators, and pseudo-outcomes for the
//! weighted-classification reduction.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{CostSpec, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::{Nuisance, NuisancePoint};
use crate::policy::{Policy, PolicyInput};
use crate::util::{mean, sample_variance};

/// Share of rows allowed at the clipping boundary before an estimate is
/// flagged.
const OVERLAP_WARN_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub point: f64,
    pub standard_error: f64,
    pub scores: Vec<f64>,
    pub warning: Option<String>,
}

impl ValueEstimate {
    /// Mean and i.i.d. standard error of per-observation scores.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len() as f64;
        ValueEstimate {
            point: mean(&scores),
            standard_error: (sample_variance(&scores) / n).sqrt(),
            scores,
            warning: None,
        }
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn variance(&self) -> f64 {
        sample_variance(&self.scores)
    }
}

/// CSV with header `estimator,point,se,n`.
pub fn estimates_csv(rows: &[(&str, &ValueEstimate)]) -> String {
    let mut s = String::from("estimator,point,se,n\n");
    for (name, e) in rows {
        let _ = writeln!(s, "{name},{},{},{}", e.point, e.standard_error, e.n());
    }
    s
}

/// Evaluates `f` on every row (or the rows of one group), in row order.
pub(crate) fn map_rows<N, F>(ds: &Dataset, eta: &N, group: Option<usize>, f: F) -> Vec<f64>
where
    N: Nuisance + ?Sized,
    F: Fn(usize, &PolicyInput<'_>) -> f64 + Sync,
{
    let g = eta.n_groups();
    let rows: Vec<usize> = match group {
        None => (0..ds.n()).collect(),
        Some(a) => (0..ds.n()).filter(|i| ds.obs(*i).a == a).collect(),
    };
    rows.par_iter()
        .map(|&i| {
            let o = ds.obs(i);
            let points: Vec<NuisancePoint> = (0..g).map(|k| eta.at_row(ds, i, k)).collect();
            let membership: Vec<f64> = (0..g).map(|k| eta.membership(ds, i, k)).collect();
            f(i, &PolicyInput { x: &o.x, group: o.a, points: &points, membership: &membership })
        })
        .collect()
}

fn at_boundary(p: f64, rho: f64) -> bool {
    let tol = 1e-12;
    p <= rho + tol || p >= 1.0 - rho - tol
}

fn overlap_warning<N: Nuisance + ?Sized>(
    ds: &Dataset,
    eta: &N,
    what: &str,
    pick: fn(&NuisancePoint) -> f64,
) -> Option<String> {
    let rho = eta.clip();
    let hits = (0..ds.n()).filter(|i| at_boundary(pick(&eta.own(ds, *i)), rho)).count();
    let share = hits as f64 / ds.n() as f64;
    (share > OVERLAP_WARN_SHARE).then(|| format!("{what} at the clipping boundary on {:.1}% of rows", 100.0 * share))
}

/// Regression-utility `Σ_t p_{t|r} ũ_{rt}` for recommendation `r`.
fn expected_utility(p: &NuisancePoint, r: bool, cost: &CostSpec) -> f64 {
    [true, false]
        .iter()
        .map(|&t| p.p_t_given_r(t, r) * cost.mean_utility(r, t, p.mu(t)))
        .sum()
}

/// Direct method: `Σ_r π_r Σ_t p_{t|r} (w_y μ_t + w_t t + w_r r)`.
pub fn dm_value<P, N>(ds: &Dataset, pi: &P, eta: &N, cost: &CostSpec) -> ValueEstimate
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    ValueEstimate::from_scores(map_rows(ds, eta, None, |_, inp| {
        let p1 = pi.prob_recommend(inp);
        let q = inp.own();
        p1 * expected_utility(q, true, cost) + (1.0 - p1) * expected_utility(q, false, cost)
    }))
}

/// Doubly-robust value, augmenting the direct method with a propensity-
/// weighted residual for the observed recommendation.
pub fn dr_value<P, N>(ds: &Dataset, pi: &P, eta: &N, cost: &CostSpec) -> ValueEstimate
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    let mut est = ValueEstimate::from_scores(map_rows(ds, eta, None, |i, inp| {
        let o = ds.obs(i);
        let p1 = pi.prob_recommend(inp);
        let q = inp.own();
        let dm = p1 * expected_utility(q, true, cost) + (1.0 - p1) * expected_utility(q, false, cost);
        let pr = if o.r { p1 } else { 1.0 - p1 };
        if pr == 0.0 {
            return dm;
        }
        let resid = cost.utility(o.r, o.t, o.y) - expected_utility(q, o.r, cost);
        dm + pr * resid / q.e(o.r)
    }));
    est.warning = overlap_warning(ds, eta, "recommendation propensity", |p| p.e1);
    est
}

/// Inverse-propensity value `π_R u / e_R`.
pub fn ipw_value<P, N>(ds: &Dataset, pi: &P, eta: &N, cost: &CostSpec) -> ValueEstimate
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    let mut est = ValueEstimate::from_scores(map_rows(ds, eta, None, |i, inp| {
        let o = ds.obs(i);
        let p1 = pi.prob_recommend(inp);
        let pr = if o.r { p1 } else { 1.0 - p1 };
        if pr == 0.0 {
            return 0.0;
        }
        pr * cost.utility(o.r, o.t, o.y) / inp.own().e(o.r)
    }));
    est.warning = overlap_warning(ds, eta, "recommendation propensity", |p| p.e1);
    est
}

/// Control-variate value: reweights by the marginal treatment propensity
/// instead of the recommendation propensity.
pub fn cv_value<P, N>(ds: &Dataset, pi: &P, eta: &N, cost: &CostSpec) -> ValueEstimate
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    let mut est = ValueEstimate::from_scores(map_rows(ds, eta, None, |i, inp| {
        let o = ds.obs(i);
        let p1 = pi.prob_recommend(inp);
        let q = inp.own();
        let mut s = 0.0;
        for (r, pr) in [(true, p1), (false, 1.0 - p1)] {
            if pr == 0.0 {
                continue;
            }
            for t in [true, false] {
                let hit = if o.t == t { 1.0 / q.p_t(t) } else { 0.0 };
                let fitted = cost.mean_utility(r, t, q.mu(t));
                s += (cost.utility(r, t, o.y) * hit + (1.0 - hit) * fitted) * q.p_t_given_r(t, r) * pr;
            }
        }
        s
    }));
    est.warning = overlap_warning(ds, eta, "treatment propensity", |p| p.p1);
    est
}

/// Doubly-robust take-up `E[T(π) | A = group]`.
pub fn dr_takeup<P, N>(ds: &Dataset, pi: &P, eta: &N, group: usize) -> Result<ValueEstimate>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    check_group(ds, group)?;
    let mut est = ValueEstimate::from_scores(map_rows(ds, eta, Some(group), |i, inp| {
        let o = ds.obs(i);
        let p1 = pi.prob_recommend(inp);
        let q = inp.own();
        let plug = p1 * q.p11 + (1.0 - p1) * q.p10;
        let pr = if o.r { p1 } else { 1.0 - p1 };
        if pr == 0.0 {
            return plug;
        }
        let t = if o.t { 1.0 } else { 0.0 };
        let p_r = if o.r { q.p11 } else { q.p10 };
        plug + pr * (t - p_r) / q.e(o.r)
    }));
    est.warning = overlap_warning(ds, eta, "recommendation propensity", |p| p.e1);
    Ok(est)
}

/// Plug-in take-up `mean_a[π_1 p_{1|1} + π_0 p_{1|0}]`.
pub fn dm_takeup<P, N>(ds: &Dataset, pi: &P, eta: &N, group: usize) -> Result<ValueEstimate>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    check_group(ds, group)?;
    Ok(ValueEstimate::from_scores(map_rows(ds, eta, Some(group), |_, inp| {
        let p1 = pi.prob_recommend(inp);
        let q = inp.own();
        p1 * q.p11 + (1.0 - p1) * q.p10
    })))
}

fn check_group(ds: &Dataset, group: usize) -> Result<()> {
    if group >= ds.n_groups() {
        return Err(Error::Domain(format!("group index {group} not in dataset")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoKind {
    Dm,
    Ipw,
    Dr,
}

impl FromStr for PseudoKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dm" => Ok(PseudoKind::Dm),
            "ipw" => Ok(PseudoKind::Ipw),
            "dr" => Ok(PseudoKind::Dr),
            other => Err(Error::Domain(format!("unknown pseudo-outcome kind '{other}'"))),
        }
    }
}

/// Pseudo-outcome whose conditional mean is `E[u | R=1, x] − E[u | R=0, x]`.
pub fn pseudo_outcome(ds: &Dataset, row: usize, q: &NuisancePoint, cost: &CostSpec, kind: PseudoKind) -> f64 {
    let o = ds.obs(row);
    let sign = if o.r { 1.0 } else { -1.0 };
    let dm = q.lift() * cost.effect(q.mu1, q.mu0) + cost.w_r;
    let u = cost.utility(o.r, o.t, o.y);
    match kind {
        PseudoKind::Dm => dm,
        PseudoKind::Ipw => sign * u / q.e(o.r),
        PseudoKind::Dr => dm + sign * (u - expected_utility(q, o.r, cost)) / q.e(o.r),
    }
}

/// Per-row score of the never-recommend policy. For every kind,
/// `baseline_score + π_1·pseudo_outcome` is that kind's value score.
pub fn baseline_score(ds: &Dataset, row: usize, q: &NuisancePoint, cost: &CostSpec, kind: PseudoKind) -> f64 {
    let o = ds.obs(row);
    let eu0 = expected_utility(q, false, cost);
    let u = cost.utility(o.r, o.t, o.y);
    match kind {
        PseudoKind::Dm => eu0,
        PseudoKind::Ipw if o.r => 0.0,
        PseudoKind::Ipw => u / q.e(false),
        PseudoKind::Dr if o.r => eu0,
        PseudoKind::Dr => eu0 + (u - eu0) / q.e(false),
    }
}

/// Pseudo-outcomes for every row, in row order.
pub fn pseudo_outcomes<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, cost: &CostSpec, kind: PseudoKind) -> Vec<f64> {
    (0..ds.n())
        .into_par_iter()
        .map(|i| pseudo_outcome(ds, i, &eta.own(ds, i), cost, kind))
        .collect()
}

/// Take-up among responders in `group`:
/// `Σ_r mean_a[π_r p_{1|r} (μ_1 − μ_0)] / mean_a[μ_1 − μ_0]`.
/// Scores are the linearization of the ratio, so their mean is the point.
pub fn responder_takeup<P, N>(ds: &Dataset, pi: &P, eta: &N, group: usize) -> Result<ValueEstimate>
where
    P: Policy + ?Sized,
    N: Nuisance + ?Sized,
{
    check_group(ds, group)?;
    if !ds.is_binary_outcome() {
        return Err(Error::Domain("responder take-up needs a binary outcome".into()));
    }
    let pairs: Vec<(f64, f64)> = {
        let num = map_rows(ds, eta, Some(group), |_, inp| {
            let p1 = pi.prob_recommend(inp);
            let q = inp.own();
            (p1 * q.p11 + (1.0 - p1) * q.p10) * (q.mu1 - q.mu0)
        });
        let den = map_rows(ds, eta, Some(group), |_, inp| inp.own().mu1 - inp.own().mu0);
        num.into_iter().zip(den).collect()
    };
    let nums: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let dens: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let d = mean(&dens);
    if !(d > 0.0) {
        return Err(Error::Monotonicity(format!(
            "mean treatment effect in group {} is {d}, must be positive",
            ds.group_set()[group]
        )));
    }
    let ratio = mean(&nums) / d;
    let scores = pairs.iter().map(|(n, dd)| ratio + (n - ratio * dd) / d).collect();
    let mut est = ValueEstimate::from_scores(scores);
    est.point = ratio;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::policy::{PolicySpec, RandomizedPolicy};

    struct Fixed(NuisancePoint);
    impl Nuisance for Fixed {
        fn n_groups(&self) -> usize {
            1
        }
        fn group_freq(&self, _: usize) -> f64 {
            1.0
        }
        fn at_row(&self, _: &Dataset, _: usize, _: usize) -> NuisancePoint {
            self.0
        }
    }

    fn row(r: bool, t: bool, y: f64) -> Dataset {
        Dataset::new(vec![Observation { x: vec![0.0], a: 0, r, t, y }], vec!["a".into()], vec!["x".into()]).unwrap()
    }

    const P: NuisancePoint = NuisancePoint { e1: 0.5, p11: 0.8, p10: 0.0, mu1: 1.0, mu0: 0.0, p1: 0.5 };

    #[test]
    fn hand_computed_scores() {
        let ds = row(true, true, 1.0);
        let always = PolicySpec::Constant(true);
        let c = CostSpec::default();
        assert!((dm_value(&ds, &always, &Fixed(P), &c).point - 0.8).abs() < 1e-15);
        assert!((dr_value(&ds, &always, &Fixed(P), &c).point - 1.2).abs() < 1e-15);
        assert!((cv_value(&ds, &always, &Fixed(P), &c).point - 0.8).abs() < 1e-15);
        assert!((dr_takeup(&ds, &always, &Fixed(P), 0).unwrap().point - 1.2).abs() < 1e-15);
    }

    #[test]
    fn takeup_zero_without_treatment() {
        let ds = row(false, false, 0.0);
        let q = NuisancePoint { p10: 0.0, ..P };
        let v = dr_takeup(&ds, &PolicySpec::Constant(false), &Fixed(q), 0).unwrap();
        assert_eq!(v.point, 0.0);
    }

    #[test]
    fn pseudo_outcome_cases() {
        let ds = row(true, true, 2.0);
        let c = CostSpec::default();
        assert_eq!(pseudo_outcome(&ds, 0, &P, &c, PseudoKind::Ipw), 4.0);
        let q = NuisancePoint { p11: 0.8, p10: 0.2, mu1: 0.75, mu0: 0.25, ..P };
        assert!((pseudo_outcome(&ds, 0, &q, &c, PseudoKind::Dm) - 0.3).abs() < 1e-15);
        assert!("boosted".parse::<PseudoKind>().is_err());
    }

    #[test]
    fn mixture_is_average() {
        let ds = row(true, false, 1.0);
        let c = CostSpec { w_y: 1.0, w_t: -0.2, w_r: 0.1 };
        let mix = RandomizedPolicy::new(vec![(0.5, PolicySpec::Constant(true)), (0.5, PolicySpec::Constant(false))]).unwrap();
        let a = dm_value(&ds, &PolicySpec::Constant(true), &Fixed(P), &c).point;
        let b = dm_value(&ds, &PolicySpec::Constant(false), &Fixed(P), &c).point;
        assert!((dm_value(&ds, &mix, &Fixed(P), &c).point - 0.5 * (a + b)).abs() < 1e-15);
        let a = dr_value(&ds, &PolicySpec::Constant(true), &Fixed(P), &c).point;
        let b = dr_value(&ds, &PolicySpec::Constant(false), &Fixed(P), &c).point;
        assert!((dr_value(&ds, &mix, &Fixed(P), &c).point - 0.5 * (a + b)).abs() < 1e-15);
    }

    #[test]
    fn responder_single_cell() {
        let ds = row(true, true, 1.0);
        let q = NuisancePoint { p11: 0.8, mu1: 0.7, mu0: 0.3, ..P };
        let v = responder_takeup(&ds, &PolicySpec::Constant(true), &Fixed(q), 0).unwrap();
        assert!((v.point - 0.8).abs() < 1e-15);
        let flat = NuisancePoint { mu1: 0.3, ..q };
        assert!(matches!(
            responder_takeup(&ds, &PolicySpec::Constant(true), &Fixed(flat), 0),
            Err(Error::Monotonicity(_))
        ));
    }

    #[test]
    fn boundary_propensity_warns() {
        let ds = row(true, true, 1.0);
        struct Clipped;
        impl Nuisance for Clipped {
            fn n_groups(&self) -> usize {
                1
            }
            fn group_freq(&self, _: usize) -> f64 {
                1.0
            }
            fn at_row(&self, _: &Dataset, _: usize, _: usize) -> NuisancePoint {
                NuisancePoint { e1: 0.01, ..P }
            }
            fn clip(&self) -> f64 {
                0.01
            }
        }
        assert!(dr_value(&ds, &PolicySpec::Constant(true), &Clipped, &CostSpec::default()).warning.is_some());
        assert!(dr_value(&ds, &PolicySpec::Constant(true), &Fixed(P), &CostSpec::default()).warning.is_none());
    }

    #[test]
    fn csv_layout() {
        let e = ValueEstimate::from_scores(vec![1.0, 3.0]);
        assert_eq!(estimates_csv(&[("dm", &e)]), format!("estimator,point,se,n\ndm,2,{},2\n", 1.0));
    }
}
