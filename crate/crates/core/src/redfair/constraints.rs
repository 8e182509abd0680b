use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{Nuisance, NuisancePoint};

/// Conditioning event of a moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    All,
    Group(usize),
}

impl Event {
    pub fn contains(&self, group: usize) -> bool {
        match self {
            Event::All => true,
            Event::Group(g) => *g == group,
        }
    }
}

/// Per-row moment `g(O, π)`. Every kind is affine in `π_1`.
#[derive(Debug, Clone, PartialEq)]
pub enum MomentKind {
    /// `π_1·lift + p_{1|0}`.
    TreatmentTakeup,
    /// `(π_1·lift + p_{1|0})·(μ_1 − μ_0) / denominator`.
    ResponderTakeup { denominator: f64 },
    /// `slope_i·π_1 + intercept_i` on a specific dataset.
    Affine { slope: Vec<f64>, intercept: Vec<f64>, dataset_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub name: String,
    pub event: Event,
    pub kind: MomentKind,
}

impl Moment {
    /// `(slope, intercept)` of `g(O_row, π)` in `π_1`, given the row's own
    /// nuisance point. Zero outside the event.
    pub fn affine_at(&self, group: usize, row: usize, q: &NuisancePoint) -> (f64, f64) {
        if !self.event.contains(group) {
            return (0.0, 0.0);
        }
        match &self.kind {
            MomentKind::TreatmentTakeup => (q.lift(), q.p10),
            MomentKind::ResponderTakeup { denominator } => {
                let s = (q.mu1 - q.mu0) / denominator;
                (q.lift() * s, q.p10 * s)
            }
            MomentKind::Affine { slope, intercept, .. } => (slope[row], intercept[row]),
        }
    }
}

/// Linear constraints `M·h(π) ≤ d` with `h_j(π) = E[g_j(O, π) | E_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    /// `K × J`, row-major as nested vectors.
    pub matrix: Vec<Vec<f64>>,
    pub bound: Vec<f64>,
    pub moments: Vec<Moment>,
    pub row_names: Vec<String>,
}

impl ConstraintSystem {
    pub fn new(matrix: Vec<Vec<f64>>, bound: Vec<f64>, moments: Vec<Moment>, row_names: Vec<String>) -> Result<Self> {
        if matrix.len() != bound.len() || row_names.len() != bound.len() {
            return Err(Error::Domain("matrix, bound and row names differ in length".into()));
        }
        if matrix.iter().any(|r| r.len() != moments.len()) {
            return Err(Error::Domain("every matrix row needs one entry per moment".into()));
        }
        if matrix.iter().flatten().chain(&bound).any(|v| !v.is_finite()) {
            return Err(Error::Domain("constraint coefficients must be finite".into()));
        }
        Ok(ConstraintSystem { matrix, bound, moments, row_names })
    }

    /// No constraints at all.
    pub fn unconstrained() -> Self {
        ConstraintSystem { matrix: Vec::new(), bound: Vec::new(), moments: Vec::new(), row_names: Vec::new() }
    }

    pub fn k(&self) -> usize {
        self.bound.len()
    }

    pub fn j(&self) -> usize {
        self.moments.len()
    }

    /// Checks the events against a dataset and returns `n_j` per moment.
    pub fn event_counts(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let counts: Vec<usize> = self
            .moments
            .iter()
            .map(|m| ds.observations().iter().filter(|o| m.event.contains(o.a)).count())
            .collect();
        for (m, c) in self.moments.iter().zip(&counts) {
            if *c == 0 {
                return Err(Error::Domain(format!("moment '{}' has no matching observations", m.name)));
            }
            if let MomentKind::Affine { slope, intercept, dataset_id } = &m.kind {
                if *dataset_id != ds.id() || slope.len() != ds.n() || intercept.len() != ds.n() {
                    return Err(Error::Domain(format!("moment '{}' belongs to another dataset", m.name)));
                }
            }
        }
        Ok(counts)
    }

    /// Sampling slack `ε_k = C′ Σ_j |M_kj| n_j^{−α}`.
    pub fn slack(&self, counts: &[usize], constant: f64, alpha: f64) -> Vec<f64> {
        self.matrix
            .iter()
            .map(|row| {
                constant
                    * row
                        .iter()
                        .zip(counts)
                        .map(|(m, n)| m.abs() * (*n as f64).powf(-alpha))
                        .sum::<f64>()
            })
            .collect()
    }
}

fn takeup_moments(n_groups: usize, kind: impl Fn(Event) -> MomentKind) -> Vec<Moment> {
    let mut moments: Vec<Moment> = (0..n_groups)
        .map(|g| Moment { name: format!("takeup[{g}]"), event: Event::Group(g), kind: kind(Event::Group(g)) })
        .collect();
    moments.push(Moment { name: "takeup[all]".into(), event: Event::All, kind: kind(Event::All) });
    moments
}

/// Each group's moment within `d` of the marginal one, as `2|A|` one-sided
/// rows ordered `(a,+), (a,−)` per group.
fn parity_rows(groups: &[String], d: f64, moments: Vec<Moment>) -> Result<ConstraintSystem> {
    let g = groups.len();
    let mut matrix = Vec::with_capacity(2 * g);
    let mut names = Vec::with_capacity(2 * g);
    for (a, label) in groups.iter().enumerate() {
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; g + 1];
            row[a] = sign;
            row[g] = -sign;
            matrix.push(row);
            names.push(format!("{label}{}", if sign > 0.0 { "+" } else { "-" }));
        }
    }
    ConstraintSystem::new(matrix, vec![d; 2 * g], moments, names)
}

/// Take-up parity: `|E[T(π)|A=a] − E[T(π)]| ≤ d` for every group.
pub fn make_treatment_parity(groups: &[String], d: f64) -> Result<ConstraintSystem> {
    if groups.is_empty() {
        return Err(Error::Domain("parity needs at least one group".into()));
    }
    parity_rows(groups, d, takeup_moments(groups.len(), |_| MomentKind::TreatmentTakeup))
}

/// Parity of take-up among responders. Denominators are the mean plug-in
/// effects `E_n[μ_1 − μ_0 | E_j]`.
pub fn make_responder_parity<N: Nuisance + ?Sized>(ds: &Dataset, eta: &N, d: f64) -> Result<ConstraintSystem> {
    if !ds.is_binary_outcome() {
        return Err(Error::Domain("responder parity needs a binary outcome".into()));
    }
    let effects: Vec<(usize, f64)> = (0..ds.n())
        .map(|i| {
            let p = eta.own(ds, i);
            (ds.obs(i).a, p.mu1 - p.mu0)
        })
        .collect();
    let denom = |e: Event| {
        let v: Vec<f64> = effects.iter().filter(|(a, _)| e.contains(*a)).map(|(_, t)| *t).collect();
        crate::util::mean(&v)
    };
    let mut dens = Vec::new();
    for g in 0..ds.n_groups() {
        dens.push((Event::Group(g), denom(Event::Group(g))));
    }
    dens.push((Event::All, denom(Event::All)));
    for (e, v) in &dens {
        if !(*v > 0.0) {
            let who = match e {
                Event::Group(g) => ds.group_set()[*g].clone(),
                Event::All => "all".into(),
            };
            return Err(Error::Monotonicity(format!("mean effect for {who} is {v}, must be positive")));
        }
    }
    let moments = takeup_moments(ds.n_groups(), |e| MomentKind::ResponderTakeup {
        denominator: dens.iter().find(|(ev, _)| *ev == e).map(|(_, v)| *v).expect("all events listed"),
    });
    parity_rows(ds.group_set(), d, moments)
}

/// One-sided two-group disparity `E[T(π)|A=first] − E[T(π)|A=second] ≤ eps`.
pub fn make_disparity_constraint(eps: f64) -> Result<ConstraintSystem> {
    let moments = (0..2)
        .map(|g| Moment { name: format!("takeup[{g}]"), event: Event::Group(g), kind: MomentKind::TreatmentTakeup })
        .collect();
    ConstraintSystem::new(vec![vec![1.0, -1.0]], vec![eps], moments, vec!["disparity".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_shape() {
        let s = make_treatment_parity(&["a".into(), "b".into()], 0.05).unwrap();
        assert_eq!((s.k(), s.j()), (4, 3));
        assert_eq!(s.bound, vec![0.05; 4]);
        assert_eq!(s.matrix[0], vec![1.0, 0.0, -1.0]);
        assert_eq!(s.matrix[3], vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn slack_formula() {
        let s = make_disparity_constraint(0.1).unwrap();
        let e = s.slack(&[100, 400], 2.0, 0.5);
        assert!((e[0] - 2.0 * (0.1 + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn ragged_matrix_rejected() {
        assert!(ConstraintSystem::new(vec![vec![1.0]], vec![0.0], Vec::new(), vec!["r".into()]).is_err());
    }
}
