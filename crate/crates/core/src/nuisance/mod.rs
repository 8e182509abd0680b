//! Nuisance functions: recommendation propensity, responsivities, outcome
//! regressions, marginal treatment propensity and group membership.

mod bundle;
mod logistic;

pub use bundle::{fit_nuisances, FittedNuisance, NuisanceConfig};
pub use logistic::{fit_linear, fit_logistic, Link, LinearModel};

use rayon::prelude::*;

use crate::data::Dataset;
use crate::policy::PolicyInput;

/// Nuisance values at one `(x, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisancePoint {
    /// `P(R=1 | x, a)`.
    pub e1: f64,
    /// `P(T=1 | R=1, x, a)`.
    pub p11: f64,
    /// `P(T=1 | R=0, x, a)`.
    pub p10: f64,
    pub mu1: f64,
    pub mu0: f64,
    /// `P(T=1 | x, a)`, marginal over `R`.
    pub p1: f64,
}

impl NuisancePoint {
    /// `P(R=r | x, a)`.
    pub fn e(&self, r: bool) -> f64 {
        if r {
            self.e1
        } else {
            1.0 - self.e1
        }
    }

    /// `P(T=t | R=r, x, a)`.
    pub fn p_t_given_r(&self, t: bool, r: bool) -> f64 {
        let p = if r { self.p11 } else { self.p10 };
        if t {
            p
        } else {
            1.0 - p
        }
    }

    /// `P(T=t | x, a)`.
    pub fn p_t(&self, t: bool) -> f64 {
        if t {
            self.p1
        } else {
            1.0 - self.p1
        }
    }

    pub fn mu(&self, t: bool) -> f64 {
        if t {
            self.mu1
        } else {
            self.mu0
        }
    }

    /// Take-up lift `p_{1|1} − p_{1|0}`.
    pub fn lift(&self) -> f64 {
        self.p11 - self.p10
    }
}

/// A source of nuisance predictions for the rows of a dataset.
///
/// `at_row(ds, i, g)` evaluates the group-`g` models at row `i`'s
/// covariates; for `g` other than the row's own group this is a cross-group
/// extrapolation. Cross-fitted sources use the row index to pick the
/// out-of-fold model.
pub trait Nuisance: Sync {
    fn n_groups(&self) -> usize;
    fn group_freq(&self, g: usize) -> f64;
    fn at_row(&self, ds: &Dataset, row: usize, g: usize) -> NuisancePoint;

    /// `P(A = g | x)` at row `i`.
    fn membership(&self, _ds: &Dataset, _row: usize, g: usize) -> f64 {
        self.group_freq(g)
    }

    /// Clipping constant applied to probability predictions (0 if none).
    fn clip(&self) -> f64 {
        0.0
    }

    fn own(&self, ds: &Dataset, row: usize) -> NuisancePoint {
        self.at_row(ds, row, ds.obs(row).a)
    }
}

/// Row-by-group table of predictions, precomputed once for a dataset.
#[derive(Debug, Clone)]
pub struct NuisanceTable {
    n_groups: usize,
    points: Vec<NuisancePoint>,
    membership: Vec<f64>,
    freqs: Vec<f64>,
    clip: f64,
}

impl NuisanceTable {
    pub fn build(ds: &Dataset, eta: &(impl Nuisance + ?Sized)) -> Self {
        let g = eta.n_groups();
        let rows: Vec<(Vec<NuisancePoint>, Vec<f64>)> = (0..ds.n())
            .into_par_iter()
            .map(|i| {
                let pts = (0..g).map(|k| eta.at_row(ds, i, k)).collect();
                let mem = (0..g).map(|k| eta.membership(ds, i, k)).collect();
                (pts, mem)
            })
            .collect();
        let mut points = Vec::with_capacity(ds.n() * g);
        let mut membership = Vec::with_capacity(ds.n() * g);
        for (p, m) in rows {
            points.extend(p);
            membership.extend(m);
        }
        NuisanceTable {
            n_groups: g,
            points,
            membership,
            freqs: (0..g).map(|k| eta.group_freq(k)).collect(),
            clip: eta.clip(),
        }
    }

    pub fn row_points(&self, row: usize) -> &[NuisancePoint] {
        &self.points[row * self.n_groups..(row + 1) * self.n_groups]
    }

    pub fn row_membership(&self, row: usize) -> &[f64] {
        &self.membership[row * self.n_groups..(row + 1) * self.n_groups]
    }

    /// Policy input for row `i` of the dataset this table was built on.
    pub fn input<'a>(&'a self, ds: &'a Dataset, row: usize) -> PolicyInput<'a> {
        let o = ds.obs(row);
        PolicyInput {
            x: &o.x,
            group: o.a,
            points: self.row_points(row),
            membership: self.row_membership(row),
        }
    }
}

impl Nuisance for NuisanceTable {
    fn n_groups(&self) -> usize {
        self.n_groups
    }
    fn group_freq(&self, g: usize) -> f64 {
        self.freqs[g]
    }
    fn at_row(&self, _ds: &Dataset, row: usize, g: usize) -> NuisancePoint {
        self.points[row * self.n_groups + g]
    }
    fn membership(&self, _ds: &Dataset, row: usize, g: usize) -> f64 {
        self.membership[row * self.n_groups + g]
    }
    fn clip(&self) -> f64 {
        self.clip
    }
}

/// Clips the probability fields of a point to `[rho, 1 − rho]`.
pub fn clip_point(p: NuisancePoint, rho: f64) -> NuisancePoint {
    if rho <= 0.0 {
        return p;
    }
    let c = |v: f64| crate::util::clip(v, rho, 1.0 - rho);
    NuisancePoint { e1: c(p.e1), p11: c(p.p11), p10: c(p.p10), p1: c(p.p1), ..p }
}
