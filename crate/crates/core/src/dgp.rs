//! Discrete synthetic data-generating processes with exact oracles.
//!
//! Every quantity the estimators target has a closed form here as a finite
//! sum over cells, which is what the test suites compare against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{CellKey, CostSpec, Dataset, Observation};
use crate::error::{Error, Result};
use crate::nuisance::{clip_point, Nuisance, NuisancePoint};
use crate::policy::{Policy, PolicyInput, PolicySpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeKind {
    Bernoulli,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mass: f64,
    pub x: Vec<f64>,
    pub group: usize,
    pub e1: f64,
    pub p11: f64,
    pub p10: f64,
    pub mu1: f64,
    pub mu0: f64,
}

impl Cell {
    pub fn point(&self) -> NuisancePoint {
        NuisancePoint {
            e1: self.e1,
            p11: self.p11,
            p10: self.p10,
            mu1: self.mu1,
            mu0: self.mu0,
            p1: self.e1 * self.p11 + (1.0 - self.e1) * self.p10,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey::new(&self.x, self.group)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    cells: Vec<Cell>,
    groups: Vec<String>,
    outcome: OutcomeKind,
}

const MAX_ENUMERATION_CELLS: usize = 20;

impl DgpSpec {
    pub fn new(cells: Vec<Cell>, groups: Vec<String>, outcome: OutcomeKind) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Spec("no cells".into()));
        }
        let sorted: Vec<String> = groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if sorted != groups {
            return Err(Error::Spec("group labels must be sorted and distinct".into()));
        }
        let dim = cells[0].x.len();
        let mut keys = BTreeSet::new();
        let mut total = 0.0;
        for (i, c) in cells.iter().enumerate() {
            let id = i + 1;
            if c.x.len() != dim || c.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("cell {id}: covariates must be finite with dimension {dim}")));
            }
            if c.group >= groups.len() {
                return Err(Error::Spec(format!("cell {id}: unknown group")));
            }
            if !(c.mass.is_finite() && c.mass >= 0.0) {
                return Err(Error::Spec(format!("cell {id}: mass must be nonnegative")));
            }
            for (name, p) in [("e1", c.e1), ("p11", c.p11), ("p10", c.p10)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Spec(format!("cell {id}: {name} = {p} is not a probability")));
                }
            }
            if !(c.mu1.is_finite() && c.mu0.is_finite()) {
                return Err(Error::Spec(format!("cell {id}: outcome means must be finite")));
            }
            if outcome == OutcomeKind::Bernoulli
                && !((0.0..=1.0).contains(&c.mu1) && (0.0..=1.0).contains(&c.mu0))
            {
                return Err(Error::Spec(format!("cell {id}: bernoulli outcome means must lie in [0, 1]")));
            }
            if !keys.insert(c.key()) {
                return Err(Error::Spec(format!("cell {id}: duplicate (x, group)")));
            }
            total += c.mass;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Spec(format!("masses sum to {total}, not 1")));
        }
        if let OutcomeKind::Gaussian { sigma } = outcome {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Spec("gaussian sigma must be nonnegative".into()));
            }
        }
        for (g, label) in groups.iter().enumerate() {
            if group_mass_of(&cells, g) <= 0.0 {
                return Err(Error::Spec(format!("group '{label}' has zero mass")));
            }
        }
        Ok(DgpSpec { cells, groups, outcome })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn outcome(&self) -> OutcomeKind {
        self.outcome
    }

    pub fn dim(&self) -> usize {
        self.cells[0].x.len()
    }

    pub fn group_mass(&self, g: usize) -> f64 {
        group_mass_of(&self.cells, g)
    }

    /// Reads the plain-text table: `outcome = bernoulli | gaussian:<sigma>`
    /// then one cell per line, `mass x... group e1 p11 p10 mu1 mu0`.
    pub fn parse(text: &str) -> Result<DgpSpec> {
        let mut outcome = OutcomeKind::Bernoulli;
        let mut rows: Vec<(f64, Vec<f64>, String, [f64; 5])> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |msg: &str| Error::Spec(format!("line {}: {msg}", i + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() != "outcome" {
                    return Err(bad("unknown setting"));
                }
                let v = v.trim();
                outcome = if v == "bernoulli" {
                    OutcomeKind::Bernoulli
                } else if let Some(s) = v.strip_prefix("gaussian:") {
                    OutcomeKind::Gaussian { sigma: s.trim().parse().map_err(|_| bad("bad sigma"))? }
                } else {
                    return Err(bad("outcome must be bernoulli or gaussian:<sigma>"));
                };
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 8 {
                return Err(bad("expected mass, covariates, group, e1, p11, p10, mu1, mu0"));
            }
            let num = |t: &str| t.parse::<f64>().map_err(|_| bad(&format!("'{t}' is not a number")));
            let m = tok.len();
            let x = tok[1..m - 6].iter().map(|t| num(t)).collect::<Result<Vec<_>>>()?;
            let probs = [num(tok[m - 5])?, num(tok[m - 4])?, num(tok[m - 3])?, num(tok[m - 2])?, num(tok[m - 1])?];
            rows.push((num(tok[0])?, x, tok[m - 6].to_string(), probs));
        }
        let groups: Vec<String> = rows.iter().map(|r| r.2.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let cells = rows
            .into_iter()
            .map(|(mass, x, g, p)| Cell {
                mass,
                x,
                group: groups.iter().position(|l| *l == g).expect("collected above"),
                e1: p[0],
                p11: p[1],
                p10: p[2],
                mu1: p[3],
                mu0: p[4],
            })
            .collect();
        DgpSpec::new(cells, groups, outcome)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self.outcome {
            OutcomeKind::Bernoulli => s.push_str("outcome = bernoulli\n"),
            OutcomeKind::Gaussian { sigma } => {
                let _ = writeln!(s, "outcome = gaussian:{sigma}");
            }
        }
        s.push_str("# mass x... group e1 p11 p10 mu1 mu0\n");
        for c in &self.cells {
            let x: Vec<String> = c.x.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                c.mass,
                x.join(" "),
                self.groups[c.group],
                c.e1,
                c.p11,
                c.p10,
                c.mu1,
                c.mu0
            );
        }
        s
    }

    /// Exact nuisance functions of this DGP.
    pub fn oracle(&self) -> OracleNuisance {
        OracleNuisance::new(self, 0.0)
    }

    /// Policy input at a cell, using the exact nuisances.
    fn with_cell_input<R>(&self, eta: &OracleNuisance, c: &Cell, f: impl FnOnce(&PolicyInput<'_>) -> R) -> R {
        let points: Vec<NuisancePoint> = (0..self.n_groups()).map(|g| eta.point(&c.x, g)).collect();
        let membership: Vec<f64> = (0..self.n_groups()).map(|g| eta.membership_at(&c.x, g)).collect();
        f(&PolicyInput { x: &c.x, group: c.group, points: &points, membership: &membership })
    }
}

fn group_mass_of(cells: &[Cell], g: usize) -> f64 {
    cells.iter().filter(|c| c.group == g).map(|c| c.mass).sum()
}

/// Draws `n` i.i.d. rows. Deterministic in `seed`.
pub fn generate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cum = Vec::with_capacity(spec.cells.len());
    let mut acc = 0.0;
    for c in &spec.cells {
        acc += c.mass;
        cum.push(acc);
    }
    let noise = match spec.outcome {
        OutcomeKind::Gaussian { sigma } => Some(Normal::new(0.0, sigma).map_err(|e| Error::Spec(e.to_string()))?),
        OutcomeKind::Bernoulli => None,
    };
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * acc;
        let idx = cum.partition_point(|v| *v <= u).min(spec.cells.len() - 1);
        let c = &spec.cells[idx];
        let r = rng.gen::<f64>() < c.e1;
        let t = rng.gen::<f64>() < if r { c.p11 } else { c.p10 };
        let mu = if t { c.mu1 } else { c.mu0 };
        let y = match &noise {
            None => {
                if rng.gen::<f64>() < mu {
                    1.0
                } else {
                    0.0
                }
            }
            Some(d) => mu + d.sample(&mut rng),
        };
        obs.push(Observation { x: c.x.clone(), a: c.group, r, t, y });
    }
    let names = (0..spec.dim()).map(|j| format!("x{j}")).collect();
    Dataset::new(obs, spec.groups.clone(), names)
}

/// Exact nuisances looked up by cell. At `(x, g)` pairs absent from the
/// spec (cross-group extrapolation) it falls back to the mass-weighted mean
/// over group `g`.
#[derive(Debug, Clone)]
pub struct OracleNuisance {
    points: BTreeMap<CellKey, NuisancePoint>,
    mass: BTreeMap<CellKey, f64>,
    fallback: Vec<NuisancePoint>,
    freqs: Vec<f64>,
    clip: f64,
}

impl OracleNuisance {
    pub fn new(spec: &DgpSpec, clip: f64) -> Self {
        let g = spec.n_groups();
        let mut fallback = Vec::with_capacity(g);
        for k in 0..g {
            let m = spec.group_mass(k);
            let mut p = NuisancePoint { e1: 0.0, p11: 0.0, p10: 0.0, mu1: 0.0, mu0: 0.0, p1: 0.0 };
            for c in spec.cells.iter().filter(|c| c.group == k) {
                let w = c.mass / m;
                let q = c.point();
                p.e1 += w * q.e1;
                p.p11 += w * q.p11;
                p.p10 += w * q.p10;
                p.mu1 += w * q.mu1;
                p.mu0 += w * q.mu0;
                p.p1 += w * q.p1;
            }
            fallback.push(p);
        }
        OracleNuisance {
            points: spec.cells.iter().map(|c| (c.key(), c.point())).collect(),
            mass: spec.cells.iter().map(|c| (c.key(), c.mass)).collect(),
            fallback,
            freqs: (0..g).map(|k| spec.group_mass(k)).collect(),
            clip,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = clip;
        self
    }

    pub fn point(&self, x: &[f64], g: usize) -> NuisancePoint {
        let p = self.points.get(&CellKey::new(x, g)).copied().unwrap_or(self.fallback[g]);
        clip_point(p, self.clip)
    }

    /// `P(A = g | x)` from the cell masses.
    pub fn membership_at(&self, x: &[f64], g: usize) -> f64 {
        let masses: Vec<f64> = (0..self.freqs.len())
            .map(|k| self.mass.get(&CellKey::new(x, k)).copied().unwrap_or(0.0))
            .collect();
        let total: f64 = masses.iter().sum();
        if total > 0.0 {
            masses[g] / total
        } else {
            self.freqs[g]
        }
    }
}

impl Nuisance for OracleNuisance {
    fn n_groups(&self) -> usize {
        self.freqs.len()
    }
    fn group_freq(&self, g: usize) -> f64 {
        self.freqs[g]
    }
    fn at_row(&self, ds: &Dataset, row: usize, g: usize) -> NuisancePoint {
        self.point(&ds.obs(row).x, g)
    }
    fn membership(&self, ds: &Dataset, row: usize, g: usize) -> f64 {
        self.membership_at(&ds.obs(row).x, g)
    }
    fn clip(&self) -> f64 {
        self.clip
    }
}

/// Exact policy value `Σ mass · Σ_r π_r Σ_t p_{t|r} · (w_y μ_t + w_t t + w_r r)`.
pub fn oracle_value<P: Policy + ?Sized>(spec: &DgpSpec, pi: &P, cost: &CostSpec) -> f64 {
    let eta = spec.oracle();
    spec.cells
        .iter()
        .map(|c| {
            let p1 = spec.with_cell_input(&eta, c, |inp| pi.prob_recommend(inp));
            let q = c.point();
            let mut v = 0.0;
            for (r, pr) in [(true, p1), (false, 1.0 - p1)] {
                for t in [true, false] {
                    v += pr * q.p_t_given_r(t, r) * cost.mean_utility(r, t, q.mu(t));
                }
            }
            c.mass * v
        })
        .sum()
}

/// Exact take-up `E[T(π) | A = g]`.
pub fn oracle_takeup<P: Policy + ?Sized>(spec: &DgpSpec, pi: &P, group: usize) -> Result<f64> {
    if group >= spec.n_groups() {
        return Err(Error::Domain(format!("group index {group} not in spec")));
    }
    let eta = spec.oracle();
    let m = spec.group_mass(group);
    Ok(spec
        .cells
        .iter()
        .filter(|c| c.group == group)
        .map(|c| {
            let p1 = spec.with_cell_input(&eta, c, |inp| pi.prob_recommend(inp));
            c.mass / m * (p1 * (c.p11 - c.p10) + c.p10)
        })
        .sum())
}

/// Exact disparity `E[T(π)|A=first] − E[T(π)|A=second]` for two-group specs.
pub fn oracle_disparity<P: Policy + ?Sized>(spec: &DgpSpec, pi: &P) -> Result<f64> {
    require_two_groups(spec)?;
    Ok(oracle_takeup(spec, pi, 0)? - oracle_takeup(spec, pi, 1)?)
}

fn require_two_groups(spec: &DgpSpec) -> Result<()> {
    if spec.n_groups() != 2 {
        return Err(Error::Domain(format!(
            "take-up parity needs exactly two groups, spec has {}",
            spec.n_groups()
        )));
    }
    Ok(())
}

/// Result of enumerating all deterministic per-cell policies.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedOptimum {
    pub policy: PolicySpec,
    pub value: f64,
    /// Exact take-up per group.
    pub takeup: Vec<f64>,
    pub decisions: Vec<bool>,
}

struct CellTerms {
    base_value: f64,
    gain: Vec<f64>,
    base_takeup: Vec<f64>,
    /// `mass · lift / P(group)`, charged to the cell's group.
    takeup_coef: Vec<f64>,
}

fn cell_terms(spec: &DgpSpec, cost: &CostSpec) -> CellTerms {
    let g = spec.n_groups();
    let mut t = CellTerms {
        base_value: 0.0,
        gain: Vec::new(),
        base_takeup: vec![0.0; g],
        takeup_coef: Vec::new(),
    };
    for c in &spec.cells {
        let q = c.point();
        let base: f64 = [true, false]
            .iter()
            .map(|&tt| q.p_t_given_r(tt, false) * cost.mean_utility(false, tt, q.mu(tt)))
            .sum();
        t.base_value += c.mass * base;
        t.gain.push(c.mass * (q.lift() * cost.effect(q.mu1, q.mu0) + cost.w_r));
        let m = spec.group_mass(c.group);
        t.base_takeup[c.group] += c.mass / m * c.p10;
        t.takeup_coef.push(c.mass / m * q.lift());
    }
    t
}

fn mask_eval(spec: &DgpSpec, terms: &CellTerms, mask: u32) -> (f64, Vec<f64>) {
    let mut v = terms.base_value;
    let mut tk = terms.base_takeup.clone();
    for (i, c) in spec.cells.iter().enumerate() {
        if mask >> i & 1 == 1 {
            v += terms.gain[i];
            tk[c.group] += terms.takeup_coef[i];
        }
    }
    (v, tk)
}

fn tabular_from_mask(spec: &DgpSpec, mask: u32) -> (PolicySpec, Vec<bool>) {
    let decisions: Vec<bool> = (0..spec.cells.len()).map(|i| mask >> i & 1 == 1).collect();
    let table = spec.cells.iter().zip(&decisions).map(|(c, d)| (c.key(), *d)).collect();
    (PolicySpec::Tabular { table, default: false }, decisions)
}

fn check_enumerable(spec: &DgpSpec) -> Result<()> {
    if spec.cells.len() > MAX_ENUMERATION_CELLS {
        return Err(Error::Domain(format!(
            "enumeration is capped at {MAX_ENUMERATION_CELLS} cells, spec has {}",
            spec.cells.len()
        )));
    }
    Ok(())
}

/// Best deterministic per-cell policy among those whose per-group take-up
/// vector satisfies `feasible`. Ties (within 1e-12) go to fewer
/// recommendations, then to the lexicographically smaller decision vector
/// in cell order. `None` if no policy is feasible.
pub fn oracle_optimum_where<F>(spec: &DgpSpec, cost: &CostSpec, feasible: F) -> Result<Option<EnumeratedOptimum>>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    check_enumerable(spec)?;
    let terms = cell_terms(spec, cost);
    let count = 1u32 << spec.cells.len();
    let scored: Vec<Option<f64>> = (0..count)
        .into_par_iter()
        .map(|mask| {
            let (v, tk) = mask_eval(spec, &terms, mask);
            feasible(&tk).then_some(v)
        })
        .collect();
    // Decision vector as bits in cell order, first cell most significant.
    let lex = |mask: u32| -> u32 { (0..spec.cells.len()).fold(0, |acc, i| (acc << 1) | (mask >> i & 1)) };
    let mut best: Option<(u32, f64)> = None;
    for (mask, v) in scored.iter().enumerate() {
        let Some(v) = *v else { continue };
        let mask = mask as u32;
        let better = match best {
            None => true,
            Some((bm, bv)) => {
                if v > bv + 1e-12 {
                    true
                } else if v < bv - 1e-12 {
                    false
                } else {
                    let (c, bc) = (mask.count_ones(), bm.count_ones());
                    c < bc || (c == bc && lex(mask) < lex(bm))
                }
            }
        };
        if better {
            best = Some((mask, v));
        }
    }
    Ok(best.map(|(mask, value)| {
        let (policy, decisions) = tabular_from_mask(spec, mask);
        let (_, takeup) = mask_eval(spec, &terms, mask);
        EnumeratedOptimum { policy, value, takeup, decisions }
    }))
}

/// Range of the exact disparity over all deterministic per-cell policies.
pub fn oracle_disparity_range(spec: &DgpSpec) -> Result<(f64, f64)> {
    require_two_groups(spec)?;
    check_enumerable(spec)?;
    let terms = cell_terms(spec, &CostSpec::default());
    let count = 1u32 << spec.cells.len();
    let (lo, hi) = (0..count)
        .into_par_iter()
        .map(|mask| {
            let (_, tk) = mask_eval(spec, &terms, mask);
            let d = tk[0] - tk[1];
            (d, d)
        })
        .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    Ok((lo, hi))
}

/// Best deterministic policy subject to `E[T|first] − E[T|second] ≤ eps`.
pub fn oracle_constrained_optimum(spec: &DgpSpec, cost: &CostSpec, eps: f64) -> Result<(PolicySpec, f64)> {
    require_two_groups(spec)?;
    let found = oracle_optimum_where(spec, cost, |tk| tk[0] - tk[1] <= eps + 1e-12)?;
    match found {
        Some(o) => Ok((o.policy, o.value)),
        None => {
            let (min, max) = oracle_disparity_range(spec)?;
            Err(Error::Infeasible { eps, min, max })
        }
    }
}

/// Options for [`random_spec`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSpecOptions {
    /// Distinct scalar covariate values per group.
    pub x_values: usize,
    pub groups: usize,
    pub outcome: OutcomeKind,
    /// Range for the recommendation propensity.
    pub e1_range: (f64, f64),
    /// Enforce `p11 ≥ p10` in every cell.
    pub monotone: bool,
}

impl Default for RandomSpecOptions {
    fn default() -> Self {
        RandomSpecOptions {
            x_values: 4,
            groups: 2,
            outcome: OutcomeKind::Bernoulli,
            e1_range: (0.2, 0.8),
            monotone: true,
        }
    }
}

/// Random spec with `x_values × groups` cells on a scalar covariate grid.
pub fn random_spec(opts: &RandomSpecOptions, seed: u64) -> DgpSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<String> = (0..opts.groups).map(|g| ((b'a' + g as u8) as char).to_string()).collect();
    let mut cells = Vec::new();
    for g in 0..opts.groups {
        for x in 0..opts.x_values {
            let a: f64 = rng.gen_range(0.05..0.95);
            let b: f64 = rng.gen_range(0.05..0.95);
            let (p11, p10) = if opts.monotone { (a.max(b), a.min(b)) } else { (a, b) };
            let (mu1, mu0) = match opts.outcome {
                OutcomeKind::Bernoulli => (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)),
                OutcomeKind::Gaussian { .. } => (rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0)),
            };
            cells.push(Cell {
                mass: rng.gen_range(0.5..1.5),
                x: vec![x as f64],
                group: g,
                e1: rng.gen_range(opts.e1_range.0..opts.e1_range.1),
                p11,
                p10,
                mu1,
                mu0,
            });
        }
    }
    let total: f64 = cells.iter().map(|c| c.mass).sum();
    for c in &mut cells {
        c.mass /= total;
    }
    DgpSpec::new(cells, groups, opts.outcome).expect("random spec is valid by construction")
}
