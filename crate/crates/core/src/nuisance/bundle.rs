use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::logistic::{fit_linear, fit_logistic_with, Link, LinearModel};
use super::{clip_point, Nuisance, NuisancePoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::OptimOptions;
use crate::util::{join_f64, parse_f64_list};

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceConfig {
    /// Cross-fitting folds; 1 fits and predicts in-sample.
    pub folds: usize,
    pub reg: f64,
    /// Probability predictions are clipped to `[clip, 1 − clip]`.
    pub clip: f64,
    pub seed: u64,
    pub optim: OptimOptions,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig { folds: 5, reg: 1e-3, clip: 0.01, seed: 0, optim: OptimOptions::default() }
    }
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Domain("folds must be at least 1".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Domain("clip must lie in (0, 0.5)".into()));
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return Err(Error::Domain("regularization must be nonnegative".into()));
        }
        Ok(())
    }
}

const MODEL_NAMES: [&str; 6] = ["e1", "p11", "p10", "mu1", "mu0", "p1"];

/// The six per-group models for one fold.
#[derive(Debug, Clone, PartialEq)]
struct ModelSet {
    models: [LinearModel; 6],
}

impl ModelSet {
    fn point(&self, x: &[f64]) -> NuisancePoint {
        let m = &self.models;
        NuisancePoint {
            e1: m[0].predict(x),
            p11: m[1].predict(x),
            p10: m[2].predict(x),
            mu1: m[3].predict(x),
            mu0: m[4].predict(x),
            p1: m[5].predict(x),
        }
    }
}

/// Cross-fitted nuisance models. Rows of the training dataset get
/// out-of-fold predictions; any other dataset gets the fold average.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedNuisance {
    groups: Vec<String>,
    freqs: Vec<f64>,
    clip: f64,
    train_id: u64,
    fold_of: Vec<usize>,
    /// Indexed `[group][fold]`.
    sets: Vec<Vec<ModelSet>>,
    /// One-vs-rest membership models, indexed `[group][fold]`.
    membership: Vec<Vec<LinearModel>>,
}

fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, i) in idx.into_iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

pub fn fit_nuisances(ds: &Dataset, cfg: &NuisanceConfig) -> Result<FittedNuisance> {
    cfg.validate()?;
    let k = cfg.folds;
    if k > ds.n() {
        return Err(Error::Domain(format!("{k} folds for {} rows", ds.n())));
    }
    let n_groups = ds.n_groups();
    let fold_of = if k == 1 { vec![0; ds.n()] } else { fold_assignment(ds.n(), k, cfg.seed) };
    let features: Vec<Vec<f64>> = ds.observations().iter().map(|o| o.x.clone()).collect();
    let binary_y = ds.is_binary_outcome();
    let obs = ds.observations();

    let in_train = |i: usize, fold: usize| k == 1 || fold_of[i] != fold;
    let group_name = |g: usize| ds.group_set()[g].clone();

    // Empty (r, a) strata make the responsivity models unidentified.
    for g in 0..n_groups {
        for r in [false, true] {
            for fold in 0..k {
                if !(0..ds.n()).any(|i| in_train(i, fold) && obs[i].a == g && obs[i].r == r) {
                    return Err(Error::NoOverlap { r: u8::from(r), group: group_name(g) });
                }
            }
        }
    }

    let jobs: Vec<(usize, usize)> = (0..n_groups).flat_map(|g| (0..k).map(move |f| (g, f))).collect();
    let fitted: Vec<Result<ModelSet>> = jobs
        .par_iter()
        .map(|&(g, fold)| {
            let wt = |keep: &dyn Fn(usize) -> bool| -> Vec<f64> {
                (0..ds.n())
                    .map(|i| if in_train(i, fold) && obs[i].a == g && keep(i) { 1.0 } else { 0.0 })
                    .collect()
            };
            let r_lab: Vec<bool> = obs.iter().map(|o| o.r).collect();
            let t_lab: Vec<bool> = obs.iter().map(|o| o.t).collect();
            let logit = |labels: &[bool], w: &[f64]| fit_logistic_with(&features, labels, w, cfg.reg, &cfg.optim);
            let e1 = logit(&r_lab, &wt(&|_| true))?;
            let p11 = logit(&t_lab, &wt(&|i| obs[i].r))?;
            let p10 = logit(&t_lab, &wt(&|i| !obs[i].r))?;
            let outcome = |t: bool| -> Result<LinearModel> {
                let w = wt(&|i| obs[i].t == t);
                if !w.iter().any(|v| *v > 0.0) {
                    return Err(Error::InvalidDataset(format!(
                        "no rows with T={} in group '{}'",
                        u8::from(t),
                        group_name(g)
                    )));
                }
                if binary_y {
                    let y: Vec<bool> = obs.iter().map(|o| o.y == 1.0).collect();
                    logit(&y, &w)
                } else {
                    let y: Vec<f64> = obs.iter().map(|o| o.y).collect();
                    fit_linear(&features, &y, &w, cfg.reg)
                }
            };
            let mu1 = outcome(true)?;
            let mu0 = outcome(false)?;
            let p1 = logit(&t_lab, &wt(&|_| true))?;
            Ok(ModelSet { models: [e1, p11, p10, mu1, mu0, p1] })
        })
        .collect();
    let mut sets = vec![Vec::with_capacity(k); n_groups];
    for ((g, _), m) in jobs.iter().zip(fitted) {
        sets[*g].push(m?);
    }

    let membership: Vec<Vec<LinearModel>> = if n_groups == 1 {
        vec![vec![LinearModel::constant(f64::INFINITY, Link::Logistic, ds.dim()); k]]
    } else {
        let fitted: Vec<Result<LinearModel>> = jobs
            .par_iter()
            .map(|&(g, fold)| {
                let labels: Vec<bool> = obs.iter().map(|o| o.a == g).collect();
                let w: Vec<f64> = (0..ds.n()).map(|i| if in_train(i, fold) { 1.0 } else { 0.0 }).collect();
                fit_logistic_with(&features, &labels, &w, cfg.reg.max(1e-8), &cfg.optim)
            })
            .collect();
        let mut out = vec![Vec::with_capacity(k); n_groups];
        for ((g, _), m) in jobs.iter().zip(fitted) {
            out[*g].push(m?);
        }
        out
    };

    Ok(FittedNuisance {
        groups: ds.group_set().to_vec(),
        freqs: ds.group_freqs(),
        clip: cfg.clip,
        train_id: ds.id(),
        fold_of,
        sets,
        membership,
    })
}

impl FittedNuisance {
    pub fn folds(&self) -> usize {
        self.sets.first().map_or(0, Vec::len)
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    /// Whether every underlying optimizer met its tolerance.
    pub fn converged(&self) -> bool {
        self.sets.iter().flatten().all(|s| s.models.iter().all(|m| m.converged))
            && self.membership.iter().flatten().all(|m| m.converged)
    }

    fn fold_for(&self, ds: &Dataset, row: usize) -> Option<usize> {
        (self.folds() > 1 && ds.id() == self.train_id).then(|| self.fold_of[row])
    }

    /// Unclipped prediction at covariates `x` for group `g`, averaged over folds.
    pub fn predict(&self, x: &[f64], g: usize) -> NuisancePoint {
        let k = self.folds() as f64;
        let pts: Vec<NuisancePoint> = self.sets[g].iter().map(|s| s.point(x)).collect();
        let avg = |f: fn(&NuisancePoint) -> f64| pts.iter().map(f).sum::<f64>() / k;
        NuisancePoint {
            e1: avg(|p| p.e1),
            p11: avg(|p| p.p11),
            p10: avg(|p| p.p10),
            mu1: avg(|p| p.mu1),
            mu0: avg(|p| p.mu0),
            p1: avg(|p| p.p1),
        }
    }

    fn membership_raw(&self, x: &[f64], fold: Option<usize>) -> Vec<f64> {
        let raw: Vec<f64> = self
            .membership
            .iter()
            .map(|ms| match fold {
                Some(f) => ms[f].predict(x),
                None => ms.iter().map(|m| m.predict(x)).sum::<f64>() / ms.len() as f64,
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "groups {}", self.groups.join(","));
        let _ = writeln!(s, "freq {}", join_f64(&self.freqs));
        let _ = writeln!(s, "clip {}", self.clip);
        let _ = writeln!(s, "train_id {:016x}", self.train_id);
        let folds: Vec<String> = self.fold_of.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(s, "fold_of {}", folds.join(","));
        let line = |s: &mut String, g: usize, f: usize, name: &str, m: &LinearModel| {
            let link = match m.link {
                Link::Logistic => "logistic",
                Link::Identity => "identity",
            };
            let _ = writeln!(
                s,
                "model {g} {f} {name} {link} {} {} {}",
                u8::from(m.converged),
                m.iterations,
                join_f64(&m.weights)
            );
        };
        for (g, sets) in self.sets.iter().enumerate() {
            for (f, set) in sets.iter().enumerate() {
                for (name, m) in MODEL_NAMES.iter().zip(&set.models) {
                    line(&mut s, g, f, name, m);
                }
                line(&mut s, g, f, "member", &self.membership[g][f]);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<FittedNuisance> {
        let bad = |line: usize, msg: &str| Error::Config { line, msg: msg.to_string() };
        let mut groups = Vec::new();
        let mut freqs = Vec::new();
        let mut clip = None;
        let mut train_id = None;
        let mut fold_of = Vec::new();
        let mut models: Vec<(usize, usize, String, LinearModel)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let tok: Vec<&str> = raw.split_whitespace().collect();
            match tok.as_slice() {
                [] => {}
                ["groups", g] => groups = g.split(',').map(str::to_string).collect(),
                ["freq", f] => freqs = parse_f64_list(f).ok_or_else(|| bad(ln, "bad frequencies"))?,
                ["clip", c] => clip = Some(c.parse::<f64>().map_err(|_| bad(ln, "bad clip"))?),
                ["train_id", h] => {
                    train_id = Some(u64::from_str_radix(h, 16).map_err(|_| bad(ln, "bad id"))?)
                }
                ["fold_of", f] => {
                    fold_of = f
                        .split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(ln, "bad fold list"))?
                }
                ["model", g, f, name, link, conv, iters, w] => {
                    let link = match *link {
                        "logistic" => Link::Logistic,
                        "identity" => Link::Identity,
                        _ => return Err(bad(ln, "unknown link")),
                    };
                    let m = LinearModel {
                        weights: parse_f64_list(w).ok_or_else(|| bad(ln, "bad weights"))?,
                        link,
                        converged: *conv == "1",
                        iterations: iters.parse().map_err(|_| bad(ln, "bad iteration count"))?,
                    };
                    let g = g.parse().map_err(|_| bad(ln, "bad group"))?;
                    let f = f.parse().map_err(|_| bad(ln, "bad fold"))?;
                    models.push((g, f, name.to_string(), m));
                }
                _ => return Err(bad(ln, "unrecognized line")),
            }
        }
        let n_groups = groups.len();
        let folds = models.iter().map(|m| m.1 + 1).max().unwrap_or(0);
        if n_groups == 0 || folds == 0 || freqs.len() != n_groups {
            return Err(Error::Format("incomplete nuisance bundle".into()));
        }
        let find = |g: usize, f: usize, name: &str| {
            models
                .iter()
                .find(|m| m.0 == g && m.1 == f && m.2 == name)
                .map(|m| m.3.clone())
                .ok_or_else(|| Error::Format(format!("missing model {name} for group {g} fold {f}")))
        };
        let mut sets = Vec::with_capacity(n_groups);
        let mut membership = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let mut s = Vec::with_capacity(folds);
            let mut m = Vec::with_capacity(folds);
            for f in 0..folds {
                let ms = [
                    find(g, f, "e1")?,
                    find(g, f, "p11")?,
                    find(g, f, "p10")?,
                    find(g, f, "mu1")?,
                    find(g, f, "mu0")?,
                    find(g, f, "p1")?,
                ];
                s.push(ModelSet { models: ms });
                m.push(find(g, f, "member")?);
            }
            sets.push(s);
            membership.push(m);
        }
        Ok(FittedNuisance {
            groups,
            freqs,
            clip: clip.ok_or_else(|| Error::Format("missing clip".into()))?,
            train_id: train_id.ok_or_else(|| Error::Format("missing train_id".into()))?,
            fold_of,
            sets,
            membership,
        })
    }
}

impl Nuisance for FittedNuisance {
    fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn group_freq(&self, g: usize) -> f64 {
        self.freqs[g]
    }

    fn at_row(&self, ds: &Dataset, row: usize, g: usize) -> NuisancePoint {
        let x = &ds.obs(row).x;
        let p = match self.fold_for(ds, row) {
            Some(f) => self.sets[g][f].point(x),
            None => self.predict(x, g),
        };
        clip_point(p, self.clip)
    }

    fn membership(&self, ds: &Dataset, row: usize, g: usize) -> f64 {
        self.membership_raw(&ds.obs(row).x, self.fold_for(ds, row))[g]
    }

    fn clip(&self) -> f64 {
        self.clip
    }
}
