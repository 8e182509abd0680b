//! Config-driven pipelines behind the command-line tool. Every command
//! writes its artifacts into one output directory together with
//! `manifest.txt`, which lists each file with its SHA-256 digest.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub use config::{
    ConfigFile, ConstraintConfig, ConstraintKind, DataSource, ExperimentConfig, NuisanceChoice, PolicyChoice,
    RobustConfig, SweepConfig,
};

use crate::data::{load_dataset, validate, write_dataset, Dataset, Schema};
use crate::dgp::{generate, oracle_value, OracleNuisance};
use crate::error::{Error, Result};
use crate::estimators::{cv_value, dm_value, dr_value, estimates_csv, ipw_value};
use crate::nuisance::{fit_nuisances, FittedNuisance, Nuisance, NuisanceConfig};
use crate::policy::{PolicySpec, RandomizedPolicy, ThresholdRule};
use crate::redfair::{
    make_disparity_constraint, make_responder_parity, make_treatment_parity, redfair, two_stage, ConstraintSystem,
    NuisanceSource, SaddleResult,
};
use crate::robust::{
    binary_constant_bound, bounds_csv, detect_overlap, robust_lp_objective, solve_robust_threshold, value_bounds,
    BoundsRow, UncertaintyMode, UncertaintySet,
};
use crate::threshold::{feasible_epsilon_range, feasible_epsilon_range_population, solve_threshold_covariate_only, solve_threshold, sweep_with};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    ThresholdSweep,
    Redfair,
    TwoStage,
    RobustBounds,
    CompareEstimators,
    FeasibleRange,
}

/// Process exit status for an error: 2 for configuration and input
/// problems, 3 for infeasible constraints, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Schema(_)
        | Error::Parse { .. }
        | Error::Spec(_)
        | Error::EmptyDataset
        | Error::InvalidDataset(_) => 2,
        Error::Infeasible { .. } => 3,
        _ => 1,
    }
}

/// Files written by one run, in write order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dir: PathBuf,
    /// `(file name, hex SHA-256)`.
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(name, hash)| format!("{hash}  {name}\n")).collect()
    }

    /// Recomputes every digest and reports the first mismatch.
    pub fn verify(&self) -> Result<()> {
        for (name, hash) in &self.entries {
            let bytes = fs::read(self.dir.join(name))?;
            if digest(&bytes) != *hash {
                return Err(Error::Format(format!("{name} does not match its manifest digest")));
            }
        }
        Ok(())
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file and a rename so readers never see a
/// partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Artifacts {
    dir: PathBuf,
    entries: Vec<(String, String)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.entries.push((name.to_string(), digest(contents.as_bytes())));
        Ok(())
    }

    fn finish(self) -> Result<Manifest> {
        let m = Manifest { dir: self.dir, entries: self.entries };
        write_atomic(&m.dir.join("manifest.txt"), m.to_text().as_bytes())?;
        Ok(m)
    }
}

/// `key = value` lines.
#[derive(Default)]
struct Summary(String);

impl Summary {
    fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {value}");
        self
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.source {
        DataSource::Simulate { dgp, n } => generate(dgp, *n, cfg.seed),
        DataSource::Ingest { csv, schema } => {
            let f = fs::File::open(csv).map_err(|e| Error::Schema(format!("cannot open {}: {e}", csv.display())))?;
            load_dataset(f, schema)
        }
    }
}

enum Eta {
    Oracle(OracleNuisance),
    Fitted(FittedNuisance),
}

impl Eta {
    fn get(&self) -> &dyn Nuisance {
        match self {
            Eta::Oracle(o) => o,
            Eta::Fitted(f) => f,
        }
    }
}

fn load_nuisance(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Eta> {
    match &cfg.nuisance {
        NuisanceChoice::Oracle { clip } => match &cfg.source {
            DataSource::Simulate { dgp, .. } => Ok(Eta::Oracle(OracleNuisance::new(dgp, *clip))),
            DataSource::Ingest { .. } => Err(Error::Config { line: 0, msg: "oracle nuisances need simulate mode".into() }),
        },
        NuisanceChoice::Fit(c) => Ok(Eta::Fitted(fit_nuisances(ds, c)?)),
        NuisanceChoice::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config { line: 0, msg: format!("{}: {e}", p.display()) })?;
            let f = FittedNuisance::from_text(&text)?;
            if f.groups() != ds.group_set() {
                return Err(Error::Schema("nuisance bundle was fitted on different groups".into()));
            }
            Ok(Eta::Fitted(f))
        }
    }
}

fn require_two_groups(cfg: &ExperimentConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.n_groups() != 2 {
        return Err(Error::Config {
            line: cfg.constraint_line,
            msg: format!("{what} needs exactly two groups, data has {}", ds.n_groups()),
        });
    }
    Ok(())
}

fn eps_or(cfg: &ExperimentConfig, what: &str) -> Result<f64> {
    cfg.constraint.eps.ok_or_else(|| Error::Config { line: cfg.constraint_line, msg: format!("{what} needs constraint.eps") })
}

/// `eta` is only read by responder parity.
fn constraint_system(cfg: &ExperimentConfig, ds: &Dataset, eta: Option<&dyn Nuisance>) -> Result<ConstraintSystem> {
    match cfg.constraint.kind {
        ConstraintKind::None => Ok(ConstraintSystem::unconstrained()),
        ConstraintKind::Disparity => {
            require_two_groups(cfg, ds, "the disparity constraint")?;
            make_disparity_constraint(eps_or(cfg, "the disparity constraint")?)
        }
        ConstraintKind::TreatmentParity => make_treatment_parity(ds.group_set(), eps_or(cfg, "treatment parity")?),
        ConstraintKind::ResponderParity => {
            let eta = eta.ok_or_else(|| Error::Domain("responder parity needs nuisances".into()))?;
            make_responder_parity(ds, eta, eps_or(cfg, "responder parity")?)
        }
    }
}

fn chosen_policy(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RandomizedPolicy> {
    Ok(match &cfg.policy {
        PolicyChoice::Never => PolicySpec::Constant(false).into(),
        PolicyChoice::Always => PolicySpec::Constant(true).into(),
        PolicyChoice::Threshold { penalty } => {
            require_two_groups(cfg, ds, "a threshold policy")?;
            let f = ds.group_freqs();
            PolicySpec::Threshold(ThresholdRule {
                penalty: *penalty,
                cost: cfg.cost,
                group_freq: [f[0], f[1]],
                covariate_only: cfg.constraint.covariate_only,
            })
            .into()
        }
        PolicyChoice::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config { line: 0, msg: format!("{}: {e}", p.display()) })?;
            RandomizedPolicy::from_text(&text)?
        }
    })
}

fn saddle_summary(s: &mut Summary, prefix: &str, r: &SaddleResult) {
    s.put(&format!("{prefix}value"), r.value)
        .put(&format!("{prefix}gap"), r.gap)
        .put(&format!("{prefix}gap_target"), r.gap_target)
        .put(&format!("{prefix}converged"), r.converged)
        .put(&format!("{prefix}best_response_converged"), r.best_response_converged)
        .put(&format!("{prefix}iterations"), r.iterations)
        .put(&format!("{prefix}step"), r.step)
        .put(&format!("{prefix}max_violation"), r.max_violation())
        .put(&format!("{prefix}components"), r.policy.components.len())
        .put(&format!("{prefix}lambda"), crate::util::join_f64(&r.lambda));
}

/// Runs one command and returns the manifest of what it wrote.
pub fn run(cfg: &ExperimentConfig, command: Command) -> Result<Manifest> {
    let ds = load_data(cfg)?;
    let mut out = Artifacts::new(&cfg.out)?;
    match command {
        Command::Simulate => {
            let mut csv = Vec::new();
            write_dataset(&ds, &mut csv)?;
            out.put("data.csv", &String::from_utf8(csv).map_err(|e| Error::Format(e.to_string()))?)?;
            out.put("schema.txt", &Schema::for_dataset(&ds).to_text())?;
            out.put("validation.txt", &validate(&ds).to_string())?;
        }
        Command::Fit => {
            let c = match &cfg.nuisance {
                NuisanceChoice::Fit(c) => c.clone(),
                _ => NuisanceConfig { seed: cfg.seed, ..NuisanceConfig::default() },
            };
            let f = fit_nuisances(&ds, &c)?;
            out.put("nuisance.txt", &f.to_text())?;
            let mut s = Summary::default();
            s.put("n", ds.n()).put("folds", f.folds()).put("converged", f.converged());
            out.put("summary.txt", &s.0)?;
        }
        Command::ThresholdSweep => {
            require_two_groups(cfg, &ds, "threshold-sweep")?;
            let eta = load_nuisance(cfg, &ds)?;
            let eta = eta.get();
            let mut s = Summary::default();
            let solution = match cfg.constraint.eps {
                Some(eps) => {
                    let sol = if cfg.constraint.covariate_only {
                        solve_threshold_covariate_only(&ds, eta, &cfg.cost, eps)?
                    } else {
                        solve_threshold(&ds, eta, &cfg.cost, eps)?
                    };
                    s.put("eps", eps)
                        .put("penalty", sol.penalty)
                        .put("dual_lambda", sol.lambda)
                        .put("value", sol.value)
                        .put("disparity", sol.disparity);
                    Some(sol)
                }
                None => None,
            };
            let grid = match &cfg.sweep.lambda_grid {
                Some(g) => g.clone(),
                None => {
                    let top = match &solution {
                        Some(sol) => sol.penalty,
                        None => {
                            let (lo, _) = feasible_epsilon_range(&ds, eta)?;
                            solve_threshold(&ds, eta, &cfg.cost, lo)?.penalty
                        }
                    };
                    let k = cfg.sweep.points;
                    if top > 0.0 && k > 1 {
                        (0..k).map(|i| top * i as f64 / (k - 1) as f64).collect()
                    } else {
                        vec![0.0]
                    }
                }
            };
            let curve = sweep_with(&ds, eta, &cfg.cost, &grid, cfg.sweep.estimator)?;
            out.put("tradeoff_curve.csv", &curve.to_csv())?;
            if let Some(sol) = solution {
                out.put("policy.txt", &RandomizedPolicy::from(sol.policy).to_text())?;
            }
            out.put("summary.txt", &s.0)?;
        }
        Command::Redfair => {
            let eta = load_nuisance(cfg, &ds)?;
            let sys = constraint_system(cfg, &ds, Some(eta.get()))?;
            let r = redfair(&ds, &sys, eta.get(), &cfg.cost, &cfg.solver)?;
            out.put("policy.txt", &r.policy.to_text())?;
            out.put("trace.csv", &r.trace_csv())?;
            let mut s = Summary::default();
            saddle_summary(&mut s, "", &r);
            out.put("summary.txt", &s.0)?;
        }
        Command::TwoStage => {
            let fitted;
            let source = match &cfg.nuisance {
                NuisanceChoice::Fit(c) => NuisanceSource::Fit(c),
                _ => {
                    fitted = load_nuisance(cfg, &ds)?;
                    NuisanceSource::Fixed(fitted.get())
                }
            };
            // Responder denominators need nuisances on the full sample.
            let sys = match source {
                NuisanceSource::Fixed(e) => constraint_system(cfg, &ds, Some(e))?,
                NuisanceSource::Fit(c) if cfg.constraint.kind == ConstraintKind::ResponderParity => {
                    constraint_system(cfg, &ds, Some(&fit_nuisances(&ds, c)?))?
                }
                NuisanceSource::Fit(_) => constraint_system(cfg, &ds, None)?,
            };
            let r = two_stage(&ds, &sys, source, &cfg.cost, &cfg.solver)?;
            out.put("policy.txt", &r.policy.to_text())?;
            out.put("trace.csv", &r.stage2.trace_csv())?;
            out.put("stage1_trace.csv", &r.stage1.trace_csv())?;
            let mut s = Summary::default();
            saddle_summary(&mut s, "stage1_", &r.stage1);
            saddle_summary(&mut s, "stage2_", &r.stage2);
            s.put("stage1_value_on_second_half", r.stage1_value)
                .put("eps_n", r.eps_n)
                .put("binding", r.binding.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
                .put("sigma2", crate::util::join_f64(&r.sigma2))
                .put("d_hat", crate::util::join_f64(&r.d_hat))
                .put("fallback", r.fallback);
            out.put("summary.txt", &s.0)?;
        }
        Command::RobustBounds => {
            let eta = load_nuisance(cfg, &ds)?;
            let eta = eta.get();
            let part = detect_overlap(&ds, eta, cfg.robust.threshold);
            let set = UncertaintySet {
                mode: UncertaintyMode::Constant { lower: cfg.robust.lower, upper: cfg.robust.upper },
                monotone: cfg.robust.monotone,
            };
            let pi = chosen_policy(cfg, &ds)?;
            let mut rows = Vec::new();
            let (lo, hi) = value_bounds(&ds, &pi, eta, &set, &part, &cfg.cost)?;
            rows.push(BoundsRow { policy_id: "policy".into(), lower: lo, upper: hi, eps: None, mode: "interval".into() });
            if ds.is_binary_outcome() && cfg.robust.lower[0] == cfg.robust.lower[1] && cfg.robust.upper[0] == cfg.robust.upper[1] {
                let (lo, hi) =
                    binary_constant_bound(&ds, &pi, eta, cfg.robust.lower[0], cfg.robust.upper[0], &part, &cfg.cost)?;
                rows.push(BoundsRow { policy_id: "policy".into(), lower: lo, upper: hi, eps: None, mode: "binary_constant".into() });
            }
            let lp = robust_lp_objective(&ds, &pi, eta, &set, &part, &cfg.cost)?;
            rows.push(BoundsRow { policy_id: "policy".into(), lower: lp, upper: hi, eps: None, mode: "robust_lp".into() });
            if let Some(eps) = cfg.constraint.eps {
                require_two_groups(cfg, &ds, "the robust threshold solver")?;
                let sol = solve_robust_threshold(&ds, eta, &set, &part, &cfg.cost, eps)?;
                let (_, up) = value_bounds(&ds, &sol.policy, eta, &set, &part, &cfg.cost)?;
                rows.push(BoundsRow { policy_id: "robust".into(), lower: sol.value, upper: up, eps: Some(eps), mode: "robust_lp".into() });
                out.put("policy.txt", &RandomizedPolicy::from(sol.policy).to_text())?;
            }
            out.put("bounds.csv", &bounds_csv(&rows))?;
            let mut s = Summary::default();
            s.put("nov_r0", part.count(false)).put("nov_r1", part.count(true));
            out.put("summary.txt", &s.0)?;
        }
        Command::CompareEstimators => {
            let eta = load_nuisance(cfg, &ds)?;
            let eta = eta.get();
            let pi = chosen_policy(cfg, &ds)?;
            let dm = dm_value(&ds, &pi, eta, &cfg.cost);
            let ipw = ipw_value(&ds, &pi, eta, &cfg.cost);
            let dr = dr_value(&ds, &pi, eta, &cfg.cost);
            let cv = cv_value(&ds, &pi, eta, &cfg.cost);
            out.put("estimates.csv", &estimates_csv(&[("dm", &dm), ("ipw", &ipw), ("dr", &dr), ("cv", &cv)]))?;
            let mut s = Summary::default();
            if let DataSource::Simulate { dgp, .. } = &cfg.source {
                s.put("oracle_value", oracle_value(dgp, &pi, &cfg.cost));
            }
            for (name, e) in [("dm", &dm), ("ipw", &ipw), ("dr", &dr), ("cv", &cv)] {
                if let Some(w) = &e.warning {
                    s.put(&format!("{name}_warning"), w);
                }
            }
            out.put("summary.txt", &s.0)?;
        }
        Command::FeasibleRange => {
            require_two_groups(cfg, &ds, "feasible-range")?;
            let eta = load_nuisance(cfg, &ds)?;
            let (lo, hi) = feasible_epsilon_range(&ds, eta.get())?;
            let mut s = Summary::default();
            s.put("min", lo).put("max", hi);
            if let DataSource::Simulate { dgp, .. } = &cfg.source {
                let (plo, phi) = feasible_epsilon_range_population(dgp)?;
                s.put("population_min", plo).put("population_max", phi);
            }
            out.put("feasible_range.txt", &s.0)?;
        }
    }
    out.finish()
}
