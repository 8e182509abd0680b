use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CostSpec, Schema};
use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::estimators::PseudoKind;
use crate::nuisance::NuisanceConfig;
use crate::optim::OptimOptions;
use crate::redfair::{PolicyClass, RedfairParams};
use crate::threshold::SweepEstimator;
use crate::util::parse_f64_list;

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
    used: Cell<bool>,
}

/// Sectioned `key = value` text. Lines starting with `#` are comments.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split(" #").next().unwrap_or("").trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(name) = s.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(config_err(line, "unterminated section header"));
                };
                let name = name.trim().to_string();
                if cfg.sections.contains_key(&name) {
                    return Err(config_err(line, format!("section [{name}] appears twice")));
                }
                cfg.sections.insert(name.clone(), (line, BTreeMap::new()));
                current = Some(name);
                continue;
            }
            let Some((key, value)) = s.split_once('=') else {
                return Err(config_err(line, format!("expected 'key = value', found '{s}'")));
            };
            let Some(section) = &current else {
                return Err(config_err(line, "key outside of any section"));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() || value.is_empty() {
                return Err(config_err(line, "empty key or value"));
            }
            let entries = &mut cfg.sections.get_mut(section).expect("section exists").1;
            if entries.contains_key(&key) {
                return Err(config_err(line, format!("key '{key}' repeated in [{section}]")));
            }
            entries.insert(key, Entry { value, line, used: Cell::new(false) });
        }
        Ok(cfg)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        let e = self.sections.get(section)?.1.get(key)?;
        e.used.set(true);
        Some(e)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn section_line(&self, section: &str) -> usize {
        self.sections.get(section).map_or(0, |s| s.0)
    }

    pub fn line_of(&self, section: &str, key: &str) -> usize {
        self.sections.get(section).and_then(|s| s.1.get(key)).map_or(0, |e| e.line)
    }

    pub fn str(&self, section: &str, key: &str) -> Option<&str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    pub fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| config_err(e.line, format!("cannot parse '{}' for {section}.{key}", e.value))),
        }
    }

    pub fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => parse_f64_list(&e.value)
                .map(Some)
                .ok_or_else(|| config_err(e.line, format!("expected comma-separated numbers for {section}.{key}"))),
        }
    }

    /// First key that no accessor asked for.
    pub fn check_all_used(&self) -> Result<()> {
        for (name, (_, entries)) in &self.sections {
            for (key, e) in entries {
                if !e.used.get() {
                    return Err(config_err(e.line, format!("unknown key '{key}' in [{name}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Simulate { dgp: DgpSpec, n: usize },
    Ingest { csv: PathBuf, schema: Schema },
}

#[derive(Debug, Clone)]
pub enum NuisanceChoice {
    /// True nuisances of the simulated design.
    Oracle { clip: f64 },
    Fit(NuisanceConfig),
    /// A bundle written by the `fit` command.
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    None,
    Disparity,
    TreatmentParity,
    ResponderParity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintConfig {
    pub kind: ConstraintKind,
    pub eps: Option<f64>,
    pub covariate_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub estimator: SweepEstimator,
    pub lambda_grid: Option<Vec<f64>>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustConfig {
    pub threshold: f64,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    Never,
    Always,
    Threshold { penalty: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub cost: CostSpec,
    pub nuisance: NuisanceChoice,
    pub constraint: ConstraintConfig,
    pub sweep: SweepConfig,
    pub solver: RedfairParams,
    pub robust: RobustConfig,
    pub policy: PolicyChoice,
    pub seed: u64,
    pub out: PathBuf,
    /// Line of the `[constraint]` header, for compatibility errors.
    pub constraint_line: usize,
}

fn pair(cfg: &ConfigFile, section: &str, key: &str, default: f64) -> Result<[f64; 2]> {
    match cfg.list(section, key)? {
        None => Ok([default; 2]),
        Some(v) if v.len() == 1 => Ok([v[0]; 2]),
        Some(v) if v.len() == 2 => Ok([v[0], v[1]]),
        Some(_) => Err(config_err(cfg.line_of(section, key), format!("{section}.{key} takes one or two numbers"))),
    }
}

fn choice<T: FromStr<Err = Error>>(cfg: &ConfigFile, section: &str, key: &str) -> Result<Option<T>> {
    match cfg.str(section, key) {
        None => Ok(None),
        Some(s) => s.parse::<T>().map(Some).map_err(|e| config_err(cfg.line_of(section, key), e.to_string())),
    }
}

impl ExperimentConfig {
    /// Parses a config; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let cfg = ConfigFile::parse(text)?;
        let path = |section: &str, key: &str| cfg.str(section, key).map(|p| base_dir.join(p));

        let seed = cfg.parsed::<u64>("run", "seed")?.unwrap_or(0);
        let out = path("run", "out").unwrap_or_else(|| PathBuf::from("out"));

        let mode = cfg.str("data", "mode").unwrap_or("simulate").to_string();
        let source = match mode.as_str() {
            "simulate" => {
                if cfg.str("data", "csv").is_some() {
                    return Err(config_err(cfg.line_of("data", "csv"), "simulate mode takes a dgp, not a csv"));
                }
                let Some(dgp_path) = path("data", "dgp") else {
                    return Err(config_err(cfg.section_line("data"), "simulate mode needs data.dgp"));
                };
                let text = std::fs::read_to_string(&dgp_path)
                    .map_err(|e| config_err(cfg.line_of("data", "dgp"), format!("{}: {e}", dgp_path.display())))?;
                let n = cfg.parsed::<usize>("data", "n")?.unwrap_or(10_000);
                if n == 0 {
                    return Err(config_err(cfg.line_of("data", "n"), "n must be positive"));
                }
                DataSource::Simulate { dgp: DgpSpec::parse(&text)?, n }
            }
            "ingest" => {
                if cfg.str("data", "dgp").is_some() {
                    return Err(config_err(cfg.line_of("data", "dgp"), "ingest mode takes a csv, not a dgp"));
                }
                let (Some(csv), Some(schema_path)) = (path("data", "csv"), path("data", "schema")) else {
                    return Err(config_err(cfg.section_line("data"), "ingest mode needs data.csv and data.schema"));
                };
                let text = std::fs::read_to_string(&schema_path)
                    .map_err(|e| config_err(cfg.line_of("data", "schema"), format!("{}: {e}", schema_path.display())))?;
                DataSource::Ingest { csv, schema: Schema::parse(&text)? }
            }
            other => return Err(config_err(cfg.line_of("data", "mode"), format!("unknown data mode '{other}'"))),
        };

        let cost = CostSpec::new(
            cfg.parsed("cost", "w_y")?.unwrap_or(1.0),
            cfg.parsed("cost", "w_t")?.unwrap_or(0.0),
            cfg.parsed("cost", "w_r")?.unwrap_or(0.0),
        )
        .map_err(|e| config_err(cfg.section_line("cost"), e.to_string()))?;

        let clip = cfg.parsed("nuisance", "clip")?.unwrap_or(0.01);
        let default_source = if matches!(source, DataSource::Simulate { .. }) { "oracle" } else { "fit" };
        let nuisance_line = cfg.line_of("nuisance", "source");
        let nuisance = match cfg.str("nuisance", "source").unwrap_or(default_source) {
            "oracle" => {
                if !matches!(source, DataSource::Simulate { .. }) {
                    return Err(config_err(nuisance_line, "oracle nuisances need simulate mode"));
                }
                NuisanceChoice::Oracle { clip }
            }
            "fit" => {
                let defaults = NuisanceConfig::default();
                let c = NuisanceConfig {
                    folds: cfg.parsed("nuisance", "folds")?.unwrap_or(defaults.folds),
                    reg: cfg.parsed("nuisance", "reg")?.unwrap_or(defaults.reg),
                    clip,
                    seed: cfg.parsed("nuisance", "seed")?.unwrap_or(seed),
                    optim: OptimOptions {
                        max_iter: cfg.parsed("nuisance", "max_iter")?.unwrap_or(defaults.optim.max_iter),
                        tol: cfg.parsed("nuisance", "tol")?.unwrap_or(defaults.optim.tol),
                    },
                };
                c.validate().map_err(|e| config_err(cfg.section_line("nuisance"), e.to_string()))?;
                NuisanceChoice::Fit(c)
            }
            "file" => match path("nuisance", "path") {
                Some(p) => NuisanceChoice::File(p),
                None => return Err(config_err(nuisance_line, "nuisance source 'file' needs nuisance.path")),
            },
            other => return Err(config_err(nuisance_line, format!("unknown nuisance source '{other}'"))),
        };
        if !(0.0..0.5).contains(&clip) {
            return Err(config_err(cfg.line_of("nuisance", "clip"), "clip must lie in [0, 0.5)"));
        }

        let kind = match cfg.str("constraint", "type").unwrap_or("disparity") {
            "none" => ConstraintKind::None,
            "disparity" => ConstraintKind::Disparity,
            "treatment_parity" => ConstraintKind::TreatmentParity,
            "responder_parity" => ConstraintKind::ResponderParity,
            other => {
                return Err(config_err(cfg.line_of("constraint", "type"), format!("unknown constraint type '{other}'")))
            }
        };
        let constraint = ConstraintConfig {
            kind,
            eps: cfg.parsed("constraint", "eps")?,
            covariate_only: cfg.parsed("constraint", "covariate_only")?.unwrap_or(false),
        };

        let estimator = match cfg.str("sweep", "estimator").unwrap_or("dm") {
            "dm" => SweepEstimator::Dm,
            "dr" => SweepEstimator::Dr,
            other => return Err(config_err(cfg.line_of("sweep", "estimator"), format!("unknown estimator '{other}'"))),
        };
        let sweep = SweepConfig {
            estimator,
            lambda_grid: cfg.list("sweep", "lambda_grid")?,
            points: cfg.parsed("sweep", "points")?.unwrap_or(21),
        };
        if sweep.points == 0 {
            return Err(config_err(cfg.line_of("sweep", "points"), "points must be positive"));
        }

        let d = RedfairParams::default();
        let solver = RedfairParams {
            bound: cfg.parsed("solver", "bound")?.unwrap_or(d.bound),
            gap_target: cfg.parsed("solver", "gap")?,
            step: cfg.parsed("solver", "step")?,
            max_iter: cfg.parsed("solver", "max_iter")?.unwrap_or(d.max_iter),
            alpha: cfg.parsed("solver", "alpha")?.unwrap_or(d.alpha),
            slack_constant: cfg.parsed("solver", "slack_constant")?.unwrap_or(d.slack_constant),
            class: choice::<PolicyClass>(&cfg, "solver", "class")?.unwrap_or(d.class),
            pseudo: choice::<PseudoKind>(&cfg, "solver", "pseudo")?.unwrap_or(d.pseudo),
            trace_stride: cfg.parsed("solver", "trace_stride")?.unwrap_or(d.trace_stride),
            seed,
            optim: d.optim,
        };
        solver.validate().map_err(|e| config_err(cfg.section_line("solver"), e.to_string()))?;

        let robust = RobustConfig {
            threshold: cfg.parsed("robust", "threshold")?.unwrap_or(0.01),
            lower: pair(&cfg, "robust", "lower", 0.0)?,
            upper: pair(&cfg, "robust", "upper", 1.0)?,
            monotone: cfg.parsed("robust", "monotone")?.unwrap_or(false),
        };
        if (0..2).any(|r| !(0.0 <= robust.lower[r] && robust.lower[r] <= robust.upper[r] && robust.upper[r] <= 1.0)) {
            return Err(config_err(cfg.section_line("robust"), "robust bounds need 0 ≤ lower ≤ upper ≤ 1"));
        }

        let policy = match cfg.str("policy", "rule").unwrap_or("threshold") {
            "never" => PolicyChoice::Never,
            "always" => PolicyChoice::Always,
            "threshold" => PolicyChoice::Threshold { penalty: cfg.parsed("policy", "penalty")?.unwrap_or(0.0) },
            "file" => match path("policy", "path") {
                Some(p) => PolicyChoice::File(p),
                None => return Err(config_err(cfg.line_of("policy", "rule"), "policy rule 'file' needs policy.path")),
            },
            other => return Err(config_err(cfg.line_of("policy", "rule"), format!("unknown policy rule '{other}'"))),
        };

        cfg.check_all_used()?;
        Ok(ExperimentConfig {
            source,
            cost,
            nuisance,
            constraint,
            sweep,
            solver,
            robust,
            policy,
            seed,
            out,
            constraint_line: cfg.section_line("constraint"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(0, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Overrides the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.solver.seed = seed;
        if let NuisanceChoice::Fit(c) = &mut self.nuisance {
            c.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = ConfigFile::parse("# top\n[a]\nx = 1 # trailing\n\n[b]\ny=two\n").unwrap();
        assert_eq!(c.parsed::<f64>("a", "x").unwrap(), Some(1.0));
        assert_eq!(c.str("b", "y"), Some("two"));
        assert_eq!(c.line_of("b", "y"), 6);
        c.check_all_used().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        match ConfigFile::parse("[a]\nx = 1\nnonsense\n") {
            Err(Error::Config { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match ConfigFile::parse("x = 1\n") {
            Err(Error::Config { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let c = ConfigFile::parse("[a]\nx = 1\ny = 2\n").unwrap();
        let _ = c.str("a", "x");
        match c.check_all_used() {
            Err(Error::Config { line: 3, msg }) => assert!(msg.contains("'y'")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ingest_needs_schema() {
        let e = ExperimentConfig::parse("[data]\nmode = ingest\ncsv = d.csv\n", Path::new(".")).unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }), "{e}");
    }

    #[test]
    fn oracle_requires_simulation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s.txt"), "group=g\nr=r\nt=t\ny=y\ncovariates=x\n").unwrap();
        let text = "[data]\nmode = ingest\ncsv = d.csv\nschema = s.txt\n[nuisance]\nsource = oracle\n";
        let e = ExperimentConfig::parse(text, dir.path()).unwrap_err();
        assert!(matches!(e, Error::Config { line: 6, .. }), "{e}");
    }
}
