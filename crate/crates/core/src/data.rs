//! Canonical data model for encouragement datasets: observations, CSV
//! ingestion, cost weights, and an empirical overlap screen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::util::Fnv;

/// One unit: covariates, group index into the dataset's `group_set`,
/// recommendation, realized treatment, and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub a: usize,
    pub r: bool,
    pub t: bool,
    pub y: f64,
}

/// Exact identity of a covariate cell `(x, a)`. Covariates are compared
/// bitwise, which is what discrete synthetic designs need.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub x: Vec<u64>,
    pub group: usize,
}

impl CellKey {
    pub fn new(x: &[f64], group: usize) -> Self {
        CellKey {
            x: x.iter().map(|v| v.to_bits()).collect(),
            group,
        }
    }

    pub fn covariates(&self) -> Vec<f64> {
        self.x.iter().map(|b| f64::from_bits(*b)).collect()
    }
}

/// Immutable collection of observations sharing one covariate dimension.
#[derive(Debug, Clone)]
pub struct Dataset {
    observations: Vec<Observation>,
    group_set: Vec<String>,
    covariate_names: Vec<String>,
    group_counts: Vec<usize>,
    id: u64,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        group_set: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = covariate_names.len();
        let mut group_counts = vec![0usize; group_set.len()];
        let mut h = Fnv::default();
        for (i, o) in observations.iter().enumerate() {
            if o.x.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "row {} has {} covariates, expected {dim}",
                    i + 1,
                    o.x.len()
                )));
            }
            if o.x.iter().any(|v| !v.is_finite()) || !o.y.is_finite() {
                return Err(Error::InvalidDataset(format!("row {} has a non-finite value", i + 1)));
            }
            if o.a >= group_set.len() {
                return Err(Error::InvalidDataset(format!(
                    "row {} has group index {} outside the group set",
                    i + 1,
                    o.a
                )));
            }
            group_counts[o.a] += 1;
            for v in &o.x {
                h.write_f64(*v);
            }
            h.write(&(o.a as u64).to_le_bytes());
            h.write(&[o.r as u8, o.t as u8]);
            h.write_f64(o.y);
        }
        if let Some(g) = group_counts.iter().position(|c| *c == 0) {
            return Err(Error::InvalidDataset(format!(
                "group '{}' has no observations",
                group_set[g]
            )));
        }
        for name in &group_set {
            h.write(name.as_bytes());
        }
        Ok(Dataset {
            observations,
            group_set,
            covariate_names,
            group_counts,
            id: h.finish(),
        })
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn dim(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn obs(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn group_set(&self) -> &[String] {
        &self.group_set
    }

    pub fn n_groups(&self) -> usize {
        self.group_set.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    /// Empirical group frequencies; they sum to one.
    pub fn group_freqs(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.group_counts.iter().map(|c| *c as f64 / n).collect()
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.group_set.iter().position(|g| g == label)
    }

    /// Content fingerprint, fixed at construction.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn cell_key(&self, i: usize) -> CellKey {
        let o = &self.observations[i];
        CellKey::new(&o.x, o.a)
    }

    pub fn is_binary_outcome(&self) -> bool {
        self.observations.iter().all(|o| o.y == 0.0 || o.y == 1.0)
    }

    /// Rows at the given indices, keeping the group set and covariate names.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let obs = idx.iter().map(|i| self.observations[*i].clone()).collect();
        Dataset::new(obs, self.group_set.clone(), self.covariate_names.clone())
    }
}

/// Linear utility weights. The crate always maximizes expected
/// `w_y·y + w_t·t + w_r·r`; costs are negative weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSpec {
    pub w_y: f64,
    pub w_t: f64,
    pub w_r: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec { w_y: 1.0, w_t: 0.0, w_r: 0.0 }
    }
}

impl CostSpec {
    pub fn new(w_y: f64, w_t: f64, w_r: f64) -> Result<Self> {
        if !(w_y.is_finite() && w_t.is_finite() && w_r.is_finite()) {
            return Err(Error::Domain("cost weights must be finite".into()));
        }
        Ok(CostSpec { w_y, w_t, w_r })
    }

    /// Realized utility `u(r, t, y)`.
    pub fn utility(&self, r: bool, t: bool, y: f64) -> f64 {
        self.w_y * y + self.w_t * f64::from(u8::from(t)) + self.w_r * f64::from(u8::from(r))
    }

    /// Regression utility `w_y·μ_t + w_t·t + w_r·r` for a mean outcome `mu_t`.
    pub fn mean_utility(&self, r: bool, t: bool, mu_t: f64) -> f64 {
        self.utility(r, t, mu_t)
    }

    /// Utility-scale treatment effect `w_y(μ1−μ0) + w_t`.
    pub fn effect(&self, mu1: f64, mu0: f64) -> f64 {
        self.w_y * (mu1 - mu0) + self.w_t
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub group: String,
    pub r: String,
    pub t: String,
    pub y: String,
    pub covariates: Vec<String>,
}

impl Schema {
    /// Parses `key=value` lines (`group`, `r`, `t`, `y`, `covariates`).
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Schema> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |k: &str| {
            map.get(k)
                .cloned()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::Schema(format!("schema is missing '{k}'")))
        };
        let covariates: Vec<String> = take("covariates")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if covariates.is_empty() {
            return Err(Error::Schema("schema needs at least one covariate".into()));
        }
        Ok(Schema {
            group: take("group")?,
            r: take("r")?,
            t: take("t")?,
            y: take("y")?,
            covariates,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "group={}\nr={}\nt={}\ny={}\ncovariates={}\n",
            self.group,
            self.r,
            self.t,
            self.y,
            self.covariates.join(",")
        )
    }

    /// Schema matching the column layout produced by [`write_dataset`].
    pub fn for_dataset(ds: &Dataset) -> Schema {
        Schema {
            group: "group".into(),
            r: "r".into(),
            t: "t".into(),
            y: "y".into(),
            covariates: ds.covariate_names().to_vec(),
        }
    }
}

fn parse_binary(v: &str, row: usize, col: &str) -> Result<bool> {
    match v.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            row,
            msg: format!("column '{col}' must be 0 or 1, got '{other}'"),
        }),
    }
}

fn parse_real(v: &str, row: usize, col: &str) -> Result<f64> {
    let v = v.trim();
    if v.is_empty() || v.eq_ignore_ascii_case("na") {
        return Err(Error::Parse { row, msg: format!("missing value in column '{col}'") });
    }
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Parse { row, msg: format!("column '{col}' has non-numeric value '{v}'") }),
    }
}

/// Reads a comma-delimited UTF-8 CSV with a header row. Rows keep file
/// order; non-numeric covariates are one-hot encoded with levels in sorted
/// order (column names `name=level`); group labels are sorted likewise.
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Format(format!("cannot read CSV header: {e}"))),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let gi = col(&schema.group)?;
    let ri = col(&schema.r)?;
    let ti = col(&schema.t)?;
    let yi = col(&schema.y)?;
    let xi: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: k + 1, msg: e.to_string() })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // Decide column kinds before parsing rows.
    let mut categorical: Vec<Option<Vec<String>>> = Vec::with_capacity(xi.len());
    for (c, &j) in xi.iter().enumerate() {
        let numeric = records.iter().all(|r| {
            let v = r[j].trim();
            v.is_empty() || v.eq_ignore_ascii_case("na") || v.parse::<f64>().is_ok()
        });
        if numeric {
            categorical.push(None);
        } else {
            let mut levels = BTreeSet::new();
            for (row, r) in records.iter().enumerate() {
                let v = r[j].trim();
                if v.is_empty() || v.eq_ignore_ascii_case("na") {
                    return Err(Error::Parse {
                        row: row + 1,
                        msg: format!("missing value in column '{}'", schema.covariates[c]),
                    });
                }
                levels.insert(v.to_string());
            }
            categorical.push(Some(levels.into_iter().collect()));
        }
    }
    let mut names = Vec::new();
    for (c, kind) in categorical.iter().enumerate() {
        match kind {
            None => names.push(schema.covariates[c].clone()),
            Some(levels) => {
                for l in levels {
                    names.push(format!("{}={l}", schema.covariates[c]));
                }
            }
        }
    }

    let groups: Vec<String> = records
        .iter()
        .map(|r| r[gi].trim().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(row) = records.iter().position(|r| r[gi].trim().is_empty()) {
        return Err(Error::Parse { row: row + 1, msg: "missing group label".into() });
    }

    let mut obs = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        let row = k + 1;
        let mut x = Vec::with_capacity(names.len());
        for (c, &j) in xi.iter().enumerate() {
            match &categorical[c] {
                None => x.push(parse_real(&rec[j], row, &schema.covariates[c])?),
                Some(levels) => {
                    let v = rec[j].trim();
                    x.extend(levels.iter().map(|l| if l == v { 1.0 } else { 0.0 }));
                }
            }
        }
        let label = rec[gi].trim();
        let a = groups.iter().position(|g| g == label).expect("label collected above");
        obs.push(Observation {
            x,
            a,
            r: parse_binary(&rec[ri], row, &schema.r)?,
            t: parse_binary(&rec[ti], row, &schema.t)?,
            y: parse_real(&rec[yi], row, &schema.y)?,
        });
    }
    Dataset::new(obs, groups, names)
}

/// Writes the dataset as CSV (covariates, then `group,r,t,y`). Reals use the
/// shortest representation that parses back to the same bits.
pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let mut header: Vec<String> = ds.covariate_names().to_vec();
    header.extend(["group", "r", "t", "y"].iter().map(|s| s.to_string()));
    writeln!(out, "{}", header.join(","))?;
    for o in ds.observations() {
        let mut fields: Vec<String> = o.x.iter().map(|v| format!("{v}")).collect();
        fields.push(ds.group_set()[o.a].clone());
        fields.push(u8::from(o.r).to_string());
        fields.push(u8::from(o.t).to_string());
        fields.push(format!("{}", o.y));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Empirical overlap screen.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n: usize,
    pub groups: Vec<String>,
    pub group_counts: Vec<usize>,
    /// Empirical P(R=1 | A=a); one entry per group.
    pub p_r1_given_a: Vec<f64>,
    /// Counts indexed `[r][t][a]`.
    pub cell_counts: [[Vec<usize>; 2]; 2],
    /// Empirical P(T=1 | R=r, A=a), `None` where the `(r, a)` cell is empty.
    pub p_t1_given_ra: [Vec<Option<f64>>; 2],
    /// `(r, a)` cells with no observations: candidate no-overlap regions.
    pub empty_cells: Vec<(u8, usize)>,
}

impl ValidationReport {
    pub fn nonzero_cells(&self) -> usize {
        self.cell_counts.iter().flatten().flatten().filter(|c| **c > 0).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}", self.n)?;
        for (a, g) in self.groups.iter().enumerate() {
            writeln!(
                f,
                "group {g}: count {} P(R=1|A) {:.4}",
                self.group_counts[a], self.p_r1_given_a[a]
            )?;
        }
        for (r, a) in &self.empty_cells {
            writeln!(f, "flag: no observations with R={r} in group {}", self.groups[*a])?;
        }
        Ok(())
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let g = ds.n_groups();
    let mut cells = [[vec![0usize; g], vec![0usize; g]], [vec![0usize; g], vec![0usize; g]]];
    for o in ds.observations() {
        cells[o.r as usize][o.t as usize][o.a] += 1;
    }
    let counts = ds.group_counts().to_vec();
    let p_r1 = (0..g)
        .map(|a| (cells[1][0][a] + cells[1][1][a]) as f64 / counts[a] as f64)
        .collect();
    let mut p_t1: [Vec<Option<f64>>; 2] = [vec![None; g], vec![None; g]];
    let mut empty = Vec::new();
    for r in 0..2 {
        for a in 0..g {
            let tot = cells[r][0][a] + cells[r][1][a];
            if tot == 0 {
                empty.push((r as u8, a));
            } else {
                p_t1[r][a] = Some(cells[r][1][a] as f64 / tot as f64);
            }
        }
    }
    ValidationReport {
        n: ds.n(),
        groups: ds.group_set().to_vec(),
        group_counts: counts,
        p_r1_given_a: p_r1,
        cell_counts: cells,
        p_t1_given_ra: p_t1,
        empty_cells: empty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema::parse("group=g\nr=rec\nt=treat\ny=out\ncovariates=x1,x2\n").unwrap()
    }

    #[test]
    fn loads_rows_in_order() {
        let csv = "x1,x2,g,rec,treat,out\n0.5,1,a,0,0,1\n1.5,2,b,1,1,0\n2.5,3,a,1,0,1\n";
        let ds = load_dataset(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.n(), 3);
        let rs: Vec<bool> = ds.observations().iter().map(|o| o.r).collect();
        assert_eq!(rs, vec![false, true, true]);
        assert_eq!(ds.group_set(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.obs(2).x, vec![2.5, 3.0]);
    }

    #[test]
    fn bad_recommendation_names_row() {
        let mut csv = String::from("x1,x2,g,rec,treat,out\n");
        for i in 0..6 {
            let r = if i == 4 { "2" } else { "1" };
            csv.push_str(&format!("{i},0,a,{r},1,0\n"));
        }
        match load_dataset(csv.as_bytes(), &schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "x1,g,rec,treat,out\n0,a,0,0,1\n";
        assert!(matches!(load_dataset(csv.as_bytes(), &schema()), Err(Error::Schema(_))));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(matches!(load_dataset("".as_bytes(), &schema()), Err(Error::EmptyDataset)));
        let header_only = "x1,x2,g,rec,treat,out\n";
        assert!(matches!(load_dataset(header_only.as_bytes(), &schema()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn missing_values_are_rejected() {
        let csv = "x1,x2,g,rec,treat,out\n0,,a,0,0,1\n";
        assert!(matches!(load_dataset(csv.as_bytes(), &schema()), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn groups_and_levels_are_sorted() {
        let csv = "x1,x2,g,rec,treat,out\n0,red,b,0,0,1\n1,blue,a,1,1,0\n2,green,b,1,0,1\n";
        let ds = load_dataset(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.group_set(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.covariate_names(), &["x1", "x2=blue", "x2=green", "x2=red"]);
        assert_eq!(ds.obs(0).x, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(ds.obs(0).a, 1);
    }

    #[test]
    fn validate_flags_empty_stratum() {
        let csv = "x1,x2,g,rec,treat,out\n0,0,a,0,0,1\n0,0,a,1,1,1\n0,0,b,1,0,0\n0,0,b,1,1,0\n";
        let ds = load_dataset(csv.as_bytes(), &schema()).unwrap();
        let rep = validate(&ds);
        assert_eq!(rep.empty_cells, vec![(0, 1)]);
        assert_eq!(rep.p_r1_given_a, vec![0.5, 1.0]);
    }

    #[test]
    fn validate_balanced_has_no_flags() {
        let mut csv = String::from("x1,x2,g,rec,treat,out\n");
        for g in ["a", "b"] {
            for r in 0..2 {
                for t in 0..2 {
                    csv.push_str(&format!("0,0,{g},{r},{t},1\n"));
                }
            }
        }
        let ds = load_dataset(csv.as_bytes(), &schema()).unwrap();
        let rep = validate(&ds);
        assert_eq!(rep.nonzero_cells(), 8);
        assert!(rep.empty_cells.is_empty());
        assert_eq!(validate(&ds), rep);
    }

    #[test]
    fn validate_single_row() {
        let csv = "x1,x2,g,rec,treat,out\n0,0,a,1,0,1\n";
        let ds = load_dataset(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(validate(&ds).nonzero_cells(), 1);
    }

    #[test]
    fn write_then_load_is_identity() {
        let obs = vec![
            Observation { x: vec![0.1, 1.0 / 3.0], a: 0, r: true, t: false, y: 2.5e-17 },
            Observation { x: vec![-7.25, 1e300], a: 1, r: false, t: true, y: -0.3 },
        ];
        let ds = Dataset::new(obs, vec!["a".into(), "b".into()], vec!["u".into(), "v".into()]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = load_dataset(buf.as_slice(), &Schema::for_dataset(&ds)).unwrap();
        assert_eq!(back.observations(), ds.observations());
        assert_eq!(back.id(), ds.id());
    }

    #[test]
    fn schema_requires_covariates() {
        assert!(Schema::parse("group=g\nr=r\nt=t\ny=y\n").is_err());
    }
}
