//! Trial data model, CSV ingestion/validation, and derivation of observed
//! compliance classes under one-way noncompliance.
//!
//! One-way noncompliance means the control arm has no access to treatment:
//! z=0 forces d=0, so the compliance class is observed exactly in the z=1
//! arm (complier iff d=1) and latent in the z=0 arm.

use std::collections::HashMap;
use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplianceClass {
    Complier,
    NeverTaker,
}

impl ComplianceClass {
    /// 1 for a complier, 0 for a never-taker.
    pub fn indicator(self) -> u8 {
        match self {
            ComplianceClass::Complier => 1,
            ComplianceClass::NeverTaker => 0,
        }
    }

    pub fn from_indicator(v: u8) -> ComplianceClass {
        if v == 1 {
            ComplianceClass::Complier
        } else {
            ComplianceClass::NeverTaker
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// One participant. `y: None` encodes a missing outcome; `c: None` a latent
/// compliance class. z and d are never missing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub id: u64,
    pub z: u8,
    pub d: u8,
    pub y: Option<f64>,
    pub x: Vec<f64>,
    pub c: Option<ComplianceClass>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<TrialRecord>,
    pub outcome_kind: OutcomeKind,
    pub covariate_names: Vec<String>,
}

/// Maps logical roles to CSV column names. Unmapped columns become
/// covariates unless an explicit covariate list is given.
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub id: Option<String>,
    pub z: String,
    pub d: String,
    pub y: String,
    /// None: every remaining column is a covariate.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            id: Some("id".into()),
            z: "z".into(),
            d: "d".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

impl Dataset {
    /// Checks every structural invariant; returns self for chaining.
    pub fn validate(&self) -> Result<&Self> {
        if self.records.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        let n1 = self.records.iter().filter(|r| r.z == 1).count();
        if n1 == 0 || n1 == self.records.len() {
            return Err(Error::Data("both arms must be nonempty".into()));
        }
        let p = self.covariate_names.len();
        for rec in &self.records {
            if rec.z > 1 || rec.d > 1 {
                return Err(Error::Data(format!("record {}: z and d must be 0/1", rec.id)));
            }
            if rec.z == 0 && rec.d == 1 {
                return Err(Error::Data(format!(
                    "record {}: one-way noncompliance violated (z=0 with d=1)",
                    rec.id
                )));
            }
            if rec.x.len() != p {
                return Err(Error::Data(format!(
                    "record {}: {} covariates, expected {p}",
                    rec.id,
                    rec.x.len()
                )));
            }
            if let Some(y) = rec.y {
                if !y.is_finite() {
                    return Err(Error::Data(format!("record {}: non-finite outcome", rec.id)));
                }
                if self.outcome_kind == OutcomeKind::Binary && y != 0.0 && y != 1.0 {
                    return Err(Error::Data(format!(
                        "record {}: binary outcome must be 0 or 1, got {y}",
                        rec.id
                    )));
                }
            }
            if rec.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("record {}: non-finite covariate", rec.id)));
            }
        }
        Ok(self)
    }

    /// Sets c from d in the z=1 arm and clears it in the z=0 arm.
    /// Idempotent.
    pub fn derive_compliance(&mut self) {
        for rec in &mut self.records {
            rec.c = if rec.z == 1 {
                Some(if rec.d == 1 { ComplianceClass::Complier } else { ComplianceClass::NeverTaker })
            } else {
                None
            };
        }
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn has_missing_y(&self) -> bool {
        self.records.iter().any(|r| r.y.is_none())
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("unknown covariate '{name}'")))
    }

    /// Fraction d=1 among z=1 records (observed compliance rate).
    pub fn observed_compliance_rate(&self) -> f64 {
        let (mut n1, mut d1) = (0usize, 0usize);
        for r in &self.records {
            if r.z == 1 {
                n1 += 1;
                d1 += r.d as usize;
            }
        }
        d1 as f64 / n1 as f64
    }
}

fn parse_binary(token: &str, column: &str, line: usize) -> Result<u8> {
    match token.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Data(format!(
            "row {line}: column '{column}' must be 0/1, got '{other}'"
        ))),
    }
}

fn parse_real(token: &str, column: &str, line: usize) -> Result<f64> {
    token.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!("row {line}: column '{column}' is not numeric: '{token}'"))
    })
}

/// True when a token encodes a missing value: empty cell or literal "NA".
fn is_na(token: &str) -> bool {
    let t = token.trim();
    t.is_empty() || t == "NA"
}

/// Reads a trial CSV. Lines starting with `#` are metadata comments and are
/// skipped. The y column may contain empty or "NA" cells for missing
/// outcomes; z and d must be complete and binary.
pub fn load_csv(path: &Path, outcome_kind: OutcomeKind, map: &ColumnMap) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(path)?;

    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col_index: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let need = |name: &str| -> Result<usize> {
        col_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing required column '{name}'")))
    };

    let zi = need(&map.z)?;
    let di = need(&map.d)?;
    let yi = need(&map.y)?;
    let idi = match &map.id {
        Some(name) => col_index.get(name.as_str()).copied(),
        None => None,
    };

    let covariate_names: Vec<String> = match &map.covariates {
        Some(names) => {
            for n in names {
                need(n)?;
            }
            names.clone()
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, h)| {
                *i != zi && *i != di && *i != yi && Some(*i) != idi && !h.is_empty() && map.id.as_deref() != Some(h.as_str())
            })
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cov_idx: Vec<usize> = covariate_names
        .iter()
        .map(|n| need(n))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (row_num, row) in reader.records().enumerate() {
        let row = row?;
        let line = row_num + 2; // header is line 1
        let field = |i: usize| row.get(i).unwrap_or("");

        // z and d may never be missing: an empty cell fails parse_binary.
        let z = parse_binary(field(zi), &map.z, line)?;
        let d = parse_binary(field(di), &map.d, line)?;
        let y_tok = field(yi);
        let y = if is_na(y_tok) { None } else { Some(parse_real(y_tok, &map.y, line)?) };
        let id = match idi {
            Some(i) => parse_real(field(i), "id", line)? as u64,
            None => row_num as u64 + 1,
        };
        let mut x = Vec::with_capacity(cov_idx.len());
        for (k, &i) in cov_idx.iter().enumerate() {
            if is_na(field(i)) {
                return Err(Error::Data(format!(
                    "row {line}: covariate '{}' is missing; only the outcome may be missing",
                    covariate_names[k]
                )));
            }
            x.push(parse_real(field(i), &covariate_names[k], line)?);
        }
        records.push(TrialRecord { id, z, d, y, x, c: None });
    }

    let ds = Dataset { records, outcome_kind, covariate_names };
    ds.validate()?;
    Ok(ds)
}

/// Writes a trial CSV: optional `# key: value` metadata comment lines, then
/// a header `id,z,d,y,<covariates...>`. Missing y becomes an empty cell.
pub fn write_csv(ds: &Dataset, path: &Path, metadata: &[(String, String)]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for (key, value) in metadata {
        writeln!(file, "# {key}: {value}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["id".to_string(), "z".into(), "d".into(), "y".into()];
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for rec in &ds.records {
        let mut row = vec![
            rec.id.to_string(),
            rec.z.to_string(),
            rec.d.to_string(),
            rec.y.map(|v| format!("{v}")).unwrap_or_default(),
        ];
        row.extend(rec.x.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-arm descriptive summary.
#[derive(Clone, Debug, Serialize)]
pub struct ArmSummary {
    pub arm: u8,
    pub n: usize,
    /// z=1 arm: % with d=0; z=0 arm: always 0 under one-way noncompliance.
    pub noncompliance_pct: f64,
    pub missing_y_pct: f64,
    pub y_mean: Option<f64>,
    pub y_sd: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryTable {
    pub arms: Vec<ArmSummary>,
    pub covariate_means: Vec<(String, f64)>,
}

pub fn observed_summary(ds: &Dataset) -> SummaryTable {
    let mut arms = Vec::new();
    for arm in [0u8, 1u8] {
        let recs: Vec<&TrialRecord> = ds.records.iter().filter(|r| r.z == arm).collect();
        let n = recs.len();
        let switched = recs.iter().filter(|r| r.d != r.z).count();
        let missing = recs.iter().filter(|r| r.y.is_none()).count();
        let ys: Vec<f64> = recs.iter().filter_map(|r| r.y).collect();
        let (y_mean, y_sd) = if ys.is_empty() {
            (None, None)
        } else {
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let sd = if ys.len() > 1 {
                let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (ys.len() - 1) as f64;
                Some(v.sqrt())
            } else {
                None
            };
            (Some(m), sd)
        };
        arms.push(ArmSummary {
            arm,
            n,
            noncompliance_pct: 100.0 * switched as f64 / n.max(1) as f64,
            missing_y_pct: 100.0 * missing as f64 / n.max(1) as f64,
            y_mean,
            y_sd,
        });
    }
    let covariate_means = ds
        .covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let m = ds.records.iter().map(|r| r.x[j]).sum::<f64>() / ds.n() as f64;
            (name.clone(), m)
        })
        .collect();
    SummaryTable { arms, covariate_means }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), contents).unwrap();
        f
    }

    #[test]
    fn load_complete_csv() {
        let f = write_tmp("id,z,d,y\n1,1,1,2.5\n2,1,0,1.0\n3,0,0,0.5\n4,0,0,1.5\n");
        let ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        assert_eq!(ds.n(), 4);
        assert!(!ds.has_missing_y());
        assert!(ds.covariate_names.is_empty());
    }

    #[test]
    fn empty_and_na_cells_parse_as_missing() {
        let f = write_tmp("id,z,d,y\n1,1,1,2.5\n2,1,0,1.0\n3,0,0,\n4,0,0,NA\n");
        let ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        assert!(ds.records[2].y.is_none());
        assert!(ds.records[3].y.is_none());
        assert_eq!(ds.records[0].y, Some(2.5));
    }

    #[test]
    fn one_way_violation_is_rejected() {
        let f = write_tmp("id,z,d,y\n1,1,1,2.5\n2,0,1,1.0\n3,0,0,0.5\n");
        let err = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("one-way noncompliance"), "got: {err}");
    }

    #[test]
    fn binary_outcome_range_is_enforced() {
        let f = write_tmp("id,z,d,y\n1,1,1,2\n2,1,0,1\n3,0,0,0\n");
        let err = load_csv(f.path(), OutcomeKind::Binary, &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("must be 0 or 1"), "got: {err}");
    }

    #[test]
    fn extra_columns_become_covariates() {
        let f = write_tmp("id,z,d,y,x2,age\n1,1,1,2.5,0.3,55\n2,1,0,1.0,-0.2,61\n3,0,0,0.5,0.0,47\n");
        let ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        assert_eq!(ds.covariate_names, vec!["x2".to_string(), "age".to_string()]);
        assert_eq!(ds.records[0].x, vec![0.3, 55.0]);
    }

    #[test]
    fn derive_compliance_sets_only_the_active_arm_and_is_idempotent() {
        let f = write_tmp("id,z,d,y\n1,1,1,2.5\n2,1,0,1.0\n3,0,0,0.5\n");
        let mut ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        ds.derive_compliance();
        assert_eq!(ds.records[0].c, Some(ComplianceClass::Complier));
        assert_eq!(ds.records[1].c, Some(ComplianceClass::NeverTaker));
        assert_eq!(ds.records[2].c, None);
        let snapshot = ds.clone();
        ds.derive_compliance();
        assert_eq!(ds, snapshot, "derive_compliance must be idempotent");
        let n_set = ds.records.iter().filter(|r| r.c.is_some()).count();
        let n_z1 = ds.records.iter().filter(|r| r.z == 1).count();
        assert_eq!(n_set, n_z1);
    }

    #[test]
    fn csv_round_trip_preserves_values_and_na() {
        let f = write_tmp("id,z,d,y,x2\n1,1,1,2.5,0.125\n2,1,0,,-1.5\n3,0,0,-0.333333333333333,9\n");
        let ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, out.path(), &[("seed".into(), "42".into())]).unwrap();
        let ds2 = load_csv(out.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        assert_eq!(ds, ds2, "round trip must preserve values bit-exactly");
        let raw = std::fs::read_to_string(out.path()).unwrap();
        assert!(raw.starts_with("# seed: 42\n"), "metadata comment missing: {raw}");
    }

    #[test]
    fn observed_summary_counts() {
        let f = write_tmp(
            "id,z,d,y\n1,0,0,1.0\n2,0,0,\n3,0,0,2.0\n4,0,0,3.0\n5,0,0,4.0\n6,1,1,1.0\n7,1,0,2.0\n8,1,0,3.0\n9,1,0,4.0\n10,1,1,5.0\n",
        );
        let ds = load_csv(f.path(), OutcomeKind::Continuous, &ColumnMap::default()).unwrap();
        let s = observed_summary(&ds);
        assert_eq!(s.arms[0].n, 5);
        assert!((s.arms[0].missing_y_pct - 20.0).abs() < 1e-12);
        assert!((s.arms[1].missing_y_pct - 0.0).abs() < 1e-12);
        assert!((s.arms[1].noncompliance_pct - 60.0).abs() < 1e-12);
    }
}
