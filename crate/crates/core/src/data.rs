//! Observed samples `(Y, A, Z, X)` and their CSV representation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Type of the outcome column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// Values in {0, 1}.
    Binary,
    /// Values in {1, ..., k} with k >= 2.
    Categorical(usize),
    Continuous,
}

impl OutcomeKind {
    /// Number of discrete levels, `None` for a continuous outcome.
    pub fn levels(&self) -> Option<usize> {
        match self {
            OutcomeKind::Binary => Some(2),
            OutcomeKind::Categorical(k) => Some(*k),
            OutcomeKind::Continuous => None,
        }
    }

    /// Numeric value of the `r`-th level (0-based).
    pub fn level_value(&self, r: usize) -> f64 {
        match self {
            OutcomeKind::Binary => r as f64,
            _ => (r + 1) as f64,
        }
    }

    /// Level index of a discrete value.
    pub fn level_index(&self, y: f64) -> Option<usize> {
        let k = self.levels()?;
        let r = match self {
            OutcomeKind::Binary => y,
            _ => y - 1.0,
        };
        if r.fract() != 0.0 || r < 0.0 || r >= k as f64 {
            return None;
        }
        Some(r as usize)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "binary" {
            return Ok(OutcomeKind::Binary);
        }
        if s == "continuous" {
            return Ok(OutcomeKind::Continuous);
        }
        if let Some(k) = s.strip_prefix("categorical:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Validation(format!("bad level count in '{s}'")))?;
            if k < 2 {
                return Err(Error::Validation("categorical outcome needs k >= 2".into()));
            }
            return Ok(OutcomeKind::Categorical(k));
        }
        Err(Error::Validation(format!(
            "unknown outcome kind '{s}' (binary, categorical:K, continuous)"
        )))
    }
}

/// Column-oriented sample. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    kind: OutcomeKind,
    y: Vec<f64>,
    a: Vec<u8>,
    z: Vec<u8>,
    x: Vec<f64>,
    d: usize,
}

impl ObservedDataset {
    pub fn new(
        kind: OutcomeKind,
        y: Vec<f64>,
        a: Vec<u8>,
        z: Vec<u8>,
        x: Vec<f64>,
        d: usize,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Validation("empty dataset".into()));
        }
        if a.len() != n || z.len() != n || x.len() != n * d {
            return Err(Error::Validation("column lengths disagree".into()));
        }
        for i in 0..n {
            if a[i] > 1 || z[i] > 1 {
                return Err(Error::Validation(format!("row {i}: A and Z must be 0 or 1")));
            }
            if !y[i].is_finite() {
                return Err(Error::Validation(format!("row {i}: non-finite outcome")));
            }
            if kind.levels().is_some() && kind.level_index(y[i]).is_none() {
                return Err(Error::Validation(format!(
                    "row {i}: outcome {} outside the {kind:?} support",
                    y[i]
                )));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite covariate".into()));
        }
        Ok(Self { kind, y, a, z, x, d })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Level index of unit `i` for discrete outcomes.
    pub fn level(&self, i: usize) -> Option<usize> {
        self.kind.level_index(self.y[i])
    }

    /// Copy with the outcome column replaced (used for transformed outcomes).
    pub fn with_outcome(&self, kind: OutcomeKind, y: Vec<f64>) -> Result<Self> {
        Self::new(kind, y, self.a.clone(), self.z.clone(), self.x.clone(), self.d)
    }

    /// Copy keeping only the listed covariate columns.
    pub fn select_covariates(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.d) {
            return Err(Error::Validation(format!("covariate column {c} out of range")));
        }
        let mut x = Vec::with_capacity(self.n() * cols.len());
        for i in 0..self.n() {
            let row = self.x_row(i);
            x.extend(cols.iter().map(|&c| row[c]));
        }
        Self::new(self.kind, self.y.clone(), self.a.clone(), self.z.clone(), x, cols.len())
    }
}

/// Reads a CSV with header `y,a,z,x1,...,xd`.
pub fn load_csv(path: impl AsRef<Path>, kind: OutcomeKind) -> Result<ObservedDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, kind)
}

pub fn read_csv<R: std::io::Read>(reader: R, kind: OutcomeKind) -> Result<ObservedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "y" || &header[1] != "a" || &header[2] != "z" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with y,a,z".into(),
        });
    }
    let d = header.len() - 3;
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("x{}", j + 1) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column x{} but found '{name}'", j + 1),
            });
        }
    }
    let (mut y, mut a, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                return Err(Error::Parse { line, msg: format!("missing value in column {}", header[j].to_string()) });
            }
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("'{s}' in column {} is not a number", &header[j]),
            })
        };
        let binary = |j: usize| -> Result<u8> {
            match field(j)? {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                v => Err(Error::Parse { line, msg: format!("column {} must be 0 or 1, got {v}", &header[j]) }),
            }
        };
        let yv = field(0)?;
        if kind.levels().is_some() && kind.level_index(yv).is_none() {
            return Err(Error::Parse { line, msg: format!("outcome {yv} outside the {kind:?} support") });
        }
        y.push(yv);
        a.push(binary(1)?);
        z.push(binary(2)?);
        for j in 0..d {
            x.push(field(3 + j)?);
        }
    }
    if y.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    ObservedDataset::new(kind, y, a, z, x, d)
}

pub fn write_csv(path: impl AsRef<Path>, data: &ObservedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string(), "a".into(), "z".into()];
    header.extend((1..=data.d()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![format_num(data.y[i]), data.a[i].to_string(), data.z[i].to_string()];
        rec.extend(data.x_row(i).iter().map(|v| format_num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// Shortest representation that round-trips exactly.
fn format_num(v: f64) -> String {
    format!("{v:?}")
}
