//! Country–sector–year panels.
//!
//! Long format is one record per (country, sector, year); wide format is a
//! [`PanelMatrix`] with one row per (country, sector) entity and one column per
//! year. Missingness is always carried by an explicit mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("schema mismatch: missing column `{0}`")]
    SchemaMismatch(String),
    #[error("parse error at row {row}: {reason}")]
    ParseError { row: usize, reason: String },
    #[error("conflicting values for {entity} in {year}: {first} vs {second}")]
    DuplicateCell {
        entity: String,
        year: i32,
        first: f64,
        second: f64,
    },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("no records")]
    NoRecords,
    #[error("invalid panel: {0}")]
    Invalid(String),
    #[error("invalid share triple: {0}")]
    InvalidShare(String),
    #[error("insufficient data: need at least 2 observations, got {0}")]
    InsufficientData(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PanelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sector {
    Agriculture,
    Industry,
    Services,
    #[serde(rename = "GDP")]
    Gdp,
}

impl Sector {
    pub const ALL: [Sector; 4] = [
        Sector::Agriculture,
        Sector::Industry,
        Sector::Services,
        Sector::Gdp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Sector::Agriculture => "Agriculture",
            Sector::Industry => "Industry",
            Sector::Services => "Services",
            Sector::Gdp => "GDP",
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "agriculture" | "agr" => Ok(Sector::Agriculture),
            "industry" | "ind" => Ok(Sector::Industry),
            "services" | "ser" | "srv" => Ok(Sector::Services),
            "gdp" => Ok(Sector::Gdp),
            other => Err(format!("unknown sector `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub country: String,
    pub sector: Sector,
    pub year: i32,
    pub value: f64,
    pub present: bool,
}

impl LongRecord {
    pub fn observed(country: &str, sector: Sector, year: i32, value: f64) -> Self {
        LongRecord {
            country: country.to_string(),
            sector,
            year,
            value,
            present: true,
        }
    }

    pub fn missing(country: &str, sector: Sector, year: i32) -> Self {
        LongRecord {
            country: country.to_string(),
            sector,
            year,
            value: 0.0,
            present: false,
        }
    }
}

/// Column names and year bounds used when reading a long CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub country: String,
    pub sector: String,
    pub year: String,
    pub value: String,
    pub year_min: i32,
    pub year_max: i32,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            country: "country".into(),
            sector: "sector".into(),
            year: "year".into(),
            value: "value".into(),
            year_min: 1800,
            year_max: 2200,
        }
    }
}

pub fn load_long_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<LongRecord>> {
    if !path.exists() {
        return Err(PanelError::FileNotFound(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    read_long_csv(file, schema)
}

pub fn read_long_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<LongRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| PanelError::SchemaMismatch(name.to_string()))
    };
    let (ci, si, yi, vi) = (
        col(&schema.country)?,
        col(&schema.sector)?,
        col(&schema.year)?,
        col(&schema.value)?,
    );

    let mut out = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| PanelError::ParseError {
            row: row_no,
            reason: e.to_string(),
        })?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let perr = |reason: String| PanelError::ParseError { row: row_no, reason };

        let country = field(ci);
        if country.is_empty() {
            return Err(perr("empty country".into()));
        }
        let sector: Sector = field(si).parse().map_err(perr)?;
        let year: i32 = field(yi)
            .parse()
            .map_err(|_| perr(format!("malformed year `{}`", field(yi))))?;
        if year < schema.year_min || year > schema.year_max {
            return Err(perr(format!(
                "year {year} outside [{}, {}]",
                schema.year_min, schema.year_max
            )));
        }
        let raw = field(vi);
        let record = if is_missing_token(raw) {
            LongRecord::missing(country, sector, year)
        } else {
            let value: f64 = raw
                .parse()
                .map_err(|_| perr(format!("malformed value `{raw}`")))?;
            if !value.is_finite() {
                return Err(perr(format!("non-finite value `{raw}`")));
            }
            LongRecord::observed(country, sector, year, value)
        };
        out.push(record);
    }
    Ok(out)
}

fn is_missing_token(s: &str) -> bool {
    matches!(
        s.to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none"
    )
}

pub fn write_long_csv<W: Write>(records: &[LongRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["country", "sector", "year", "value"])?;
    for r in records {
        let value = if r.present { fmt_f64(r.value) } else { String::new() };
        w.write_record([r.country.as_str(), r.sector.as_str(), &r.year.to_string(), &value])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub country: String,
    pub sector: Sector,
}

impl Entity {
    pub fn new(country: impl Into<String>, sector: Sector) -> Self {
        Entity {
            country: country.into(),
            sector,
        }
    }
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.country, self.sector)
    }
}

impl FromStr for Entity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (c, sec) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("entity `{s}` is not COUNTRY:SECTOR"))?;
        if c.is_empty() {
            return Err(format!("entity `{s}` has empty country"));
        }
        Ok(Entity::new(c, sec.parse()?))
    }
}

/// N entities by T contiguous years, with an observation mask.
///
/// Cells where the mask is false always hold `0.0`; their value carries no
/// meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelMatrix {
    entities: Vec<Entity>,
    years: Vec<i32>,
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl PanelMatrix {
    pub fn new(
        entities: Vec<Entity>,
        years: Vec<i32>,
        mut values: DMatrix<f64>,
        mask: DMatrix<bool>,
    ) -> Result<Self> {
        let (n, t) = (entities.len(), years.len());
        if values.shape() != (n, t) || mask.shape() != (n, t) {
            return Err(PanelError::Invalid(format!(
                "shape mismatch: {} entities x {} years, values {:?}, mask {:?}",
                n,
                t,
                values.shape(),
                mask.shape()
            )));
        }
        if years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid("years not strictly increasing".into()));
        }
        let unique: BTreeSet<&Entity> = entities.iter().collect();
        if unique.len() != n {
            return Err(PanelError::Invalid("duplicate entities".into()));
        }
        for i in 0..n {
            for j in 0..t {
                if mask[(i, j)] {
                    if !values[(i, j)].is_finite() {
                        return Err(PanelError::Invalid(format!(
                            "non-finite observed value at ({}, {})",
                            entities[i], years[j]
                        )));
                    }
                } else {
                    values[(i, j)] = 0.0;
                }
            }
        }
        Ok(PanelMatrix {
            entities,
            years,
            values,
            mask,
        })
    }

    /// Fully observed panel.
    pub fn observed(entities: Vec<Entity>, years: Vec<i32>, values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(entities, years, values, mask)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn n_rows(&self) -> usize {
        self.entities.len()
    }

    pub fn n_cols(&self) -> usize {
        self.years.len()
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.mask[(i, j)].then(|| self.values[(i, j)])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn row_of(&self, entity: &Entity) -> Option<usize> {
        self.entities.iter().position(|e| e == entity)
    }

    pub fn col_of(&self, year: i32) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    /// Same layout with a new mask; newly masked cells are cleared.
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        Self::new(
            self.entities.clone(),
            self.years.clone(),
            self.values.clone(),
            mask,
        )
    }

    /// Same layout, all cells observed with the given values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::observed(self.entities.clone(), self.years.clone(), values)
    }

    /// Observed values of row `i` paired with their column index.
    pub fn row_observed(&self, i: usize) -> Vec<(usize, f64)> {
        (0..self.n_cols())
            .filter(|&j| self.mask[(i, j)])
            .map(|j| (j, self.values[(i, j)]))
            .collect()
    }

    /// Rows restricted to the given entities, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let entities = rows.iter().map(|&i| self.entities[i].clone()).collect();
        let values = DMatrix::from_fn(rows.len(), self.n_cols(), |r, j| self.values[(rows[r], j)]);
        let mask = DMatrix::from_fn(rows.len(), self.n_cols(), |r, j| self.mask[(rows[r], j)]);
        Self::new(entities, self.years.clone(), values, mask)
    }

    /// Every cell as a long record (missing cells with `present = false`).
    pub fn to_long(&self) -> Vec<LongRecord> {
        let mut out = Vec::with_capacity(self.n_rows() * self.n_cols());
        for (i, e) in self.entities.iter().enumerate() {
            for (j, &y) in self.years.iter().enumerate() {
                out.push(match self.get(i, j) {
                    Some(v) => LongRecord::observed(&e.country, e.sector, y, v),
                    None => LongRecord::missing(&e.country, e.sector, y),
                });
            }
        }
        out
    }

    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_long_csv(&self.to_long(), writer)
    }

    /// Wide CSV: `entity` column as `COUNTRY:SECTOR`, then one column per year.
    pub fn write_wide_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["entity".to_string()];
        header.extend(self.years.iter().map(|y| y.to_string()));
        w.write_record(&header)?;
        for (i, e) in self.entities.iter().enumerate() {
            let mut row = vec![e.to_string()];
            row.extend((0..self.n_cols()).map(|j| self.get(i, j).map(fmt_f64).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_wide_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("entity") {
            return Err(PanelError::SchemaMismatch("entity".into()));
        }
        let years = headers
            .iter()
            .skip(1)
            .map(|h| {
                h.trim().parse::<i32>().map_err(|_| PanelError::ParseError {
                    row: 0,
                    reason: format!("malformed year header `{h}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut entities = Vec::new();
        let mut cells = Vec::new();
        for (idx, row) in rdr.records().enumerate() {
            let row_no = idx + 1;
            let row = row.map_err(|e| PanelError::ParseError {
                row: row_no,
                reason: e.to_string(),
            })?;
            let entity: Entity = row
                .get(0)
                .unwrap_or("")
                .parse()
                .map_err(|reason| PanelError::ParseError { row: row_no, reason })?;
            entities.push(entity);
            for j in 0..years.len() {
                let raw = row.get(j + 1).unwrap_or("").trim();
                if is_missing_token(raw) {
                    cells.push(None);
                } else {
                    let v: f64 = raw.parse().map_err(|_| PanelError::ParseError {
                        row: row_no,
                        reason: format!("malformed value `{raw}`"),
                    })?;
                    cells.push(Some(v));
                }
            }
        }
        let (n, t) = (entities.len(), years.len());
        let values = DMatrix::from_fn(n, t, |i, j| cells[i * t + j].unwrap_or(0.0));
        let mask = DMatrix::from_fn(n, t, |i, j| cells[i * t + j].is_some());
        Self::new(entities, years, values, mask)
    }
}

/// Pivots long records into a wide matrix.
///
/// Rows are the distinct (country, sector) pairs in sorted order; columns span
/// every year from the smallest to the largest year seen in `records`.
pub fn to_wide_matrix(records: &[LongRecord]) -> Result<PanelMatrix> {
    if records.is_empty() {
        return Err(PanelError::NoRecords);
    }
    let mut cells: BTreeMap<(Entity, i32), f64> = BTreeMap::new();
    let mut entities: BTreeSet<Entity> = BTreeSet::new();
    let (mut y0, mut y1) = (i32::MAX, i32::MIN);
    for r in records {
        let e = Entity::new(r.country.clone(), r.sector);
        y0 = y0.min(r.year);
        y1 = y1.max(r.year);
        if r.present {
            if !r.value.is_finite() {
                return Err(PanelError::Invalid(format!("non-finite value for {e} in {}", r.year)));
            }
            if let Some(&prev) = cells.get(&(e.clone(), r.year)) {
                if prev != r.value {
                    return Err(PanelError::DuplicateCell {
                        entity: e.to_string(),
                        year: r.year,
                        first: prev,
                        second: r.value,
                    });
                }
            }
            cells.insert((e.clone(), r.year), r.value);
        }
        entities.insert(e);
    }
    let entities: Vec<Entity> = entities.into_iter().collect();
    let years: Vec<i32> = (y0..=y1).collect();
    let (n, t) = (entities.len(), years.len());
    let mut values = DMatrix::zeros(n, t);
    let mut mask = DMatrix::from_element(n, t, false);
    for (i, e) in entities.iter().enumerate() {
        for (j, &y) in years.iter().enumerate() {
            if let Some(&v) = cells.get(&(e.clone(), y)) {
                values[(i, j)] = v;
                mask[(i, j)] = true;
            }
        }
    }
    PanelMatrix::new(entities, years, values, mask)
}

pub fn missing_fraction(m: &PanelMatrix) -> Result<f64> {
    let total = m.n_rows() * m.n_cols();
    if total == 0 {
        return Err(PanelError::EmptyMatrix);
    }
    Ok((total - m.observed_count()) as f64 / total as f64)
}

/// Agriculture / industry / services shares of one country-year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareTriple {
    pub agriculture: f64,
    pub industry: f64,
    pub services: f64,
}

impl ShareTriple {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(agriculture: f64, industry: f64, services: f64) -> Result<Self> {
        let s = ShareTriple {
            agriculture,
            industry,
            services,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PanelError::InvalidShare(format!("component outside [0, 1]: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(PanelError::InvalidShare(format!("components sum to {sum}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.agriculture, self.industry, self.services]
    }

    pub const SECTORS: [Sector; 3] = [Sector::Agriculture, Sector::Industry, Sector::Services];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSummary {
    pub country: String,
    pub agriculture: Moments,
    pub industry: Moments,
    pub services: Moments,
}

impl ShareSummary {
    pub fn by_sector(&self) -> [Moments; 3] {
        [self.agriculture, self.industry, self.services]
    }
}

/// A country's share trajectory, one triple per year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareSeries {
    pub country: String,
    pub years: Vec<i32>,
    pub shares: Vec<ShareTriple>,
}

impl ShareSeries {
    pub fn to_long(&self) -> Vec<LongRecord> {
        let mut out = Vec::with_capacity(self.shares.len() * 3);
        for (&y, s) in self.years.iter().zip(&self.shares) {
            for (sector, v) in ShareTriple::SECTORS.iter().zip(s.as_array()) {
                out.push(LongRecord::observed(&self.country, *sector, y, v));
            }
        }
        out
    }
}

/// Per-country sample mean and standard deviation (n − 1 denominator) of each
/// sector share.
pub fn summarize_shares(series: &[ShareSeries]) -> Result<Vec<ShareSummary>> {
    series
        .iter()
        .map(|s| {
            if s.shares.len() < 2 {
                return Err(PanelError::InsufficientData(s.shares.len()));
            }
            for t in &s.shares {
                t.validate()?;
            }
            let col = |k: usize| -> Moments {
                let xs: Vec<f64> = s.shares.iter().map(|t| t.as_array()[k]).collect();
                sample_moments(&xs)
            };
            Ok(ShareSummary {
                country: s.country.clone(),
                agriculture: col(0),
                industry: col(1),
                services: col(2),
            })
        })
        .collect()
}

pub(crate) fn sample_moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let std = if xs.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    Moments { mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(csv: &str) -> Result<Vec<LongRecord>> {
        read_long_csv(csv.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn load_maps_fields_directly() {
        let recs = parse("country,sector,year,value\nKEN,Agriculture,2001,23.5\n").unwrap();
        assert_eq!(recs, vec![LongRecord::observed("KEN", Sector::Agriculture, 2001, 23.5)]);
    }

    #[test]
    fn empty_cell_is_missing() {
        let recs = parse("country,sector,year,value\nKEN,Agriculture,2002,\n").unwrap();
        assert!(!recs[0].present);
    }

    #[test]
    fn malformed_year_is_rejected_with_row() {
        let err = parse("country,sector,year,value\nKEN,Agriculture,2001,1\nKEN,Agriculture,19xx,5\n")
            .unwrap_err();
        assert!(matches!(err, PanelError::ParseError { row: 2, .. }), "{err}");
    }

    #[test]
    fn year_bounds_enforced() {
        let schema = CsvSchema {
            year_min: 2000,
            year_max: 2010,
            ..CsvSchema::default()
        };
        let err = read_long_csv("country,sector,year,value\nKEN,GDP,1999,1\n".as_bytes(), &schema)
            .unwrap_err();
        assert!(matches!(err, PanelError::ParseError { row: 1, .. }));
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let err = parse("country,sector,yr,value\nKEN,GDP,2000,1\n").unwrap_err();
        assert!(matches!(err, PanelError::SchemaMismatch(c) if c == "year"));
    }

    #[test]
    fn custom_column_order() {
        let schema = CsvSchema {
            country: "iso".into(),
            value: "v".into(),
            ..CsvSchema::default()
        };
        let recs = read_long_csv("year,v,sector,iso\n2000,3,Industry,NGA\n".as_bytes(), &schema).unwrap();
        assert_eq!(recs[0], LongRecord::observed("NGA", Sector::Industry, 2000, 3.0));
    }

    #[test]
    fn missing_file() {
        let err = load_long_csv(Path::new("/nonexistent/panel.csv"), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, PanelError::FileNotFound(_)));
    }

    fn grid(records: usize) -> Vec<LongRecord> {
        let mut out = Vec::new();
        for c in ["A", "B"] {
            for y in 2000..2003 {
                out.push(LongRecord::observed(c, Sector::Gdp, y, y as f64));
            }
        }
        out.truncate(records);
        out
    }

    #[test]
    fn wide_from_complete_records() {
        let m = to_wide_matrix(&grid(6)).unwrap();
        assert_eq!((m.n_rows(), m.n_cols()), (2, 3));
        assert!(m.is_complete());
    }

    #[test]
    fn wide_with_one_absent_record() {
        let m = to_wide_matrix(&grid(5)).unwrap();
        assert_eq!(m.observed_count(), 5);
        assert!(!m.is_observed(1, 2));
    }

    #[test]
    fn conflicting_duplicates() {
        let mut recs = grid(6);
        recs.push(LongRecord::observed("A", Sector::Gdp, 2001, -1.0));
        assert!(matches!(
            to_wide_matrix(&recs).unwrap_err(),
            PanelError::DuplicateCell { year: 2001, .. }
        ));
        let mut same = grid(6);
        same.push(LongRecord::observed("A", Sector::Gdp, 2001, 2001.0));
        assert!(to_wide_matrix(&same).is_ok());
    }

    #[test]
    fn interior_years_become_missing_columns() {
        let recs = vec![
            LongRecord::observed("A", Sector::Gdp, 2000, 1.0),
            LongRecord::observed("A", Sector::Gdp, 2003, 4.0),
        ];
        let m = to_wide_matrix(&recs).unwrap();
        assert_eq!(m.years(), &[2000, 2001, 2002, 2003]);
        assert_eq!(m.observed_count(), 2);
    }

    #[test]
    fn missing_fraction_cases() {
        let full = to_wide_matrix(&grid(6)).unwrap();
        assert_eq!(missing_fraction(&full).unwrap(), 0.0);
        let none = full.with_mask(DMatrix::from_element(2, 3, false)).unwrap();
        assert_eq!(missing_fraction(&none).unwrap(), 1.0);

        let ents = (0..2).map(|i| Entity::new(format!("C{i}"), Sector::Gdp)).collect();
        let mut mask = DMatrix::from_element(2, 5, true);
        mask[(0, 1)] = false;
        mask[(1, 3)] = false;
        mask[(1, 4)] = false;
        let m = PanelMatrix::new(ents, (0..5).collect(), DMatrix::zeros(2, 5), mask).unwrap();
        assert!((missing_fraction(&m).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_fraction() {
        let m = PanelMatrix::new(vec![], vec![], DMatrix::zeros(0, 0), DMatrix::from_element(0, 0, true)).unwrap();
        assert!(matches!(missing_fraction(&m), Err(PanelError::EmptyMatrix)));
    }

    #[test]
    fn constructor_rejects_bad_layouts() {
        let e = vec![Entity::new("A", Sector::Gdp), Entity::new("A", Sector::Gdp)];
        assert!(PanelMatrix::observed(e, vec![1, 2], DMatrix::zeros(2, 2)).is_err());
        let e = vec![Entity::new("A", Sector::Gdp)];
        assert!(PanelMatrix::observed(e.clone(), vec![2, 1], DMatrix::zeros(1, 2)).is_err());
        assert!(PanelMatrix::observed(e, vec![1, 2], DMatrix::from_element(1, 2, f64::NAN)).is_err());
    }

    #[test]
    fn wide_csv_round_trip() {
        let m = to_wide_matrix(&grid(5)).unwrap();
        let mut buf = Vec::new();
        m.write_wide_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("entity,2000,2001,2002\nA:GDP,2000.0,2001.0,2002.0\nB:GDP,2000.0,2001.0,\n"));
        let back = PanelMatrix::read_wide_csv(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn long_csv_round_trip() {
        let m = to_wide_matrix(&grid(5)).unwrap();
        let mut buf = Vec::new();
        m.write_long_csv(&mut buf).unwrap();
        let back = to_wide_matrix(&parse(std::str::from_utf8(&buf).unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn entity_parse() {
        let e: Entity = "ZAF:Services".parse().unwrap();
        assert_eq!(e, Entity::new("ZAF", Sector::Services));
        assert!("ZAF".parse::<Entity>().is_err());
    }

    fn series(country: &str, ag: &[f64]) -> ShareSeries {
        ShareSeries {
            country: country.into(),
            years: (0..ag.len() as i32).collect(),
            shares: ag
                .iter()
                .map(|&a| ShareTriple::new(a, (1.0 - a) / 2.0, (1.0 - a) / 2.0).unwrap())
                .collect(),
        }
    }

    #[test]
    fn constant_shares_have_zero_std() {
        let s = ShareSeries {
            country: "A".into(),
            years: vec![1, 2, 3],
            shares: vec![ShareTriple::new(0.4, 0.3, 0.3).unwrap(); 3],
        };
        let out = summarize_shares(&[s]).unwrap();
        let m = out[0].by_sector();
        assert!((m[0].mean - 0.4).abs() < 1e-15 && (m[1].mean - 0.3).abs() < 1e-15);
        assert!(m.iter().all(|x| x.std.abs() < 1e-15));
    }

    #[test]
    fn two_point_std() {
        let out = summarize_shares(&[series("A", &[0.2, 0.6])]).unwrap();
        assert!((out[0].agriculture.mean - 0.4).abs() < 1e-12);
        // sqrt(((0.2-0.4)^2 + (0.6-0.4)^2) / 1) = sqrt(0.08)
        assert!((out[0].agriculture.std - 0.282_842_712_474_619).abs() < 1e-12);
    }

    #[test]
    fn single_point_is_insufficient() {
        assert!(matches!(
            summarize_shares(&[series("A", &[0.2])]),
            Err(PanelError::InsufficientData(1))
        ));
    }

    #[test]
    fn share_triple_validation() {
        assert!(ShareTriple::new(0.5, 0.5, 0.1).is_err());
        assert!(ShareTriple::new(-0.1, 0.6, 0.5).is_err());
        assert!(ShareTriple::new(0.2, 0.3, 0.5).is_ok());
    }
}
