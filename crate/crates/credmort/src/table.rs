//! Age-period mortality data: exposures, death counts, crude rates.
//!
//! Tables are rectangular over contiguous age and year ranges. Deaths are
//! stored as reals because cohort-averaged deaths are half-integers. Cells
//! with zero exposure are treated as missing everywhere downstream: they
//! carry no crude rate and are excluded from likelihoods and metrics.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::grid::{Grid, Span};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("exposure grid is {exp_rows}x{exp_cols} but deaths grid is {death_rows}x{death_cols}")]
    DimensionMismatch { exp_rows: usize, exp_cols: usize, death_rows: usize, death_cols: usize },
    #[error("grid size {rows}x{cols} does not match {expected} values (got {got})")]
    GridSize { rows: usize, cols: usize, expected: usize, got: usize },
    #[error("negative {what} {value} at age {age}, year {year}")]
    NegativeValue { what: &'static str, value: f64, age: i32, year: i32 },
    #[error("non-finite {what} at age {age}, year {year}")]
    NonFinite { what: &'static str, age: i32, year: i32 },
    #[error("computed deaths {value} at age {age}, year {year} are negative: the cohort grew, which violates the closed-cohort assumption")]
    CohortGrowth { value: f64, age: i32, year: i32 },
    #[error("cannot aggregate zero tables")]
    EmptyAggregate,
    #[error("table '{id}' spans {what} {got_start}..={got_end}, expected {want_start}..={want_end}")]
    SpanMismatch { id: String, what: &'static str, got_start: i32, got_end: i32, want_start: i32, want_end: i32 },
    #[error("raw grid needs at least 2 ages and 2 years, got {ages}x{years}")]
    RawTooSmall { ages: usize, years: usize },
    #[error("CSV row {row}: field '{field}' is not numeric: {value:?}")]
    NonNumericField { row: usize, field: &'static str, value: String },
    #[error("CSV row {row}: expected {expected} columns, found {found}")]
    BadColumnCount { row: usize, expected: usize, found: usize },
    #[error("CSV header must be 'population,age,year,exposure,deaths', got {got:?}")]
    BadHeader { got: String },
    #[error("CSV row {row}: population '{got}' differs from '{expected}'; one population per file")]
    MixedPopulations { row: usize, got: String, expected: String },
    #[error("CSV row {row}: duplicate cell at age {age}, year {year}")]
    DuplicateCell { row: usize, age: i32, year: i32 },
    #[error("missing cell at age {age}, year {year}: input must cover the full rectangular age-year hull")]
    MissingCell { age: i32, year: i32 },
    #[error("CSV contains no data rows")]
    EmptyCsv,
    #[error("year range {start}..={end} does not intersect the table years {table_start}..={table_end}")]
    EmptyYearRestriction { start: i32, end: i32, table_start: i32, table_end: i32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV read error: {0}")]
    Csv(#[from] csv::Error),
}

/// Exposure/death grids for one population over contiguous ages and years.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityTable {
    population_id: String,
    ages: Span,
    years: Span,
    exposure: Grid,
    deaths: Grid,
}

impl MortalityTable {
    /// Build a table from row-major grids (rows = ages, columns = years).
    pub fn new(
        population_id: impl Into<String>,
        ages: Span,
        years: Span,
        exposure: Vec<f64>,
        deaths: Vec<f64>,
    ) -> Result<Self, TableError> {
        let (na, ny) = (ages.len(), years.len());
        if exposure.len() != na * ny {
            return Err(TableError::GridSize { rows: na, cols: ny, expected: na * ny, got: exposure.len() });
        }
        if deaths.len() != na * ny {
            return Err(TableError::GridSize { rows: na, cols: ny, expected: na * ny, got: deaths.len() });
        }
        let exposure = Grid::from_vec(na, ny, exposure);
        let deaths = Grid::from_vec(na, ny, deaths);
        let t = MortalityTable { population_id: population_id.into(), ages, years, exposure, deaths };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), TableError> {
        for (i, x) in self.ages.iter().enumerate() {
            for (j, y) in self.years.iter().enumerate() {
                for (what, v) in [("exposure", self.exposure.get(i, j)), ("deaths", self.deaths.get(i, j))] {
                    if !v.is_finite() {
                        return Err(TableError::NonFinite { what, age: x, year: y });
                    }
                    if v < 0.0 {
                        return Err(TableError::NegativeValue { what, value: v, age: x, year: y });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn population_id(&self) -> &str {
        &self.population_id
    }

    pub fn ages(&self) -> Span {
        self.ages
    }

    pub fn years(&self) -> Span {
        self.years
    }

    pub fn exposure(&self, age: i32, year: i32) -> f64 {
        let (i, j) = self.cell(age, year);
        self.exposure.get(i, j)
    }

    pub fn deaths(&self, age: i32, year: i32) -> f64 {
        let (i, j) = self.cell(age, year);
        self.deaths.get(i, j)
    }

    /// Crude rate D/E, or None where the cell is missing (E = 0).
    pub fn crude_rate(&self, age: i32, year: i32) -> Option<f64> {
        let e = self.exposure(age, year);
        (e > 0.0).then(|| self.deaths(age, year) / e)
    }

    pub fn is_missing(&self, age: i32, year: i32) -> bool {
        self.exposure(age, year) == 0.0
    }

    fn cell(&self, age: i32, year: i32) -> (usize, usize) {
        let i = self.ages.index_of(age).unwrap_or_else(|| panic!("age {age} outside table"));
        let j = self.years.index_of(year).unwrap_or_else(|| panic!("year {year} outside table"));
        (i, j)
    }

    /// Copy of the table keeping only years up to `last_year`.
    pub fn restrict_years(&self, last_year: i32) -> Result<Self, TableError> {
        if last_year < self.years.start {
            return Err(TableError::EmptyYearRestriction {
                start: self.years.start,
                end: last_year,
                table_start: self.years.start,
                table_end: self.years.end,
            });
        }
        let years = Span::new(self.years.start, last_year.min(self.years.end));
        let mut exposure = Vec::with_capacity(self.ages.len() * years.len());
        let mut deaths = Vec::with_capacity(self.ages.len() * years.len());
        for i in 0..self.ages.len() {
            for j in 0..years.len() {
                exposure.push(self.exposure.get(i, j));
                deaths.push(self.deaths.get(i, j));
            }
        }
        MortalityTable::new(self.population_id.clone(), self.ages, years, exposure, deaths)
    }

    /// Cell-wise sum of several tables over identical grids.
    pub fn aggregate(tables: &[MortalityTable], population_id: impl Into<String>) -> Result<Self, TableError> {
        let first = tables.first().ok_or(TableError::EmptyAggregate)?;
        for t in &tables[1..] {
            if t.ages != first.ages {
                return Err(TableError::SpanMismatch {
                    id: t.population_id.clone(),
                    what: "ages",
                    got_start: t.ages.start,
                    got_end: t.ages.end,
                    want_start: first.ages.start,
                    want_end: first.ages.end,
                });
            }
            if t.years != first.years {
                return Err(TableError::SpanMismatch {
                    id: t.population_id.clone(),
                    what: "years",
                    got_start: t.years.start,
                    got_end: t.years.end,
                    want_start: first.years.start,
                    want_end: first.years.end,
                });
            }
        }
        let n = first.ages.len() * first.years.len();
        let mut exposure = vec![0.0; n];
        let mut deaths = vec![0.0; n];
        for t in tables {
            for (k, v) in t.exposure.values().iter().enumerate() {
                exposure[k] += v;
            }
            for (k, v) in t.deaths.values().iter().enumerate() {
                deaths[k] += v;
            }
        }
        MortalityTable::new(population_id, first.ages, first.years, exposure, deaths)
    }
}

/// Individuals alive at exact age x at the start of year t, plus the deaths
/// observed in each (x, t) square, for one closed population.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLivesTable {
    pub population_id: String,
    pub ages: Span,
    pub years: Span,
    pub lives: Grid,
    pub raw_deaths: Grid,
}

/// Convert raw cohort lives into central exposures and averaged deaths.
///
/// E[x,t] = N[x,t]/2 + N[x+1,t+1]/2 and D[x,t] = (N[x,t] - N[x+1,t+1])/2,
/// spreading each cohort's deaths uniformly over its yearly parallelogram.
/// The final age and year of the raw grid are consumed as the (x+1, t+1)
/// anchors, so the output grid is one age and one year smaller.
pub fn lexis_convert(raw: &RawLivesTable) -> Result<MortalityTable, TableError> {
    if raw.ages.len() < 2 || raw.years.len() < 2 {
        return Err(TableError::RawTooSmall { ages: raw.ages.len(), years: raw.years.len() });
    }
    let ages = Span::new(raw.ages.start, raw.ages.end - 1);
    let years = Span::new(raw.years.start, raw.years.end - 1);
    let mut exposure = Vec::with_capacity(ages.len() * years.len());
    let mut deaths = Vec::with_capacity(ages.len() * years.len());
    for i in 0..ages.len() {
        for j in 0..years.len() {
            let n0 = raw.lives.get(i, j);
            let n1 = raw.lives.get(i + 1, j + 1);
            let d = (n0 - n1) / 2.0;
            if d < 0.0 {
                return Err(TableError::CohortGrowth {
                    value: d,
                    age: ages.value_at(i),
                    year: years.value_at(j),
                });
            }
            exposure.push(n0 / 2.0 + n1 / 2.0);
            deaths.push(d);
        }
    }
    MortalityTable::new(raw.population_id.clone(), ages, years, exposure, deaths)
}

const CSV_HEADER: [&str; 5] = ["population", "age", "year", "exposure", "deaths"];

/// Read one population's table from CSV (`population,age,year,exposure,deaths`).
///
/// Rows may arrive in any order but must cover the full rectangular hull of
/// the ages and years present.
pub fn read_csv(path: impl AsRef<Path>) -> Result<MortalityTable, TableError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    {
        let headers = reader.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != CSV_HEADER {
            return Err(TableError::BadHeader { got: got.join(",") });
        }
    }

    fn parse_num(row: usize, field: &'static str, raw: &str) -> Result<f64, TableError> {
        raw.trim()
            .parse::<f64>()
            .map_err(|_| TableError::NonNumericField { row, field, value: raw.to_string() })
    }
    fn parse_int(row: usize, field: &'static str, raw: &str) -> Result<i32, TableError> {
        raw.trim()
            .parse::<i32>()
            .map_err(|_| TableError::NonNumericField { row, field, value: raw.to_string() })
    }

    let mut population: Option<String> = None;
    let mut cells: BTreeMap<(i32, i32), (f64, f64)> = BTreeMap::new();
    // Row numbers reported to the user count the header as row 1.
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2;
        let record = record?;
        if record.len() != 5 {
            return Err(TableError::BadColumnCount { row, expected: 5, found: record.len() });
        }
        let pop = record[0].trim().to_string();
        match &population {
            None => population = Some(pop),
            Some(existing) if *existing != pop => {
                return Err(TableError::MixedPopulations { row, got: pop, expected: existing.clone() })
            }
            _ => {}
        }
        let age = parse_int(row, "age", &record[1])?;
        let year = parse_int(row, "year", &record[2])?;
        let exposure = parse_num(row, "exposure", &record[3])?;
        let deaths = parse_num(row, "deaths", &record[4])?;
        if cells.insert((age, year), (exposure, deaths)).is_some() {
            return Err(TableError::DuplicateCell { row, age, year });
        }
    }
    let population = population.ok_or(TableError::EmptyCsv)?;

    let ages = Span::new(
        cells.keys().map(|k| k.0).min().unwrap(),
        cells.keys().map(|k| k.0).max().unwrap(),
    );
    let years = Span::new(
        cells.keys().map(|k| k.1).min().unwrap(),
        cells.keys().map(|k| k.1).max().unwrap(),
    );
    let mut exposure = Vec::with_capacity(ages.len() * years.len());
    let mut deaths = Vec::with_capacity(ages.len() * years.len());
    for x in ages.iter() {
        for y in years.iter() {
            let (e, d) = cells.get(&(x, y)).ok_or(TableError::MissingCell { age: x, year: y })?;
            exposure.push(*e);
            deaths.push(*d);
        }
    }
    MortalityTable::new(population, ages, years, exposure, deaths)
}

/// Write a table in canonical order (age, then year), shortest round-trip
/// float formatting.
pub fn write_csv(table: &MortalityTable, path: impl AsRef<Path>) -> Result<(), TableError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for x in table.ages.iter() {
        for y in table.years.iter() {
            writeln!(
                out,
                "{},{},{},{},{}",
                table.population_id,
                x,
                y,
                table.exposure(x, y),
                table.deaths(x, y)
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
