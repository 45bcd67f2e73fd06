//! Unit-level wage microdata: schema, ingestion, and design encoding.

mod design;
mod schema;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use design::{encode_design, group_means, AreaBlock, CellMeans, DesignMatrices, GroupMeans};
pub use schema::{Kind, Role, Variable, VariableSchema};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Men,
    Women,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Men, Gender::Women];

    pub fn index(self) -> usize {
        match self {
            Gender::Men => 0,
            Gender::Women => 1,
        }
    }

    pub fn other(self) -> Gender {
        match self {
            Gender::Men => Gender::Women,
            Gender::Women => Gender::Men,
        }
    }
}

impl std::fmt::Display for Gender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Gender::Men => "men",
            Gender::Women => "women",
        })
    }
}

/// Raw value of one explanatory variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Covariate {
    Real(f64),
    /// Index into the variable's category list.
    Level(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub wage_per_hour: f64,
    pub log_wage: f64,
    pub gender: Gender,
    /// Index into [`Dataset::areas`].
    pub area: usize,
    /// One entry per explanatory variable, in schema order.
    pub covariates: Vec<Covariate>,
    pub sampling_weight: f64,
}

/// A record before area codes are resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordInput {
    pub wage_per_hour: f64,
    pub gender: Gender,
    pub area: String,
    pub covariates: Vec<Covariate>,
    pub sampling_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<UnitRecord>,
    schema: VariableSchema,
    areas: Vec<String>,
    /// `counts[d][g]` records of gender `g` in area `d`.
    counts: Vec<[usize; 2]>,
}

/// Sorts area codes numerically when every code is an integer, otherwise
/// lexicographically.
fn sort_area_codes(codes: &mut [String]) {
    let numeric: Option<Vec<i64>> = codes.iter().map(|c| c.parse::<i64>().ok()).collect();
    if numeric.is_some() {
        codes.sort_by_key(|c| c.parse::<i64>().unwrap());
    } else {
        codes.sort();
    }
}

impl Dataset {
    pub fn from_inputs(schema: VariableSchema, inputs: Vec<RecordInput>) -> Result<Self> {
        let mut codes: Vec<String> = inputs.iter().map(|r| r.area.clone()).collect();
        codes.sort();
        codes.dedup();
        sort_area_codes(&mut codes);
        let lookup: BTreeMap<&str, usize> =
            codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let n_cov = schema.explanatory().count();
        let mut records = Vec::with_capacity(inputs.len());
        for (row, r) in inputs.iter().enumerate() {
            if !(r.wage_per_hour > 0.0) || !r.wage_per_hour.is_finite() {
                return Err(Error::NonPositiveWage {
                    row: row + 1,
                    value: r.wage_per_hour,
                });
            }
            if !(r.sampling_weight > 0.0) || !r.sampling_weight.is_finite() {
                return Err(Error::NonPositiveWeight {
                    row: row + 1,
                    value: r.sampling_weight,
                });
            }
            if r.covariates.len() != n_cov {
                return Err(Error::DimensionMismatch(format!(
                    "record {} has {} covariates, schema declares {n_cov}",
                    row + 1,
                    r.covariates.len()
                )));
            }
            records.push(UnitRecord {
                wage_per_hour: r.wage_per_hour,
                log_wage: r.wage_per_hour.ln(),
                gender: r.gender,
                area: lookup[r.area.as_str()],
                covariates: r.covariates.clone(),
                sampling_weight: r.sampling_weight,
            });
        }
        Ok(Self::assemble(schema, codes, records))
    }

    fn assemble(schema: VariableSchema, areas: Vec<String>, records: Vec<UnitRecord>) -> Self {
        let mut counts = vec![[0usize; 2]; areas.len()];
        for r in &records {
            counts[r.area][r.gender.index()] += 1;
        }
        Dataset {
            records,
            schema,
            areas,
            counts,
        }
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, area: usize, gender: Gender) -> usize {
        self.counts[area][gender.index()]
    }

    pub fn gender_total(&self, gender: Gender) -> usize {
        self.counts.iter().map(|c| c[gender.index()]).sum()
    }

    pub fn area_index(&self, code: &str) -> Option<usize> {
        self.areas.iter().position(|a| a == code)
    }

    /// The gender with more records; men win ties.
    pub fn larger_gender(&self) -> Gender {
        if self.gender_total(Gender::Women) > self.gender_total(Gender::Men) {
            Gender::Women
        } else {
            Gender::Men
        }
    }

    /// Records at the given indices, keeping the full area list.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::assemble(self.schema.clone(), self.areas.clone(), records)
    }

    /// The same records treated as a single area.
    pub fn collapse_areas(&self, code: &str) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| UnitRecord { area: 0, ..r.clone() })
            .collect();
        Self::assemble(self.schema.clone(), vec![code.to_string()], records)
    }

    pub fn swap_genders(&self) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| UnitRecord {
                gender: r.gender.other(),
                ..r.clone()
            })
            .collect();
        Self::assemble(self.schema.clone(), self.areas.clone(), records)
    }

    /// Multiplies every wage by `factor`.
    pub fn scale_wages(&self, factor: f64) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| {
                let wage = r.wage_per_hour * factor;
                UnitRecord {
                    wage_per_hour: wage,
                    log_wage: wage.ln(),
                    ..r.clone()
                }
            })
            .collect();
        Self::assemble(self.schema.clone(), self.areas.clone(), records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.schema.variables.iter().map(|v| v.name.as_str()))?;
        let gender = self.schema.gender();
        let explanatory: Vec<&Variable> = self.schema.explanatory().collect();
        for r in &self.records {
            let mut cov = 0;
            let mut row: Vec<String> = Vec::with_capacity(self.schema.variables.len());
            for v in &self.schema.variables {
                row.push(match v.role {
                    Role::Response => r.wage_per_hour.to_string(),
                    Role::Gender => gender.categories[r.gender.index()].clone(),
                    Role::Area => self.areas[r.area].clone(),
                    Role::Weight => r.sampling_weight.to_string(),
                    Role::Explanatory => {
                        let var = explanatory[cov];
                        let value = match r.covariates[cov] {
                            Covariate::Real(x) => x.to_string(),
                            Covariate::Level(l) => var.categories[l].clone(),
                        };
                        cov += 1;
                        value
                    }
                });
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }
}

/// Reads a UTF-8 CSV with a header row. Row numbers in errors count data rows
/// from 1, excluding the header.
pub fn load_dataset(path: &Path, schema: &VariableSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(input: R, schema: &VariableSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers()?.clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let need = |v: &Variable| column(&v.name).ok_or_else(|| Error::MissingColumn(v.name.clone()));

    let response_col = need(schema.response())?;
    let gender_var = schema.gender();
    let gender_col = need(gender_var)?;
    let area_var = schema.area();
    let area_col = need(area_var)?;
    let weight_col = schema.weight().and_then(|v| column(&v.name));
    let explanatory: Vec<&Variable> = schema.explanatory().collect();
    let cov_cols = explanatory.iter().map(|v| need(v)).collect::<Result<Vec<_>>>()?;

    let mut inputs = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cell = |col: usize, name: &str| -> Result<&str> {
            match rec.get(col) {
                Some(s) if !s.is_empty() && s != "NA" => Ok(s),
                _ => Err(Error::MissingValue {
                    row,
                    column: name.to_string(),
                }),
            }
        };
        let real = |col: usize, name: &str| -> Result<f64> {
            let s = cell(col, name)?;
            s.parse::<f64>().map_err(|_| Error::Unparseable {
                row,
                column: name.to_string(),
                value: s.to_string(),
            })
        };
        let wage = real(response_col, &schema.response().name)?;
        if !(wage > 0.0) || !wage.is_finite() {
            return Err(Error::NonPositiveWage { row, value: wage });
        }
        let g = cell(gender_col, &gender_var.name)?;
        let gender = match gender_var.level_index(g) {
            Some(0) => Gender::Men,
            Some(_) => Gender::Women,
            None => {
                return Err(Error::UnknownCategory {
                    row,
                    column: gender_var.name.clone(),
                    value: g.to_string(),
                })
            }
        };
        let area = cell(area_col, &area_var.name)?;
        if !area_var.categories.is_empty() && area_var.level_index(area).is_none() {
            return Err(Error::UnknownCategory {
                row,
                column: area_var.name.clone(),
                value: area.to_string(),
            });
        }
        let sampling_weight = match (weight_col, schema.weight()) {
            (Some(col), Some(v)) => {
                let w = real(col, &v.name)?;
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::NonPositiveWeight { row, value: w });
                }
                w
            }
            _ => 1.0,
        };
        let mut covariates = Vec::with_capacity(explanatory.len());
        for (var, &col) in explanatory.iter().zip(&cov_cols) {
            covariates.push(match var.kind {
                Kind::Continuous => Covariate::Real(real(col, &var.name)?),
                Kind::Categorical => {
                    let s = cell(col, &var.name)?;
                    Covariate::Level(var.level_index(s).ok_or_else(|| Error::UnknownCategory {
                        row,
                        column: var.name.clone(),
                        value: s.to_string(),
                    })?)
                }
            });
        }
        inputs.push(RecordInput {
            wage_per_hour: wage,
            gender,
            area: area.to_string(),
            covariates,
            sampling_weight,
        });
    }
    Dataset::from_inputs(schema.clone(), inputs)
}
