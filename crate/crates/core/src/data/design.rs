use nalgebra::{DMatrix, DVector};

use super::{Covariate, Dataset, Gender, Kind, Role};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, RandomTerm};

/// Contiguous rows of one area inside a [`DesignMatrices`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AreaBlock {
    /// Index into the dataset's area list.
    pub area: usize,
    pub start: usize,
    pub len: usize,
}

impl AreaBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Encoded model matrices for one gender, rows grouped by area in the
/// dataset's area order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub spec: ModelSpec,
    pub gender: Gender,
    /// Fixed-effect design, intercept first.
    pub x: DMatrix<f64>,
    /// Random-effect design; zero columns for fixed-effect models.
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    /// Only areas with at least one row appear.
    pub blocks: Vec<AreaBlock>,
    /// The dataset's full area list.
    pub areas: Vec<String>,
    /// Dataset record index of every row.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Intercept,
    Real(usize),
    Dummy(usize, usize),
    AreaDummy(usize),
}

fn value(src: Source, covariates: &[Covariate], area: usize) -> f64 {
    match src {
        Source::Intercept => 1.0,
        Source::Real(i) => match covariates[i] {
            Covariate::Real(x) => x,
            Covariate::Level(l) => l as f64,
        },
        Source::Dummy(i, level) => match covariates[i] {
            Covariate::Level(l) if l == level => 1.0,
            _ => 0.0,
        },
        Source::AreaDummy(d) => f64::from(u8::from(area == d)),
    }
}

fn dummies(ds: &Dataset, name: &str) -> Result<Vec<(String, Source)>> {
    let schema = ds.schema();
    let idx = schema
        .explanatory_index(name)
        .ok_or_else(|| Error::UnknownVariable(name.to_string()))?;
    let var = schema.explanatory().nth(idx).unwrap();
    let reference = var.reference_index();
    Ok(var
        .categories
        .iter()
        .enumerate()
        .filter(|(l, _)| *l != reference)
        .map(|(l, c)| (format!("{name}:{c}"), Source::Dummy(idx, l)))
        .collect())
}

fn fixed_columns(ds: &Dataset, spec: &ModelSpec) -> Result<Vec<(String, Source)>> {
    let schema = ds.schema();
    let mut cols = vec![("(Intercept)".to_string(), Source::Intercept)];
    for name in &spec.fixed {
        let area_var = schema.area();
        if *name == area_var.name {
            let reference = area_var
                .reference
                .as_deref()
                .and_then(|r| ds.area_index(r))
                .unwrap_or(0);
            for (d, code) in ds.areas().iter().enumerate() {
                if d != reference {
                    cols.push((format!("{name}:{code}"), Source::AreaDummy(d)));
                }
            }
            continue;
        }
        let idx = schema.explanatory_index(name).ok_or_else(|| {
            match schema.variables.iter().find(|v| &v.name == name) {
                Some(v) => Error::ModelSpec {
                    label: spec.label.clone(),
                    reason: format!("`{name}` has role {:?} and cannot be a fixed effect", v.role),
                },
                None => Error::UnknownVariable(name.clone()),
            }
        })?;
        let var = schema.explanatory().nth(idx).unwrap();
        match var.kind {
            Kind::Continuous => cols.push((name.clone(), Source::Real(idx))),
            Kind::Categorical => cols.extend(dummies(ds, name)?),
        }
    }
    Ok(cols)
}

fn random_columns(ds: &Dataset, spec: &ModelSpec) -> Result<Vec<(String, Source)>> {
    let schema = ds.schema();
    let mut cols = Vec::new();
    for term in &spec.random {
        match term {
            RandomTerm::Intercept => cols.push(("u:(Intercept)".to_string(), Source::Intercept)),
            RandomTerm::Slope(name) => {
                let idx = schema
                    .explanatory_index(name)
                    .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
                if schema.explanatory().nth(idx).unwrap().kind != Kind::Continuous {
                    return Err(Error::ModelSpec {
                        label: spec.label.clone(),
                        reason: format!("random slope on categorical `{name}`; use an interaction"),
                    });
                }
                cols.push((format!("u:{name}"), Source::Real(idx)));
            }
            RandomTerm::Interaction(name) => {
                let idx = schema
                    .explanatory_index(name)
                    .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
                if schema.explanatory().nth(idx).unwrap().kind != Kind::Categorical {
                    return Err(Error::ModelSpec {
                        label: spec.label.clone(),
                        reason: format!("interaction with continuous `{name}`; use a slope"),
                    });
                }
                cols.extend(dummies(ds, name)?.into_iter().map(|(n, s)| (format!("u:{n}"), s)));
            }
        }
    }
    Ok(cols)
}

/// Encodes the records of one gender under `spec`.
pub fn encode_design(ds: &Dataset, spec: &ModelSpec, gender: Gender) -> Result<DesignMatrices> {
    let fixed = fixed_columns(ds, spec)?;
    let random = random_columns(ds, spec)?;
    debug_assert!(ds.schema().variables.iter().any(|v| v.role == Role::Area));

    let mut rows: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.records()[i].gender == gender)
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyGroup(gender.to_string()));
    }
    rows.sort_by_key(|&i| ds.records()[i].area);

    let n = rows.len();
    let x = DMatrix::from_fn(n, fixed.len(), |i, j| {
        let r = &ds.records()[rows[i]];
        value(fixed[j].1, &r.covariates, r.area)
    });
    let z = DMatrix::from_fn(n, random.len(), |i, j| {
        let r = &ds.records()[rows[i]];
        value(random[j].1, &r.covariates, r.area)
    });
    let y = DVector::from_iterator(n, rows.iter().map(|&i| ds.records()[i].log_wage));
    let w = DVector::from_iterator(n, rows.iter().map(|&i| ds.records()[i].sampling_weight));
    let areas_of_rows: Vec<usize> = rows.iter().map(|&i| ds.records()[i].area).collect();

    Ok(DesignMatrices {
        spec: spec.clone(),
        gender,
        x,
        z,
        y,
        w,
        x_names: fixed.into_iter().map(|c| c.0).collect(),
        z_names: random.into_iter().map(|c| c.0).collect(),
        blocks: blocks_of(&areas_of_rows),
        areas: ds.areas().to_vec(),
        rows,
    })
}

fn blocks_of(area_of_row: &[usize]) -> Vec<AreaBlock> {
    let mut blocks: Vec<AreaBlock> = Vec::new();
    for (i, &a) in area_of_row.iter().enumerate() {
        match blocks.last_mut() {
            Some(b) if b.area == a => b.len += 1,
            _ => blocks.push(AreaBlock {
                area: a,
                start: i,
                len: 1,
            }),
        }
    }
    blocks
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn block(&self, area: usize) -> Option<&AreaBlock> {
        self.blocks
            .binary_search_by_key(&area, |b| b.area)
            .ok()
            .map(|i| &self.blocks[i])
    }

    pub fn area_of_rows(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for b in &self.blocks {
            out[b.range()].fill(b.area);
        }
        out
    }

    /// Keeps the rows at the given positions (must be ascending).
    pub fn select_rows(&self, keep: &[usize]) -> DesignMatrices {
        debug_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        let area_of_row = self.area_of_rows();
        let kept_areas: Vec<usize> = keep.iter().map(|&i| area_of_row[i]).collect();
        DesignMatrices {
            spec: self.spec.clone(),
            gender: self.gender,
            x: self.x.select_rows(keep),
            z: self.z.select_rows(keep),
            y: self.y.select_rows(keep),
            w: self.w.select_rows(keep),
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            blocks: blocks_of(&kept_areas),
            areas: self.areas.clone(),
            rows: keep.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    pub fn with_response(&self, y: DVector<f64>) -> DesignMatrices {
        assert_eq!(y.len(), self.n());
        DesignMatrices { y, ..self.clone() }
    }

    /// Arithmetic means of the design rows within each area.
    pub fn cell_means(&self) -> Vec<Option<CellMeans>> {
        let mut out = vec![None; self.n_areas()];
        for b in &self.blocks {
            let n = b.len as f64;
            let xs = self.x.rows(b.start, b.len);
            let zs = self.z.rows(b.start, b.len);
            out[b.area] = Some(CellMeans {
                n: b.len,
                xbar: xs.row_sum().transpose() / n,
                zbar: zs.row_sum().transpose() / n,
                ybar: self.y.rows(b.start, b.len).sum() / n,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMeans {
    pub n: usize,
    pub xbar: DVector<f64>,
    pub zbar: DVector<f64>,
    pub ybar: f64,
}

/// Per-area, per-gender design means. Empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMeans {
    pub areas: Vec<String>,
    cells: Vec<[Option<CellMeans>; 2]>,
}

impl GroupMeans {
    pub fn from_designs(men: &DesignMatrices, women: &DesignMatrices) -> Self {
        let m = men.cell_means();
        let w = women.cell_means();
        GroupMeans {
            areas: men.areas.clone(),
            cells: m.into_iter().zip(w).map(|(a, b)| [a, b]).collect(),
        }
    }

    pub fn get(&self, area: usize, gender: Gender) -> Option<&CellMeans> {
        self.cells.get(area).and_then(|c| c[gender.index()].as_ref())
    }

    pub fn is_empty_cell(&self, area: usize, gender: Gender) -> bool {
        self.get(area, gender).is_none()
    }
}

/// Design means for both genders; a gender without records yields empty cells.
pub fn group_means(ds: &Dataset, spec: &ModelSpec) -> Result<GroupMeans> {
    let mut cells: Vec<[Option<CellMeans>; 2]> = vec![[None, None]; ds.n_areas()];
    for g in Gender::BOTH {
        match encode_design(ds, spec, g) {
            Ok(d) => {
                for (a, c) in d.cell_means().into_iter().enumerate() {
                    cells[a][g.index()] = c;
                }
            }
            Err(Error::EmptyGroup(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(GroupMeans {
        areas: ds.areas().to_vec(),
        cells,
    })
}
