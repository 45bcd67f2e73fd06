//! Small synthetic datasets for examples, tests, and the guide.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{Covariate, Dataset, Gender, RecordInput, Role, Variable, VariableSchema};
use crate::seed;

/// Schema with two continuous covariates `x1`, `x2` and a three-level
/// categorical `group` (reference `a`).
pub fn schema() -> VariableSchema {
    VariableSchema::new(vec![
        Variable::with_role("wage", Role::Response),
        Variable {
            categories: vec!["men".into(), "women".into()],
            ..Variable::with_role("gender", Role::Gender)
        },
        Variable::with_role("area", Role::Area),
        Variable::with_role("weight", Role::Weight),
        Variable::continuous("x1"),
        Variable::continuous("x2"),
        Variable::categorical("group", &["a", "b", "c"], "a"),
    ])
    .expect("fixture schema is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub log_wage: f64,
    pub gender: Gender,
    pub area: String,
    pub x1: f64,
    pub x2: f64,
    pub group: usize,
    pub weight: f64,
}

impl Row {
    pub fn new(log_wage: f64, gender: Gender, area: &str, x1: f64, x2: f64) -> Self {
        Row {
            log_wage,
            gender,
            area: area.to_string(),
            x1,
            x2,
            group: 0,
            weight: 1.0,
        }
    }
}

pub fn dataset(rows: &[Row]) -> Dataset {
    let inputs = rows
        .iter()
        .map(|r| RecordInput {
            wage_per_hour: r.log_wage.exp(),
            gender: r.gender,
            area: r.area.clone(),
            covariates: vec![
                Covariate::Real(r.x1),
                Covariate::Real(r.x2),
                Covariate::Level(r.group),
            ],
            sampling_weight: r.weight,
        })
        .collect();
    Dataset::from_inputs(schema(), inputs).expect("fixture rows are valid")
}

/// Area codes `"1"`, `"2"`, … as strings.
pub fn area_code(d: usize) -> String {
    (d + 1).to_string()
}

/// Balanced one-way layout for one gender: `y = mu + u_d + e`, no covariates
/// beyond noise draws in `x1`/`x2`.
pub fn one_way(areas: usize, per_area: usize, mu: f64, sigma_u: f64, sigma_e: f64, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let mut rows = Vec::with_capacity(areas * per_area);
    for d in 0..areas {
        let u: f64 = sigma_u * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..per_area {
            let e: f64 = sigma_e * rng.sample::<f64, _>(StandardNormal);
            rows.push(Row::new(mu + u + e, Gender::Men, &area_code(d), 0.0, 0.0));
        }
    }
    dataset(&rows)
}

/// Parameters for [`two_gender`].
#[derive(Debug, Clone)]
pub struct TwoGender {
    pub areas: usize,
    pub men_per_area: usize,
    pub women_per_area: usize,
    /// (intercept, x1, x2) for men and women.
    pub beta_men: [f64; 3],
    pub beta_women: [f64; 3],
    pub sigma_u: f64,
    pub sigma_e: f64,
    /// Shift of the women's `x1` mean.
    pub x1_shift_women: f64,
}

impl Default for TwoGender {
    fn default() -> Self {
        TwoGender {
            areas: 6,
            men_per_area: 25,
            women_per_area: 20,
            beta_men: [2.0, 0.3, -0.2],
            beta_women: [1.9, 0.25, -0.2],
            sigma_u: 0.15,
            sigma_e: 0.3,
            x1_shift_women: -0.3,
        }
    }
}

/// Random-intercept data for both genders with area effects shared across
/// genders up to independent noise.
pub fn two_gender(cfg: &TwoGender, seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let mut rows = Vec::new();
    for d in 0..cfg.areas {
        let shift: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
        for g in Gender::BOTH {
            let (n, beta, dx) = match g {
                Gender::Men => (cfg.men_per_area, cfg.beta_men, 0.0),
                Gender::Women => (cfg.women_per_area, cfg.beta_women, cfg.x1_shift_women),
            };
            let u: f64 = cfg.sigma_u * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..n {
                let x1 = shift + dx + rng.sample::<f64, _>(StandardNormal);
                let x2 = rng.random::<f64>() * 2.0;
                let e: f64 = cfg.sigma_e * rng.sample::<f64, _>(StandardNormal);
                let y = beta[0] + beta[1] * x1 + beta[2] * x2 + u + e;
                let mut row = Row::new(y, g, &area_code(d), x1, x2);
                row.group = rng.random_range(0..3);
                rows.push(row);
            }
        }
    }
    dataset(&rows)
}
