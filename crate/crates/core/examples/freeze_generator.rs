//! Regenerates the bundled generator files in `data/`.
//!
//! cargo run --example freeze_generator -- crates/core/data

use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sae_gpg::seed;
use sae_gpg::simulation::{AreaCell, GenderCell, GeneratorConfig, Marginals, Sampler};

const MEN_BETA: [f64; 8] = [2.30, 0.007, 0.015, 0.50, -0.248, -0.439, -0.504, -0.527];
const WOMEN_BETA: [f64; 8] = [2.25, 0.002, 0.015, 0.05, -0.20, -0.40, -0.48, -0.50];
/// Sd of the area deviations of each coefficient: occupation carries the
/// heterogeneity, the rest barely moves.
const AREA_SD: [f64; 8] = [0.01, 0.0003, 0.01, 0.01, 0.08, 0.08, 0.08, 0.08];

const OCC_MEN: [[f64; 5]; 3] = [[0.10, 0.25, 0.30, 0.20, 0.15]; 3];
const OCC_WOMEN: [[f64; 5]; 3] = [[0.10, 0.30, 0.10, 0.35, 0.15]; 3];

fn build(n_areas: usize, seed_value: u64) -> GeneratorConfig {
    let mut rng = seed::rng(seed_value);
    let dev = |rng: &mut seed::Rng| -> [f64; 8] {
        std::array::from_fn(|j| Normal::new(0.0, AREA_SD[j]).unwrap().sample(rng))
    };
    let areas = (1..=n_areas)
        .map(|d| {
            let higher: f64 = rng.random_range(0.0..0.7);
            let secondary = 0.3;
            let n_m: usize = rng.random_range(200..=600);
            let n_w = (n_m as f64 * rng.random_range(0.6..0.9)).round() as usize;
            let experience: f64 = rng.random_range(12.0..22.0);
            let cell = |base: &[f64; 8], dev: [f64; 8], higher: f64, exp: f64, occ| GenderCell {
                n: 0,
                sigma2: 0.1,
                beta: std::array::from_fn(|j| base[j] + dev[j]),
                covariates: Marginals {
                    experience_mean: exp,
                    education: [1.0 - secondary - higher, secondary, higher],
                    occupation_given_education: occ,
                },
            };
            let dm = dev(&mut rng);
            let dw = dev(&mut rng);
            AreaCell {
                code: d.to_string(),
                sector: format!("S{}", (d - 1) % 3 + 1),
                men: GenderCell {
                    n: n_m,
                    ..cell(&MEN_BETA, dm, higher, experience, OCC_MEN)
                },
                women: GenderCell {
                    n: n_w,
                    ..cell(&WOMEN_BETA, dw, higher, experience - 3.0, OCC_WOMEN)
                },
            }
        })
        .collect();
    GeneratorConfig {
        seed: seed_value,
        areas,
        sampler: Sampler::Marginals,
    }
}

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    for (d, s) in [(10, 10), (30, 30)] {
        let cfg = build(d, s);
        cfg.validate().expect("valid generator");
        let path = dir.join(format!("generator_d{d}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap() + "\n").unwrap();
        eprintln!("wrote {}", path.display());
    }

    // small sample with the simulation schema for the CLI walkthrough
    let mut cfg = build(10, 10);
    for a in &mut cfg.areas {
        a.men.n /= 4;
        a.women.n /= 4;
    }
    let ds = sae_gpg::simulation::generate(&cfg, 0).unwrap();
    ds.write_csv(&dir.join("fixture.csv")).unwrap();
    let schema = serde_json::to_string_pretty(&cfg.schema()).unwrap() + "\n";
    std::fs::write(dir.join("schema.json"), schema).unwrap();
    eprintln!("wrote fixture with {} rows", ds.len());
}
