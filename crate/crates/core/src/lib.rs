pub mod cli;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod fixtures;
pub mod lmm;
pub mod model;
pub mod seed;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
