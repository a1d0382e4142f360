pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod learners;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod rng;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};

// The guide under book/ is compiled as doctests so its snippets stay honest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
