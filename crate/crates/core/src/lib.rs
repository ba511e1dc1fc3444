//! Distance-metric-guided feature alignment for unsupervised domain
//! adaptation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! encoder / Gaussian-embedding / prototype-classifier model ([`model`]),
//! the six alignment losses ([`losses`]), a minimax SGD trainer
//! ([`optim`]), a synthetic covariate-shift generator ([`datagen`]) and the
//! evaluation and ablation harness ([`eval`]).
//!
//! ```
//! use metfa::graph::Graph;
//! use metfa::losses::loss_entropy;
//! use metfa::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let p = g.constant(Tensor::full(&[2, 6], 1.0 / 6.0));
//! let h = loss_entropy(&mut g, p).unwrap();
//! assert!((g.value(h).item().unwrap() - 6f64.ln()).abs() < 1e-12);
//! ```

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod verify;

pub use config::RunConfig;
pub use error::{MetfaError, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    mod gradcheck {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
