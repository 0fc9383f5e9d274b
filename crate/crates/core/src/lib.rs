//! Physics-guided attention for gridded transport forecasting.
//!
//! The crate has two mechanisms at its centre:
//!
//! * [`reorder`]: wind-guided patch reordering, which sorts the patches of
//!   each sector along the local wind so that sequence order follows
//!   transport;
//! * [`topo_bias`]: a terrain-aware additive attention bias that penalizes
//!   attending from a patch to higher ground.
//!
//! Around them sit a patch transformer with a hand-written backward pass
//! ([`attention`], [`model`]), a masked-MSE training loop ([`train`]), a
//! synthetic advection-diffusion data generator ([`synthdata`]), metrics
//! ([`evalkit`]) and the `.gfd` tensor container ([`gfd`]).

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fields;
pub mod gfd;
pub mod model;
pub mod nn;
pub mod reorder;
pub mod seed;
pub mod synthdata;
pub mod topo_bias;
pub mod train;

pub use error::{Error, Result};

// Runs the code blocks of the guide as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/reorder.md")]
    mod reorder {}
    #[doc = include_str!("../../../book/src/elevation_bias.md")]
    mod elevation_bias {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/synthdata.md")]
    mod synthdata {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
