#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod grid;
pub mod mcmc;
pub mod particles;
pub mod pde;
pub mod point_process;
pub mod prior;

pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, StudyReport};
pub use grid::{Grid, NormOrder, Rect, RegionMask, ScalarField};
pub use mcmc::{ChainConfig, Observation, PosteriorSummary};
pub use point_process::{BinPartition, CountVector, IntensityVector};
pub use prior::{LinkConfig, MaternConfig};
