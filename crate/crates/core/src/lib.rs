//! Recursive speaker separation for long multi-talker recordings.
//!
//! [`rsan`] runs the per-block recursion against any [`MaskEstimator`],
//! [`css`] cuts a session into overlapping blocks and stitches the results,
//! [`simulator`] builds synthetic meeting sessions with ground truth and
//! [`metrics`] scores separated channels against it.

pub mod css;
pub mod error;
pub mod estimators;
pub mod loss;
pub mod metrics;
pub mod rsan;
pub mod simulator;
pub mod spectral;
pub mod wav;

pub use css::{run_css, BlockOrder, ContextProvider, CssConfig, CssOutput, NoContext, Separator, WindowConfig};
pub use error::{Error, Result};
pub use estimators::{LeakyOracle, MaskEstimator, OracleContext, OracleRsan, ToyEstimator, UpitOracle};
pub use rsan::{separate_block, BlockResult, RecursionOptions, ResidualMask, StopPolicy, SubtractionPolicy};
pub use spectral::{MagnitudeSpectrogram, Mask, StftConfig};
