//! Mask estimators plugged into the recursion.
//!
//! The ground-truth oracles stand in for a trained network: they read the
//! block's reference spectrograms from an [`OracleContext`] supplied through
//! [`MaskEstimator::reset_block`]. Estimators hold per-block state, so one
//! instance must not be shared across blocks processed concurrently; use
//! [`MaskEstimator::clone_box`] to get one per worker.

mod oracle;
mod toy;

use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::error::{check_shape, Error, Result};
use crate::rsan::{IterationResult, ResidualMask};
use crate::spectral::{MagnitudeSpectrogram, Mask};

pub use oracle::{LeakyOracle, OracleRsan, UpitEstimate, UpitOracle, DEFAULT_ACTIVITY_THRESHOLD};
pub use toy::{toy_dataset, toy_train, ToyEstimator, ToyExample, ToyParams, TrainReport};

pub trait MaskEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Called once before each block. Oracles need `Some` context.
    fn reset_block(&mut self, context: Option<&OracleContext>);

    fn estimate(&mut self, mixture: &MagnitudeSpectrogram, residual: &ResidualMask) -> Result<IterationResult>;

    fn clone_box(&self) -> Box<dyn MaskEstimator>;
}

impl Clone for Box<dyn MaskEstimator> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Magnitude reference of one source, aligned to the block.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceRef {
    pub id: usize,
    pub magnitude: Array2<f64>,
    /// Whether the source counts as present in this block.
    pub active: bool,
}

impl SourceRef {
    pub fn active(id: usize, magnitude: Array2<f64>) -> Self {
        Self {
            id,
            magnitude,
            active: true,
        }
    }

    pub fn inactive(id: usize, magnitude: Array2<f64>) -> Self {
        Self {
            id,
            magnitude,
            active: false,
        }
    }

    /// First frame whose energy exceeds 1e-3 of the source's peak frame.
    pub fn onset_frame(&self) -> Option<usize> {
        let frame_energy: Vec<f64> = self
            .magnitude
            .axis_iter(Axis(0))
            .map(|row| row.iter().map(|v| v * v).sum())
            .collect();
        let peak = frame_energy.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return None;
        }
        frame_energy.iter().position(|&e| e > 1e-3 * peak)
    }
}

/// Ground truth for one block: every source's magnitude plus the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleContext {
    sources: Vec<SourceRef>,
    noise: Array2<f64>,
    /// Σ_s |A_s| + |N|, the ratio-mask denominator.
    denominator: Array2<f64>,
}

impl OracleContext {
    pub fn new(sources: Vec<SourceRef>, noise: Array2<f64>) -> Result<Self> {
        let shape = noise.dim();
        let mut denominator = noise.clone();
        for s in &sources {
            check_shape("oracle source", shape, s.magnitude.dim())?;
            denominator += &s.magnitude;
        }
        Ok(Self {
            sources,
            noise,
            denominator,
        })
    }

    pub fn sources(&self) -> &[SourceRef] {
        &self.sources
    }

    pub fn noise(&self) -> &Array2<f64> {
        &self.noise
    }

    pub fn shape(&self) -> (usize, usize) {
        self.noise.dim()
    }

    pub fn active_ids(&self) -> Vec<usize> {
        self.sources.iter().filter(|s| s.active).map(|s| s.id).collect()
    }

    pub fn active_count(&self) -> usize {
        self.sources.iter().filter(|s| s.active).count()
    }

    fn ratio(&self, numerator: &Array2<f64>) -> Mask {
        let mut m = Array2::zeros(numerator.dim());
        ndarray::Zip::from(&mut m)
            .and(numerator)
            .and(&self.denominator)
            .for_each(|m, &a, &d| *m = if d > 0.0 { a / d } else { 0.0 });
        Mask::clamped(m)
    }

    /// Ideal ratio mask of source index `k` (position in `sources`).
    pub fn source_irm(&self, k: usize) -> Mask {
        self.ratio(&self.sources[k].magnitude)
    }

    pub fn noise_irm(&self) -> Mask {
        self.ratio(&self.noise)
    }
}

/// Event raised when a block yields more sources than output channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Overflow {
    pub produced: usize,
    pub kept: usize,
}

/// Replays a fixed flag sequence with all-zero masks; the last flag repeats.
/// With a single flag of 1.0 this is the always-stop estimator.
#[derive(Clone, Debug)]
pub struct ScriptedEstimator {
    flags: Vec<f64>,
    next: usize,
}

impl ScriptedEstimator {
    pub fn new(flags: Vec<f64>) -> Self {
        assert!(!flags.is_empty(), "scripted estimator needs at least one flag");
        Self { flags, next: 0 }
    }

    pub fn always_stop() -> Self {
        Self::new(vec![1.0])
    }
}

impl MaskEstimator for ScriptedEstimator {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn reset_block(&mut self, _context: Option<&OracleContext>) {
        self.next = 0;
    }

    fn estimate(&mut self, mixture: &MagnitudeSpectrogram, _residual: &ResidualMask) -> Result<IterationResult> {
        let (t, f) = mixture.shape();
        let flag = self.flags[self.next.min(self.flags.len() - 1)];
        self.next += 1;
        Ok(IterationResult {
            speaker_mask: Mask::zeros(t, f),
            noise_mask: Mask::zeros(t, f),
            stop_flag: flag,
            source: None,
        })
    }

    fn clone_box(&self) -> Box<dyn MaskEstimator> {
        Box::new(self.clone())
    }
}

pub(crate) fn require_context(ctx: Option<&OracleContext>) -> Result<&OracleContext> {
    ctx.ok_or(Error::MissingContext)
}
